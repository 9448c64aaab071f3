//! Built-in mask templates.
//!
//! Templates live in their own coordinate space with three anchor points
//! (nose bridge, left jaw, right jaw) that the overlay maps onto the face
//! keypoints. Alpha is binary inside the template; warping produces the
//! fractional edges.

/// Template-space mask pattern.
#[derive(Debug, Clone)]
pub struct MaskTemplate {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// `height x width` alpha in [0, 1].
    pub alpha: Vec<f64>,
    /// `height x width x 3` color.
    pub color: Vec<f64>,
    /// Nose bridge, left jaw, right jaw in template coordinates.
    pub anchors: [(f64, f64); 3],
}

impl MaskTemplate {
    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    pub fn support_area(&self) -> f64 {
        self.alpha.iter().filter(|&&a| a > 0.5).count() as f64
    }
}

const TEMPLATE_W: usize = 24;
const TEMPLATE_H: usize = 16;
const ANCHORS: [(f64, f64); 3] = [(12.0, 2.0), (2.0, 10.0), (22.0, 10.0)];

fn build(id: usize, base_color: [f64; 3], inside: impl Fn(f64, f64) -> bool) -> MaskTemplate {
    let mut alpha = vec![0.0; TEMPLATE_W * TEMPLATE_H];
    let mut color = vec![0.0; TEMPLATE_W * TEMPLATE_H * 3];
    for y in 0..TEMPLATE_H {
        for x in 0..TEMPLATE_W {
            let inside_here = inside(x as f64, y as f64);
            alpha[y * TEMPLATE_W + x] = if inside_here { 1.0 } else { 0.0 };
            // Faint horizontal banding so masks carry some texture.
            let band = if y % 4 < 2 { 1.0 } else { 0.92 };
            for c in 0..3 {
                color[(y * TEMPLATE_W + x) * 3 + c] = (base_color[c] * band).clamp(0.0, 1.0);
            }
        }
    }
    MaskTemplate {
        id,
        width: TEMPLATE_W,
        height: TEMPLATE_H,
        alpha,
        color,
        anchors: ANCHORS,
    }
}

/// The five built-in mask shapes: rectangle, trapezoid, two ellipse
/// variants and a bandana polygon.
pub fn builtin_templates() -> Vec<MaskTemplate> {
    let rect = build(0, [0.45, 0.62, 0.82], |x, y| {
        (1.0..=22.0).contains(&x) && (1.0..=14.0).contains(&y)
    });
    let trapezoid = build(1, [0.25, 0.25, 0.28], |x, y| {
        if !(1.0..=14.5).contains(&y) {
            return false;
        }
        // Narrow top (x in [5,19] at y=1) widening to [0.5, 23.5] at y=14.5.
        let t = (y - 1.0) / 13.5;
        let half = 7.0 + 4.5 * t;
        (x - 12.0).abs() <= half
    });
    let ellipse_full = build(2, [0.85, 0.86, 0.88], |x, y| {
        let nx = (x - 12.0) / 11.0;
        let ny = (y - 8.0) / 7.0;
        nx * nx + ny * ny <= 1.0
    });
    let ellipse_low = build(3, [0.12, 0.12, 0.15], |x, y| {
        let nx = (x - 12.0) / 11.5;
        let ny = (y - 9.0) / 6.0;
        nx * nx + ny * ny <= 1.0
    });
    let bandana = build(4, [0.62, 0.20, 0.24], |x, y| {
        if !(1.0..=15.0).contains(&y) {
            return false;
        }
        // Wide top edge tapering to a point at the chin.
        let t = (y - 1.0) / 14.0;
        let half = 11.0 * (1.0 - t * 0.92);
        (x - 12.0).abs() <= half
    });
    vec![rect, trapezoid, ellipse_full, ellipse_low, bandana]
}
