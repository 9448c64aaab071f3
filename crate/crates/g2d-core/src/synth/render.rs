//! Analytic face renderer.
//!
//! Draws a 12-parameter cartoon face (background, head ellipse, brows,
//! eyes, nose, mouth) with per-view variation: integer translation up to
//! 2 px, brightness within +-10% and additive Gaussian noise (sigma 0.02).

use rand::Rng;

use super::IdentityParams;
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

/// Nose bridge, left jaw, right jaw in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoints {
    pub nose_bridge: (f64, f64),
    pub left_jaw: (f64, f64),
    pub right_jaw: (f64, f64),
}

impl Keypoints {
    pub fn as_array(&self) -> [(f64, f64); 3] {
        [self.nose_bridge, self.left_jaw, self.right_jaw]
    }
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    skin: [f64; 3],
    eye_dx: f64,
    eye_r: f64,
    eye_y: f64,
    mouth_curve: f64,
    mouth_half_w: f64,
    mouth_y: f64,
    background: f64,
    feature_tone: f64,
}

fn geometry(identity: &IdentityParams, dx: f64, dy: f64, size: usize) -> FaceGeometry {
    let p = &identity.params;
    let s = size as f64 / 32.0; // geometry tuned at 32x32, scaled elsewhere
    let cx = (size as f64 - 1.0) / 2.0 + dx;
    let cy = size as f64 / 2.0 + dy;
    FaceGeometry {
        cx,
        cy,
        half_w: (9.0 + 4.0 * p[0]) * s,
        half_h: (10.0 + 4.0 * p[1]) * s,
        skin: [
            0.40 + 0.45 * p[2],
            0.35 + 0.45 * p[3],
            0.30 + 0.45 * p[4],
        ],
        eye_dx: (3.5 + 2.5 * p[5]) * s,
        eye_r: (1.2 + 1.3 * p[6]) * s,
        eye_y: cy - (2.5 + 2.0 * p[7]) * s,
        mouth_curve: (p[8] - 0.5) * 0.5 / s,
        mouth_half_w: (2.5 + 2.5 * p[9]) * s,
        mouth_y: cy + (4.5 + 1.0 * p[8]) * s,
        background: 0.05 + 0.90 * p[10],
        feature_tone: 0.12 + 0.30 * p[11],
    }
}

/// Deterministic rendering of an identity under one variation seed.
/// Returns the image and the three facial keypoints.
pub fn render_face(
    identity: &IdentityParams,
    variation_seed: u64,
    size: usize,
) -> (Tensor, Keypoints) {
    let mut rng = rng_for(variation_seed, &[tag::VIEW, param_hash(identity)]);
    let dx = rng.gen_range(-1i64..=1) as f64;
    let dy = rng.gen_range(-1i64..=1) as f64;
    // Brightness jitter applies to the face, not the backdrop.
    let brightness = 1.0 + 0.1 * (rng.gen::<f64>() * 2.0 - 1.0);
    let geo = geometry(identity, dx, dy, size);

    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let px = x as f64;
            let py = y as f64;
            let rgb = shade_pixel(&geo, px, py, brightness);
            for c in 0..3 {
                img.data_mut()[c * plane + y * size + x] = rgb[c];
            }
        }
    }

    // Additive noise, clamped back into [0, 1].
    for v in img.data_mut().iter_mut() {
        let noise = gaussian(&mut rng) * 0.02;
        *v = (*v + noise).clamp(0.0, 1.0);
    }

    let jaw_y = geo.cy + 0.55 * geo.half_h;
    let jaw_dx = geo.half_w * (1.0 - 0.55f64 * 0.55).sqrt();
    let keypoints = Keypoints {
        nose_bridge: (geo.cx, geo.cy - 1.0),
        left_jaw: (geo.cx - jaw_dx, jaw_y),
        right_jaw: (geo.cx + jaw_dx, jaw_y),
    };
    (img, keypoints)
}

fn shade_pixel(geo: &FaceGeometry, px: f64, py: f64, brightness: f64) -> [f64; 3] {
    let bg = [geo.background, geo.background * 0.95, geo.background * 1.05];
    // Head ellipse with a ~1 px soft edge.
    let nx = (px - geo.cx) / geo.half_w;
    let ny = (py - geo.cy) / geo.half_h;
    let d = (nx * nx + ny * ny).sqrt();
    let face_alpha = smoothstep(1.06, 0.94, d);
    if face_alpha <= 0.0 {
        return bg;
    }
    let mut color = geo.skin;

    // Brow band.
    let brow_y = geo.eye_y - 1.8;
    if (py - brow_y).abs() <= 0.8 && (px - geo.cx).abs() <= geo.eye_dx + geo.eye_r {
        color = [geo.feature_tone, geo.feature_tone, geo.feature_tone];
    }

    // Eyes.
    for side in [-1.0, 1.0] {
        let ex = geo.cx + side * geo.eye_dx;
        let dey = ((px - ex) / geo.eye_r).powi(2) + ((py - geo.eye_y) / (geo.eye_r * 0.75)).powi(2);
        if dey <= 1.0 {
            let tone = geo.feature_tone * 0.6;
            color = [tone, tone, tone];
        }
    }

    // Nose: short vertical wedge.
    if (px - geo.cx).abs() <= 0.6 && py >= geo.cy - 0.5 && py <= geo.cy + 2.5 {
        color = [color[0] * 0.82, color[1] * 0.8, color[2] * 0.8];
    }

    // Mouth: quadratic curve around mouth_y.
    let mx = px - geo.cx;
    if mx.abs() <= geo.mouth_half_w {
        let curve_y = geo.mouth_y + geo.mouth_curve * mx * mx;
        if (py - curve_y).abs() <= 0.75 {
            color = [0.55, geo.feature_tone * 0.5, geo.feature_tone * 0.5];
        }
    }

    [
        bg[0] + (color[0] * brightness - bg[0]) * face_alpha,
        bg[1] + (color[1] * brightness - bg[1]) * face_alpha,
        bg[2] + (color[2] * brightness - bg[2]) * face_alpha,
    ]
}

/// 1 at `lo`, 0 at `hi`, smooth in between (after swapping so lo > hi means
/// a falling edge).
fn smoothstep(edge_out: f64, edge_in: f64, d: f64) -> f64 {
    if d <= edge_in {
        return 1.0;
    }
    if d >= edge_out {
        return 0.0;
    }
    let t = (edge_out - d) / (edge_out - edge_in);
    t * t * (3.0 - 2.0 * t)
}

/// Folds the parameter bits into one word so the per-view variation
/// stream depends on the identity's appearance, not its label.
fn param_hash(identity: &IdentityParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in &identity.params {
        h ^= p.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
