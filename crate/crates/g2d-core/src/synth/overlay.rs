//! Affine mask overlay.
//!
//! Solves the affine transform mapping the template anchors onto the face
//! keypoints (exactly determined by the 3 correspondences), warps alpha and
//! color maps with bilinear sampling, binarizes the warped alpha at 0.5 and
//! composites only where the binary mask is set, so the masked image equals
//! the face bit-exactly outside the mask.

use rand::Rng;

use super::render::Keypoints;
use super::template::MaskTemplate;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Row-major 2x3 affine: `(x, y) -> (a x + b y + e, c x + d y + f)`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl Affine {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.e,
            self.c * x + self.d * y + self.f,
        )
    }

    pub fn inverse(&self) -> Option<Affine> {
        let det = self.a * self.d - self.b * self.c;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, ic, id) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Some(Affine {
            a: ia,
            b: ib,
            c: ic,
            d: id,
            e: -(ia * self.e + ib * self.f),
            f: -(ic * self.e + id * self.f),
        })
    }
}

/// Solves the affine transform taking `src[i]` to `dst[i]` for the three
/// correspondences; errors when the source or target points are collinear
/// (triangle area under 1e-9).
pub fn solve_affine(src: &[(f64, f64); 3], dst: &[(f64, f64); 3]) -> Result<Affine> {
    let area2 = |p: &[(f64, f64); 3]| {
        (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)
    };
    let det = area2(src);
    if det.abs() < 1e-9 || area2(dst).abs() < 1e-9 {
        return Err(CoreError::DegenerateKeypoints);
    }
    // Solve [x y 1] * M = dst by Cramer's rule on the 3x3 system.
    let m = |rhs: [f64; 3]| -> (f64, f64, f64) {
        let (x0, y0) = src[0];
        let (x1, y1) = src[1];
        let (x2, y2) = src[2];
        let d = x0 * (y1 - y2) - y0 * (x1 - x2) + (x1 * y2 - x2 * y1);
        let da = rhs[0] * (y1 - y2) - y0 * (rhs[1] - rhs[2]) + (rhs[1] * y2 - rhs[2] * y1);
        let db = x0 * (rhs[1] - rhs[2]) - rhs[0] * (x1 - x2) + (x1 * rhs[2] - x2 * rhs[1]);
        let dc = x0 * (y1 * rhs[2] - y2 * rhs[1]) - y0 * (x1 * rhs[2] - x2 * rhs[1])
            + rhs[0] * (x1 * y2 - x2 * y1);
        (da / d, db / d, dc / d)
    };
    let (a, b, e) = m([dst[0].0, dst[1].0, dst[2].0]);
    let (c, d, f) = m([dst[0].1, dst[1].1, dst[2].1]);
    Ok(Affine { a, b, c, d, e, f })
}

fn bilinear(data: &[f64], w: usize, h: usize, stride: usize, offset: usize, x: f64, y: f64) -> f64 {
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            data[(yi as usize * w + xi as usize) * stride + offset]
        }
    };
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    sample(x0i, y0i) * (1.0 - fx) * (1.0 - fy)
        + sample(x0i + 1, y0i) * fx * (1.0 - fy)
        + sample(x0i, y0i + 1) * (1.0 - fx) * fy
        + sample(x0i + 1, y0i + 1) * fx * fy
}

/// Warps a template onto a face through a fixed forward transform
/// (template coordinates to image coordinates). The binary mask is the
/// warped alpha thresholded at 0.5; pixels outside the mask are copied
/// from the face unchanged.
pub fn warp_template(
    face: &Tensor,
    template: &MaskTemplate,
    forward: &Affine,
) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = (face.dim(0), face.dim(1), face.dim(2));
    let inverse = forward.inverse().ok_or(CoreError::DegenerateKeypoints)?;
    let mut mask = Tensor::zeros(&[h, w]);
    let mut masked = face.clone();
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = inverse.apply(x as f64, y as f64);
            let alpha = bilinear(&template.alpha, template.width, template.height, 1, 0, tx, ty);
            if alpha > 0.5 {
                mask.data_mut()[y * w + x] = 1.0;
                for c in 0..3 {
                    let mc =
                        bilinear(&template.color, template.width, template.height, 3, c, tx, ty);
                    let idx = c * plane + y * w + x;
                    masked.data_mut()[idx] = alpha * mc + (1.0 - alpha) * face.data()[idx];
                }
            }
        }
    }
    Ok((masked, mask))
}

/// Warps one template onto a face. The rng drives a +-15% scale jitter of
/// the target keypoint triangle about its centroid plus a small per-point
/// jitter. Returns `(masked, mask)`.
pub fn overlay_mask(
    face: &Tensor,
    keypoints: &Keypoints,
    template: &MaskTemplate,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (face.dim(1), face.dim(2));
    let mut dst = keypoints.as_array();
    for (x, y) in &dst {
        assert!(
            *x >= 0.0 && *x < w as f64 && *y >= 0.0 && *y < h as f64,
            "keypoint ({x},{y}) outside the image"
        );
    }
    // Scale jitter about the centroid, then +-0.75 px per-point jitter.
    let scale = 0.85 + 0.30 * rng.gen::<f64>();
    let cx = (dst[0].0 + dst[1].0 + dst[2].0) / 3.0;
    let cy = (dst[0].1 + dst[1].1 + dst[2].1) / 3.0;
    for p in &mut dst {
        p.0 = cx + (p.0 - cx) * scale + (rng.gen::<f64>() - 0.5) * 1.5;
        p.1 = cy + (p.1 - cy) * scale + (rng.gen::<f64>() - 0.5) * 1.5;
    }
    let forward = solve_affine(&template.anchors, &dst)?;
    warp_template(face, template, &forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::synth::template::builtin_templates;
    use crate::synth::{generate_identities, render_face};

    fn neutral_keypoints() -> Keypoints {
        Keypoints {
            nose_bridge: (15.5, 15.0),
            left_jaw: (7.0, 22.0),
            right_jaw: (24.0, 22.0),
        }
    }

    #[test]
    fn affine_solve_maps_anchors_onto_keypoints() {
        let src = [(12.0, 2.0), (2.0, 10.0), (22.0, 10.0)];
        let dst = [(15.5, 15.0), (7.0, 22.0), (24.0, 22.0)];
        let t = solve_affine(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(dst.iter()) {
            let (x, y) = t.apply(s.0, s.1);
            assert!((x - d.0).abs() < 1e-9 && (y - d.1).abs() < 1e-9);
        }
        let inv = t.inverse().unwrap();
        for d in dst.iter() {
            let (x, y) = inv.apply(d.0, d.1);
            let (rx, ry) = t.apply(x, y);
            assert!((rx - d.0).abs() < 1e-9 && (ry - d.1).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_keypoints_are_rejected() {
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        let dst = [(15.5, 15.0), (7.0, 22.0), (24.0, 22.0)];
        assert!(matches!(
            solve_affine(&src, &dst),
            Err(CoreError::DegenerateKeypoints)
        ));
        assert!(matches!(
            solve_affine(&dst, &src),
            Err(CoreError::DegenerateKeypoints)
        ));
    }

    #[test]
    fn zero_alpha_template_masks_nothing() {
        let mut template = builtin_templates().remove(0);
        template.alpha.iter_mut().for_each(|a| *a = 0.0);
        let ids = generate_identities(1, 3);
        let (face, kp) = render_face(&ids[0], 0, 32);
        let mut rng = rng_for(3, &[1]);
        let (masked, mask) = overlay_mask(&face, &kp, &template, &mut rng).unwrap();
        assert_eq!(masked.data(), face.data());
        assert!(mask.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn full_alpha_lower_half_identity_transform_covers_lower_half() {
        // A template that is all-ones over the lower half, warped through
        // the identity transform, must mask exactly the lower half.
        let h = 32;
        let w = 32;
        let mut alpha = vec![0.0; w * h];
        for y in 16..32 {
            for x in 0..w {
                alpha[y * w + x] = 1.0;
            }
        }
        let template = MaskTemplate {
            id: 99,
            width: w,
            height: h,
            alpha,
            color: vec![0.5; w * h * 3],
            anchors: [(16.0, 4.0), (4.0, 28.0), (28.0, 28.0)],
        };
        let face = Tensor::full(&[3, h, w], 0.3);
        let identity = Affine {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 1.0,
            e: 0.0,
            f: 0.0,
        };
        let (_, mask) = warp_template(&face, &template, &identity).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = if y >= 16 { 1.0 } else { 0.0 };
                assert_eq!(mask.data()[y * w + x], expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn masked_equals_face_outside_mask_exactly() {
        let ids = generate_identities(3, 9);
        let templates = builtin_templates();
        let mut rng = rng_for(9, &[7]);
        for id in &ids {
            for t in &templates {
                let (face, kp) = render_face(id, 4, 32);
                let (masked, mask) = overlay_mask(&face, &kp, t, &mut rng).unwrap();
                for y in 0..32 {
                    for x in 0..32 {
                        if mask.data()[y * 32 + x] == 0.0 {
                            for c in 0..3 {
                                let i = (c * 32 + y) * 32 + x;
                                assert_eq!(masked.data()[i], face.data()[i]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mean_mask_area_fraction_is_near_one_fifth() {
        let ids = generate_identities(4, 21);
        let templates = builtin_templates();
        let mut rng = rng_for(21, &[5]);
        let mut total = 0.0;
        let mut count = 0;
        for round in 0..50 {
            let id = &ids[round % ids.len()];
            let (face, kp) = render_face(id, round as u64, 32);
            let t = &templates[round % templates.len()];
            let (_, mask) = overlay_mask(&face, &kp, t, &mut rng).unwrap();
            total += mask.iter().sum::<f64>() / mask.len() as f64;
            count += 1;
        }
        let mean = total / count as f64;
        assert!(
            (0.15..=0.25).contains(&mean),
            "mean mask area fraction {mean}"
        );
        let _ = neutral_keypoints(); // keep fixture for future tests
    }
}
