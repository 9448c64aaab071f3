//! Deterministic procedural synthesis of identities, face renderings,
//! mask templates and masked-face triplets.
//!
//! Every item is a pure function of `(master_seed, identity, view)`, so
//! datasets are bit-identical across reruns and thread counts.

mod dataset;
mod overlay;
mod render;
mod template;

pub use dataset::{
    generate_triplet, load_dataset, synthesize_dataset, Dataset, DatasetItem, Split,
    SynthesisConfig, MASK_AREA_MAX, MASK_AREA_MIN,
};
pub use overlay::{overlay_mask, solve_affine, warp_template, Affine};
pub use render::{render_face, Keypoints};
pub use template::{builtin_templates, MaskTemplate};

use crate::error::{CoreError, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;
use rand::Rng;

pub const IDENTITY_PARAM_COUNT: usize = 12;
/// Minimum L-infinity separation between distinct identity vectors.
pub const MIN_IDENTITY_SEPARATION: f64 = 0.05;
/// Minimum rendered per-pixel mean absolute difference between distinct
/// identities at the screening seed, verified after selection. Keeps
/// inter-identity image distances above the per-view variation bound.
pub const MIN_RENDERED_SEPARATION: f64 = 0.155;
/// Seed at which candidate identities are rendered for screening.
const SCREENING_SEED: u64 = 1;
const SCREENING_SIZE: usize = 32;
/// Candidate pool per requested identity for the farthest-point selection.
const POOL_PER_IDENTITY: usize = 350;

/// 12 reals in [0, 1] controlling face geometry and colors.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub id: usize,
    pub params: [f64; IDENTITY_PARAM_COUNT],
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Draws a candidate pool and picks `n` identities by farthest-point
/// selection on rendered appearance, so that every selected pair is
/// separated by at least [`MIN_IDENTITY_SEPARATION`] in L-infinity
/// parameter distance and at least [`MIN_RENDERED_SEPARATION`] in
/// per-pixel image distance at the screening seed.
pub fn generate_identities(n: usize, master_seed: u64) -> Vec<IdentityParams> {
    let mut rng = rng_for(master_seed, &[tag::IDENTITY]);
    let pool_size = (n * POOL_PER_IDENTITY).max(600);
    let pool: Vec<([f64; IDENTITY_PARAM_COUNT], Tensor)> = (0..pool_size)
        .map(|i| {
            let mut params = [0.0; IDENTITY_PARAM_COUNT];
            for p in &mut params {
                *p = rng.gen::<f64>();
            }
            let probe = IdentityParams { id: i, params };
            let render = render_face(&probe, SCREENING_SEED, SCREENING_SIZE).0;
            (params, render)
        })
        .collect();

    // Seed the selection with the candidate farthest from the pool mean.
    let mut mean = Tensor::zeros(pool[0].1.shape());
    for (_, r) in &pool {
        mean.add_assign(r);
    }
    mean.data_mut()
        .iter_mut()
        .for_each(|v| *v /= pool_size as f64);
    let first = (0..pool_size)
        .max_by(|&a, &b| {
            mean_abs_diff(&pool[a].1, &mean)
                .partial_cmp(&mean_abs_diff(&pool[b].1, &mean))
                .unwrap()
        })
        .unwrap();

    let mut selected = vec![first];
    // Min rendered distance from each candidate to the selected set;
    // candidates violating the parameter separation drop out.
    let mut min_dist: Vec<f64> = pool
        .iter()
        .map(|(params, render)| {
            if linf(params, &pool[first].0) < MIN_IDENTITY_SEPARATION {
                f64::NEG_INFINITY
            } else {
                mean_abs_diff(render, &pool[first].1)
            }
        })
        .collect();
    min_dist[first] = f64::NEG_INFINITY;

    while selected.len() < n {
        let best = (0..pool_size)
            .max_by(|&a, &b| min_dist[a].partial_cmp(&min_dist[b]).unwrap())
            .unwrap();
        assert!(
            min_dist[best] >= MIN_RENDERED_SEPARATION,
            "could not place {n} identities at separation {MIN_RENDERED_SEPARATION}; best remaining {}",
            min_dist[best]
        );
        selected.push(best);
        for i in 0..pool_size {
            if min_dist[i] == f64::NEG_INFINITY {
                continue;
            }
            if linf(&pool[i].0, &pool[best].0) < MIN_IDENTITY_SEPARATION {
                min_dist[i] = f64::NEG_INFINITY;
            } else {
                min_dist[i] = min_dist[i].min(mean_abs_diff(&pool[i].1, &pool[best].1));
            }
        }
        min_dist[best] = f64::NEG_INFINITY;
    }

    selected
        .into_iter()
        .enumerate()
        .map(|(id, pi)| IdentityParams {
            id,
            params: pool[pi].0,
        })
        .collect()
}

fn linf(a: &[f64; IDENTITY_PARAM_COUNT], b: &[f64; IDENTITY_PARAM_COUNT]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}

/// One synthetic training unit: groundtruth face, binary mask, masked face.
#[derive(Debug, Clone)]
pub struct FaceTriplet {
    /// `[3, H, W]` in `[0, 1]`.
    pub groundtruth: Tensor,
    /// `[H, W]` with entries in `{0, 1}`.
    pub mask: Tensor,
    /// `[3, H, W]`; equals `groundtruth` wherever `mask` is 0.
    pub masked: Tensor,
    pub identity: usize,
    pub mask_template_id: usize,
    pub variation_seed: u64,
}

impl FaceTriplet {
    pub fn image_size(&self) -> usize {
        self.mask.dim(0)
    }

    /// Fraction of pixels covered by the mask.
    pub fn mask_area_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }

    /// Checks the defining invariant `masked(p) = groundtruth(p)` wherever
    /// `mask(p) = 0`, exactly.
    pub fn masked_matches_outside_mask(&self) -> bool {
        let h = self.mask.dim(0);
        let w = self.mask.dim(1);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if self.mask.data()[y * w + x] == 0.0 {
                        let i = (c * h + y) * w + x;
                        if self.masked.data()[i] != self.groundtruth.data()[i] {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Joint augmentation of a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    Flip,
    Translate { dx: i64, dy: i64 },
}

/// Applies `op` jointly to image, mask and masked image. Translation fills
/// with edge replication; the outside-mask equality invariant is preserved
/// because all three planes transform identically.
pub fn augment(triplet: &FaceTriplet, op: Augment) -> Result<FaceTriplet> {
    match op {
        Augment::Flip => Ok(FaceTriplet {
            groundtruth: flip_chw(&triplet.groundtruth),
            mask: flip_hw(&triplet.mask),
            masked: flip_chw(&triplet.masked),
            ..triplet.clone()
        }),
        Augment::Translate { dx, dy } => {
            if dx.abs() > 3 || dy.abs() > 3 {
                return Err(CoreError::TranslationOutOfRange { dx, dy });
            }
            Ok(FaceTriplet {
                groundtruth: translate_chw(&triplet.groundtruth, dx, dy),
                mask: translate_hw(&triplet.mask, dx, dy),
                masked: translate_chw(&triplet.masked, dx, dy),
                ..triplet.clone()
            })
        }
    }
}

fn flip_chw(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ci * h + y) * w + x] = t.data()[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn flip_hw(t: &Tensor) -> Tensor {
    let (h, w) = (t.dim(0), t.dim(1));
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = t.data()[y * w + (w - 1 - x)];
        }
    }
    out
}

fn translate_plane(src: &[f64], h: usize, w: usize, dx: i64, dy: i64, dst: &mut [f64]) {
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
            let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
            dst[y as usize * w + x as usize] = src[sy * w + sx];
        }
    }
}

fn translate_chw(t: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        translate_plane(
            &t.data()[ci * h * w..(ci + 1) * h * w],
            h,
            w,
            dx,
            dy,
            &mut out.data_mut()[ci * h * w..(ci + 1) * h * w],
        );
    }
    out
}

fn translate_hw(t: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (h, w) = (t.dim(0), t.dim(1));
    let mut out = Tensor::zeros(&[h, w]);
    translate_plane(t.data(), h, w, dx, dy, out.data_mut());
    out
}
