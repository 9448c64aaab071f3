//! Dataset generation and loading.
//!
//! Each item's seed derives from `(master_seed, identity, view)`, so the
//! on-disk dataset is a pure function of the synthesis arguments even when
//! items are generated in parallel. The train/validation split is 6:1 by
//! view index (view % 7 == 6 goes to validation).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::overlay::overlay_mask;
use super::render::render_face;
use super::template::{builtin_templates, MaskTemplate};
use super::{generate_identities, FaceTriplet};
use crate::dataio::{read_pgm, read_ppm, write_manifest, write_pgm, write_ppm, ManifestRow};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tensor::Tensor;
use rand::Rng;

/// Per-triplet mask area bounds; items outside are resampled.
pub const MASK_AREA_MIN: f64 = 0.10;
pub const MASK_AREA_MAX: f64 = 0.35;
const MAX_OVERLAY_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(CoreError::Config(format!("unknown split '{other}'"))),
        }
    }

    pub fn of_view(view: usize) -> Split {
        if view % 7 == 6 {
            Split::Val
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub n_templates: usize,
    pub image_size: usize,
    pub master_seed: u64,
    /// Thread count for item generation; 0 uses one thread.
    pub threads: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            n_identities: 16,
            views_per_identity: 40,
            n_templates: 5,
            image_size: 32,
            master_seed: 7,
            threads: 1,
        }
    }
}

/// One loaded dataset item.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub identity: usize,
    pub view: usize,
    pub template: usize,
    pub split: Split,
    /// `[3, H, W]` groundtruth face.
    pub face: Tensor,
    /// `[H, W]` binary mask.
    pub mask: Tensor,
    /// `[3, H, W]` masked face.
    pub masked: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub n_identities: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }
}

/// Generates one triplet; pure function of the derived item seed.
pub fn generate_triplet(
    identity: &super::IdentityParams,
    view: usize,
    templates: &[MaskTemplate],
    master_seed: u64,
    image_size: usize,
) -> Result<(FaceTriplet, usize)> {
    let item_seed = derive_seed(master_seed, &[tag::VIEW, identity.id as u64, view as u64]);
    let (face, keypoints) = render_face(identity, item_seed, image_size);
    let mut rng = rng_for(item_seed, &[tag::TEMPLATE]);
    for _attempt in 0..MAX_OVERLAY_ATTEMPTS {
        let template = &templates[rng.gen_range(0..templates.len())];
        let Ok((masked, mask)) = overlay_mask(&face, &keypoints, template, &mut rng) else {
            continue; // degenerate keypoints after jitter: resample
        };
        let fraction = mask.iter().sum::<f64>() / mask.len() as f64;
        if !(MASK_AREA_MIN..=MASK_AREA_MAX).contains(&fraction) {
            continue;
        }
        let triplet = FaceTriplet {
            groundtruth: face,
            mask,
            masked,
            identity: identity.id,
            mask_template_id: template.id,
            variation_seed: item_seed,
        };
        return Ok((triplet, template.id));
    }
    Err(CoreError::Config(format!(
        "could not place a mask within area bounds for identity {} view {view}",
        identity.id
    )))
}

/// Generates the full dataset under `out_dir`: PPM/PGM images plus a
/// `manifest.tsv`. Returns the manifest rows.
pub fn synthesize_dataset(cfg: &SynthesisConfig, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    assert!(cfg.n_identities >= 1 && cfg.views_per_identity >= 1 && cfg.n_templates >= 1);
    let mut templates = builtin_templates();
    templates.truncate(cfg.n_templates);
    let identities = generate_identities(cfg.n_identities, cfg.master_seed);

    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| CoreError::io(&images_dir, e))?;

    let jobs: Vec<(usize, usize)> = (0..cfg.n_identities)
        .flat_map(|id| (0..cfg.views_per_identity).map(move |v| (id, v)))
        .collect();

    let run = |jobs: &[(usize, usize)]| -> Vec<Result<(FaceTriplet, usize)>> {
        jobs.par_iter()
            .map(|&(id, view)| {
                generate_triplet(
                    &identities[id],
                    view,
                    &templates,
                    cfg.master_seed,
                    cfg.image_size,
                )
            })
            .collect()
    };
    let results = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .expect("thread pool");
        pool.install(|| run(&jobs))
    } else {
        jobs.iter()
            .map(|&(id, view)| {
                generate_triplet(
                    &identities[id],
                    view,
                    &templates,
                    cfg.master_seed,
                    cfg.image_size,
                )
            })
            .collect()
    };

    let mut rows = Vec::with_capacity(jobs.len());
    for ((id, view), result) in jobs.iter().zip(results) {
        let (triplet, template_id) = result?;
        let stem = format!("id{id:03}_v{view:03}");
        let face_rel = format!("images/{stem}_face.ppm");
        let mask_rel = format!("images/{stem}_mask.pgm");
        let masked_rel = format!("images/{stem}_masked.ppm");
        write_ppm(&out_dir.join(&face_rel), &triplet.groundtruth)?;
        write_pgm(&out_dir.join(&mask_rel), &triplet.mask)?;
        write_ppm(&out_dir.join(&masked_rel), &triplet.masked)?;
        rows.push(ManifestRow {
            identity: *id,
            view: *view,
            template: template_id,
            split: Split::of_view(*view).as_str().to_string(),
            face_path: face_rel,
            mask_path: mask_rel,
            masked_path: masked_rel,
        });
    }
    write_manifest(&out_dir.join("manifest.tsv"), &rows)?;
    Ok(rows)
}

/// Loads a dataset from its manifest; image paths resolve relative to the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let rows = crate::dataio::read_manifest(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut items = Vec::with_capacity(rows.len());
    let mut n_identities = 0;
    let mut image_size = 0;
    for row in rows {
        let face = read_ppm(&base.join(&row.face_path))?;
        let mask = read_pgm(&base.join(&row.mask_path))?;
        let masked = read_ppm(&base.join(&row.masked_path))?;
        // Quantized masks are exactly 0 or 1 after the 255 roundtrip.
        n_identities = n_identities.max(row.identity + 1);
        image_size = face.dim(1);
        items.push(DatasetItem {
            identity: row.identity,
            view: row.view,
            template: row.template,
            split: Split::parse(&row.split)?,
            face,
            mask,
            masked,
        });
    }
    Ok(Dataset {
        items,
        n_identities,
        image_size,
    })
}

impl Dataset {
    /// In-memory generation used by tests and the training pipeline when no
    /// on-disk dataset is required.
    pub fn generate_in_memory(cfg: &SynthesisConfig) -> Result<Dataset> {
        let mut templates = builtin_templates();
        templates.truncate(cfg.n_templates);
        let identities = generate_identities(cfg.n_identities, cfg.master_seed);
        let mut items = Vec::new();
        for identity in &identities {
            for view in 0..cfg.views_per_identity {
                let (t, template_id) = generate_triplet(
                    identity,
                    view,
                    &templates,
                    cfg.master_seed,
                    cfg.image_size,
                )?;
                items.push(DatasetItem {
                    identity: identity.id,
                    view,
                    template: template_id,
                    split: Split::of_view(view),
                    face: t.groundtruth,
                    mask: t.mask,
                    masked: t.masked,
                });
            }
        }
        Ok(Dataset {
            items,
            n_identities: cfg.n_identities,
            image_size: cfg.image_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("g2d-dataset-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg() -> SynthesisConfig {
        SynthesisConfig {
            n_identities: 4,
            views_per_identity: 14,
            n_templates: 5,
            image_size: 32,
            master_seed: 7,
            threads: 1,
        }
    }

    fn hash_dir(dir: &Path) -> Vec<(String, u64)> {
        let mut entries: Vec<PathBuf> = walk(dir);
        entries.sort();
        entries
            .iter()
            .map(|p| {
                let bytes = fs::read(p).unwrap();
                let mut h: u64 = 0xcbf29ce484222325;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                (p.strip_prefix(dir).unwrap().display().to_string(), h)
            })
            .collect()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn regeneration_is_byte_identical_even_with_threads() {
        let cfg = small_cfg();
        let d1 = tmpdir("gen1");
        let d2 = tmpdir("gen2");
        synthesize_dataset(&cfg, &d1).unwrap();
        let mut threaded = cfg.clone();
        threaded.threads = 4;
        synthesize_dataset(&threaded, &d2).unwrap();
        assert_eq!(hash_dir(&d1), hash_dir(&d2));
    }

    #[test]
    fn manifest_row_count_and_splits() {
        let cfg = small_cfg();
        let dir = tmpdir("manifest");
        let rows = synthesize_dataset(&cfg, &dir).unwrap();
        assert_eq!(rows.len(), 4 * 14);
        // Every identity appears in both splits (14 views -> views 6 and 13
        // are validation).
        let mut train: HashSet<usize> = HashSet::new();
        let mut val: HashSet<usize> = HashSet::new();
        for r in &rows {
            match r.split.as_str() {
                "train" => train.insert(r.identity),
                _ => val.insert(r.identity),
            };
        }
        assert_eq!(train.len(), 4);
        assert_eq!(val.len(), 4);
        // 6:1 by view index.
        let n_val = rows.iter().filter(|r| r.split == "val").count();
        assert_eq!(n_val, 4 * 2);
    }

    #[test]
    fn loaded_dataset_preserves_invariants() {
        let cfg = small_cfg();
        let dir = tmpdir("load");
        synthesize_dataset(&cfg, &dir).unwrap();
        let ds = load_dataset(&dir.join("manifest.tsv")).unwrap();
        assert_eq!(ds.items.len(), 56);
        assert_eq!(ds.n_identities, 4);
        assert_eq!(ds.image_size, 32);
        for item in &ds.items {
            // Mask stays binary through the 8-bit roundtrip.
            assert!(item.mask.iter().all(|&v| v == 0.0 || v == 1.0));
            let fraction = item.mask.iter().sum::<f64>() / item.mask.len() as f64;
            assert!(
                (MASK_AREA_MIN..=MASK_AREA_MAX).contains(&fraction),
                "fraction {fraction}"
            );
            // masked == face outside the mask, exactly, after quantization.
            let (h, w) = (item.mask.dim(0), item.mask.dim(1));
            for y in 0..h {
                for x in 0..w {
                    if item.mask.data()[y * w + x] == 0.0 {
                        for c in 0..3 {
                            let i = (c * h + y) * w + x;
                            assert_eq!(item.masked.data()[i], item.face.data()[i]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn in_memory_generation_matches_disk_content() {
        let cfg = small_cfg();
        let dir = tmpdir("mem");
        synthesize_dataset(&cfg, &dir).unwrap();
        let from_disk = load_dataset(&dir.join("manifest.tsv")).unwrap();
        let in_mem = Dataset::generate_in_memory(&cfg).unwrap();
        assert_eq!(from_disk.items.len(), in_mem.items.len());
        for (a, b) in from_disk.items.iter().zip(in_mem.items.iter()) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.view, b.view);
            assert_eq!(a.template, b.template);
            // Disk content is the quantized version of the in-memory one.
            for (x, y) in a.face.iter().zip(b.face.iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
            assert_eq!(a.mask.data(), b.mask.data());
        }
    }
}
