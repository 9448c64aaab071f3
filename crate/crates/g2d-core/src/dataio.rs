//! On-disk formats: binary PPM/PGM images, the "G2DM" model container, the
//! "EMB1" embedding container and the tab-separated dataset manifest.
//!
//! All binary formats are little-endian with a 4-byte magic prefix.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    assert_eq!(image.rank(), 3, "write_ppm expects [3, H, W]");
    assert_eq!(image.dim(0), 3, "write_ppm expects 3 channels");
    let (h, w) = (image.dim(1), image.dim(2));
    let mut bytes = Vec::with_capacity(32 + 3 * h * w);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(image.data()[c * plane + i]));
        }
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Writes an `[H, W]` tensor in `[0, 1]` as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    assert_eq!(image.rank(), 2, "write_pgm expects [H, W]");
    let (h, w) = (image.dim(0), image.dim(1));
    let mut bytes = Vec::with_capacity(32 + h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    bytes.extend(image.iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let bad = |reason: &str| CoreError::ImageFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields: Vec<&[u8]> = Vec::new();
    let mut i = 0;
    while fields.len() < 4 && i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start < i {
            fields.push(&bytes[start..i]);
        }
    }
    if fields.len() < 4 {
        return Err(bad("truncated header"));
    }
    if fields[0] != magic.as_bytes() {
        return Err(bad(&format!("expected magic {magic}")));
    }
    let parse = |b: &[u8]| -> Result<usize> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    if parse(fields[3])? != 255 {
        return Err(bad("maxval must be 255"));
    }
    if i >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    i += 1; // single whitespace byte after maxval
    Ok((w, h, &bytes[i..]))
}

/// Reads a binary PPM into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (w, h, data) = parse_header(path, &bytes, "P6")?;
    if data.len() < 3 * w * h {
        return Err(CoreError::ImageFormat {
            path: path.to_path_buf(),
            reason: format!("expected {} pixel bytes, found {}", 3 * w * h, data.len()),
        });
    }
    let plane = w * h;
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..plane {
        for c in 0..3 {
            out.data_mut()[c * plane + i] = data[i * 3 + c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Reads a binary PGM into an `[H, W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (w, h, data) = parse_header(path, &bytes, "P5")?;
    if data.len() < w * h {
        return Err(CoreError::ImageFormat {
            path: path.to_path_buf(),
            reason: format!("expected {} pixel bytes, found {}", w * h, data.len()),
        });
    }
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..w * h {
        out.data_mut()[i] = data[i] as f64 / 255.0;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Little-endian cursor
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Cursor {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn fail<T>(&self, reason: &str) -> Result<T> {
        Err(CoreError::ModelFormat {
            path: self.path.clone(),
            reason: format!("{reason} at byte {}", self.pos),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail("unexpected end of file");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

// ---------------------------------------------------------------------------
// Model container: magic "G2DM"
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"G2DM";
pub const MODEL_VERSION: u32 = 1;

/// Serializes the named parameters (in the given order) into the binary
/// container: magic, u32 version, then per parameter u32 name length +
/// UTF-8 name, u32 rank, u32 dims, f64 values, all little-endian.
pub fn save_params(path: &Path, store: &ParamStore, ids: &[ParamId]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::io(path, e);
    w.write_all(MODEL_MAGIC).map_err(io)?;
    w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io)?;
    for id in ids {
        let p = store.get(*id);
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes()).map_err(io)?;
        for d in p.value.shape() {
            w.write_all(&(*d as u32).to_le_bytes()).map_err(io)?;
        }
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads all parameter records from a model container.
pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    if c.take(4)? != MODEL_MAGIC {
        return c.fail("missing G2DM magic");
    }
    let version = c.u32()?;
    if version != MODEL_VERSION {
        return c.fail(&format!("unsupported format version {version}"));
    }
    let mut out = Vec::new();
    while !c.done() {
        let name_len = c.u32()? as usize;
        let name = match std::str::from_utf8(c.take(name_len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return c.fail("parameter name is not UTF-8"),
        };
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(c.f64()?);
        }
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Loads parameters from a model file into existing store entries matched
/// by exact name; every store id must be filled, shapes must agree.
pub fn load_params_into(path: &Path, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
    let records = load_params(path)?;
    for id in ids {
        let name = store.get(*id).name.clone();
        let found = records.iter().find(|(n, _)| *n == name);
        match found {
            Some((_, tensor)) => {
                if tensor.shape() != store.value(*id).shape() {
                    return Err(CoreError::ModelFormat {
                        path: path.to_path_buf(),
                        reason: format!(
                            "parameter {name}: shape {:?} in file, {:?} expected",
                            tensor.shape(),
                            store.value(*id).shape()
                        ),
                    });
                }
                store.get_mut(*id).value = tensor.clone();
            }
            None => {
                return Err(CoreError::ModelFormat {
                    path: path.to_path_buf(),
                    reason: format!("parameter {name} missing from file"),
                })
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding container: magic "EMB1"
// ---------------------------------------------------------------------------

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// Embedding rows with their sidecar metadata.
#[derive(Debug, Clone)]
pub struct EmbeddingFile {
    /// `[count, dim]`.
    pub rows: Tensor,
    /// Per row: identity, view, source image path, masked flag.
    pub entries: Vec<EmbeddingEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingEntry {
    pub identity: usize,
    pub view: usize,
    pub path: String,
    pub masked: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the binary embedding file (magic, u32 count, u32 dim, f64 rows)
/// and its text sidecar mapping each row to (identity, view, path, masked).
pub fn write_embeddings(path: &Path, emb: &EmbeddingFile) -> Result<()> {
    assert_eq!(emb.rows.rank(), 2, "embeddings must be [count, dim]");
    let (count, dim) = (emb.rows.dim(0), emb.rows.dim(1));
    assert_eq!(count, emb.entries.len(), "row count vs sidecar entries");
    let file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::io(path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&(count as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for v in emb.rows.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let sidecar = sidecar_path(path);
    let mut text = String::new();
    for e in &emb.entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.identity,
            e.view,
            e.path,
            if e.masked { 1 } else { 0 }
        ));
    }
    fs::write(&sidecar, text).map_err(|e| CoreError::io(&sidecar, e))
}

/// Reads an embedding file and its sidecar; row count must match the
/// sidecar line count.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let bad = |reason: String| CoreError::EmbeddingFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(bad("missing EMB1 magic".into()));
    }
    let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let dim = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let need = 12 + 8 * count * dim;
    if bytes.len() < need {
        return Err(bad(format!("expected {need} bytes, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(count * dim);
    for i in 0..count * dim {
        let o = 12 + 8 * i;
        data.push(f64::from_le_bytes([
            bytes[o],
            bytes[o + 1],
            bytes[o + 2],
            bytes[o + 3],
            bytes[o + 4],
            bytes[o + 5],
            bytes[o + 6],
            bytes[o + 7],
        ]));
    }
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| CoreError::io(&sidecar, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("sidecar line {}: expected 4 fields", lineno + 1)));
        }
        let parse_num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| bad(format!("sidecar line {}: bad number '{s}'", lineno + 1)))
        };
        entries.push(EmbeddingEntry {
            identity: parse_num(fields[0])?,
            view: parse_num(fields[1])?,
            path: fields[2].to_string(),
            masked: fields[3] == "1",
        });
    }
    if entries.len() != count {
        return Err(bad(format!(
            "row count {count} does not match sidecar line count {}",
            entries.len()
        )));
    }
    Ok(EmbeddingFile {
        rows: Tensor::new(vec![count, dim], data),
        entries,
    })
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One dataset manifest row; paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub identity: usize,
    pub view: usize,
    pub template: usize,
    pub split: String,
    pub face_path: String,
    pub mask_path: String,
    pub masked_path: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.identity, r.view, r.template, r.split, r.face_path, r.mask_path, r.masked_path
        ));
    }
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let bad = |lineno: usize, reason: String| CoreError::Manifest {
        path: path.to_path_buf(),
        reason: format!("line {}: {reason}", lineno + 1),
    };
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad(lineno, format!("expected 7 fields, found {}", fields.len())));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(lineno, format!("bad number '{s}'")))
        };
        rows.push(ManifestRow {
            identity: num(fields[0])?,
            view: num(fields[1])?,
            template: num(fields[2])?,
            split: fields[3].to_string(),
            face_path: fields[4].to_string(),
            mask_path: fields[5].to_string(),
            masked_path: fields[6].to_string(),
        });
    }
    Ok(rows)
}
