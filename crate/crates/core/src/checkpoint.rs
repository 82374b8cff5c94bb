//! U3DC checkpoint io.
//!
//! Layout: magic `U3DC`, little-endian u32 version (=1), u64 header length,
//! a UTF-8 JSON header mapping tensor name → {dtype:"f32", shape, offset},
//! then one contiguous little-endian f32 blob. Offsets are byte positions
//! into the blob. Tensors are written in canonical visitation order and the
//! header keys are sorted, so identical weights produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mat::Mat;

const MAGIC: &[u8; 4] = b"U3DC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// All tensors from a checkpoint file, keyed by name.
#[derive(Debug)]
pub struct CheckpointFile {
    pub tensors: BTreeMap<String, Mat>,
}

impl CheckpointFile {
    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor '{name}'")))
    }
}

/// Write named tensors in the given order.
pub fn write_tensors(path: &Path, tensors: &[(String, &Mat)]) -> Result<()> {
    let mut header: BTreeMap<&str, TensorEntry> = BTreeMap::new();
    let mut offset = 0u64;
    for (name, m) in tensors {
        if header
            .insert(
                name,
                TensorEntry { dtype: "f32".to_string(), shape: vec![m.rows, m.cols], offset },
            )
            .is_some()
        {
            return Err(Error::invalid(format!("duplicate tensor name '{name}'")));
        }
        offset += (m.len() * 4) as u64;
    }
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, m) in tensors {
        out.extend_from_slice(&m.to_f32_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<CheckpointFile> {
    let data = std::fs::read(path)?;
    if data.len() < 16 || &data[0..4] != MAGIC {
        return Err(Error::format(format!("{}: not a U3DC checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > data.len() {
        return Err(Error::format("checkpoint header overruns file".to_string()));
    }
    let header: BTreeMap<String, TensorEntry> = serde_json::from_slice(&data[16..16 + header_len])?;
    let blob = &data[16 + header_len..];

    let mut tensors = BTreeMap::new();
    for (name, entry) in header {
        if entry.dtype != "f32" {
            return Err(Error::format(format!("tensor '{name}': unsupported dtype '{}'", entry.dtype)));
        }
        if entry.shape.len() != 2 {
            return Err(Error::format(format!("tensor '{name}': expected 2-d shape, got {:?}", entry.shape)));
        }
        let (rows, cols) = (entry.shape[0], entry.shape[1]);
        let count = rows * cols;
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::format(format!("tensor '{name}': data overruns blob")));
        }
        let floats: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let m = Mat::from_f32_slice(rows, cols, &floats);
        m.ensure_finite(&format!("tensor '{name}'"))?;
        tensors.insert(name, m);
    }
    Ok(CheckpointFile { tensors })
}

/// Save a full encoder plus any extra named tensors (e.g. `log_tau`).
pub fn save_encoder(path: &Path, encoder: &Encoder, extras: &[(String, &Mat)]) -> Result<()> {
    let mut list: Vec<(String, Mat)> = Vec::new();
    encoder.visit_params(&mut |meta, m| list.push((meta.name.clone(), m.clone())));
    let mut refs: Vec<(String, &Mat)> = list.iter().map(|(n, m)| (n.clone(), m)).collect();
    refs.extend(extras.iter().map(|(n, m)| (n.clone(), *m)));
    write_tensors(path, &refs)
}

/// Load a full encoder saved by `save_encoder`. Every tensor must be present
/// with the exact shape the config implies. Extra tensors are returned.
pub fn load_encoder(
    path: &Path,
    config: &crate::encoder::EncoderConfig,
) -> Result<(Encoder, BTreeMap<String, Mat>)> {
    let mut file = read_tensors(path)?;
    let mut enc = Encoder::zeros(config)?;
    let mut err: Option<Error> = None;
    enc.visit_params_mut(&mut |meta, m| {
        if err.is_some() {
            return;
        }
        match file.tensors.remove(&meta.name) {
            Some(t) if (t.rows, t.cols) == (m.rows, m.cols) => *m = t,
            Some(t) => {
                err = Some(Error::shape(format!(
                    "tensor '{}': checkpoint has {}x{}, config wants {}x{}",
                    meta.name, t.rows, t.cols, m.rows, m.cols
                )))
            }
            None => err = Some(Error::format(format!("checkpoint missing tensor '{}'", meta.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok((enc, file.tensors))
}

/// Import 2D-prior weights: transformer blocks, class token, and final norm
/// come from the checkpoint; tokenizer, positional MLP, and projection keep
/// their fresh initialization. With `freeze_transformer`, the loaded set is
/// flagged non-trainable.
pub fn load_2d_prior(path: &Path, encoder: &Encoder, freeze_transformer: bool) -> Result<Encoder> {
    let file = read_tensors(path)?;
    let mut enc = encoder.clone();
    let mut err: Option<Error> = None;
    enc.visit_params_mut(&mut |meta, m| {
        if err.is_some() {
            return;
        }
        let from_prior = meta.name.starts_with("blocks.")
            || meta.name == "cls_token"
            || meta.name == "norm.weight"
            || meta.name == "norm.bias";
        if !from_prior {
            return;
        }
        match file.tensors.get(&meta.name) {
            Some(t) if (t.rows, t.cols) == (m.rows, m.cols) => *m = t.clone(),
            Some(t) => {
                err = Some(Error::shape(format!(
                    "tensor '{}': checkpoint has {}x{}, config wants {}x{}",
                    meta.name, t.rows, t.cols, m.rows, m.cols
                )))
            }
            None => err = Some(Error::format(format!("checkpoint missing tensor '{}'", meta.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if freeze_transformer {
        enc.frozen.blocks = vec![true; enc.config.depth];
        enc.frozen.core = true;
    }
    Ok(enc)
}
