//! Binary checkpoint files.
//!
//! ```text
//! "BWCK" | u16 version | u32 manifest length | manifest JSON | u32 manifest CRC
//! | per tensor: element count x f32 | u32 CRC
//! ```
//!
//! The manifest lists tensor names and shapes in file order, the model
//! configuration and the beam table fingerprint. The table itself is
//! regenerated from its seed on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind as IoErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Predictor};

pub const MAGIC: &[u8; 4] = b"BWCK";
pub const VERSION: u16 = 1;

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointInfo {
    pub codebook_fingerprint: String,
    pub dataset_hash: String,
    pub iteration: u64,
    pub val_top1: f64,
}

/// A trained model plus the provenance needed to check data compatibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Predictor,
    pub info: CheckpointInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NormEntry {
    momentum: f32,
    eps: f32,
    updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    info: CheckpointInfo,
    table_fingerprint: String,
    tensors: Vec<TensorEntry>,
    norms: Vec<NormEntry>,
}

/// Name, shape and values of every stored tensor in file order: parameters,
/// then running means and variances of each batch-norm layer.
fn tensors(model: &Predictor) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<_> =
        model.store.iter().map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec())).collect();
    for (i, s) in model.norm_stats().into_iter().enumerate() {
        out.push((format!("embed.bn{i}.running_mean"), vec![s.mean.len()], s.mean.clone()));
        out.push((format!("embed.bn{i}.running_var"), vec![s.var.len()], s.var.clone()));
    }
    out
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let (model, info) = (&ck.model, &ck.info);
    let io = |e| Error::io(path, e);
    let all = tensors(model);
    let manifest = Manifest {
        model: model.config().clone(),
        info: info.clone(),
        table_fingerprint: model.table().fingerprint(),
        tensors: all.iter().map(|(name, shape, _)| TensorEntry { name: name.clone(), shape: shape.clone() }).collect(),
        norms: model
            .norm_stats()
            .into_iter()
            .map(|s| NormEntry { momentum: s.momentum, eps: s.eps, updates: s.updates })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut put = |b: &[u8]| w.write_all(b).map_err(io);
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(json.len() as u32).to_le_bytes())?;
    put(&json)?;
    put(&crc32fast::hash(&json).to_le_bytes())?;
    for (_, _, values) in &all {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        put(&bytes)?;
        put(&crc32fast::hash(&bytes).to_le_bytes())?;
    }
    w.flush().map_err(io)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        IoErrorKind::UnexpectedEof => Error::Truncated { path: path.to_path_buf(), detail: format!("file ends inside {what}") },
        _ => Error::io(path, e),
    })
}

/// Loads a checkpoint with the architecture recorded in its manifest.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load(path, None)
}

/// Loads a checkpoint into a model built from `config`; any tensor whose
/// shape disagrees is reported by name.
pub fn load_checkpoint_as(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    load(path, Some(config))
}

fn load(path: &Path, config: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut u32_buf = [0u8; 4];
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "BWCK" });
    }
    let mut v = [0u8; 2];
    read_exact(&mut r, &mut v, path, "version")?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    read_exact(&mut r, &mut u32_buf, path, "manifest length")?;
    let mut json = vec![0u8; u32::from_le_bytes(u32_buf) as usize];
    read_exact(&mut r, &mut json, path, "manifest")?;
    read_exact(&mut r, &mut u32_buf, path, "manifest checksum")?;
    if u32::from_le_bytes(u32_buf) != crc32fast::hash(&json) {
        return Err(Error::Checksum { path: path.to_path_buf(), section: "manifest".into() });
    }
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Malformed { path: path.to_path_buf(), detail: format!("manifest JSON: {e}") })?;

    let mut model = Predictor::<f32>::new(config.unwrap_or(&manifest.model).clone())?;
    let expected = tensors(&model);
    for (k, entry) in manifest.tensors.iter().enumerate() {
        match expected.get(k) {
            Some((name, shape, _)) if name == &entry.name && shape == &entry.shape => {}
            Some((_, shape, _)) => {
                return Err(Error::TensorShape { name: entry.name.clone(), expected: shape.clone(), found: entry.shape.clone() })
            }
            None => return Err(Error::TensorShape { name: entry.name.clone(), expected: vec![], found: entry.shape.clone() }),
        }
    }
    if let Some((name, shape, _)) = expected.get(manifest.tensors.len()) {
        return Err(Error::TensorShape { name: name.clone(), expected: shape.clone(), found: vec![] });
    }
    if model.table().fingerprint() != manifest.table_fingerprint {
        return Err(Error::Compat {
            what: "beam embedding table",
            left: manifest.table_fingerprint.clone(),
            right: model.table().fingerprint(),
        });
    }

    let mut values = Vec::with_capacity(expected.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        read_exact(&mut r, &mut bytes, path, &format!("tensor {}", entry.name))?;
        read_exact(&mut r, &mut u32_buf, path, &format!("checksum of {}", entry.name))?;
        if u32::from_le_bytes(u32_buf) != crc32fast::hash(&bytes) {
            return Err(Error::Checksum { path: path.to_path_buf(), section: format!("tensor {}", entry.name) });
        }
        values.push(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect::<Vec<_>>());
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Malformed { path: path.to_path_buf(), detail: "trailing bytes after the last tensor".into() });
    }

    let mut it = values.into_iter();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.get_mut(id).data_mut().copy_from_slice(&it.next().expect("count checked"));
    }
    let norms = manifest.norms;
    if norms.len() != model.norm_stats().len() {
        return Err(Error::Malformed { path: path.to_path_buf(), detail: "batch-norm entry count disagrees with the model".into() });
    }
    for (stats, entry) in model.norm_stats_mut().into_iter().zip(norms) {
        stats.mean = it.next().expect("count checked");
        stats.var = it.next().expect("count checked");
        stats.momentum = entry.momentum;
        stats.eps = entry.eps;
        stats.updates = entry.updates;
    }
    Ok(Checkpoint { model, info: manifest.info })
}
