use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{config_hash, TrainConfig, TrainOutcome};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const GENERATOR_FILE: &str = "generator.f32";
pub const DISCRIMINATOR_FILE: &str = "discriminator.f32";
pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub iteration: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub generator_file: String,
    pub generator: Vec<TensorEntry>,
    pub discriminator_file: String,
    pub discriminator: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub generator: Vec<Tensor>,
    pub discriminator: Vec<Tensor>,
}

fn pack(names: &[(String, Vec<usize>)], tensors: &[Tensor]) -> Result<(Vec<u8>, Vec<TensorEntry>)> {
    if names.len() != tensors.len() {
        return Err(Error::invalid("checkpoint", "tensor count does not match the model"));
    }
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for ((name, shape), t) in names.iter().zip(tensors) {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                lhs: shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += t.len();
    }
    Ok((bytes, entries))
}

fn unpack(bytes: &[u8], entries: &[TensorEntry]) -> Result<Vec<Tensor>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format("checkpoint", "blob length is not a multiple of 4"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::format("checkpoint", format!("tensor {} exceeds the blob", e.name)))?;
            Tensor::new(&e.shape, slice.to_vec())
        })
        .collect()
}

/// Writes both parameter sets as little-endian float32 blobs plus a JSON
/// manifest into `dir`.
pub fn write_checkpoint(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let (g_bytes, g_entries) = pack(&cfg.generator.param_shapes(), &outcome.generator)?;
    let (d_bytes, d_entries) = pack(&cfg.discriminator().param_shapes(), &outcome.discriminator)?;
    fs::write(dir.join(GENERATOR_FILE), g_bytes)?;
    fs::write(dir.join(DISCRIMINATOR_FILE), d_bytes)?;
    let manifest = CheckpointManifest {
        format: "f32-le".into(),
        iteration: outcome.log.reports.len(),
        config_hash: config_hash(cfg)?,
        config: cfg.clone(),
        generator_file: GENERATOR_FILE.into(),
        generator: g_entries,
        discriminator_file: DISCRIMINATOR_FILE.into(),
        discriminator: d_entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != "f32-le" {
        return Err(Error::format("checkpoint", format!("unknown format {}", manifest.format)));
    }
    if config_hash(&manifest.config)? != manifest.config_hash {
        return Err(Error::format("checkpoint", "config hash does not match the stored config"));
    }
    let generator = unpack(&fs::read(dir.join(&manifest.generator_file))?, &manifest.generator)?;
    let discriminator = unpack(&fs::read(dir.join(&manifest.discriminator_file))?, &manifest.discriminator)?;
    Ok(Checkpoint {
        manifest,
        generator,
        discriminator,
    })
}
