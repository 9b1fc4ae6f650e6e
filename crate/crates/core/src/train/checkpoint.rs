//! Checkpoint directories: `manifest.json` plus `params.bin`, a
//! little-endian f32 blob of every tensor concatenated in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, LogRow, TimestepHistogram, TrainConfig, Trainer};
use crate::config::hash_json;
use crate::error::{Error, Result};
use crate::model::TransfusionModel;
use crate::rng::{stream, Purpose};
use crate::tensor::Mat;

const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: usize,
    pub optimizer_step: usize,
    pub history: Vec<LogRow>,
    pub histogram: TimestepHistogram,
    pub tensors: Vec<TensorEntry>,
}

fn tensors(trainer: &Trainer) -> Vec<(String, &Mat<f32>)> {
    let params = &trainer.model.params;
    let mut out: Vec<(String, &Mat<f32>)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (p, m) in params.iter().zip(&trainer.optimizer.m) {
        out.push((format!("adam.m.{}", p.name), m));
    }
    for (p, v) in params.iter().zip(&trainer.optimizer.v) {
        out.push((format!("adam.v.{}", p.name), v));
    }
    out
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors(trainer) {
        entries.push(TensorEntry { name, dtype: "f32".into(), shape: [m.rows, m.cols], offset: blob.len() });
        for v in &m.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Checkpoint {
        format_version: FORMAT_VERSION,
        config: trainer.config.clone(),
        config_hash: hash_json(&trainer.config)?,
        step: trainer.step,
        optimizer_step: trainer.optimizer.step,
        history: trainer.history.clone(),
        histogram: trainer.histogram.clone(),
        tensors: entries,
    };
    fs::write(dir.join(PARAMS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_tensor(blob: &[u8], entry: &TensorEntry) -> Result<Mat<f32>> {
    if entry.dtype != "f32" {
        return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
    }
    let [rows, cols] = entry.shape;
    let end = entry.offset + rows * cols * 4;
    let bytes = blob
        .get(entry.offset..end)
        .ok_or_else(|| Error::Checkpoint(format!("{}: blob too short", entry.name)))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Mat::from_vec(rows, cols, data))
}

/// Restores a trainer, including optimizer moments and history, so that
/// training continues exactly where it stopped.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Checkpoint = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let config = manifest.config.clone();
    let mut rng = stream(config.seed, Purpose::Init, 0);
    let model = TransfusionModel::<f32>::new(&config.model, &mut rng)?;
    let mut trainer = Trainer::with_model(config, model)?;
    let names: Vec<String> = tensors(&trainer).into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            names.len(),
            manifest.tensors.len()
        )));
    }
    let n = trainer.model.params.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, (name, entry)) in names.iter().zip(&manifest.tensors).enumerate() {
        if *name != entry.name {
            return Err(Error::Checkpoint(format!("tensor {i}: expected {name}, found {}", entry.name)));
        }
        let value = read_tensor(&blob, entry)?;
        let slot = i % n;
        let want = trainer.model.params.iter().nth(slot).map(|p| p.value.shape()).unwrap_or_default();
        if value.shape() != want {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} != {want:?}", value.shape())));
        }
        match i / n {
            0 => trainer.model.params.iter_mut().nth(slot).expect("slot in range").value = value,
            1 => m.push(value),
            _ => v.push(value),
        }
    }
    trainer.optimizer = AdamW { step: manifest.optimizer_step, m, v };
    trainer.step = manifest.step;
    trainer.history = manifest.history;
    trainer.histogram = manifest.histogram;
    Ok(trainer)
}
