use std::path::Path;

use mtkd_core::model::{ModelConfig, ModelParams, NamedTensor};
use mtkd_core::training::{Checkpoint, EpochLog, RngState};
use mtkd_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{read_versioned, write_bytes};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "mtkd-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: String,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
    rng: RngState,
    epoch: usize,
    history: Vec<EpochLog>,
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.params.validate()?;
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION.into(),
        config: checkpoint.params.config.clone(),
        tensors: checkpoint
            .params
            .tensors
            .iter()
            .map(|t| TensorRecord {
                name: t.name.clone(),
                rows: t.value.rows(),
                cols: t.value.cols(),
                values: t.value.data().to_vec(),
            })
            .collect(),
        rng: checkpoint.rng,
        epoch: checkpoint.epoch,
        history: checkpoint.history.clone(),
    };
    let mut bytes = serde_json::to_vec(&file).map_err(|e| Error::format(path, 0, e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file: CheckpointFile = read_versioned(path, CHECKPOINT_VERSION)?;
    let tensors = file
        .tensors
        .into_iter()
        .map(|t| {
            let value = Tensor::from_vec(t.rows, t.cols, t.values).map_err(|e| Error::format(path, 1, format!("{}: {e}", t.name)))?;
            Ok(NamedTensor { name: t.name, value })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams {
        config: file.config,
        tensors,
    };
    params.validate().map_err(|e| Error::format(path, 1, e.to_string()))?;
    if file.epoch >= file.history.len() {
        return Err(Error::format(path, 1, "checkpoint epoch is outside its history"));
    }
    Ok(Checkpoint {
        params,
        rng: file.rng,
        epoch: file.epoch,
        history: file.history,
    })
}
