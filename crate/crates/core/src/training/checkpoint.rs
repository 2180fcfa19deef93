//! JSON checkpoints.
//!
//! Keys appear in a fixed order and every float is written with 17
//! significant digits, which is enough to recover the exact `f64`. Saving,
//! loading and saving again therefore produces identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{Snapshot, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{AdamConfig, AdamState, Moments, Rng, Tensor};

pub const CHECKPOINT_FORMAT: &str = "TSDSAE-CKPT-1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Box<RawValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentRecord {
    name: String,
    steps: u64,
    m: TensorRecord,
    v: TensorRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    config: AdamConfig,
    t: u64,
    moments: Vec<MomentRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotRecord {
    epoch: usize,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    train_config: TrainConfig,
    epoch: usize,
    stage: u8,
    best_val: Option<Box<RawValue>>,
    epochs_since_improvement: usize,
    stopped: bool,
    rng: String,
    params: Vec<TensorRecord>,
    adam: AdamRecord,
    snapshot: Option<SnapshotRecord>,
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn raw(text: String) -> Box<RawValue> {
    RawValue::from_string(text).expect("formatted JSON")
}

fn tensor_record(name: &str, t: &Tensor) -> TensorRecord {
    let values: Vec<String> = t.data().iter().map(|&v| format_float(v)).collect();
    TensorRecord {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        values: raw(format!("[{}]", values.join(","))),
    }
}

fn records(tensors: &BTreeMap<String, Tensor>) -> Vec<TensorRecord> {
    tensors.iter().map(|(n, t)| tensor_record(n, t)).collect()
}

fn decode_tensor(r: &TensorRecord, field: &str) -> Result<Tensor> {
    let location = format!("{field}[{}].values", r.name);
    let values: Vec<f64> =
        serde_json::from_str(r.values.get()).map_err(|e| Error::parse(&location, e.to_string()))?;
    Tensor::new(&r.shape, values).map_err(|e| Error::parse(location, e.to_string()))
}

fn decode_map(rs: &[TensorRecord], field: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for r in rs {
        if out.insert(r.name.clone(), decode_tensor(r, field)?).is_some() {
            return Err(Error::parse(format!("{field}[{}]", r.name), "duplicate name"));
        }
    }
    Ok(out)
}

pub fn encode_checkpoint(state: &TrainState) -> Result<String> {
    if !state.params.tensors.values().all(Tensor::is_finite) {
        return Err(Error::Numerical("cannot checkpoint non-finite parameters".into()));
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        train_config: state.config.clone(),
        epoch: state.epoch,
        stage: state.stage().number(),
        best_val: state.best_val.map(|v| raw(format_float(v))),
        epochs_since_improvement: state.epochs_since_improvement,
        stopped: state.stopped,
        rng: state.rng.state_hex(),
        params: records(&state.params.tensors),
        adam: AdamRecord {
            config: state.adam.config,
            t: state.adam.t,
            moments: state
                .adam
                .moments
                .iter()
                .map(|(n, m)| MomentRecord {
                    name: n.clone(),
                    steps: m.steps,
                    m: tensor_record(n, &m.m),
                    v: tensor_record(n, &m.v),
                })
                .collect(),
        },
        snapshot: state.snapshot.as_ref().map(|s| SnapshotRecord {
            epoch: s.epoch,
            tensors: records(&s.tensors),
        }),
    };
    let mut text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Numerical(format!("checkpoint serialisation failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn decode_checkpoint(text: &str) -> Result<TrainState> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::parse(
            "format",
            format!("expected {CHECKPOINT_FORMAT}, found {}", file.format),
        ));
    }
    file.train_config
        .validate()
        .map_err(|e| Error::parse("train_config", e.to_string()))?;
    let params = ModelParams {
        config: file.train_config.model.clone(),
        tensors: decode_map(&file.params, "params")?,
    };
    params.validate().map_err(|e| Error::parse("params", e.to_string()))?;

    let mut moments = BTreeMap::new();
    for r in &file.adam.moments {
        if !params.tensors.contains_key(&r.name) {
            return Err(Error::parse(format!("adam.moments[{}]", r.name), "unknown parameter"));
        }
        moments.insert(
            r.name.clone(),
            Moments {
                m: decode_tensor(&r.m, "adam.moments.m")?,
                v: decode_tensor(&r.v, "adam.moments.v")?,
                steps: r.steps,
            },
        );
    }
    let snapshot = match &file.snapshot {
        None => None,
        Some(s) => Some(Snapshot {
            epoch: s.epoch,
            tensors: decode_map(&s.tensors, "snapshot.tensors")?,
        }),
    };
    let best_val = match &file.best_val {
        None => None,
        Some(v) => Some(
            serde_json::from_str::<f64>(v.get())
                .map_err(|e| Error::parse("best_val", e.to_string()))?,
        ),
    };
    let rng = Rng::from_state_hex(&file.rng).map_err(|e| Error::parse("rng", e.to_string()))?;
    let state = TrainState {
        config: file.train_config,
        epoch: file.epoch,
        params,
        adam: AdamState {
            config: file.adam.config,
            t: file.adam.t,
            moments,
        },
        snapshot,
        best_val,
        epochs_since_improvement: file.epochs_since_improvement,
        stopped: file.stopped,
        rng,
    };
    if state.stage().number() != file.stage {
        return Err(Error::parse(
            "stage",
            format!("stage {} is inconsistent with epoch {}", file.stage, file.epoch),
        ));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let text = encode_checkpoint(state)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; with `expected`, also requires an identical model
/// configuration.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let state = decode_checkpoint(&text)?;
    if let Some(cfg) = expected {
        if cfg.model != state.config.model {
            return Err(Error::config(
                "model",
                format!(
                    "checkpoint {} was trained with {:?}, config asks for {:?}",
                    path.display(),
                    state.config.model,
                    cfg.model
                ),
            ));
        }
    }
    Ok(state)
}
