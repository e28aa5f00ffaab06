//! Single-file checkpoints: parameters grouped by module prefix, optimizer
//! state, run/model config snapshots, epoch counters and metric history.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::ArrayArchive;
use crate::error::{Error, Result};
use crate::losses::LossValues;
use crate::model::{GroundingModel, ModelConfig};
use crate::runner::optim::RmsProp;
use crate::runner::RunConfig;

const FORMAT: &str = "embref-checkpoint-1";
const OPTIM_PREFIX: &str = "optimizer.square_avg.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean: LossValues,
}

pub struct TrainState {
    pub run: RunConfig,
    pub model: GroundingModel,
    pub optimizer: RmsProp,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

fn tensor_f32(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    Ok((t.dims().to_vec(), t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut ar = ArrayArchive::default();
    for (name, var) in state.model.store.vars() {
        let (shape, data) = tensor_f32(var.as_tensor())?;
        ar.put_f32(name, &shape, &data);
    }
    for (name, t) in &state.optimizer.square_avg {
        let (shape, data) = tensor_f32(t)?;
        ar.put_f32(&format!("{OPTIM_PREFIX}{name}"), &shape, &data);
    }
    let m = &mut ar.metadata;
    m.insert("format".into(), FORMAT.into());
    m.insert("run_config".into(), serde_json::to_string(&state.run)?);
    m.insert("model_config".into(), serde_json::to_string(&state.model.config)?);
    m.insert("epoch".into(), state.epoch.to_string());
    m.insert("step".into(), state.step.to_string());
    m.insert("history".into(), serde_json::to_string(&state.history)?);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    ar.write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse<T: std::str::FromStr>(ar: &ArrayArchive, key: &str) -> Result<T> {
    ar.meta(key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata {key} is malformed")))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let ar = ArrayArchive::read(path)?;
    if ar.meta("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("{}: unknown format", path.display())));
    }
    let run: RunConfig = serde_json::from_str(ar.meta("run_config")?)?;
    let config: ModelConfig = serde_json::from_str(ar.meta("model_config")?)?;
    let model = GroundingModel::new(config, DType::F32, run.rng_seed)?;
    let dev = Device::Cpu;
    for (name, _) in model.store.vars() {
        let (shape, data) = ar
            .get_f32(name)
            .map_err(|_| Error::Checkpoint(format!("parameter {name} missing from {}", path.display())))?;
        model.store.assign(name, &Tensor::from_vec(data, shape, &dev)?)?;
    }
    let expected = model.store.len();
    let stored = ar.names().filter(|n| !n.starts_with(OPTIM_PREFIX)).count();
    if stored != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds {stored} parameters, model expects {expected}",
            path.display()
        )));
    }
    let mut optimizer = RmsProp::new(run.rmsprop_alpha, run.rmsprop_eps, run.weight_decay);
    for name in ar.names().filter_map(|n| n.strip_prefix(OPTIM_PREFIX)) {
        let (shape, data) = ar.get_f32(&format!("{OPTIM_PREFIX}{name}"))?;
        optimizer
            .square_avg
            .insert(name.to_string(), Tensor::from_vec(data, shape, &dev)?);
    }
    Ok(TrainState {
        epoch: parse(&ar, "epoch")?,
        step: parse(&ar, "step")?,
        history: serde_json::from_str(ar.meta("history")?)?,
        run,
        model,
        optimizer,
    })
}
