//! Epoch loop with flip augmentation, per-step metrics and per-epoch
//! checkpoints. Batch order for epoch `e` depends only on `(seed, e)`, so a
//! run resumed from an epoch checkpoint replays the same steps.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixtures::{horizontal_flip, DatasetReader, SceneSample, Split, Vocabulary};
use crate::losses::LossValues;
use crate::model::{batch_inputs, batch_targets, prepare_sample, GroundingModel, ModelConfig, PreparedSample};
use crate::relation::Anchors;
use crate::runner::checkpoint::{load_checkpoint, save_checkpoint, EpochRecord, TrainState};
use crate::runner::optim::RmsProp;
use crate::runner::{AnchorChoice, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct TrainData {
    pub original: Vec<PreparedSample>,
    /// Mirrored copies, index-aligned with `original`.
    pub flipped: Option<Vec<PreparedSample>>,
}

impl TrainData {
    pub fn new(samples: &[SceneSample], cfg: &ModelConfig, vocabulary: &Vocabulary, flip: bool) -> Result<Self> {
        let original = samples.iter().map(|s| prepare_sample(s, cfg)).collect::<Result<Vec<_>>>()?;
        let flipped = if flip {
            Some(
                samples
                    .iter()
                    .map(|s| prepare_sample(&horizontal_flip(s, vocabulary), cfg))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(TrainData { original, flipped })
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }
}

#[derive(Serialize)]
struct MetricRecord {
    kind: &'static str,
    step: u64,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    losses: LossValues,
}

pub fn resolve_anchors(run: &RunConfig, train: &[SceneSample]) -> Result<Anchors> {
    match run.anchors {
        AnchorChoice::Default => Ok(Anchors::default_for(run.image_size)),
        AnchorChoice::Auto => {
            let sizes: Vec<(f64, f64)> = train.iter().map(|s| (s.gt_box.width(), s.gt_box.height())).collect();
            Anchors::kmeans(&sizes, 3)
        }
    }
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl TrainState {
    pub fn fresh(run: RunConfig, model_config: ModelConfig) -> Result<Self> {
        run.validate()?;
        let model = GroundingModel::new(model_config, DType::F32, run.rng_seed)?;
        let optimizer = RmsProp::new(run.rmsprop_alpha, run.rmsprop_eps, run.weight_decay);
        Ok(TrainState {
            run,
            model,
            optimizer,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn train_step(&mut self, batch: &[&PreparedSample], lr: f64) -> Result<LossValues> {
        let dev = Device::Cpu;
        let cfg = &self.model.config;
        let inputs = batch_inputs(batch, cfg, DType::F32, &dev)?;
        let targets = batch_targets(batch, cfg, DType::F32, &dev)?;
        let out = self.model.forward(&inputs)?;
        let step = self.step;
        let bundle = self
            .model
            .losses(&out, &targets, &self.run.loss_weights)
            .map_err(|e| match e {
                Error::NonFinite { what } => Error::NonFinite {
                    what: format!("{what} at step {step}"),
                },
                other => other,
            })?;
        let values = bundle.values()?;
        let grads = bundle.total.backward()?;
        self.optimizer.step(&self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(values)
    }

    /// Runs epoch `self.epoch`, logging every step to `log`.
    pub fn run_epoch(&mut self, data: &TrainData, log: &mut dyn Write) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = self.run.lr_at(epoch);
        let mut rng = epoch_rng(self.run.rng_seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let picks: Vec<&PreparedSample> = order
            .iter()
            .map(|&i| match &data.flipped {
                Some(f) if rng.random_bool(0.5) => &f[i],
                _ => &data.original[i],
            })
            .collect();
        let cap = self.run.max_steps_per_epoch.unwrap_or(usize::MAX);
        let mut sum = LossValues::default();
        let mut steps = 0;
        for batch in picks.chunks(self.run.batch_size).take(cap) {
            let step_lr = self.run.step_lr(epoch, self.step);
            let v = self.train_step(batch, step_lr)?;
            let record = MetricRecord {
                kind: "step",
                step: self.step,
                epoch,
                lr: step_lr,
                losses: v,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(Path::new(METRICS_FILE), e))?;
            sum.loss_yolo += v.loss_yolo;
            sum.loss_div += v.loss_div;
            sum.loss_reg += v.loss_reg;
            sum.loss_attn += v.loss_attn;
            sum.total += v.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mean = LossValues {
            loss_yolo: sum.loss_yolo / n,
            loss_div: sum.loss_div / n,
            loss_reg: sum.loss_reg / n,
            loss_attn: sum.loss_attn / n,
            total: sum.total / n,
        };
        let record = MetricRecord {
            kind: "epoch",
            step: self.step,
            epoch,
            lr,
            losses: mean,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(Path::new(METRICS_FILE), e))?;
        let rec = EpochRecord { epoch, lr, steps, mean };
        self.history.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Trains on the dataset's train split, writing `checkpoint.safetensors` and
/// `metrics.jsonl` under `out_dir`. With `resume`, continues from an
/// existing checkpoint there (its config wins except for `total_epochs`).
pub fn train(run: &RunConfig, dataset_root: &Path, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    run.validate()?;
    log::info!("run config: {}", serde_json::to_string(run)?);
    let reader = DatasetReader::open(dataset_root)?;
    let samples = reader.load_split(Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut state = if resume && ckpt_path.exists() {
        let mut s = load_checkpoint(&ckpt_path)?;
        s.run.total_epochs = run.total_epochs;
        log::info!("resuming from epoch {}", s.epoch);
        s
    } else {
        let anchors = resolve_anchors(run, &samples)?;
        TrainState::fresh(run.clone(), run.model_config(reader.vocabulary().len(), anchors))?
    };
    let data = TrainData::new(&samples, &state.model.config, reader.vocabulary(), state.run.flip_augmentation)?;
    let file = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    while state.epoch < state.run.total_epochs {
        let rec = state.run_epoch(&data, &mut log)?;
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {} lr {:.3e} total {:.4} (yolo {:.4}, div {:.4}, reg {:.4}, attn {:.4})",
            rec.epoch,
            rec.lr,
            rec.mean.total,
            rec.mean.loss_yolo,
            rec.mean.loss_div,
            rec.mean.loss_reg,
            rec.mean.loss_attn
        );
        save_checkpoint(&state, &ckpt_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        history: state.history,
    })
}

/// Repeats optimizer steps on one fixed batch at the first epoch's learning
/// rate (after warmup) and returns the losses before each step.
pub fn overfit(state: &mut TrainState, batch: &[&PreparedSample], steps: usize) -> Result<Vec<LossValues>> {
    (0..steps)
        .map(|_| {
            let lr = state.run.step_lr(0, state.step);
            state.train_step(batch, lr)
        })
        .collect()
}
