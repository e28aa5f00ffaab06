//! Configuration, training, checkpoints, evaluation, visualization and the
//! oracle gate.

pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod oracle;
pub mod train;
pub mod visualize;

use serde::{Deserialize, Serialize};

use crate::body_language::PosEmbed;
use crate::encoders::ProviderRegistry;
use crate::error::{Error, Result};
use crate::fixtures::SplitSizes;
use crate::losses::LossWeights;
use crate::model::{Ablation, ModelConfig};
use crate::relation::Anchors;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "EMBREF_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Rmsprop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorChoice {
    /// Square priors of 0.1, 0.25 and 0.5 of the image width.
    #[default]
    Default,
    /// k-means over training box sizes.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub grid: usize,
    pub channels: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_tokens: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub lr: f64,
    pub lr_halving_every: usize,
    /// Linear ramp of the learning rate over the first optimizer steps; 0
    /// disables it.
    pub warmup_steps: usize,
    pub total_epochs: usize,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
    pub rng_seed: u64,
    pub anchors: AnchorChoice,
    pub body_pos_embed: PosEmbed,
    pub gesture_gate_includes_sender: bool,
    pub providers: ProviderRegistry,
    pub flip_augmentation: bool,
    /// Caps optimizer steps per epoch; `Some(0)` walks the schedule only.
    pub max_steps_per_epoch: Option<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::paper()
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        RunConfig {
            image_size: 512,
            grid: 32,
            channels: 256,
            transformer_layers: 2,
            heads: 8,
            ff_mult: 4,
            max_tokens: 8,
            batch_size: 16,
            optimizer: Optimizer::Rmsprop,
            weight_decay: 5e-4,
            lr: 1e-4,
            lr_halving_every: 10,
            warmup_steps: 0,
            total_epochs: 100,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            loss_weights: LossWeights::default(),
            ablation: Ablation::FULL,
            rng_seed: 0,
            anchors: AnchorChoice::Default,
            body_pos_embed: PosEmbed::Learned,
            gesture_gate_includes_sender: true,
            providers: ProviderRegistry::default(),
            flip_augmentation: true,
            max_steps_per_epoch: None,
            train_samples: SplitSizes::PAPER.train,
            test_samples: SplitSizes::PAPER.test,
        }
    }

    /// Desk-scale settings used by tests and the default CLI.
    pub fn ci() -> Self {
        RunConfig {
            image_size: 128,
            grid: 8,
            channels: 64,
            transformer_layers: 1,
            batch_size: 8,
            total_epochs: 30,
            lr: 1e-3,
            warmup_steps: 100,
            anchors: AnchorChoice::Auto,
            train_samples: SplitSizes::CI.train,
            test_samples: SplitSizes::CI.test,
            ..RunConfig::paper()
        }
    }

    /// Learning rate for a zero-based epoch: halved every
    /// `lr_halving_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch / self.lr_halving_every.max(1);
        self.lr * 0.5f64.powi(halvings as i32)
    }

    /// Learning rate for global optimizer step `step` (zero-based) in `epoch`.
    pub fn step_lr(&self, epoch: usize, step: u64) -> f64 {
        let lr = self.lr_at(epoch);
        if (step as usize) < self.warmup_steps {
            lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("grid", self.grid),
            ("channels", self.channels),
            ("transformer_layers", self.transformer_layers),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("max_tokens", self.max_tokens),
            ("batch_size", self.batch_size),
            ("lr_halving_every", self.lr_halving_every),
            ("total_epochs", self.total_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let reals = [
            ("lr", self.lr),
            ("rmsprop_alpha", self.rmsprop_alpha),
            ("rmsprop_eps", self.rmsprop_eps),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.ablation.validate()
    }

    pub fn model_config(&self, vocab_size: usize, anchors: Anchors) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            grid: self.grid,
            channels: self.channels,
            transformer_layers: self.transformer_layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
            max_tokens: self.max_tokens,
            vocab_size,
            anchors,
            body_pos_embed: self.body_pos_embed,
            gesture_gate_includes_sender: self.gesture_gate_includes_sender,
            providers: self.providers.clone(),
            ablation: self.ablation,
        }
    }
}
