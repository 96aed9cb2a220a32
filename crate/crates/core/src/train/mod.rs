//! Two-stage training: the encoder learns from binary cross-entropy alone,
//! then the denoiser learns to reconstruct the frozen encoder's scores.

pub mod checkpoint;
pub mod loss;
mod stage1;
mod stage2;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{OptimError, TensorError};
use crate::denoiser::DenoiserError;
use crate::diffusion::DiffusionError;
use crate::encoder::EncoderError;
use crate::eval::{EvalError, EvaluateError, Metrics};
use crate::kg::KgError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointError, CheckpointFile, Precision};
pub use loss::{bce_loss, bce_value, kl_loss, kl_value, label_vector, KlKind};
pub use stage1::{stage1_train, Stage1Outcome};
pub use stage2::{stage2_train, Stage2Outcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error("{stage} training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("encoder parameters changed during denoiser training")]
    EncoderMutated,
    #[error("no training queries")]
    NoQueries,
}

/// Optimization settings for the encoder stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub label_smoothing: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 1e-5,
            grad_clip: 0.0,
            label_smoothing: 0.0,
        }
    }
}

/// Optimization settings and ablations for the denoiser stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub grad_clip: f64,
    pub label_smoothing: f64,
    pub no_bce: bool,
    pub no_kl: bool,
    pub kl_kind: KlKind,
    /// Noise draws per query and epoch.
    pub samples_per_query: usize,
    /// Dev evaluation of generated scores every this many epochs (and at
    /// the last); 0 disables it.
    pub eval_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 1e-5,
            grad_clip: 0.0,
            label_smoothing: 0.0,
            no_bce: false,
            no_kl: false,
            kl_kind: KlKind::Softmax,
            samples_per_query: 1,
            eval_every: 0,
        }
    }
}

fn check_common(epochs: usize, batch: usize, lr: f64, min_lr: f64, smoothing: f64) -> Result<(), TrainError> {
    if epochs == 0 || batch == 0 {
        return Err(TrainError::Config("epochs and batch_size must be positive".into()));
    }
    if !(lr > 0.0) || min_lr < 0.0 || min_lr > lr {
        return Err(TrainError::Config(format!("need 0 <= min_lr <= lr and lr > 0, got lr={lr} min_lr={min_lr}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(TrainError::Config(format!("label_smoothing must lie in [0, 1), got {smoothing}")));
    }
    Ok(())
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(self.epochs, self.batch_size, self.lr, self.min_lr, self.label_smoothing)
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(self.epochs, self.batch_size, self.lr, self.min_lr, self.label_smoothing)?;
        if self.no_bce && self.no_kl {
            return Err(TrainError::Config("no_bce and no_kl together leave no loss".into()));
        }
        if self.samples_per_query == 0 {
            return Err(TrainError::Config("samples_per_query must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: &'static str,
    pub loss: f64,
    pub bce: Option<f64>,
    pub kl: Option<f64>,
    pub dev: Option<Metrics>,
    pub lr: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tstage\tloss\tbce\tkl\tdev_mr\tdev_hits1\tdev_hits3\tdev_hits10\tlr";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        write!(f, "{}\t{}\t{:.6}\t{}\t{}", self.epoch, self.stage, self.loss, opt(self.bce), opt(self.kl))?;
        match &self.dev {
            Some(m) => write!(f, "\t{:.4}\t{:.4}\t{:.4}\t{:.4}", m.mr, m.hits1, m.hits3, m.hits10)?,
            None => write!(f, "\t-\t-\t-\t-")?,
        }
        write!(f, "\t{:.3e}", self.lr)
    }
}

/// Stable per-(seed, epoch) stream id.
pub(crate) fn epoch_seed(seed: u64, stage: u64, epoch: usize) -> u64 {
    seed ^ (stage << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
