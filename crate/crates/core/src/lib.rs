//! Two-stage generative knowledge-graph completion.
//!
//! A structure-aware encoder scores every candidate tail for a `(head,
//! relation)` query and yields a condition embedding; a conditional
//! denoising diffusion model then generates score vectors from noise under
//! that condition, and candidates are ranked by the generated scores.

pub mod autodiff;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod eval;
pub mod kg;
pub mod train;

pub use autodiff::{Owner, ParameterStore, Tensor};
pub use config::{ConfigError, RunConfig};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use diffusion::{DiffusionConfig, NoiseSchedule};
pub use encoder::{Encoder, EncoderConfig};
pub use eval::{EvalConfig, Metrics, ScoreSource};
pub use kg::{KnowledgeGraph, Split, Triple};
