//! Variable-length decoding for masked diffusion language models.
//!
//! The engine runs an iterative denoising loop over a masked generation
//! region and resizes that region on the fly from an EOS-density signal
//! read off the model's own predictions. Model access goes through
//! [`PredictionProvider`]; synthetic oracles and an out-of-process bridge
//! are provided.

pub mod bridge;
pub mod config;
pub mod controller;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod oracle;
pub mod plot;
pub mod signal;
pub mod strategy;
pub mod sweep;
pub mod trace;
pub mod vocab;

pub use config::{DecodeConfig, SignalKind, StrategyKind, ThresholdPreset};
pub use controller::{ActionKind, EFactorFamily, EFactorSpec, LengthAction};
pub use error::{Error, ProviderError, Result};
pub use kernel::{PositionPrediction, PredictionProvider};
pub use metrics::MetricsReport;
pub use strategy::{run, RunResult, TwoStageConfig};
pub use trace::{RunTrace, StepRecord, Termination};
pub use vocab::{SequenceState, Slot, TokenId, Vocabulary};
