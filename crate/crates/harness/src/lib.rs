//! Experiment driver: configuration, two-stage training, one-step
//! inference, evaluation and ablations.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod train;

pub use config::{ElcVariant, RunConfig};
pub use error::{HarnessError, Result};
pub use train::{train, TrainLog, TrainState, Trainer};
pub use infer::{Reconstructor, Terminal};
