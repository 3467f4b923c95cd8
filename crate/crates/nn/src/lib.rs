//! Conditional consistency network for single-exposure HDR reconstruction,
//! its training losses and optimizer.
//!
//! Layers carry explicit forward caches and hand-written backward passes.
//! Networks are generic over [`Real`]: `f32` for training, `f64` for
//! finite-difference gradient checks.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod net;
pub mod optim;
pub mod real;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use losses::{ElcConfig, LossMix};
pub use optim::{AdamW, AdamWConfig};
pub use net::{c_out, c_skip, ConsistencyNet, EmaState, NetConfig};
pub use real::Real;
pub use tensor::{Act, Param, ParamSet};
