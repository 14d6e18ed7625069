//! Leap attention with periodic shift for video transformers.
//!
//! The crate is `no_std` and only needs `alloc`. It provides a small dense
//! tensor type, the temporal pairing plans used by leap attention, the three
//! attention layouts (per-frame, joint, paired), temporal channel shifts, a
//! complete encoder stack with hand-written backward passes, closed-form and
//! instrumented MAC accounting, and a finite-difference gradient checker.
//!
//! IO, serialization formats and the command-line harness live in the
//! `laps-cli` crate.
#![no_std]
#![warn(missing_docs)]

extern crate alloc;

pub mod attention;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pairing;
pub mod shift;
pub mod tensor;

pub use attention::{AttentionMode, HeadWeights, MultiHeadWeights};
pub use complexity::{CostReport, MacSink, OpKind};
pub use error::{Error, Result};
pub use model::{Logits, ModelConfig, ModelParams};
pub use pairing::{PairingPlan, PyramidCycle};
pub use shift::{ShiftMode, ShiftSpec};
pub use tensor::{DType, Seed, Tensor};
