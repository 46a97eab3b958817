//! Sequence parallelism for linear attention on a simulated multi-rank
//! runtime.
//!
//! * [`numerics`]: dense matrices and the state reductions.
//! * [`oracle`]: single-rank reference attention and finite differences.
//! * [`comm`]: the rank runtime with point-to-point, all-gather and ledgers.
//! * [`lasp2`]: one all-gather of memory states per pass.
//! * [`lasp1`]: the ring baseline.
//! * [`standard_sp`]: softmax attention with gathered keys and values.
//! * [`hybrid`]: mixed linear/softmax layer stacks.
//! * [`costmodel`]: closed-form step and traffic counts.

pub mod comm;
pub mod costmodel;
pub mod data;
pub mod driver;
pub mod error;
pub mod hybrid;
pub mod lasp1;
pub mod lasp2;
pub mod numerics;
pub mod oracle;
pub mod sequence;
pub mod standard_sp;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real};
pub use sequence::{GradientBundle, Qkv, SequenceBatch};
