//! Fully attentional (FLA) and baseline non-local attention blocks as
//! differentiable operators over `C×H×W` feature maps.
//!
//! * [`tensor`]: dense `f64` tensors, primitives, FLT1 files, seeded RNG.
//! * [`autograd`]: tape-based reverse mode and finite-difference checks.
//! * [`blocks`]: Channel NL, Spatial NL, FLA, Dual NL and CS NL.
//! * [`oracle`]: independent loop implementations of every block.
//! * [`cost`]: analytic FLOPs and activation-memory model.
//! * [`train`]: small synthetic gradient-descent tasks.
//! * [`verify`]: the verification suites run by the CLI.

pub mod autograd;
pub mod blocks;
pub mod cost;
mod error;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
