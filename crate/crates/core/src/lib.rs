//! Binary CNN toolkit.
//!
//! Every convolution that lowers to a matrix product runs on bit-packed ±1
//! operands with XNOR-popcount arithmetic; spatial mixing (depthwise 3x3),
//! batch norm, PReLU and the classifier stay real. The crate covers:
//!
//! - [`bitcore`]: packed tensors, `bin_dot` / `bin_gemm`, lowering helpers
//! - [`blocks`]: 1x1 binary convolution modules with `P` parallel branches,
//!   the depthwise module and the common building block
//! - [`network`]: config, model construction, inference and the model file
//! - [`training`]: straight-through sign gradients and two-step training
//! - [`ufa`]: the constructive 3-layer binary function approximator
//! - [`complexity`]: parameter and operation accounting
//! - [`cli`]: the `bcnn` command line
//!
//! The `examples/` directory of this crate has one runnable program per
//! capability; start there.

pub mod bitcore;
pub mod blocks;
pub mod cli;
pub mod complexity;
mod error;
pub mod network;
pub mod training;
pub mod ufa;

pub use error::{Error, Result};
