//! Deep functional multiple-index models over discretized curves.
//!
//! The crate is `no_std` (with `alloc`): everything here is pure in-memory
//! computation, so it can run anywhere an allocator exists. File IO, the
//! command line, and on-disk formats live in the companion `dfmim-cli` crate.
//!
//! Module map:
//! - [`fda`]: grids, curves, trapezoidal inner products, benchmark
//!   coefficient functions.
//! - [`sim`]: Gaussian-process covariate simulators and scenario datasets.
//! - [`dsp`]: spectrogram / Mel spectrogram / MFCC chain and chunking.
//! - [`tensor`]: the dense row-major array type shared by all modules.
//! - [`autodiff`]: tape-based reverse-mode differentiation over tensors.
//! - [`nn`]: dense layers, self-attention, transformer encoder, Adam,
//!   focal and MSE losses.
//! - [`model`]: the multiple-index model itself (transformation module,
//!   adaptive basis layer, fully connected head).
//! - [`train`]: mini-batch training loops and evaluation.
//! - [`metrics`]: RMSE and confusion-matrix accuracies.
//! - [`check`]: finite-difference gradient verification.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod autodiff;
pub mod check;
pub mod dsp;
pub mod fda;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use fda::{Curve, Grid, MultiCurve};
pub use model::{DfmimConfig, DfmimModel, Task};
pub use tensor::Tensor;
pub use train::TrainReport;
