//! State-of-charge estimation from windows of voltage, current and
//! temperature with a multi-branch 1D convolutional network.
//!
//! * [`numerics`]: `f64` tensors and the seeded generator.
//! * [`layers`]: conv / pool / dense / activation / dropout kernels.
//! * [`model`]: the estimator, its gradients and the `CGM1` file format.
//! * [`data`]: drive-cycle ingestion, labels, normalization, noise, windows
//!   and recipes.
//! * [`training`]: loss, metrics, Adam, early stopping and weight transfer.
//! * [`synth`]: synthetic cells and drive cycles.
//! * [`cli`]: the `soc-cnn` command line.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use model::{ArchKind, ArchSpec, CnnModel};
pub use numerics::{Rng, Tensor};
