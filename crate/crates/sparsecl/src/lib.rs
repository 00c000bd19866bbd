//! Sparse-activation continual learning on Split-MNIST.
//!
//! A from-scratch micro-framework for studying how sparse activation
//! functions (ASH, Hard ASH, Top-K, LWTA) combined with carefully tuned
//! adaptive optimizers resist catastrophic forgetting in class-incremental
//! learning, plus the experiment harness that trains a 784-1000-10 MLP on
//! Split-MNIST, i.i.d. MNIST, and Permuted-MNIST task streams.

pub mod activations;
pub mod data;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;

pub use activations::ActivationSpec;
pub use harness::{RunConfig, RunMode, RunResult};
pub use matrix::Matrix2D;
pub use model::{MlpDims, MlpParams};
pub use optim::{OptimizerAlgo, OptimizerSpec};
pub use rng::RngStream;
