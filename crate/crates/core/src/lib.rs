//! Numerical engine for a frequency-domain sparse-attention restoration transformer.

pub mod ablation;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod msa;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rmt;
pub mod run;
pub mod spectral;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
