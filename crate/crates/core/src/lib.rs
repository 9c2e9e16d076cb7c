//! Complex-valued neural network building blocks.
//!
//! The crate is layered bottom-up:
//!
//! * [`ctensor`]: split-plane complex tensors and the `.cvt` file format.
//! * [`autodiff`]: tape-based reverse mode over both real degrees of freedom.
//! * [`cvops`]: matmul and convolution kernels, naive (4 real products) and
//!   Gauss (3 real products) compositions.
//! * [`layers`], [`activations`], [`masks`], [`normalization`],
//!   [`attention`], [`manifold`], [`losses`]: the network catalogue.
//! * [`trainer`]: config-driven models, synthetic data, optimizers,
//!   checkpoints, and the gradient-check and benchmark drivers used by the CLI.

pub mod activations;
pub mod attention;
pub mod autodiff;
pub mod ctensor;
pub mod cvops;
pub mod error;
pub mod layers;
pub mod losses;
pub mod manifold;
pub mod masks;
pub mod module;
pub mod normalization;
pub mod trainer;

pub use autodiff::{Parameter, Tape, Var, Variable};
pub use ctensor::{CTensor, DType};
pub use cvops::{ConvSpec, MulCounter, Path};
pub use error::{Error, Result};
pub use module::{Ctx, Module};
