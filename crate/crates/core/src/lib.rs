//! Semi-dense active stereo disparity refinement.
//!
//! The pipeline: a coarse-to-fine ZNCC block matcher produces an integer raw
//! disparity map and a truncated cost volume; a small Bayesian convolutional
//! network jointly regresses a subpixel correction and a per-pixel outlier
//! probability; training uses a heteroscedastic variational loss with an
//! adaptive schedule; the evaluation suite reports validated-pixel metrics
//! and sparsification curves.

pub mod autodiff;
pub mod bayes;
pub mod checkpoint;
pub mod datagen;
pub mod eval;
pub mod imageio;
pub mod matcher;
pub mod refiner;
pub mod trainer;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use tensor::{Shape, Tensor};
