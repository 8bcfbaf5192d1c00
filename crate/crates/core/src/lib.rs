//! Learned compression for plane-factorized radiance fields.
//!
//! A scene is a set of six feature planes plus axis vectors and a small
//! color MLP. Each plane is pushed through a re-headed learned image codec,
//! entropy coded with a hyperprior, and multiplexed with the remaining
//! parameters into a single `.nrfc` container.

pub mod autograd;
pub mod bitstream;
pub mod codec;
pub mod error;
pub mod io;
pub mod plane_field;
pub mod renderer;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
