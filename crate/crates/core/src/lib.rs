//! Progressive parameter-efficient adaptation for self-supervised monocular
//! depth estimation, built on a small reverse-mode differentiation engine.

pub mod adapters;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
