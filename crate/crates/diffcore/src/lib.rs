//! Dense tensors with tape-based reverse-mode differentiation.

pub mod archive;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use archive::{read_archive, write_archive, Archive};
pub use dropout::{site_id, DropoutKey};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, grad_check_params};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
