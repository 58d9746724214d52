//! NL-CSNet: block-based compressed sensing with non-local attention in the
//! measurement domain and a multi-scale non-local reconstruction network,
//! built on an internal reverse-mode differentiation core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod measurement;
pub mod metrics;
pub mod model;
pub mod msnl;
pub mod optim;
pub mod pgm;
pub mod sampling;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
