//! Displaced aggregation units: convolution layers whose kernels are sums of
//! Gaussian blobs with learnable positions.

pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dau;
pub mod data;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod nn;
pub mod network;
pub mod optim;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
