//! Non-DAU layers: max pooling, spatial batch normalisation, dense layers
//! and the softmax cross-entropy loss.

mod batchnorm;
mod dense;
mod loss;
mod pool;

pub use batchnorm::{BatchNorm, BnCache, BnGrads, BN_EPS, BN_MOMENTUM};
pub use dense::{dense_backward, dense_forward, glorot_limit};
pub use loss::{accuracy, softmax, softmax_xent};
pub use pool::{maxpool_backward, maxpool_forward, PoolIndices};
