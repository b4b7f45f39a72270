//! Forward and backward kernels for every layer the networks use.
//!
//! Each layer comes as a free forward function returning its output plus the
//! state its backward needs, and a backward function consuming that state.

pub mod activation;
pub mod batchnorm;
pub mod concat;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{
    batchnorm3d_backward, batchnorm3d_forward, batchnorm3d_inference, BatchNorm3dParams, BatchNormCache,
    BatchNormGrads, NormMode,
};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{conv3d, conv3d_backward, conv3d_forward, Conv3dCache, Conv3dGrads, Conv3dParams};
pub use linear::{linear, linear_backward, LinearGrads, LinearParams};
pub use loss::{softmax, softmax_cross_entropy, softmax_rows};
pub use pool::{
    avgpool3d, avgpool3d_backward, global_avg_pool, global_avg_pool_backward, maxpool3d_backward,
    maxpool3d_forward, MaxPoolCache, PoolParams,
};
