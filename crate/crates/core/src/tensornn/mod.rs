//! Tensor primitives and layers for 3D fully convolutional networks.
//!
//! Every forward function is pure given its inputs; backward functions take
//! the forward inputs (or caches) and the upstream gradient.

mod activation;
mod conv;
mod dropout;
#[cfg(test)]
pub(crate) mod gradcheck;
mod norm;
mod optim;
mod pool;
mod tensor;

pub use activation::{
    cross_entropy, relu_backward, relu_forward, softmax_channels, PROBABILITY_FLOOR,
};
pub use conv::{
    conv3d_backward, conv3d_forward, conv_output_spatial, deconv3d_backward, deconv3d_forward,
    deconv_output_spatial, fan_in, ConvGrads, ConvParams,
};
pub use dropout::{dropout_backward, dropout_forward, DEFAULT_DROPOUT};
pub use norm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormState,
    update_running_stats, BN_EPSILON, BN_MOMENTUM,
};
pub use optim::{init_uniform, sgd_step};
pub use pool::{maxpool3d_backward, maxpool3d_forward, pooled_spatial, PoolOutput};
pub use tensor::{concat_channels, crop_spatial, split_channels, uncrop_spatial, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
