//! Dense-tensor network engine: conv-bn-relu blocks, a pooled classifier
//! head, partition-aware reverse-mode gradients and plain SGD.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod exec;
pub mod head;
pub mod model;

#[cfg(test)]
pub(crate) mod testing;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnMode, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d_backward, conv2d_backward_input, conv2d_backward_params, conv2d_forward, ConvGeometry};
pub use exec::{
    all_trained_plan, model_backward, model_forward, model_infer, predict, update_running_stats, BlockCache,
    BlockPlan, ForwardCache, FrozenBlock, Gradients, Phase,
};
pub use head::{
    global_avg_pool, output_block_backward, output_block_backward_input, output_block_forward,
    softmax_cross_entropy,
};
pub use model::{
    sgd_step, sgd_update_block, BlockParams, BlockShape, BlockSpec, BnParams, ConvParams, ConvSpec, FcParams,
    ModelParams, ModelTopology, OutputSpec,
};
