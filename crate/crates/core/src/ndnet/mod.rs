//! Minimal dense-tensor numerics: MLPs with batch norm and dropout,
//! explicit backpropagation, and Adam.

mod adam;
mod mlp;
mod tensor;

pub use adam::{zip_slots, AdamState, Moments, ParamSlot};
pub use mlp::{
    xavier_init, Activation, BatchNorm, LayerGrads, LayerSpec, Mlp, MlpCache, MlpGrads, MlpLayer,
    Mode, BN_EPS, BN_MOMENTUM,
};
pub use tensor::Tensor2;
