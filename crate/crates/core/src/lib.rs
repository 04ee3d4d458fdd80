//! Ternary-weight, 8-bit-activation Vision Transformer inference.
//!
//! Weights are ternarized with an absmean scale, activations are quantized
//! per row with an absmax scale, and the integer matrix products run on
//! 2-bit packed weight tiles. The crate also provides the `.bmvc` model
//! container, the `FTEN` tensor interchange format and the distillation
//! loss used to evaluate students against a teacher.

pub mod attention;
pub mod container;
pub mod distill;
pub mod error;
pub mod ften;
pub mod kernel;
pub mod linear;
pub mod model;
pub mod packing;
pub mod quantize;
pub mod tensor;
pub mod verify;

pub use attention::{AttentionConfig, AttentionMode, AttentionWeights};
pub use container::{convert, ModelContainer, Normalization, TensorSet};
pub use error::{Error, Result};
pub use ften::Tensor;
pub use kernel::{gemm_packed_blocked, gemm_reference, TileGeometry, TrafficCounter};
pub use linear::Linear;
pub use model::{
    forward, Image, ModelConfig, ModelWeights, Precision, PrecisionMap, Role, TernarySet,
};
pub use packing::{pack_ternary, unpack_ternary, PackedWeightTiles};
pub use quantize::{
    absmax_quantize, absmean_quantize, bitlinear_forward, IntAccumulatorMatrix,
    QuantizedActivationMatrix, TernaryWeightMatrix,
};
pub use tensor::{FloatMatrix, FloatVector};
