//! Differentiable building blocks shared by every encoder.

mod attention;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use attention::attention;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use gradcheck::{finite_difference_at, finite_difference_grad, relative_error};
pub use graph::{gelu, AttnLayout, AttnMask, Gradients, Graph, Var};
pub use layers::{embedding_table, LayerNorm, Linear, Mlp, Transformer, TransformerConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

/// True when `STOA_TEST_F64=1`: optimizer updates keep full 64-bit
/// parameters instead of rounding them to f32.
pub fn f64_test_mode() -> bool {
    std::env::var("STOA_TEST_F64").is_ok_and(|v| v == "1")
}
