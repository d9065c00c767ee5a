//! Minimal reverse-mode autodiff over dense `f32`/`f64` tensors.
//!
//! The engine is generic over [`Scalar`]; models train in `f32` while gradient
//! checks run the identical code in `f64`. The op set is the one the gaze and
//! super-resolution models need: convolutions, linear layers, batched matmul,
//! softmax, layer/group norm, gather-based layout changes and separable
//! resampling.

pub mod checkpoint;
pub mod graph;
pub mod layout;
pub mod nn;
pub mod optim;
pub mod params;
pub mod resample;
pub mod scalar;

pub use graph::{Conv2dSpec, Gradients, Graph, Var, GATHER_ZERO};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, Param, ParamId, ParamStore};
pub use resample::{resample_matrix, ResampleMethod};
pub use scalar::{DType, Scalar};

pub type ParamStoreF32 = ParamStore<f32>;
pub type ParamStoreF64 = ParamStore<f64>;
pub type GraphF32<'p> = Graph<'p, f32>;
pub type GraphF64<'p> = Graph<'p, f64>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Converts a dense `out x in` f64 matrix to `S`, ready for [`Graph::resample`].
pub fn resample_weights<S: Scalar>(in_len: usize, out_len: usize, method: ResampleMethod) -> std::rc::Rc<[S]> {
    resample_matrix(in_len, out_len, method).into_iter().map(S::of).collect()
}
