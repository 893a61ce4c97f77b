//! Differentiable numerical core: dense tensors, a dynamically recorded
//! reverse-mode tape, Adam with a warmup/linear-decay schedule, and the
//! `CRL1` checkpoint container.
//!
//! Every model in this crate is generic over [`Float`] so that training can
//! run in `f32` while gradient verification replays the same graph in `f64`.

mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod store;
mod tensor;

use std::fmt::{Debug, Display};

pub use checkpoint::{decode_entries, encode_entries, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{Graph, Var, MASK_FILL};
pub use optim::{global_grad_norm, Adam, AdamConfig};
pub use store::{init_normal, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

/// Scalar type the tape is generic over (`f32` for training, `f64` for replay).
pub trait Float:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Float for f32 {}
impl Float for f64 {}
