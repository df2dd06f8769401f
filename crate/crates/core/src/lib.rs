//! Label embedding networks.
//!
//! A classifier is given two output heads over one hidden representation.
//! The prediction head `z1` is trained against the one-hot label and
//! against a learned soft target: the softmax of a per-label row of an
//! m×m label embedding. The teacher head `z2` sees the hidden vector only
//! through a stop-gradient barrier; its tempered output teaches the
//! embedding which labels resemble each other.
//!
//! The crate carries its own small reverse-mode tensor core ([`Tape`],
//! [`Tensor`]), the dual-head models, MNIST ingestion, an Adam trainer and
//! tools to inspect learned embeddings.

pub mod analysis;
mod conv;
pub mod data;
pub mod embedding;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod optim;
mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use embedding::{CompressedEmbedding, FullEmbedding, LabelEmbedding};
pub use error::{Error, Result};
pub use model::{DualHeadModel, ModelConfig, ModelKind};
pub use objective::{LossBreakdown, ObjectiveConfig};
pub use trainer::{Mode, TrainConfig};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
