//! A sequence-encoder laboratory built around partitioned single-headed
//! attention.
//!
//! Sequence order enters the encoder not through position embeddings but
//! through a constant mask over relative offsets: a Bernstein-polynomial
//! partition of unity assigns every offset a soft mixture of parts, and each
//! attention head is biased toward its own part ([`partition`]). On top of
//! that mask the multi-headed softmax can be collapsed to a single
//! L2-normalized sigmoid score sheet with no key projection, plus learnt
//! partition embeddings that contribute a score bias and a value term
//! ([`attention`]). The full model, the ablation rungs between it and the
//! position-embedding baseline, and two relative-position baselines (RPE,
//! RAB) all assemble from the same pieces ([`encoder`]).
//!
//! Everything runs on a small dense-tensor core with reverse-mode
//! differentiation ([`tensor`], [`graph`]) verified against central finite
//! differences ([`gradcheck`]). A desk-scale harness pretrains and finetunes
//! the variants deterministically ([`corpus`], [`masking`], [`optim`],
//! [`train`], [`synthetic`]), and analytic counters reproduce the reference
//! parameter accounting and cost structure ([`benchkit`]).
//!
//! Values are immutable once built; graphs are constructed and
//! differentiated on a single logical thread, and the partition-mask cache
//! is safe for concurrent readers. Run the `shatter` binary for the CLI, or
//! start from the runnable examples (`cargo run --example partition_plot`).

pub mod attention;
pub mod benchkit;
pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod masking;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use attention::{AttentionVariant, PadMask};
pub use encoder::{ClassifyStrategy, Model, ModelConfig};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use partition::PartitionSpec;
pub use tensor::{Scalar, Tensor};
