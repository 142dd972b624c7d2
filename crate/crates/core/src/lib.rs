//! Post-pre-training of dual-encoder embedding spaces over cached features.
//!
//! The crate is organised around the pieces of a refinement run:
//!
//! - [`store`]: the `EMB1` embedding table format, pairing manifests and class-prompt tables.
//! - [`model`]: residual refinement heads over frozen features and the frozen teacher bank.
//! - [`losses`]: alignment, RaFA, InfoNCE, self-distillation and HyCD kernels with analytic gradients.
//! - [`priors`]: reference-vector samplers for RaFA and moment fitting.
//! - [`trainer`]: the batch loop, AdamW / plain-step optimizers and batch shuffling.
//! - [`metrics`]: modality gap, alignment, uniformity, recall@k, zero-shot accuracy and PCA.
//! - [`synth`]: a seeded generator of paired embeddings with a controllable modality gap.

pub mod losses;
pub mod metrics;
pub mod model;
pub mod priors;
pub mod rng;
pub mod store;
pub mod synth;
pub mod trainer;

pub use losses::{BatchDistribution, LossConfig, LossMode};
pub use metrics::{MetricsReport, RetrievalReport};
pub use model::{HeadPair, RefineHead, TeacherBank};
pub use priors::PriorSpec;
pub use store::{ClassPromptTable, EmbeddingTable, PairedDataset};
pub use trainer::{TrainConfig, TrainReport};
