//! Dual-branch multimodal decision engine over precomputed features.
//!
//! The model fuses three feature families per driving scene — per-object
//! visual features, global scene features, and language descriptions — in
//! two attention branches that share the global context. Each branch emits a
//! per-row class activation table; top-K pooling over rows turns tables into
//! bag-level logits, and a convex blend of the branch logits drives the
//! multi-label (or single-label) decision. A separately trained surrogate
//! refines the text branch's activation table toward relevance targets
//! elicited from a vision-language assistant.
//!
//! Everything is deterministic given a seed: initialization, mini-batch
//! order, dropout, the synthetic data generator, and the binary formats for
//! checkpoints and feature bundles.
//!
//! Module map:
//! - [`tensor`], [`tape`]: dense tensors and reverse-mode differentiation.
//! - [`params`], [`adam`], [`checkpoint`]: parameter storage, optimizer,
//!   persistence.
//! - [`attention`], [`mil`], [`fusion`], [`refine`]: the model itself.
//! - [`trainer`], [`gradcheck`], [`metrics`]: training loops, finite
//!   difference verification, evaluation.
//! - [`data`]: feature bundles, manifests, the object lexicon, and the
//!   synthetic scene generator.
//! - [`vlm`]: chat backends and the enrichment / pseudo-labeling protocols.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod mil;
pub mod numeric;
pub mod params;
pub mod refine;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vlm;

#[cfg(test)]
pub(crate) mod testutil;

pub use adam::{AdamParams, AdamState};
pub use attention::MultiHeadAttention;
pub use checkpoint::{Checkpoint, Phase};
pub use data::bundle::{read_bundle, write_bundle, BundleHeader};
pub use data::manifest::{Dataset, Manifest, SampleEntry, TaskKind};
pub use data::synth::SyntheticSpec;
pub use error::{Error, Result};
pub use fusion::{BranchMode, DatasetDims, DualBranchModel, FeatureBundle, ModelConfig};
pub use gradcheck::{GradcheckConfig, GradcheckReport};
pub use metrics::{Evaluation, F1Report};
pub use mil::{Classifier, DecisionConfig};
pub use params::ParamStore;
pub use refine::{DecisionOutput, PseudoCam, SurrogateModel};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::{RefineConfig, TrainConfig, TrainedMain, TrainedSurrogate};
pub use vlm::{ChatTranscript, EnrichmentResult, VlmEndpointConfig};
