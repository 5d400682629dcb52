//! Fusion, retrieval and evaluation engine for composed image retrieval over
//! precomputed embedding bundles.
//!
//! A bundle holds per-query channels (reference image, fine-grained prompt,
//! modified captions) and per-gallery channels (image, captions). Queries and
//! gallery items are fused by fixed convex weights, ranked by cosine
//! similarity, and scored with mAP@k and Recall@k.

pub mod bundle;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod matrix;
pub mod metrics;
pub mod report;
pub mod search;

pub use bundle::{load_bundle, read_bundle, synth_bundle, write_bundle, Bundle, Protocol, SynthSpec};
pub use error::{Error, Result};
pub use evalkit::{evaluate, RunConfig};
pub use fusion::{Channel, ChannelSet, FusionWeights};
pub use matrix::{CaptionTensor, Matrix};
pub use metrics::{Metric, MetricKey};
pub use report::{EvalReport, ExclusionPolicy};
