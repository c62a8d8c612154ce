//! Zero-shot scene change detection.
//!
//! Given two images of the same place taken at different times, the pipeline
//! produces a binary change mask without any change-detection training:
//!
//! 1. **Registration** (optional) – keypoint + RANSAC homography that warps the
//!    second image into the first image's frame.
//! 2. **Pseudo-mask** – per-head cosine correlation of attention facets
//!    intercepted from a frozen encoder, MAD-based normalization and a
//!    skewness-adaptive threshold.
//! 3. **Matching** – class-agnostic mask proposals from both images are kept
//!    when they overlap the pseudo-mask (geometric intersection) and their
//!    cross-time mask embeddings disagree (semantic similarity).
//!
//! Every stage is symmetric in its two inputs, so swapping the temporal order
//! yields the identical mask when registration is disabled.
//!
//! The feature/proposal source is abstracted by [`backbone::Backend`]. A
//! deterministic, weight-free [`backbone::SyntheticBackend`] ships with this
//! crate; the pretrained-encoder adapter lives in a separate crate.
//!
//! The [`bench`] module implements the evaluation protocol: both temporal
//! orders are scored, temporal consistency is reported, and results are
//! rendered as JSON, CSV or a markdown table.

pub mod backbone;
pub mod bench;
pub mod config;
mod error;
pub mod data;
pub mod fixtures;
pub mod image;
pub mod matching;
pub mod metrics;
pub mod pseudomask;
pub mod registration;

pub use backbone::{
    Backend, EmbeddingMap, FacetKind, FacetStack, MaskEmbedding, MaskProposal, ProposerConfig,
    SyntheticBackend,
};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use image::{BinaryMask, Image};
pub use matching::{detect_changes, detect_changes_detailed, ChangeMask, Detection, MatchParams};
pub use pseudomask::{PseudoMask, SimilarityMap, ThresholdParams};
pub use registration::{RansacConfig, RegistrationMode, Transform};
