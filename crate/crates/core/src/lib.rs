//! Building blocks for a three-task dermoscopy pipeline: lesion
//! segmentation, superpixel attribute detection and diagnosis
//! classification.
//!
//! The deep networks are not part of this crate. Every stage that would call
//! a CNN goes through [`backend::PredictorSpec`] instead, so the surrounding
//! procedures (splits, augmentation, post-processing, schedules, ensembling
//! and scoring) can be run and checked on small synthetic data.

// Parameter checks are written as `!(lo <= hi)` on purpose: NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod backend;
pub mod config;
pub mod ensemble;
pub mod imgops;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod prediction;
pub mod superpixel;
pub mod synth;
pub mod trainsched;

pub use imgops::{BinaryMask, ProbMask, RasterImage};
pub use prediction::PredictionVector;

/// Leaderboard figures reported for the original submissions. They document
/// what the full-scale system achieved; nothing in this crate reproduces them.
pub mod reference {
    /// Threshold Jaccard of the three segmentation submissions.
    pub const SEGMENTATION_THRESHOLD_JACCARD: [f64; 3] = [0.694, 0.686, 0.728];
    /// Mean attribute Jaccard of the three attribute submissions.
    pub const ATTRIBUTE_JACCARD: [f64; 3] = [0.344, 0.337, 0.323];
    /// Balanced multi-class accuracy of the three diagnosis submissions.
    pub const DIAGNOSIS_BALANCED_ACCURACY: [f64; 3] = [0.732, 0.725, 0.803];
}
