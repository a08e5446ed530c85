//! Differentially private user-based collaborative filtering.
//!
//! The crate provides three recommenders that share one prediction stage and
//! differ only in how the neighbor set of a target user is chosen:
//!
//! * [`recommend::run_cf`] picks the top-N users by absolute Pearson similarity.
//! * [`recommend::run_dpcf`] picks N users one at a time, each with its own
//!   exponential mechanism at budget `epsilon / N`.
//! * [`recommend::run_kdpcf`] clusters users with k-means, resizes the target
//!   user's category into `[c_min, c_max]`, and draws the whole neighbor set
//!   with a single exponential mechanism at budget `epsilon`.
//!
//! The set-level exponential mechanism is sampled exactly through elementary
//! symmetric polynomials ([`dp_sampler::sample_neighbor_set`]); a brute-force
//! enumeration ([`dp_sampler::enumerate_distribution`]) and an exact privacy
//! audit ([`dp_sampler::audit_dp`]) check it at small scale.

pub mod clustering;
pub mod data;
pub mod dp_sampler;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod recommend;
pub mod rng;
pub mod similarity;

pub use clustering::{CategoryBounds, Centroid, Clustering};
pub use data::{RatingMatrix, RatingRecord, SplitDataset};
pub use dp_sampler::{NeighborSet, PrivacyAccountant, SetDistribution, WeightVector};
pub use error::{Error, Result};
pub use eval::{ExperimentConfig, ExperimentRow, Metrics, Scheme};
pub use recommend::{KdpcfParams, Recommendation, RecommendationList};
pub use similarity::{SimilarityTable, SimilarityVector};

pub type UserId = u32;
pub type ItemId = u32;
