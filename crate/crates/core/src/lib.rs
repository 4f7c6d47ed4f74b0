//! Detection of spurious correlations in image classifiers.
//!
//! A per-class gradient-boosted surrogate learns to predict whether the
//! classifier is right from pooled gradients and channel means. Exact tree
//! Shapley values of that surrogate weight the activation maps into an
//! RF-CAM; instances whose RF-CAM disagrees with their Grad-CAM are flagged
//! for review.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod features;
pub mod fixtures;
pub mod gbdt;
pub mod pipeline;
pub mod render;
pub mod retrieval;
pub mod saliency;
pub mod tensor_store;
pub mod tree_shap;

pub use detector::{
    detect_bundle, detect_instance, dissimilarity, DetectionConfig, DetectionRecord, MapPaths, ReviewStatus,
    RunReport, SurrogateSet, TopFeatureRule,
};
pub use error::{Error, Result};
pub use fixtures::{fixture_gen, score_detection, FixtureGroundTruth, FixtureSpec};
pub use gbdt::{train_lsm, BoostConfig, TreeEnsemble};
pub use retrieval::{similar_instances, ActivationIndex, FeatureIndex, RecordStore, RetrievalResult};
pub use saliency::{FeatureMaps, MapKind, SaliencyMap, SurrogateFeatureVector};
pub use tensor_store::{load_bundle, Split, TensorBundle};
pub use tree_shap::{shap_for_instance, ShapAttribution};
