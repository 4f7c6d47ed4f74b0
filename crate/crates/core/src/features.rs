//! Per-instance quantities derived from a bundle entry.

use crate::error::{Error, Result};
use crate::saliency::{
    analytic_head_gradients, build_phi, channel_means, pool_gradients, ChannelMeans, ChannelWeights,
    FeatureMaps, SurrogateFeatureVector,
};
use crate::tensor_store::{GradientMode, ImageEntry, TensorBundle};

#[derive(Debug, Clone)]
pub struct InstanceFeatures {
    pub activations: FeatureMaps,
    /// Pooled gradients of the predicted-class score.
    pub weights: ChannelWeights,
    pub means: ChannelMeans,
    pub phi: SurrogateFeatureVector,
}

pub fn instance_features(bundle: &TensorBundle, entry: &ImageEntry) -> Result<InstanceFeatures> {
    let activations = bundle.activations(entry)?;
    let weights = match bundle.manifest().gradient_mode {
        GradientMode::Precomputed => {
            let grads = bundle.gradients(entry)?.ok_or_else(|| {
                Error::Validation(format!("instance {}: missing gradient tensor", entry.id))
            })?;
            pool_gradients(&grads)
        }
        GradientMode::AnalyticHead => {
            let head = bundle
                .head()
                .ok_or_else(|| Error::Validation("bundle has no head weights".into()))?;
            analytic_head_gradients(head, entry.predicted_label, activations.pixels())?
        }
    };
    let means = channel_means(&activations);
    let phi = build_phi(&weights, &means).map_err(|e| e.for_instance(&entry.id))?;
    Ok(InstanceFeatures {
        activations,
        weights,
        means,
        phi,
    })
}

/// Channel with the largest contribution `w_k * mean(A_k)` to the predicted logit.
pub fn top_gradient_feature(weights: &ChannelWeights, means: &ChannelMeans) -> usize {
    let contrib: Vec<f64> = weights.0.iter().zip(&means.0).map(|(w, a)| w * a).collect();
    crate::saliency::argmax(&contrib)
}
