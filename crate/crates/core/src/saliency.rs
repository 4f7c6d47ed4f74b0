//! Channel pooling, surrogate features and class activation maps.
//!
//! Grad-CAM and RF-CAM share one kernel, [`weighted_activation_map`]; they
//! differ only in the per-channel coefficients (pooled gradients versus
//! Shapley attributions of the class surrogate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::HeadWeights;

/// Norms at or below this are treated as zero by [`unit_normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// A `K x H x W` stack of feature maps (activations or gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMaps {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Validation("feature maps need K, H, W >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Validation(format!(
                "{} values for shape ({channels}, {height}, {width})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `H * W`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let z = self.pixels();
        &self.data[k * z..(k + 1) * z]
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.height + i) * self.width + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Spatial mean of every channel, accumulated as deviations from the
    /// first pixel so that constant channels come back bit-exact.
    fn spatial_means(&self) -> Vec<f64> {
        let z = self.pixels() as f64;
        (0..self.channels)
            .map(|k| {
                let ch = self.channel(k);
                let shift = ch[0];
                shift + ch.iter().map(|v| v - shift).sum::<f64>() / z
            })
            .collect()
    }
}

/// Pooled gradient weight per channel for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelWeights(pub Vec<f64>);

/// Mean activation per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelMeans(pub Vec<f64>);

/// Input vector of a class surrogate: unit gradients plus unit mean activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurrogateFeatureVector(pub Vec<f64>);

impl SurrogateFeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    GradCam,
    RfCam,
}

impl MapKind {
    /// Short name used in file names and URLs.
    pub fn short_name(self) -> &'static str {
        match self {
            MapKind::GradCam => "gc",
            MapKind::RfCam => "rf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values, never negative.
    pub data: Vec<f64>,
    pub kind: MapKind,
    pub class_index: usize,
}

impl SaliencyMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Averages each gradient channel over all spatial positions.
pub fn pool_gradients(gradients: &FeatureMaps) -> ChannelWeights {
    ChannelWeights(gradients.spatial_means())
}

pub fn channel_means(activations: &FeatureMaps) -> ChannelMeans {
    ChannelMeans(activations.spatial_means())
}

/// Pooled gradients of a global-average-pool + linear head.
///
/// `Y_c = sum_k W[c,k] * mean(A_k) + b_c`, so every spatial derivative of
/// channel `k` equals `W[c,k] / Z` and the pooled weight is that same value.
pub fn analytic_head_gradients(head: &HeadWeights, class_index: usize, pixels: usize) -> Result<ChannelWeights> {
    if class_index >= head.num_classes() {
        return Err(Error::Validation(format!(
            "class index {class_index} out of range for {} classes",
            head.num_classes()
        )));
    }
    if pixels == 0 {
        return Err(Error::Validation("pixel count must be >= 1".into()));
    }
    let z = pixels as f64;
    Ok(ChannelWeights(head.row(class_index).iter().map(|w| w / z).collect()))
}

/// The full `K x H x W` gradient tensor of a head logit with respect to the activations.
pub fn head_gradient_tensor(head: &HeadWeights, class_index: usize, height: usize, width: usize) -> Result<FeatureMaps> {
    if class_index >= head.num_classes() {
        return Err(Error::Validation(format!("class index {class_index} out of range")));
    }
    let z = (height * width) as f64;
    let data = head
        .row(class_index)
        .iter()
        .flat_map(|&w| std::iter::repeat_n(w / z, height * width))
        .collect();
    FeatureMaps::new(head.channels(), height, width, data)
}

/// Logits of a global-average-pool + linear head.
pub fn head_forward(head: &HeadWeights, activations: &FeatureMaps) -> Result<Vec<f64>> {
    if activations.channels() != head.channels() {
        return Err(Error::Validation(format!(
            "head expects {} channels, activations have {}",
            head.channels(),
            activations.channels()
        )));
    }
    let pooled = activations.spatial_means();
    Ok((0..head.num_classes())
        .map(|c| {
            head.row(c)
                .iter()
                .zip(&pooled)
                .map(|(w, a)| w * a)
                .sum::<f64>()
                + head.bias()[c]
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scales `v` to unit L2 norm; vectors with norm at or below [`ZERO_NORM`] come back unchanged.
pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("non-finite component at index {i}")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= ZERO_NORM {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn build_phi(weights: &ChannelWeights, means: &ChannelMeans) -> Result<SurrogateFeatureVector> {
    if weights.0.len() != means.0.len() {
        return Err(Error::Validation(format!(
            "{} channel weights but {} channel means",
            weights.0.len(),
            means.0.len()
        )));
    }
    let w = unit_normalize(&weights.0)?;
    let a = unit_normalize(&means.0)?;
    Ok(SurrogateFeatureVector(w.iter().zip(&a).map(|(x, y)| x + y).collect()))
}

/// `max(0, sum_k coeffs[k] * A_k)` at every spatial position.
pub fn weighted_activation_map(
    coeffs: &[f64],
    activations: &FeatureMaps,
    kind: MapKind,
    class_index: usize,
) -> Result<SaliencyMap> {
    if coeffs.len() != activations.channels() {
        return Err(Error::Validation(format!(
            "{} coefficients for {} channels",
            coeffs.len(),
            activations.channels()
        )));
    }
    let z = activations.pixels();
    let mut acc = vec![0.0f64; z];
    for (k, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (dst, &a) in acc.iter_mut().zip(activations.channel(k)) {
            *dst += c * a;
        }
    }
    for v in &mut acc {
        *v = v.max(0.0);
    }
    Ok(SaliencyMap {
        height: activations.height(),
        width: activations.width(),
        data: acc,
        kind,
        class_index,
    })
}

/// Divides by the map maximum. All-zero maps are returned unchanged.
pub fn normalize_map(map: &SaliencyMap) -> SaliencyMap {
    let max = map.max();
    let mut out = map.clone();
    if max > 0.0 {
        for v in &mut out.data {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    out
}
