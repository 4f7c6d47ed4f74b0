//! Synthetic bundles with planted core and spurious channels.
//!
//! Every class owns a set of core channels and a disjoint set of spurious
//! channels. Activations are Gaussian blobs plus clipped Gaussian noise; the
//! classifier is an analytic global-average-pool + linear head that sums a
//! class's core channels (weight 1.0) and spurious channels (weight 0.8).
//!
//! Three kinds of instance are generated per class:
//!
//! * clean: core channels fire at full strength on the object;
//! * spurious-reliant: core channels are attenuated and the class's own
//!   spurious channels fire on a separate context location;
//! * confounded: core channels are attenuated and a competing class's
//!   spurious channels fire, which usually flips the prediction.
//!
//! Randomness comes from ChaCha20 keyed by the seed, with one stream per
//! instance, so output does not depend on generation order or platform.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::DetectionRecord;
use crate::error::{Error, Result};
use crate::saliency::{argmax, head_forward, FeatureMaps};
use crate::tensor_store::{
    load_bundle, write_manifest, write_tensor, GradientMode, HeadWeights, ImageEntry, Manifest, Split,
    TensorBundle, MANIFEST_VERSION,
};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const HEAD_FILE: &str = "head.scdt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub num_classes: usize,
    pub channels: usize,
    /// Feature maps are `map_size x map_size`.
    pub map_size: usize,
    pub core_per_class: usize,
    pub spurious_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Share of each class's instances that rely on spurious channels.
    pub spurious_fraction: f64,
    /// Share of each class's instances where a competing class's spurious channels fire.
    pub confound_fraction: f64,
    pub noise_sigma: f64,
    /// Standard deviation of a blob, in pixels.
    pub blob_width: f64,
    /// Peak of core blobs when core evidence is attenuated.
    pub attenuated_peak: f64,
    pub core_weight: f64,
    pub spurious_weight: f64,
    /// Minimum distance between object and context blob centers, in pixels.
    pub min_context_distance: f64,
    pub input_image_size: Option<usize>,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 64,
            map_size: 7,
            core_per_class: 3,
            spurious_per_class: 2,
            train_per_class: 200,
            test_per_class: 60,
            spurious_fraction: 0.3,
            confound_fraction: 0.15,
            noise_sigma: 0.05,
            blob_width: 1.5,
            attenuated_peak: 0.3,
            core_weight: 1.0,
            spurious_weight: 0.8,
            min_context_distance: 3.0,
            input_image_size: Some(56),
            seed: 42,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation("fixture needs at least 2 classes".into()));
        }
        if self.core_per_class == 0 {
            return Err(Error::Validation("fixture needs at least one core channel per class".into()));
        }
        let needed = (self.core_per_class + self.spurious_per_class) * self.num_classes;
        if needed > self.channels {
            return Err(Error::Validation(format!(
                "channel budget exceeded: {needed} planted channels but K = {}",
                self.channels
            )));
        }
        if self.map_size == 0 {
            return Err(Error::Validation("map_size must be >= 1".into()));
        }
        for (name, v) in [
            ("spurious_fraction", self.spurious_fraction),
            ("confound_fraction", self.confound_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must be in [0, 1]")));
            }
        }
        if self.spurious_fraction + self.confound_fraction > 1.0 {
            return Err(Error::Validation("spurious_fraction + confound_fraction exceeds 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.blob_width > 0.0) {
            return Err(Error::Validation("noise_sigma must be >= 0 and blob_width > 0".into()));
        }
        if let Some(s) = self.input_image_size {
            if s < self.map_size {
                return Err(Error::Validation("input_image_size smaller than map_size".into()));
            }
        }
        Ok(())
    }

    pub fn core_channels(&self, class: usize) -> Vec<usize> {
        (class * self.core_per_class..(class + 1) * self.core_per_class).collect()
    }

    pub fn spurious_channels(&self, class: usize) -> Vec<usize> {
        let base = self.num_classes * self.core_per_class + class * self.spurious_per_class;
        (base..base + self.spurious_per_class).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InstanceKind {
    Clean,
    SpuriousReliant,
    Confounded { competitor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassChannels {
    pub class_index: usize,
    pub core: Vec<usize>,
    pub spurious: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub id: String,
    pub split: Split,
    pub true_label: usize,
    pub predicted_label: usize,
    #[serde(flatten)]
    pub kind: InstanceKind,
    pub is_spurious_reliant: bool,
    /// Class whose spurious channels fire in this instance, if any.
    pub spurious_source_class: Option<usize>,
    /// `[row, col]` of the object blob.
    pub object_center: [f64; 2],
    pub context_center: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureGroundTruth {
    pub spec: FixtureSpec,
    pub classes: Vec<ClassChannels>,
    pub instances: Vec<InstanceTruth>,
}

impl FixtureGroundTruth {
    pub fn instance(&self, id: &str) -> Option<&InstanceTruth> {
        self.instances.iter().find(|t| t.id == id)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(GROUND_TRUTH_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Instance kinds for one class and split, in a seeded random order.
fn kind_schedule(spec: &FixtureSpec, class: usize, split: Split, count: usize) -> Vec<InstanceKind> {
    let n_spur = (count as f64 * spec.spurious_fraction).round() as usize;
    let n_conf = ((count as f64 * spec.confound_fraction).round() as usize).min(count - n_spur.min(count));
    let n_spur = n_spur.min(count);
    let mut kinds = Vec::with_capacity(count);
    kinds.extend(std::iter::repeat_n(InstanceKind::SpuriousReliant, n_spur));
    kinds.extend(std::iter::repeat_n(InstanceKind::Confounded { competitor: usize::MAX }, n_conf));
    kinds.resize(count, InstanceKind::Clean);

    let split_code = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX - (class as u64 * 2 + split_code));
    // Fisher-Yates with explicit draws so the order is fixed by the seed alone.
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    for k in &mut kinds {
        if let InstanceKind::Confounded { competitor } = k {
            let offset = rng.random_range(1..spec.num_classes);
            *competitor = (class + offset) % spec.num_classes;
        }
    }
    kinds
}

fn uniform_center(rng: &mut ChaCha20Rng, size: usize) -> [f64; 2] {
    let span = (size - 1) as f64;
    [rng.random::<f64>() * span, rng.random::<f64>() * span]
}

fn context_center(rng: &mut ChaCha20Rng, size: usize, object: [f64; 2], min_dist: f64) -> [f64; 2] {
    let dist = |c: [f64; 2]| ((c[0] - object[0]).powi(2) + (c[1] - object[1]).powi(2)).sqrt();
    let mut best = uniform_center(rng, size);
    for _ in 0..1000 {
        if dist(best) >= min_dist {
            return best;
        }
        let c = uniform_center(rng, size);
        if dist(c) > dist(best) {
            best = c;
        }
    }
    best
}

fn add_blob(channel: &mut [f64], size: usize, center: [f64; 2], peak: f64, width: f64) {
    let denom = 2.0 * width * width;
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - center[0]).powi(2) + (j as f64 - center[1]).powi(2);
            channel[i * size + j] += peak * (-d2 / denom).exp();
        }
    }
}

fn fixture_head(spec: &FixtureSpec) -> Result<HeadWeights> {
    let k = spec.channels;
    let mut w = vec![0.0f64; spec.num_classes * k];
    // Stored as f32 on disk; round here so labels match what loaders see.
    let core = spec.core_weight as f32 as f64;
    let spur = spec.spurious_weight as f32 as f64;
    for c in 0..spec.num_classes {
        for ch in spec.core_channels(c) {
            w[c * k + ch] = core;
        }
        for ch in spec.spurious_channels(c) {
            w[c * k + ch] = spur;
        }
    }
    HeadWeights::new(spec.num_classes, k, w, vec![0.0; spec.num_classes])
}

struct Generated {
    data: Vec<f32>,
    object: [f64; 2],
    context: Option<[f64; 2]>,
}

fn generate_instance(spec: &FixtureSpec, class: usize, kind: InstanceKind, stream: u64) -> Result<Generated> {
    let size = spec.map_size;
    let z = size * size;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    let object = uniform_center(&mut rng, size);
    let context = match kind {
        InstanceKind::Clean => None,
        _ => Some(context_center(&mut rng, size, object, spec.min_context_distance)),
    };
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Validation(e.to_string()))?;
    let mut data: Vec<f64> = (0..spec.channels * z).map(|_| noise.sample(&mut rng)).collect();

    let core_peak = match kind {
        InstanceKind::Clean => 1.0,
        _ => spec.attenuated_peak,
    };
    for ch in spec.core_channels(class) {
        add_blob(&mut data[ch * z..(ch + 1) * z], size, object, core_peak, spec.blob_width);
    }
    let source = match kind {
        InstanceKind::Clean => None,
        InstanceKind::SpuriousReliant => Some(class),
        InstanceKind::Confounded { competitor } => Some(competitor),
    };
    if let (Some(src), Some(ctx)) = (source, context) {
        for ch in spec.spurious_channels(src) {
            add_blob(&mut data[ch * z..(ch + 1) * z], size, ctx, 1.0, spec.blob_width);
        }
    }
    Ok(Generated {
        data: data.into_iter().map(|v| v.max(0.0) as f32).collect(),
        object,
        context,
    })
}

/// Writes a fixture bundle plus `ground_truth.json` into `out`.
pub fn fixture_gen(spec: &FixtureSpec, out: impl AsRef<Path>) -> Result<(TensorBundle, FixtureGroundTruth)> {
    spec.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out.join("tensors")).map_err(|e| Error::io(out, e))?;
    let head = fixture_head(spec)?;
    head.write(out.join(HEAD_FILE))?;

    let size = spec.map_size;
    let mut entries = Vec::new();
    let mut truths = Vec::new();
    let mut stream = 0u64;
    for split in [Split::Train, Split::Test] {
        let count = match split {
            Split::Train => spec.train_per_class,
            Split::Test => spec.test_per_class,
        };
        for class in 0..spec.num_classes {
            for (idx, kind) in kind_schedule(spec, class, split, count).into_iter().enumerate() {
                let g = generate_instance(spec, class, kind, stream)?;
                stream += 1;
                let maps = FeatureMaps::new(
                    spec.channels,
                    size,
                    size,
                    g.data.iter().map(|&v| v as f64).collect(),
                )?;
                let predicted = argmax(&head_forward(&head, &maps)?);
                let id = format!("{}-c{class}-{idx:04}", split_name(split));
                let rel = format!("tensors/{id}.scdt");
                write_tensor(out.join(&rel), &[spec.channels, size, size], &g.data)?;
                entries.push(ImageEntry {
                    id: id.clone(),
                    true_label: class,
                    predicted_label: predicted,
                    activation_path: rel,
                    gradient_path: None,
                    image_path: None,
                    split,
                });
                truths.push(InstanceTruth {
                    id,
                    split,
                    true_label: class,
                    predicted_label: predicted,
                    kind,
                    is_spurious_reliant: kind == InstanceKind::SpuriousReliant,
                    spurious_source_class: match kind {
                        InstanceKind::Clean => None,
                        InstanceKind::SpuriousReliant => Some(class),
                        InstanceKind::Confounded { competitor } => Some(competitor),
                    },
                    object_center: g.object,
                    context_center: g.context,
                });
            }
        }
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        num_classes: spec.num_classes,
        channels: spec.channels,
        map_height: size,
        map_width: size,
        gradient_mode: GradientMode::AnalyticHead,
        class_names: (0..spec.num_classes).map(|c| format!("class_{c}")).collect(),
        head_weights_path: Some(HEAD_FILE.into()),
        input_image_size: spec.input_image_size.map(|s| [s, s]),
        images: entries,
    };
    write_manifest(out, &manifest)?;

    let truth = FixtureGroundTruth {
        spec: spec.clone(),
        classes: (0..spec.num_classes)
            .map(|c| ClassChannels {
                class_index: c,
                core: spec.core_channels(c),
                spurious: spec.spurious_channels(c),
            })
            .collect(),
        instances: truths,
    };
    let path = out.join(GROUND_TRUTH_FILE);
    let mut text = serde_json::to_string_pretty(&truth).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    Ok((load_bundle(out)?, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub recall: f64,
    /// False when there were no spurious-reliant, correctly classified instances (recall reported as 1.0).
    pub recall_defined: bool,
    pub precision: f64,
    /// False when nothing was flagged (precision reported as 1.0).
    pub precision_defined: bool,
    /// Flagged over correctly classified records.
    pub flag_rate: f64,
    pub true_positives: usize,
    pub flagged: usize,
    pub spurious_correct: usize,
    pub correct: usize,
}

/// Recall and precision of flags against planted spurious reliance,
/// restricted to correctly classified instances.
pub fn score_detection(records: &[DetectionRecord], truth: &FixtureGroundTruth) -> Result<DetectionScore> {
    let mut tp = 0;
    let mut flagged = 0;
    let mut spurious_correct = 0;
    let mut correct = 0;
    for r in records {
        let t = truth.instance(&r.instance_id).ok_or_else(|| {
            Error::Validation(format!("record {} has no ground truth", r.instance_id))
        })?;
        if t.true_label != r.true_class || t.predicted_label != r.predicted_class {
            return Err(Error::Validation(format!(
                "record {} disagrees with ground truth labels",
                r.instance_id
            )));
        }
        if r.predicted_class != r.true_class {
            continue;
        }
        correct += 1;
        if t.is_spurious_reliant {
            spurious_correct += 1;
        }
        if r.flagged {
            flagged += 1;
            if t.is_spurious_reliant {
                tp += 1;
            }
        }
    }
    let frac = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    Ok(DetectionScore {
        recall: frac(tp, spurious_correct),
        recall_defined: spurious_correct > 0,
        precision: frac(tp, flagged),
        precision_defined: flagged > 0,
        flag_rate: if correct == 0 { 0.0 } else { flagged as f64 / correct as f64 },
        true_positives: tp,
        flagged,
        spurious_correct,
        correct,
    })
}
