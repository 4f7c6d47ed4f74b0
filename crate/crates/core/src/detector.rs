//! RF-CAM versus Grad-CAM comparison and per-instance verdicts.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{instance_features, top_gradient_feature, InstanceFeatures};
use crate::gbdt::{BoostConfig, TreeEnsemble};
use crate::render::{load_rgb, render_overlay, upscale_map};
use crate::saliency::{argmax, normalize_map, weighted_activation_map, MapKind, SaliencyMap};
use crate::tensor_store::{ImageEntry, Split, TensorBundle};
use crate::tree_shap::{shap_for_instance, ShapAttribution};

/// Surrogates keyed by class index.
pub type SurrogateSet = BTreeMap<usize, TreeEnsemble>;

/// How the neural feature used for retrieval is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopFeatureRule {
    /// `argmax_k w_k * mean(A_k)`: largest contribution to the predicted logit.
    #[default]
    GradientActivation,
    /// `argmax_k alpha_k * mean(A_k)`.
    ShapActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Pixels above this normalized intensity form the comparison mask and are rounded to 1.
    pub mask_threshold: f64,
    /// Flagging threshold on the scaled score.
    pub mse_threshold: f64,
    /// Multiplier applied to the masked MSE (100 = percentage units).
    pub score_scale: f64,
    pub top_feature_rule: TopFeatureRule,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            mask_threshold: 0.78,
            mse_threshold: 15.0,
            score_scale: 100.0,
            top_feature_rule: TopFeatureRule::GradientActivation,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Validation(format!(
                "mask_threshold must be in (0, 1), got {}",
                self.mask_threshold
            )));
        }
        if !(self.mse_threshold >= 0.0) || !self.mse_threshold.is_finite() {
            return Err(Error::Validation(format!(
                "mse_threshold must be >= 0, got {}",
                self.mse_threshold
            )));
        }
        if !(self.score_scale > 0.0) || !self.score_scale.is_finite() {
            return Err(Error::Validation("score_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Confirmed,
    Rejected,
    Diagnostic,
    AutoFlagged,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Confirmed => "confirmed",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Diagnostic => "diagnostic",
            ReviewStatus::AutoFlagged => "auto_flagged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pending" => ReviewStatus::Pending,
            "confirmed" => ReviewStatus::Confirmed,
            "rejected" => ReviewStatus::Rejected,
            "diagnostic" => ReviewStatus::Diagnostic,
            "auto_flagged" => ReviewStatus::AutoFlagged,
            _ => return None,
        })
    }

    /// Whether a reviewer decision may move a record out of this status.
    pub fn is_reviewable(self) -> bool {
        matches!(self, ReviewStatus::Pending | ReviewStatus::AutoFlagged)
    }
}

/// Rendered heatmaps, relative to the run output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPaths {
    pub rf_cam: String,
    pub grad_cam: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub instance_id: String,
    pub predicted_class: usize,
    pub true_class: usize,
    /// Scaled masked MSE between the two maps.
    pub dissimilarity: f64,
    pub flagged: bool,
    pub status: ReviewStatus,
    pub top_feature: usize,
    #[serde(default)]
    pub shap: Option<ShapAttribution>,
    #[serde(default)]
    pub map_paths: Option<MapPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Masked, rounded MSE between two normalized maps, times `score_scale`.
///
/// The mask is every pixel where either map exceeds `mask_threshold`; inside
/// it, values above the threshold are rounded to 1. An empty mask scores 0.
pub fn dissimilarity(rf: &SaliencyMap, gc: &SaliencyMap, config: &DetectionConfig) -> Result<f64> {
    if rf.height != gc.height || rf.width != gc.width {
        return Err(Error::Validation(format!(
            "map resolutions differ: {}x{} vs {}x{}",
            rf.height, rf.width, gc.height, gc.width
        )));
    }
    let t = config.mask_threshold;
    let round = |v: f64| if v > t { 1.0 } else { v };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&a, &b) in rf.data.iter().zip(&gc.data) {
        if a > t || b > t {
            let d = round(a) - round(b);
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(config.score_scale * (sum / count as f64))
}

/// Everything computed for one instance, before anything is written.
#[derive(Debug, Clone)]
pub struct InstanceAnalysis {
    pub record: DetectionRecord,
    pub features: InstanceFeatures,
    /// Normalized maps at feature-map resolution.
    pub rf_cam: SaliencyMap,
    pub grad_cam: SaliencyMap,
}

pub fn analyze_instance(
    bundle: &TensorBundle,
    entry: &ImageEntry,
    models: &SurrogateSet,
    config: &DetectionConfig,
) -> Result<Option<InstanceAnalysis>> {
    let features = instance_features(bundle, entry)?;
    let class = entry.predicted_label;
    let gc_raw = weighted_activation_map(&features.weights.0, &features.activations, MapKind::GradCam, class)?;
    let grad_cam = normalize_map(&gc_raw);

    let Some(model) = models.get(&class) else {
        return Ok(None);
    };
    let shap = shap_for_instance(model, &features.phi, &entry.id).map_err(|e| e.for_instance(&entry.id))?;
    let rf_raw = weighted_activation_map(&shap.alpha, &features.activations, MapKind::RfCam, class)?;
    let rf_cam = normalize_map(&rf_raw);

    let score = dissimilarity(&rf_cam, &grad_cam, config)?;
    let correct = entry.is_correct();
    let top_feature = match config.top_feature_rule {
        TopFeatureRule::GradientActivation => top_gradient_feature(&features.weights, &features.means),
        TopFeatureRule::ShapActivation => {
            let c: Vec<f64> = shap.alpha.iter().zip(&features.means.0).map(|(a, m)| a * m).collect();
            argmax(&c)
        }
    };
    let record = DetectionRecord {
        instance_id: entry.id.clone(),
        predicted_class: class,
        true_class: entry.true_label,
        dissimilarity: score,
        flagged: correct && score > config.mse_threshold,
        status: if correct {
            ReviewStatus::Pending
        } else {
            ReviewStatus::Diagnostic
        },
        top_feature,
        shap: Some(shap),
        map_paths: None,
        warning: None,
    };
    Ok(Some(InstanceAnalysis {
        record,
        features,
        rf_cam,
        grad_cam,
    }))
}

/// Analyses one entry and, when `heatmap_dir` is set, writes both overlays.
///
/// `heatmap_dir` is `<run dir>/heatmaps`; record paths are relative to the run dir.
pub fn detect_instance(
    bundle: &TensorBundle,
    entry: &ImageEntry,
    models: &SurrogateSet,
    config: &DetectionConfig,
    heatmap_dir: Option<&Path>,
) -> Result<DetectionRecord> {
    let Some(analysis) = analyze_instance(bundle, entry, models, config)? else {
        let features = instance_features(bundle, entry)?;
        log::warn!(
            "instance {}: no surrogate for predicted class {}",
            entry.id,
            entry.predicted_label
        );
        return Ok(DetectionRecord {
            instance_id: entry.id.clone(),
            predicted_class: entry.predicted_label,
            true_class: entry.true_label,
            dissimilarity: 0.0,
            flagged: false,
            status: ReviewStatus::Diagnostic,
            top_feature: top_gradient_feature(&features.weights, &features.means),
            shap: None,
            map_paths: None,
            warning: Some(format!("no surrogate for class {}", entry.predicted_label)),
        });
    };
    let mut record = analysis.record;
    if let Some(dir) = heatmap_dir {
        let target = bundle
            .manifest()
            .input_image_size
            .map(|[h, w]| (h, w))
            .unwrap_or((analysis.rf_cam.height, analysis.rf_cam.width));
        let image = match &entry.image_path {
            Some(p) => Some(load_rgb(&bundle.resolve(p))?),
            None => None,
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = file_stem(&entry.id);
        let write = |map: &SaliencyMap| -> Result<String> {
            let up = upscale_map(map, target)?;
            let png = render_overlay(&up, image.as_ref())?;
            let name = format!("{stem}_{}.png", map.kind.short_name());
            let path = dir.join(&name);
            std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
            Ok(format!("heatmaps/{name}"))
        };
        record.map_paths = Some(MapPaths {
            rf_cam: write(&analysis.rf_cam)?,
            grad_cam: write(&analysis.grad_cam)?,
        });
    }
    Ok(record)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_index: usize,
    pub class_name: String,
    pub records: usize,
    pub correct: usize,
    pub flagged: usize,
    /// Flagged over correctly classified records of the class.
    pub flag_rate: f64,
    pub lsm_available: bool,
    pub lsm_train_accuracy: Option<f64>,
    pub lsm_test_accuracy: Option<f64>,
    pub lsm_test_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmSummary {
    /// Unweighted mean over classes with a test accuracy.
    pub macro_test_accuracy: Option<f64>,
    /// Mean weighted by each class's test-split size.
    pub instance_weighted_test_accuracy: Option<f64>,
    pub unavailable_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub bundle_manifest_sha256: String,
    pub detection: DetectionConfig,
    pub boost: Option<BoostConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub total_records: usize,
    pub correct: usize,
    pub misclassified: usize,
    pub flagged: usize,
    /// Flagged over correctly classified records.
    pub flag_rate: f64,
    pub per_class: Vec<ClassReport>,
    pub lsm: LsmSummary,
    pub failures: Vec<InstanceFailure>,
}

#[derive(Debug, Clone, Default)]
pub struct DetectOptions<'a> {
    pub heatmap_dir: Option<&'a Path>,
    /// Worker threads; `None` uses the global pool.
    pub parallelism: Option<usize>,
}

/// Runs detection over every test-split entry. Per-instance failures are
/// collected in the report; records are ordered by instance id.
pub fn detect_bundle(
    bundle: &TensorBundle,
    models: &SurrogateSet,
    config: &DetectionConfig,
    options: &DetectOptions<'_>,
) -> Result<(Vec<DetectionRecord>, RunReport)> {
    config.validate()?;
    let mut entries: Vec<&ImageEntry> = bundle.images().iter().filter(|e| e.split == Split::Test).collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let work = || -> Vec<std::result::Result<DetectionRecord, InstanceFailure>> {
        entries
            .par_iter()
            .map(|e| {
                detect_instance(bundle, e, models, config, options.heatmap_dir).map_err(|err| InstanceFailure {
                    instance_id: e.id.clone(),
                    error: err.for_instance(&e.id).to_string(),
                })
            })
            .collect()
    };
    let results = match options.parallelism {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    let report = build_report(bundle, models, config, &records, failures)?;
    Ok((records, report))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn build_report(
    bundle: &TensorBundle,
    models: &SurrogateSet,
    config: &DetectionConfig,
    records: &[DetectionRecord],
    failures: Vec<InstanceFailure>,
) -> Result<RunReport> {
    let names = &bundle.manifest().class_names;
    let mut per_class: Vec<ClassReport> = (0..bundle.num_classes())
        .map(|c| {
            let model = models.get(&c);
            ClassReport {
                class_index: c,
                class_name: names.get(c).cloned().unwrap_or_else(|| format!("class_{c}")),
                records: 0,
                correct: 0,
                flagged: 0,
                flag_rate: 0.0,
                lsm_available: model.is_some(),
                lsm_train_accuracy: model.map(|m| m.metrics.train_accuracy),
                lsm_test_accuracy: model.and_then(|m| m.metrics.test_accuracy),
                lsm_test_count: model.map_or(0, |m| m.metrics.test_count),
            }
        })
        .collect();
    for r in records {
        let c = &mut per_class[r.predicted_class];
        c.records += 1;
        if r.predicted_class == r.true_class {
            c.correct += 1;
        }
        if r.flagged {
            c.flagged += 1;
        }
    }
    for c in &mut per_class {
        c.flag_rate = ratio(c.flagged, c.correct);
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let flagged: usize = per_class.iter().map(|c| c.flagged).sum();

    let accs: Vec<(f64, usize)> = per_class
        .iter()
        .filter_map(|c| c.lsm_test_accuracy.map(|a| (a, c.lsm_test_count)))
        .collect();
    let macro_acc = (!accs.is_empty()).then(|| accs.iter().map(|a| a.0).sum::<f64>() / accs.len() as f64);
    let weight: usize = accs.iter().map(|a| a.1).sum();
    let weighted_acc =
        (weight > 0).then(|| accs.iter().map(|(a, n)| a * *n as f64).sum::<f64>() / weight as f64);

    Ok(RunReport {
        config: ConfigEcho {
            bundle_manifest_sha256: bundle.manifest_digest()?,
            detection: config.clone(),
            boost: models.values().next().map(|m| m.config.clone()),
        },
        total_records: records.len(),
        correct,
        misclassified: records.len() - correct,
        flagged,
        flag_rate: ratio(flagged, correct),
        per_class,
        lsm: LsmSummary {
            macro_test_accuracy: macro_acc,
            instance_weighted_test_accuracy: weighted_acc,
            unavailable_classes: (0..bundle.num_classes()).filter(|c| !models.contains_key(c)).collect(),
        },
        failures,
    })
}
