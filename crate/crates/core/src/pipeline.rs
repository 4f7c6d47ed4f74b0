//! Training and detection stages with their on-disk artifacts.
//!
//! Layout of a run directory:
//!
//! ```text
//! surrogates/class_000.lsm.json ...
//! surrogates/metrics.json
//! records.jsonl
//! report.json
//! heatmaps/<id>_rf.png, heatmaps/<id>_gc.png
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect_bundle, DetectOptions, DetectionConfig, DetectionRecord, RunReport, SurrogateSet};
use crate::error::{Error, Result};
use crate::gbdt::{build_misclassification_labels, train_lsm, BoostConfig, LsmMetrics};
use crate::tensor_store::TensorBundle;

pub const SURROGATE_DIR: &str = "surrogates";
pub const METRICS_FILE: &str = "metrics.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const HEATMAP_DIR: &str = "heatmaps";

pub fn surrogate_file_name(class: usize) -> String {
    format!("class_{class:03}.lsm.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTrainingStatus {
    pub class_index: usize,
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<LsmMetrics>,
    pub trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub boost: BoostConfig,
    pub classes: Vec<ClassTrainingStatus>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: SurrogateSet,
    pub metrics: TrainingMetrics,
}

fn with_pool<T: Send>(parallelism: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T> {
    match parallelism {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(work)),
        None => Ok(work()),
    }
}

/// Trains one surrogate per class. Classes without training instances are
/// reported as unavailable rather than failing the run.
pub fn train_surrogates(bundle: &TensorBundle, config: &BoostConfig, parallelism: Option<usize>) -> Result<TrainOutcome> {
    config.validate()?;
    let results = with_pool(parallelism, || -> Result<Vec<_>> {
        let classes = build_misclassification_labels(bundle)?;
        Ok(classes
            .par_iter()
            .map(|c| {
                if c.train.is_empty() {
                    return Ok((c.class_index, None));
                }
                let mut model = train_lsm(c.class_index, &c.train, config)?;
                model.evaluate(&c.test)?;
                Ok((c.class_index, Some(model)))
            })
            .collect::<Vec<Result<_>>>())
    })??;

    let mut models = SurrogateSet::new();
    let mut statuses = Vec::new();
    for r in results {
        let (class, model) = r?;
        match model {
            Some(m) => {
                log::info!(
                    "class {class}: {} trees, train acc {:.3}, test acc {:?}",
                    m.trees.len(),
                    m.metrics.train_accuracy,
                    m.metrics.test_accuracy
                );
                statuses.push(ClassTrainingStatus {
                    class_index: class,
                    available: true,
                    reason: None,
                    metrics: Some(m.metrics.clone()),
                    trees: m.trees.len(),
                });
                models.insert(class, m);
            }
            None => {
                log::warn!("class {class}: no training instances, surrogate unavailable");
                statuses.push(ClassTrainingStatus {
                    class_index: class,
                    available: false,
                    reason: Some("no training instances".into()),
                    metrics: None,
                    trees: 0,
                });
            }
        }
    }
    Ok(TrainOutcome {
        models,
        metrics: TrainingMetrics {
            boost: config.clone(),
            classes: statuses,
        },
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `surrogates/` under `run_dir`, replacing any earlier models.
pub fn save_surrogates(run_dir: &Path, outcome: &TrainOutcome) -> Result<PathBuf> {
    let dir = run_dir.join(SURROGATE_DIR);
    if dir.exists() {
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".lsm.json")) {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (class, model) in &outcome.models {
        model.save(dir.join(surrogate_file_name(*class)))?;
    }
    write_json(&dir.join(METRICS_FILE), &outcome.metrics)?;
    Ok(dir)
}

/// Loads every `class_XXX.lsm.json` under `run_dir/surrogates`.
pub fn load_surrogates(run_dir: &Path) -> Result<SurrogateSet> {
    let dir = run_dir.join(SURROGATE_DIR);
    let not_found = || {
        Error::Precondition(format!(
            "surrogates not found in {}; run `train` first",
            dir.display()
        ))
    };
    if !dir.is_dir() {
        return Err(not_found());
    }
    let mut models = SurrogateSet::new();
    for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !name.ends_with(".lsm.json") {
            continue;
        }
        let model = crate::gbdt::TreeEnsemble::load(&p)?;
        if name != surrogate_file_name(model.class_index) {
            return Err(Error::Format(format!(
                "{} holds the surrogate of class {}",
                p.display(),
                model.class_index
            )));
        }
        models.insert(model.class_index, model);
    }
    if models.is_empty() {
        return Err(not_found());
    }
    Ok(models)
}

pub fn write_records(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("records {}", path.display())),
        _ => Error::io(path, e),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("report {}", path.display())),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Runs detection over the test split and writes records, report and heatmaps under `run_dir`.
pub fn run_detection(
    bundle: &TensorBundle,
    models: &SurrogateSet,
    config: &DetectionConfig,
    run_dir: &Path,
    parallelism: Option<usize>,
) -> Result<(Vec<DetectionRecord>, RunReport)> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let heatmaps = run_dir.join(HEATMAP_DIR);
    let options = DetectOptions {
        heatmap_dir: Some(&heatmaps),
        parallelism,
    };
    let (records, report) = detect_bundle(bundle, models, config, &options)?;
    write_records(&run_dir.join(RECORDS_FILE), &records)?;
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    log::info!(
        "{} records, {} flagged, {} failures",
        records.len(),
        report.flagged,
        report.failures.len()
    );
    Ok((records, report))
}
