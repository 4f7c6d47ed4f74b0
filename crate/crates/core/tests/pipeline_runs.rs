mod common;

use std::fs;
use std::path::Path;

use rfcam_core::detector::{DetectionConfig, ReviewStatus};
use rfcam_core::fixtures::{fixture_gen, FixtureSpec};
use rfcam_core::gbdt::BoostConfig;
use rfcam_core::pipeline::{
    load_surrogates, read_records, read_report, run_detection, save_surrogates, surrogate_file_name, train_surrogates,
    RECORDS_FILE, REPORT_FILE, SURROGATE_DIR,
};
use rfcam_core::saliency::head_gradient_tensor;
use rfcam_core::tensor_store::{load_bundle, write_manifest, write_tensor, GradientMode, Split};
use rfcam_core::Error;

fn small_spec() -> FixtureSpec {
    FixtureSpec {
        train_per_class: 80,
        test_per_class: 20,
        ..Default::default()
    }
}

#[test]
fn records_cover_test_split_in_id_order() {
    let run = common::shared_run();
    let ids: Vec<_> = run.records.iter().map(|r| r.instance_id.clone()).collect();
    let mut expected: Vec<_> = run
        .bundle
        .images()
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| e.id.clone())
        .collect();
    expected.sort();
    assert_eq!(ids, expected);
    for r in &run.records {
        if r.predicted_class != r.true_class {
            assert_eq!(r.status, ReviewStatus::Diagnostic);
            assert!(!r.flagged);
        } else {
            assert_eq!(r.status, ReviewStatus::Pending);
        }
    }
}

#[test]
fn artifacts_on_disk_match_memory() {
    let run = common::shared_run();
    let dir = run.bundle_dir();
    assert_eq!(read_records(&dir.join(RECORDS_FILE)).unwrap(), run.records);
    assert_eq!(read_report(&dir.join(REPORT_FILE)).unwrap(), run.report);
    let text = fs::read_to_string(dir.join(REPORT_FILE)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json["flag_rate"].is_number());
    assert_eq!(json["config"]["detection"]["mse_threshold"], 15.0);
    assert_eq!(json["config"]["boost"]["num_rounds"], 50);
}

#[test]
fn report_identifies_bundle_by_manifest_digest() {
    use sha2::Digest;
    let run = common::shared_run();
    let bytes = fs::read(run.bundle_dir().join("manifest.json")).unwrap();
    assert_eq!(run.report.config.bundle_manifest_sha256, hex::encode(sha2::Sha256::digest(&bytes)));
}

#[test]
fn heatmaps_are_written_at_input_resolution() {
    let run = common::shared_run();
    for r in run.records.iter().take(5) {
        let paths = r.map_paths.as_ref().unwrap();
        for rel in [&paths.rf_cam, &paths.grad_cam] {
            assert!(rel.starts_with("heatmaps/"), "{rel}");
            let img = image::open(run.bundle_dir().join(rel)).unwrap();
            assert_eq!((img.width(), img.height()), (56, 56));
        }
    }
}

#[test]
fn report_counts_are_consistent() {
    let run = common::shared_run();
    let rep = &run.report;
    assert_eq!(rep.total_records, run.records.len());
    assert_eq!(rep.correct + rep.misclassified, rep.total_records);
    assert_eq!(rep.flagged, run.records.iter().filter(|r| r.flagged).count());
    assert_eq!(rep.per_class.iter().map(|c| c.flagged).sum::<usize>(), rep.flagged);
    assert!(rep.failures.is_empty());
    assert!(rep.lsm.unavailable_classes.is_empty());
    assert!(rep.lsm.macro_test_accuracy.unwrap() >= 0.95);
}

#[test]
fn surrogates_survive_save_and_load() {
    let run = common::shared_run();
    let loaded = load_surrogates(&run.bundle_dir()).unwrap();
    assert_eq!(loaded, run.models);
}

#[test]
fn misnamed_surrogate_file_is_rejected() {
    let run = common::shared_run();
    let dir = tempfile::tempdir().unwrap();
    let sdir = dir.path().join(SURROGATE_DIR);
    fs::create_dir_all(&sdir).unwrap();
    run.models[&1].save(sdir.join(surrogate_file_name(2))).unwrap();
    assert!(matches!(load_surrogates(dir.path()), Err(Error::Format(_))));
}

#[test]
fn detection_before_training_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture_gen(&small_spec(), dir.path()).unwrap();
    match load_surrogates(dir.path()) {
        Err(Error::Precondition(m)) => assert!(m.contains("surrogates not found")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_surrogate_yields_diagnostic_records() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture_gen(&small_spec(), dir.path()).unwrap();
    let mut models = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap().models;
    models.remove(&2);
    let (records, report) = run_detection(&bundle, &models, &DetectionConfig::default(), dir.path(), Some(2)).unwrap();
    assert_eq!(report.lsm.unavailable_classes, vec![2]);
    for r in records.iter().filter(|r| r.predicted_class == 2) {
        assert_eq!(r.status, ReviewStatus::Diagnostic);
        assert!(r.warning.as_deref().unwrap().contains("no surrogate"));
        assert!(r.shap.is_none() && !r.flagged);
    }
}

#[test]
fn class_without_training_data_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture_gen(&small_spec(), dir.path()).unwrap();
    let mut manifest = bundle.manifest().clone();
    manifest.images.retain(|e| !(e.true_label == 3 && e.split == Split::Train));
    write_manifest(dir.path(), &manifest).unwrap();
    let bundle = load_bundle(dir.path()).unwrap();
    let outcome = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap();
    assert!(!outcome.models.contains_key(&3));
    let status = &outcome.metrics.classes[3];
    assert!(!status.available);
    save_surrogates(dir.path(), &outcome).unwrap();
    assert_eq!(load_surrogates(dir.path()).unwrap().len(), 3);
}

#[test]
fn corrupt_tensor_is_reported_and_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture_gen(&small_spec(), dir.path()).unwrap();
    let models = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap().models;
    let victim = bundle.images().iter().find(|e| e.split == Split::Test).unwrap().clone();
    let path = bundle.resolve(&victim.activation_path);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let (records, report) = run_detection(&bundle, &models, &DetectionConfig::default(), dir.path(), None).unwrap();
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].instance_id, victim.id);
    assert!(records.iter().all(|r| r.instance_id != victim.id));
    assert_eq!(records.len(), 4 * 20 - 1);
}

/// A bundle that ships explicit gradient tensors gives the same verdicts as
/// the analytic head it was derived from.
#[test]
fn precomputed_gradients_match_analytic_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture_gen(&small_spec(), dir.path()).unwrap();
    let models = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap().models;
    let analytic_dir = dir.path().join("analytic");
    let (analytic, _) = run_detection(&bundle, &models, &DetectionConfig::default(), &analytic_dir, None).unwrap();

    let head = bundle.head().unwrap().clone();
    let (h, w) = bundle.map_shape();
    let mut manifest = bundle.manifest().clone();
    manifest.gradient_mode = GradientMode::Precomputed;
    manifest.head_weights_path = None;
    for e in &mut manifest.images {
        let g = head_gradient_tensor(&head, e.predicted_label, h, w).unwrap();
        let rel = format!("grads/{}.scdt", e.id);
        let data: Vec<f32> = g.as_slice().iter().map(|&v| v as f32).collect();
        write_tensor(dir.path().join(&rel), &[bundle.channels(), h, w], &data).unwrap();
        e.gradient_path = Some(rel);
    }
    write_manifest(dir.path(), &manifest).unwrap();
    let pre_bundle = load_bundle(dir.path()).unwrap();
    let pre_dir = dir.path().join("pre");
    let (pre, _) = run_detection(&pre_bundle, &models, &DetectionConfig::default(), &pre_dir, None).unwrap();

    assert_eq!(pre.len(), analytic.len());
    for (a, b) in analytic.iter().zip(&pre) {
        assert_eq!(a.instance_id, b.instance_id);
        assert_eq!(a.flagged, b.flagged, "{}", a.instance_id);
        assert_eq!(a.top_feature, b.top_feature);
        assert!((a.dissimilarity - b.dissimilarity).abs() < 1e-3, "{}", a.instance_id);
    }
}

#[test]
fn precomputed_mode_requires_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture_gen(&small_spec(), dir.path()).unwrap();
    let mut manifest = bundle.manifest().clone();
    manifest.gradient_mode = GradientMode::Precomputed;
    manifest.head_weights_path = None;
    assert!(matches!(write_manifest(dir.path(), &manifest), Err(Error::Validation(_))));

    for e in &mut manifest.images {
        e.gradient_path = Some(format!("grads/{}.scdt", e.id));
    }
    write_manifest(dir.path(), &manifest).unwrap();
    let bundle = load_bundle(dir.path()).unwrap();
    let err = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap_err();
    assert!(err.is_io(), "{err}");
}

fn file_bytes(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    common::walk_files(dir)
        .into_iter()
        .map(|f| {
            let b = fs::read(dir.join(&f)).unwrap();
            (f, b)
        })
        .collect()
}

#[test]
fn parallelism_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture_gen(&small_spec(), dir.path().join("b")).unwrap();
    let one = train_surrogates(&bundle, &BoostConfig::default(), Some(1)).unwrap();
    let four = train_surrogates(&bundle, &BoostConfig::default(), Some(4)).unwrap();
    assert_eq!(one.models, four.models);
    run_detection(&bundle, &one.models, &DetectionConfig::default(), &dir.path().join("r1"), Some(1)).unwrap();
    run_detection(&bundle, &four.models, &DetectionConfig::default(), &dir.path().join("r4"), Some(4)).unwrap();
    assert_eq!(file_bytes(&dir.path().join("r1")), file_bytes(&dir.path().join("r4")));
}
