//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rfcam_core::gbdt::{BoostConfig, LsmMetrics, Tree, TreeEnsemble, TreeNode};
use rfcam_core::saliency::FeatureMaps;
use rfcam_core::tensor_store::HeadWeights;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Random tree of at most `max_depth` splits along any path, with covers
/// that add up (parent = left + right).
pub fn random_tree(rng: &mut ChaCha20Rng, features: usize, max_depth: usize) -> Tree {
    fn grow(rng: &mut ChaCha20Rng, nodes: &mut Vec<TreeNode>, features: usize, depth_left: usize) -> usize {
        let idx = nodes.len();
        nodes.push(TreeNode::leaf(0.0, 0.0));
        if depth_left == 0 || rng.random::<f64>() < 0.25 {
            let cover = rng.random_range(0.5..20.0);
            nodes[idx] = TreeNode::leaf(rng.random_range(-2.0..2.0), cover);
            return idx;
        }
        let feature = rng.random_range(0..features);
        let threshold = rng.random_range(-1.0..1.0);
        let left = grow(rng, nodes, features, depth_left - 1);
        let right = grow(rng, nodes, features, depth_left - 1);
        let cover = nodes[left].cover + nodes[right].cover;
        nodes[idx] = TreeNode::split(feature, threshold, left, right, cover);
        idx
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, features, max_depth);
    Tree::new(nodes)
}

pub fn random_ensemble(rng: &mut ChaCha20Rng, features: usize, max_depth: usize, max_trees: usize) -> TreeEnsemble {
    let n = rng.random_range(1..=max_trees);
    TreeEnsemble {
        class_index: 0,
        feature_count: features,
        base_score: rng.random_range(-1.0..1.0),
        config: BoostConfig::default(),
        metrics: LsmMetrics {
            train_accuracy: 0.0,
            train_count: 0,
            test_accuracy: None,
            test_count: 0,
        },
        trees: (0..n).map(|_| random_tree(rng, features, max_depth)).collect(),
    }
}

/// Expected tree output when only the features in `present` are known:
/// known features follow `x`, unknown ones average children by cover.
fn conditional_expectation(tree: &Tree, x: &[f64], present: u32, node: usize) -> f64 {
    let n = &tree.nodes[node];
    match (n.feature_index, n.left, n.right) {
        (Some(f), Some(l), Some(r)) => {
            if present & (1 << f) != 0 {
                let next = if x[f] < n.threshold { l } else { r };
                conditional_expectation(tree, x, present, next)
            } else {
                let (cl, cr) = (tree.nodes[l].cover, tree.nodes[r].cover);
                (cl * conditional_expectation(tree, x, present, l) + cr * conditional_expectation(tree, x, present, r))
                    / (cl + cr)
            }
        }
        _ => n.leaf_value,
    }
}

pub fn subset_value(model: &TreeEnsemble, x: &[f64], present: u32) -> f64 {
    model.base_score
        + model
            .trees
            .iter()
            .map(|t| conditional_expectation(t, x, present, 0))
            .sum::<f64>()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Shapley values by enumerating every feature subset. Returns `(alpha, alpha0)`.
pub fn brute_force_shapley(model: &TreeEnsemble, x: &[f64]) -> (Vec<f64>, f64) {
    let m = model.feature_count;
    assert!(m <= 16, "enumeration oracle is exponential");
    let values: Vec<f64> = (0u32..1 << m).map(|s| subset_value(model, x, s)).collect();
    let mut alpha = vec![0.0; m];
    for (i, a) in alpha.iter_mut().enumerate() {
        for s in 0u32..1 << m {
            if s & (1 << i) != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = factorial(size) * factorial(m - size - 1) / factorial(m);
            *a += w * (values[(s | (1 << i)) as usize] - values[s as usize]);
        }
    }
    (alpha, values[0])
}

/// `max(0, sum_k c_k A[k,i,j])` computed pixel by pixel, then divided by its maximum.
pub fn triple_loop_map(coeffs: &[f64], acts: &FeatureMaps) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (acts.height(), acts.width());
    let mut raw = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (k, c) in coeffs.iter().enumerate() {
                s += c * acts.get(k, i, j);
            }
            raw[i * w + j] = s.max(0.0);
        }
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { raw.iter().map(|v| v / max).collect() } else { raw.clone() };
    (raw, norm)
}

pub fn random_maps(rng: &mut ChaCha20Rng, k: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMaps {
    let data = (0..k * h * w).map(|_| rng.random_range(lo..hi)).collect();
    FeatureMaps::new(k, h, w, data).unwrap()
}

pub fn random_head(rng: &mut ChaCha20Rng, classes: usize, channels: usize) -> HeadWeights {
    let w = (0..classes * channels).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
    HeadWeights::new(classes, channels, w, b).unwrap()
}

/// Logit of `class` written out directly from the head definition.
pub fn reference_logit(head: &HeadWeights, class: usize, acts: &FeatureMaps) -> f64 {
    let z = acts.pixels() as f64;
    let mut y = head.bias()[class];
    for k in 0..acts.channels() {
        let mean: f64 = acts.channel(k).iter().sum::<f64>() / z;
        y += head.row(class)[k] * mean;
    }
    y
}

/// Central finite-difference estimate of the pooled gradient of `class`.
pub fn finite_difference_pooled(head: &HeadWeights, class: usize, acts: &FeatureMaps, step: f64) -> Vec<f64> {
    let (k, h, w) = (acts.channels(), acts.height(), acts.width());
    let base = acts.as_slice().to_vec();
    let mut pooled = vec![0.0; k];
    for ch in 0..k {
        let mut acc = 0.0;
        for p in 0..h * w {
            let idx = ch * h * w + p;
            let mut plus = base.clone();
            plus[idx] += step;
            let mut minus = base.clone();
            minus[idx] -= step;
            let yp = reference_logit(head, class, &FeatureMaps::new(k, h, w, plus).unwrap());
            let ym = reference_logit(head, class, &FeatureMaps::new(k, h, w, minus).unwrap());
            acc += (yp - ym) / (2.0 * step);
        }
        pooled[ch] = acc / (h * w) as f64;
    }
    pooled
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Sorted list of every file under `dir`, relative paths.
pub fn walk_files(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    fn go(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                go(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    go(dir, dir, &mut out);
    out.sort();
    out
}

pub struct SharedRun {
    pub dir: tempfile::TempDir,
    pub bundle: rfcam_core::TensorBundle,
    pub truth: rfcam_core::FixtureGroundTruth,
    pub models: rfcam_core::SurrogateSet,
    pub records: Vec<rfcam_core::DetectionRecord>,
    pub report: rfcam_core::RunReport,
}

impl SharedRun {
    pub fn bundle_dir(&self) -> std::path::PathBuf {
        self.dir.path().join("bundle")
    }
}

/// Default fixture, trained and detected once per test binary.
pub fn shared_run() -> &'static SharedRun {
    static RUN: std::sync::OnceLock<SharedRun> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        use rfcam_core::pipeline::*;
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("bundle");
        let (bundle, truth) = rfcam_core::fixture_gen(&rfcam_core::FixtureSpec::default(), &root).unwrap();
        let outcome = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap();
        save_surrogates(&root, &outcome).unwrap();
        let (records, report) =
            run_detection(&bundle, &outcome.models, &rfcam_core::DetectionConfig::default(), &root, None).unwrap();
        SharedRun {
            dir,
            bundle,
            truth,
            models: outcome.models,
            records,
            report,
        }
    })
}
