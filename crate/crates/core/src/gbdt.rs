//! Per-class local surrogate models: boosted decision trees predicting
//! whether the original classifier got an instance right.
//!
//! Training is second-order boosting on the logistic loss with exact greedy
//! split search. Each node records its cover (sum of hessian weights routed
//! through it), which the Shapley attribution uses for missing-feature
//! expectations.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::instance_features;
use crate::saliency::SurrogateFeatureVector;
use crate::tensor_store::{Split, TensorBundle};

/// Bound on `|base_score|` in log-odds.
pub const BASE_SCORE_CLAMP: f64 = 10.0;

/// Relative gain difference below which two candidate splits count as tied.
const GAIN_TIE_TOLERANCE: f64 = 1e-9;

const MIN_SPLIT_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub num_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_cover: f64,
    pub l2_regularization: f64,
    /// Sample weight applied to positive (correctly classified) examples.
    pub positive_weight: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            num_rounds: 50,
            max_depth: 4,
            learning_rate: 0.1,
            min_child_cover: 1.0,
            l2_regularization: 1.0,
            positive_weight: 1.0,
            seed: 42,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rounds == 0 {
            return Err(Error::Validation("num_rounds must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Validation("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Validation(format!(
                "learning_rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if !(self.min_child_cover >= 0.0) || !(self.l2_regularization >= 0.0) {
            return Err(Error::Validation(
                "min_child_cover and l2_regularization must be non-negative".into(),
            ));
        }
        if !(self.positive_weight > 0.0 && self.positive_weight.is_finite()) {
            return Err(Error::Validation("positive_weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// `None` for leaves.
    pub feature_index: Option<usize>,
    /// Instances with `phi[feature] < threshold` go left.
    pub threshold: f64,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub leaf_value: f64,
    pub cover: f64,
}

impl TreeNode {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            feature_index: None,
            threshold: 0.0,
            left: None,
            right: None,
            leaf_value: value,
            cover,
        }
    }

    pub fn split(feature: usize, threshold: f64, left: usize, right: usize, cover: f64) -> Self {
        Self {
            feature_index: Some(feature),
            threshold,
            left: Some(left),
            right: Some(right),
            leaf_value: 0.0,
            cover,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature_index.is_none()
    }
}

/// A tree as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn new(nodes: Vec<TreeNode>) -> Self {
        Self { nodes }
    }

    /// Index of the leaf reached by `phi`.
    pub fn leaf_index(&self, phi: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            let node = &self.nodes[idx];
            match (node.feature_index, node.left, node.right) {
                (Some(f), Some(l), Some(r)) => idx = if phi[f] < node.threshold { l } else { r },
                _ => return idx,
            }
        }
    }

    pub fn predict(&self, phi: &[f64]) -> f64 {
        self.nodes[self.leaf_index(phi)].leaf_value
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match (t.nodes[i].left, t.nodes[i].right) {
                (Some(l), Some(r)) => 1 + walk(t, l).max(walk(t, r)),
                _ => 0,
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(self, 0)
        }
    }

    fn validate(&self, feature_count: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Validation("tree has no nodes".into()));
        }
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.cover.is_finite() || node.cover < 0.0 {
                return Err(Error::Validation(format!("node {i} has invalid cover")));
            }
            match (node.feature_index, node.left, node.right) {
                (None, None, None) => {
                    if !node.leaf_value.is_finite() {
                        return Err(Error::Validation(format!("leaf {i} has non-finite value")));
                    }
                }
                (Some(f), Some(l), Some(r)) => {
                    if f >= feature_count {
                        return Err(Error::Validation(format!(
                            "node {i} splits on feature {f}, model has {feature_count}"
                        )));
                    }
                    if l <= i || r <= i || l >= n || r >= n {
                        return Err(Error::Validation(format!("node {i} has invalid children")));
                    }
                    if !node.threshold.is_finite() {
                        return Err(Error::Validation(format!("node {i} has non-finite threshold")));
                    }
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "node {i} is neither a complete split nor a leaf"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmMetrics {
    pub train_accuracy: f64,
    pub train_count: usize,
    /// `None` when the class has no test instances.
    pub test_accuracy: Option<f64>,
    pub test_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub class_index: usize,
    pub feature_count: usize,
    pub base_score: f64,
    pub config: BoostConfig,
    pub metrics: LsmMetrics,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    /// Raw log-odds: base score plus the leaf value of every tree.
    pub fn predict_margin(&self, phi: &SurrogateFeatureVector) -> Result<f64> {
        self.check_len(phi)?;
        Ok(self.margin_unchecked(phi.as_slice()))
    }

    pub fn predict_proba(&self, phi: &SurrogateFeatureVector) -> Result<f64> {
        self.predict_margin(phi).map(logistic)
    }

    pub(crate) fn margin_unchecked(&self, phi: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(phi)).sum::<f64>()
    }

    pub(crate) fn check_len(&self, phi: &SurrogateFeatureVector) -> Result<()> {
        if phi.len() != self.feature_count {
            return Err(Error::Validation(format!(
                "surrogate for class {} expects {} features, got {}",
                self.class_index,
                self.feature_count,
                phi.len()
            )));
        }
        Ok(())
    }

    pub fn accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Validation("accuracy of an empty set".into()));
        }
        let mut hits = 0usize;
        for ex in examples {
            let predicted = self.predict_margin(&ex.phi)? >= 0.0;
            hits += usize::from(predicted == ex.label);
        }
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Records test-split accuracy in the metrics block.
    pub fn evaluate(&mut self, test: &[LabeledExample]) -> Result<()> {
        self.metrics.test_count = test.len();
        self.metrics.test_accuracy = if test.is_empty() {
            None
        } else {
            Some(self.accuracy(test)?)
        };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_score.is_finite() {
            return Err(Error::Validation("base_score is not finite".into()));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            tree.validate(self.feature_count)
                .map_err(|e| Error::Validation(format!("tree {t}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn logistic(margin: f64) -> f64 {
    1.0 / (1.0 + (-margin).exp())
}

/// Surrogate input paired with its correctness label (`true` = classifier was right).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub phi: SurrogateFeatureVector,
    pub label: bool,
}

/// Mean logistic loss (unweighted) of a model on a set of examples.
pub fn logistic_loss(model: &TreeEnsemble, examples: &[LabeledExample]) -> f64 {
    examples
        .iter()
        .map(|ex| {
            let m = model.margin_unchecked(ex.phi.as_slice());
            let y = if ex.label { 1.0 } else { 0.0 };
            // log(1 + e^m) - y*m, computed stably
            let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
            softplus - y * m
        })
        .sum::<f64>()
        / examples.len().max(1) as f64
}

/// Trains the surrogate for one class.
pub fn train_lsm(class_index: usize, examples: &[LabeledExample], config: &BoostConfig) -> Result<TreeEnsemble> {
    config.validate()?;
    let Some(first) = examples.first() else {
        return Err(Error::Validation(format!(
            "class {class_index}: no training examples"
        )));
    };
    let k = first.phi.len();
    if k == 0 {
        return Err(Error::Validation("surrogate features must be non-empty".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.phi.len() != k) {
        return Err(Error::Validation(format!(
            "example {} has {} features, expected {k}",
            ex.id,
            ex.phi.len()
        )));
    }
    if let Some(ex) = examples.iter().find(|e| e.phi.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation(format!("example {} has non-finite features", ex.id)));
    }

    let n = examples.len();
    let labels: Vec<f64> = examples.iter().map(|e| if e.label { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = examples
        .iter()
        .map(|e| if e.label { config.positive_weight } else { 1.0 })
        .collect();
    let total_w: f64 = weights.iter().sum();
    let pos_w: f64 = weights.iter().zip(&labels).map(|(w, y)| w * y).sum();
    let rate = pos_w / total_w;
    let base_score = if rate <= 0.0 {
        -BASE_SCORE_CLAMP
    } else if rate >= 1.0 {
        BASE_SCORE_CLAMP
    } else {
        (rate / (1.0 - rate)).ln().clamp(-BASE_SCORE_CLAMP, BASE_SCORE_CLAMP)
    };

    let mut model = TreeEnsemble {
        class_index,
        feature_count: k,
        base_score,
        config: config.clone(),
        metrics: LsmMetrics {
            train_accuracy: 0.0,
            train_count: n,
            test_accuracy: None,
            test_count: 0,
        },
        trees: Vec::new(),
    };

    let single_class = labels.iter().all(|&y| y == labels[0]);
    if !single_class {
        let columns: Vec<Vec<f64>> = (0..k)
            .map(|f| examples.iter().map(|e| e.phi.0[f]).collect())
            .collect();
        let sorted: Vec<Vec<usize>> = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let mut margins = vec![base_score; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for _ in 0..config.num_rounds {
            for i in 0..n {
                let p = logistic(margins[i]);
                grad[i] = weights[i] * (p - labels[i]);
                hess[i] = weights[i] * p * (1.0 - p);
            }
            let grower = Grower {
                columns: &columns,
                sorted: &sorted,
                grad: &grad,
                hess: &hess,
                config,
            };
            let tree = grower.grow(n);
            for (i, m) in margins.iter_mut().enumerate() {
                *m += tree.predict(&examples[i].phi.0);
            }
            model.trees.push(tree);
        }
    }

    model.metrics.train_accuracy = model.accuracy(examples)?;
    Ok(model)
}

struct Grower<'a> {
    columns: &'a [Vec<f64>],
    sorted: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a BoostConfig,
}

struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&self, n: usize) -> Tree {
        let mut nodes = Vec::new();
        let mut member = vec![true; n];
        let all: Vec<usize> = (0..n).collect();
        self.build(&all, &mut member, 0, &mut nodes);
        Tree::new(nodes)
    }

    fn build(&self, samples: &[usize], member: &mut [bool], depth: usize, nodes: &mut Vec<TreeNode>) -> usize {
        let g: f64 = samples.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = samples.iter().map(|&i| self.hess[i]).sum();
        let idx = nodes.len();
        let lambda = self.config.l2_regularization;
        let leaf_value = -self.config.learning_rate * g / (h + lambda);
        nodes.push(TreeNode::leaf(leaf_value, h));

        if depth >= self.config.max_depth || samples.len() < 2 {
            return idx;
        }
        let Some(split) = self.best_split(member, g, h) else {
            return idx;
        };

        let col = &self.columns[split.feature];
        let (left, right): (Vec<usize>, Vec<usize>) =
            samples.iter().partition(|&&i| col[i] < split.threshold);

        for &i in &right {
            member[i] = false;
        }
        let l = self.build(&left, member, depth + 1, nodes);
        for &i in &right {
            member[i] = true;
        }
        for &i in &left {
            member[i] = false;
        }
        let r = self.build(&right, member, depth + 1, nodes);
        for &i in &left {
            member[i] = true;
        }

        nodes[idx] = TreeNode::split(split.feature, split.threshold, l, r, h);
        idx
    }

    /// Exact search over every feature and every midpoint between
    /// consecutive distinct values. Ties keep the earlier candidate, which
    /// is the lowest feature index and then the lowest threshold.
    fn best_split(&self, member: &[bool], g: f64, h: f64) -> Option<SplitCandidate> {
        let lambda = self.config.l2_regularization;
        let min_cover = self.config.min_child_cover;
        let parent_score = g * g / (h + lambda);
        let mut best: Option<SplitCandidate> = None;
        let mut order = Vec::new();

        for (f, sorted) in self.sorted.iter().enumerate() {
            let col = &self.columns[f];
            order.clear();
            order.extend(sorted.iter().copied().filter(|&i| member[i]));
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..order.len().saturating_sub(1) {
                let i = order[w];
                gl += self.grad[i];
                hl += self.hess[i];
                let (lo, hi) = (col[i], col[order[w + 1]]);
                if lo >= hi {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < min_cover || hr < min_cover {
                    continue;
                }
                let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score);
                if !(gain > MIN_SPLIT_GAIN) {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some(b) => gain > b.gain + GAIN_TIE_TOLERANCE * b.gain.abs(),
                };
                if better {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold <= lo {
                        threshold = hi;
                    }
                    best = Some(SplitCandidate {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }
}

/// Training and test examples of one class, labelled by classifier correctness.
#[derive(Debug, Clone, Default)]
pub struct ClassExamples {
    pub class_index: usize,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Groups bundle entries by true label; label is `true` when the prediction
/// matches. Surrogate inputs use the predicted-class gradients.
pub fn build_misclassification_labels(bundle: &TensorBundle) -> Result<Vec<ClassExamples>> {
    let rows: Vec<Result<(usize, Split, LabeledExample)>> = bundle
        .images()
        .par_iter()
        .map(|entry| {
            let feats = instance_features(bundle, entry)?;
            Ok((
                entry.true_label,
                entry.split,
                LabeledExample {
                    id: entry.id.clone(),
                    phi: feats.phi,
                    label: entry.is_correct(),
                },
            ))
        })
        .collect();
    let mut classes: Vec<ClassExamples> = (0..bundle.num_classes())
        .map(|c| ClassExamples {
            class_index: c,
            ..Default::default()
        })
        .collect();
    for row in rows {
        let (class, split, example) = row?;
        match split {
            Split::Train => classes[class].train.push(example),
            Split::Test => classes[class].test.push(example),
        }
    }
    Ok(classes)
}
