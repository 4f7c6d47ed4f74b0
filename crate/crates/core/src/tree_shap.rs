//! Exact Shapley attribution of a surrogate's margin.
//!
//! Uses the polynomial-time path-tracking recursion over each tree: the
//! path from the root carries, for every feature split on so far, the
//! fraction of subsets in which the instance follows the path (`one`) and
//! the cover fraction that flows down it when the feature is absent
//! (`zero`). Values are computed on the raw margin, so contributions of the
//! individual trees simply add up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{Tree, TreeEnsemble};
use crate::saliency::SurrogateFeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    /// Contribution of each surrogate feature (one per channel).
    pub alpha: Vec<f64>,
    /// Expected margin, i.e. the attribution base value.
    pub alpha0: f64,
    pub class_index: usize,
    pub instance_id: String,
}

impl ShapAttribution {
    /// `alpha0 + sum(alpha)`; equals the model margin for the explained instance.
    pub fn total(&self) -> f64 {
        self.alpha0 + self.alpha.iter().sum::<f64>()
    }
}

pub fn shap_for_instance(
    model: &TreeEnsemble,
    phi: &SurrogateFeatureVector,
    instance_id: &str,
) -> Result<ShapAttribution> {
    model.check_len(phi)?;
    let mut alpha = vec![0.0; model.feature_count];
    let mut alpha0 = model.base_score;
    for (t, tree) in model.trees.iter().enumerate() {
        check_covers(tree, t)?;
        alpha0 += tree_expectation(tree);
        tree_shap(tree, phi.as_slice(), &mut alpha);
    }
    Ok(ShapAttribution {
        alpha,
        alpha0,
        class_index: model.class_index,
        instance_id: instance_id.to_string(),
    })
}

/// Base score plus the cover-weighted mean leaf value of every tree.
pub fn expected_margin(model: &TreeEnsemble) -> f64 {
    model.base_score + model.trees.iter().map(tree_expectation).sum::<f64>()
}

fn check_covers(tree: &Tree, t: usize) -> Result<()> {
    for (i, node) in tree.nodes.iter().enumerate() {
        if !node.is_leaf() && !(node.cover > 0.0) {
            return Err(Error::Numerical(format!("tree {t} node {i} has zero cover")));
        }
    }
    Ok(())
}

fn tree_expectation(tree: &Tree) -> f64 {
    fn walk(tree: &Tree, i: usize) -> f64 {
        let n = &tree.nodes[i];
        match (n.left, n.right) {
            (Some(l), Some(r)) => {
                if n.cover > 0.0 {
                    (tree.nodes[l].cover * walk(tree, l) + tree.nodes[r].cover * walk(tree, r)) / n.cover
                } else {
                    0.0
                }
            }
            _ => n.leaf_value,
        }
    }
    if tree.nodes.is_empty() {
        0.0
    } else {
        walk(tree, 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn tree_shap(tree: &Tree, phi: &[f64], alpha: &mut [f64]) {
    if tree.nodes.is_empty() {
        return;
    }
    recurse(tree, phi, alpha, 0, &[], 1.0, 1.0, None);
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    phi: &[f64],
    alpha: &mut [f64],
    node: usize,
    parent_path: &[PathElement],
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    let mut path = parent_path.to_vec();
    extend(&mut path, zero_fraction, one_fraction, feature);
    let n = &tree.nodes[node];

    let (Some(split), Some(left), Some(right)) = (n.feature_index, n.left, n.right) else {
        for i in 1..path.len() {
            let w = unwound_sum(&path, i);
            let el = path[i];
            if let Some(f) = el.feature {
                alpha[f] += w * (el.one_fraction - el.zero_fraction) * n.leaf_value;
            }
        }
        return;
    };

    let (hot, cold) = if phi[split] < n.threshold {
        (left, right)
    } else {
        (right, left)
    };
    let hot_zero = tree.nodes[hot].cover / n.cover;
    let cold_zero = tree.nodes[cold].cover / n.cover;

    let mut incoming_zero = 1.0;
    let mut incoming_one = 1.0;
    if let Some(k) = path.iter().position(|e| e.feature == Some(split)) {
        incoming_zero = path[k].zero_fraction;
        incoming_one = path[k].one_fraction;
        unwind(&mut path, k);
    }

    recurse(tree, phi, alpha, hot, &path, hot_zero * incoming_zero, incoming_one, Some(split));
    recurse(tree, phi, alpha, cold, &path, cold_zero * incoming_zero, 0.0, Some(split));
}

fn extend(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * d1 / ((i + 1) as f64 * one);
            next_one = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next_one * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next_one = path[i].weight - tmp * zero * (depth - i) as f64 / d1;
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((depth - i) as f64 / d1);
        }
    }
    total
}
