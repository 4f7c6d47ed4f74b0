//! Retrieval of instances that activate a confirmed spurious neural feature,
//! and propagation of the finding to their detection records.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectionRecord, ReviewStatus};
use crate::error::{Error, Result};
use crate::saliency::{channel_means, ChannelMeans};
use crate::tensor_store::{Split, TensorBundle};

/// A channel index into the activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureIndex(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub instance_id: String,
    /// Mean activation of the queried channel.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_instance: String,
    pub feature: FeatureIndex,
    pub class_index: usize,
    /// Non-increasing in score; never contains the query.
    pub ranked: Vec<RetrievalHit>,
}

#[derive(Debug, Clone)]
struct IndexedEntry {
    id: String,
    predicted_label: usize,
    split: Split,
    means: ChannelMeans,
}

/// Channel means of every bundle entry, computed once.
#[derive(Debug, Clone)]
pub struct ActivationIndex {
    channels: usize,
    num_classes: usize,
    entries: Vec<IndexedEntry>,
}

impl ActivationIndex {
    pub fn build(bundle: &TensorBundle) -> Result<Self> {
        let entries = bundle
            .images()
            .par_iter()
            .map(|e| {
                let acts = bundle.activations(e)?;
                Ok(IndexedEntry {
                    id: e.id.clone(),
                    predicted_label: e.predicted_label,
                    split: e.split,
                    means: channel_means(&acts),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels: bundle.channels(),
            num_classes: bundle.num_classes(),
            entries,
        })
    }

    pub fn means(&self, id: &str) -> Option<&ChannelMeans> {
        self.entries.iter().find(|e| e.id == id).map(|e| &e.means)
    }

    /// Top `n` entries predicted as `class_index`, ranked by mean activation
    /// of `feature`; ties go to the lexicographically smaller id. `split`
    /// restricts the candidate pool when set.
    pub fn similar_instances(
        &self,
        class_index: usize,
        feature: FeatureIndex,
        query_id: &str,
        n: usize,
        split: Option<Split>,
    ) -> Result<RetrievalResult> {
        if n == 0 {
            return Err(Error::Validation("n must be >= 1".into()));
        }
        if class_index >= self.num_classes {
            return Err(Error::Validation(format!("unknown class {class_index}")));
        }
        if feature.0 >= self.channels {
            return Err(Error::Validation(format!(
                "feature {} out of range for {} channels",
                feature.0, self.channels
            )));
        }
        let mut hits: Vec<RetrievalHit> = self
            .entries
            .iter()
            .filter(|e| e.predicted_label == class_index && e.id != query_id)
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| RetrievalHit {
                instance_id: e.id.clone(),
                score: e.means.0[feature.0],
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.instance_id.cmp(&b.instance_id)));
        hits.truncate(n);
        Ok(RetrievalResult {
            query_instance: query_id.to_string(),
            feature,
            class_index,
            ranked: hits,
        })
    }
}

/// Convenience wrapper that indexes the bundle and queries it once.
pub fn similar_instances(
    bundle: &TensorBundle,
    class_index: usize,
    feature: FeatureIndex,
    query_id: &str,
    n: usize,
) -> Result<RetrievalResult> {
    ActivationIndex::build(bundle)?.similar_instances(class_index, feature, query_id, n, None)
}

/// Detection records keyed by instance id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordStore {
    records: BTreeMap<String, DetectionRecord>,
}

impl RecordStore {
    pub fn new(records: impl IntoIterator<Item = DetectionRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.instance_id.clone(), r)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&DetectionRecord> {
        self.records.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut DetectionRecord> {
        self.records.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DetectionRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ids among the first `top_n` hits whose records are still pending.
    pub fn auto_flag_candidates(&self, result: &RetrievalResult, top_n: usize) -> Vec<String> {
        result
            .ranked
            .iter()
            .take(top_n)
            .filter(|h| {
                self.records
                    .get(&h.instance_id)
                    .is_some_and(|r| r.status == ReviewStatus::Pending)
            })
            .map(|h| h.instance_id.clone())
            .collect()
    }

    /// Moves pending records among the top `top_n` hits to `auto_flagged`.
    /// Confirmed and rejected records are left alone. Returns the number changed.
    pub fn auto_flag(&mut self, result: &RetrievalResult, top_n: usize) -> usize {
        let ids = self.auto_flag_candidates(result, top_n);
        for id in &ids {
            if let Some(r) = self.records.get_mut(id) {
                r.status = ReviewStatus::AutoFlagged;
            }
        }
        ids.len()
    }
}
