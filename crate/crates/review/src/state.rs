//! Review state as a fold of the event log over the detection records.

use std::collections::BTreeMap;

use rfcam_core::detector::{DetectionRecord, ReviewStatus};
use rfcam_core::retrieval::FeatureIndex;
use serde::{Deserialize, Serialize};

use crate::events::{ReviewAction, ReviewEvent};

const ALL_STATUSES: [ReviewStatus; 5] = [
    ReviewStatus::Pending,
    ReviewStatus::Confirmed,
    ReviewStatus::Rejected,
    ReviewStatus::Diagnostic,
    ReviewStatus::AutoFlagged,
];

/// A confirmed instance and the instances auto-flagged because of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    pub instance_id: String,
    pub feature: Option<FeatureIndex>,
    pub confirmed_at: String,
    pub auto_flagged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionError {
    UnknownInstance(String),
    /// The record's current status does not allow the action.
    Conflict { instance_id: String, status: ReviewStatus },
}

impl std::fmt::Display for TransitionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransitionError::UnknownInstance(id) => write!(f, "unknown instance {id}"),
            TransitionError::Conflict { instance_id, status } => {
                write!(f, "instance {instance_id} is already {}", status.as_str())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReviewState {
    records: BTreeMap<String, DetectionRecord>,
    history: BTreeMap<String, Vec<ReviewEvent>>,
    groups: Vec<CorrelationGroup>,
    event_count: usize,
}

impl ReviewState {
    pub fn new(records: impl IntoIterator<Item = DetectionRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.instance_id.clone(), r)).collect(),
            ..Default::default()
        }
    }

    /// Folds `events` over the records. Fails on the first event that is not a legal transition.
    pub fn replay(
        records: impl IntoIterator<Item = DetectionRecord>,
        events: &[ReviewEvent],
    ) -> Result<Self, (usize, TransitionError)> {
        let mut state = Self::new(records);
        for (i, ev) in events.iter().enumerate() {
            state.apply(ev).map_err(|e| (i, e))?;
        }
        Ok(state)
    }

    /// Checks whether `action` may be applied to `instance_id` without changing anything.
    pub fn check(&self, instance_id: &str, action: ReviewAction) -> Result<&DetectionRecord, TransitionError> {
        let record = self
            .records
            .get(instance_id)
            .ok_or_else(|| TransitionError::UnknownInstance(instance_id.to_string()))?;
        let allowed = match action {
            ReviewAction::Confirm | ReviewAction::Reject => record.status.is_reviewable(),
            ReviewAction::AutoFlag => record.status == ReviewStatus::Pending,
        };
        if allowed {
            Ok(record)
        } else {
            Err(TransitionError::Conflict {
                instance_id: instance_id.to_string(),
                status: record.status,
            })
        }
    }

    pub fn apply(&mut self, ev: &ReviewEvent) -> Result<(), TransitionError> {
        self.check(&ev.instance_id, ev.action)?;
        let record = self.records.get_mut(&ev.instance_id).expect("checked above");
        record.status = match ev.action {
            ReviewAction::Confirm => ReviewStatus::Confirmed,
            ReviewAction::Reject => ReviewStatus::Rejected,
            ReviewAction::AutoFlag => ReviewStatus::AutoFlagged,
        };
        match ev.action {
            ReviewAction::Confirm => self.groups.push(CorrelationGroup {
                instance_id: ev.instance_id.clone(),
                feature: ev.feature,
                confirmed_at: ev.timestamp.clone(),
                auto_flagged: Vec::new(),
            }),
            ReviewAction::AutoFlag => {
                if let Some(src) = &ev.source {
                    if let Some(g) = self.groups.iter_mut().rev().find(|g| &g.instance_id == src) {
                        g.auto_flagged.push(ev.instance_id.clone());
                    }
                }
            }
            ReviewAction::Reject => {}
        }
        self.history.entry(ev.instance_id.clone()).or_default().push(ev.clone());
        self.event_count += 1;
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&DetectionRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &DetectionRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn history(&self, id: &str) -> &[ReviewEvent] {
        self.history.get(id).map_or(&[], |v| v.as_slice())
    }

    pub fn groups(&self) -> &[CorrelationGroup] {
        &self.groups
    }

    pub fn event_count(&self) -> usize {
        self.event_count
    }

    /// Record counts for every status, zero entries included.
    pub fn status_counts<'a>(records: impl Iterator<Item = &'a DetectionRecord>) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = ALL_STATUSES.iter().map(|s| (s.as_str().to_string(), 0)).collect();
        for r in records {
            *counts.entry(r.status.as_str().to_string()).or_default() += 1;
        }
        counts
    }
}
