//! Append-only JSON-lines log of review decisions.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rfcam_core::retrieval::FeatureIndex;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Confirm,
    Reject,
    AutoFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewEvent {
    /// UTC, RFC 3339 with millisecond precision.
    pub timestamp: String,
    pub instance_id: String,
    pub action: ReviewAction,
    pub actor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureIndex>,
    /// For auto-flags: the confirmed instance that triggered them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Reads every event in `path`. A missing file is an empty log. A final
/// line without a newline is a torn write from a crash and is dropped.
pub fn read_events(path: &Path) -> Result<Vec<ReviewEvent>, ServiceError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::Io(path.to_path_buf(), e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!("{}: ignoring incomplete final line", path.display());
    }
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ServiceError::Log(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Open handle for appending. Each append is written and synced before returning.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        if let Ok(text) = std::fs::read(path) {
            // Cut a torn final line so the next append starts on a fresh line.
            if let Some(i) = text.iter().rposition(|&b| b == b'\n') {
                if i + 1 < text.len() {
                    let f = OpenOptions::new()
                        .write(true)
                        .open(path)
                        .map_err(|e| ServiceError::Io(path.to_path_buf(), e))?;
                    f.set_len(i as u64 + 1).map_err(|e| ServiceError::Io(path.to_path_buf(), e))?;
                }
            } else if !text.is_empty() {
                File::create(path).map_err(|e| ServiceError::Io(path.to_path_buf(), e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::Io(path.to_path_buf(), e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends a batch as consecutive lines in a single write.
    pub fn append(&mut self, events: &[ReviewEvent]) -> Result<(), ServiceError> {
        let mut buf = Vec::new();
        for ev in events {
            serde_json::to_writer(&mut buf, ev).map_err(|e| ServiceError::Log(e.to_string()))?;
            buf.push(b'\n');
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| ServiceError::Io(self.path.clone(), e))
    }

    pub fn flush(&mut self) -> Result<(), ServiceError> {
        self.file
            .flush()
            .and_then(|_| self.file.sync_all())
            .map_err(|e| ServiceError::Io(self.path.clone(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(id: &str, action: ReviewAction) -> ReviewEvent {
        ReviewEvent {
            timestamp: now_timestamp(),
            instance_id: id.into(),
            action,
            actor: "t".into(),
            note: None,
            feature: Some(FeatureIndex(3)),
            source: None,
        }
    }

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.jsonl");
        let mut log = EventLog::open(&p).unwrap();
        let batch = vec![ev("a", ReviewAction::Confirm), ev("b", ReviewAction::AutoFlag)];
        log.append(&batch).unwrap();
        log.append(&[ev("c", ReviewAction::Reject)]).unwrap();
        let back = read_events(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(&back[..2], &batch[..]);
    }

    #[test]
    fn missing_log_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_events(&dir.path().join("none.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn torn_final_line_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.jsonl");
        let mut log = EventLog::open(&p).unwrap();
        log.append(&[ev("a", ReviewAction::Confirm)]).unwrap();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"timestamp\":\"2").unwrap();
        drop(f);
        assert_eq!(read_events(&p).unwrap().len(), 1);
        let mut log = EventLog::open(&p).unwrap();
        log.append(&[ev("b", ReviewAction::Reject)]).unwrap();
        let ids: Vec<_> = read_events(&p).unwrap().into_iter().map(|e| e.instance_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.jsonl");
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(read_events(&p), Err(ServiceError::Log(_))));
    }

    #[test]
    fn timestamps_are_utc() {
        assert!(now_timestamp().ends_with('Z'));
    }
}
