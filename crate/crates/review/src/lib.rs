//! HTTP service where a developer reviews flagged instances.
//!
//! Decisions are appended to a JSON-lines event log; the served state is
//! always the fold of that log over the detection records, so restarting
//! the service reproduces it exactly. Confirming an instance retrieves the
//! test instances that most strongly activate its top neural feature and
//! auto-flags the pending ones.

pub mod api;
pub mod events;
pub mod schema;
pub mod state;

use std::path::PathBuf;

pub use api::{serve, serve_on, ReviewService, ServiceOptions};
pub use events::{ReviewAction, ReviewEvent};
pub use state::ReviewState;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8787";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("i/o error at {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("event log: {0}")]
    Log(String),
    #[error("cannot listen on {0}: {1}")]
    Bind(String, #[source] std::io::Error),
    #[error(transparent)]
    Core(#[from] rfcam_core::Error),
}

impl ServiceError {
    /// Process exit code: 2 for I/O and startup failures, 1 for invalid content.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Core(e) if !e.is_io() => 1,
            ServiceError::Log(_) => 1,
            _ => 2,
        }
    }
}
