//! Run configuration: an optional JSON file, overridden by flags.

use std::path::Path;

use rfcam_core::{BoostConfig, DetectionConfig, FixtureSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fixture: FixtureSpec,
    pub boost: BoostConfig,
    pub detection: DetectionConfig,
    /// Worker threads for training and detection. Unset means one per core.
    pub parallelism: Option<usize>,
    /// Retrieval depth for `retrieve` and for auto-flagging in `serve`.
    pub top: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| rfcam_core::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.parallelism == Some(0) {
            return Err(CliError::Usage("parallelism must be >= 1".into()));
        }
        if self.top == Some(0) {
            return Err(CliError::Usage("top must be >= 1".into()));
        }
        self.fixture.validate()?;
        self.boost.validate()?;
        self.detection.validate()?;
        Ok(())
    }
}
