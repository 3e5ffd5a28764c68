//! Scenario files, the scripted runner, metrics and result export.
//!
//! A scenario is a TOML document: platform layout, timing calibration,
//! ground-link adversary, and an ordered script of actions interleaved with
//! `expect` predicates. [`run_scenario`] executes it on a logical clock under
//! the scenario seed, so a rerun reproduces every exported byte.

mod export;
mod keys;
mod metrics;
mod runner;
mod scenario;

pub use export::{export_results, ExportedFiles, EVENTS_FILE, METRICS_FILE, TRACE_FILE};
pub use keys::KeyDirectory;
pub use metrics::{collect_metrics, mean_and_sample_std, MetricsSummary, RegionMetrics};
pub use runner::{run_scenario, sub_seed, ExpectationResult, ScenarioOutcome};
pub use scenario::{
    Action, Expect, Faults, Forge, ReconfigStep, Scenario, Settings, Step, TimingBlock, UplinkKind, UplinkStep, Workload,
};

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::behavioral::BehaviorError;
use crate::boot::BootError;
use crate::crypto::CryptoError;
use crate::link::LinkError;
use crate::package::{PackageError, PayloadError};
use crate::platform::PlatformError;
use crate::reconfig::ReconfigError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("key directory: {0}")]
    Keys(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error(transparent)]
    Reconfig(#[from] ReconfigError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 for a scenario that cannot be run as written,
    /// 1 for anything that went wrong while running it.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Malformed(_) | HarnessError::Keys(_) => 2,
            HarnessError::Io { .. } => 2,
            _ => 1,
        }
    }
}
