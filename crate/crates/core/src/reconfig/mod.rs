//! Secure partial reconfiguration: the trust anchor's nine-step session
//! workflow, trojan scanning, the configuration-port timing model, built-in
//! self-test and configuration scrubbing.

mod anchor;
mod bist;
mod scan;
mod timing;

pub use anchor::{
    icap_program, AbortReason, AccelRequest, FaultPlan, ReconfigSession, ScrubFinding, SessionState, StepRecord,
    TenantApp, TrustAnchor, STEP_NAMES,
};
pub use bist::{golden_vectors, run_bist, BistMismatch, BistOutcome, BistVector};
pub use scan::{trojan_scan, ScanVerdict, TrojanScanReport};
pub use timing::{
    IcapCalibration, IcapTimingModel, CALIBRATED_OVERHEAD_MS, CALIBRATED_THROUGHPUT, VFPGA1_BODY_LEN, VFPGA2_BODY_LEN,
};

use thiserror::Error;

use crate::crypto::CryptoError;
use crate::package::PackageError;
use crate::platform::PlatformError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReconfigError {
    #[error("key store has been zeroized")]
    ZeroizedKeystore,
    #[error("region {0} is not configuring")]
    RegionNotConfiguring(u8),
    #[error("region {0} is not active")]
    RegionNotActive(u8),
    #[error("bitstream exceeds the budget of region {0}")]
    OverBudget(u8),
    #[error("no timing calibration for region {0}")]
    NoCalibration(u8),
    #[error("invalid timing calibration for region {0}")]
    BadCalibration(u8),
    #[error("region {0} has no accepted image to reload")]
    NothingToReload(u8),
    #[error("model update rejected: {0}")]
    ModelRejected(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Package(#[from] PackageError),
}
