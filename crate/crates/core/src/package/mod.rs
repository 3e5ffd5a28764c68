//! Signed, encrypted, versioned update packages for partial bitstreams,
//! AI-model parameters and firmware stages.

mod format;
mod payload;
mod validate;

pub use format::{
    build_package, PackageHeader, PackageMeta, PayloadKind, UpdatePackage, FORMAT_VERSION, HEADER_LEN, MAGIC,
    MAX_PAYLOAD_LEN, NO_REGION,
};
pub use payload::{BehaviorId, FeatureSummary, FirmwareImage, ModelPayload, PayloadError, ResourceUsage, SimBitstream};
pub use validate::{
    validate_package, FailedCheck, KeyStoreView, NoRegions, RegionTableView, Validation, ValidationContext,
    ValidationReport, Verdict, DEFAULT_FRESHNESS_WINDOW_MS,
};

use thiserror::Error;

use crate::crypto::CryptoError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackageError {
    #[error("payload of {0} bytes exceeds the 16 MiB cap")]
    PayloadTooLarge(usize),
    #[error("malformed package: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}
