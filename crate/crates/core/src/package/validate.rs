//! Staged package validation.
//!
//! Every check runs even after an earlier one has failed, so the report
//! names all defects of a package. Checks that need the plaintext are
//! skipped when decryption fails.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::format::{PayloadKind, UpdatePackage, FORMAT_VERSION, MAGIC, NO_REGION};
use super::payload::{ResourceUsage, SimBitstream};
use crate::crypto::{aead_decrypt, crc32, CryptoProfile, KeyId, KeyMaterial};
use crate::reconfig::{trojan_scan, ScanVerdict};

/// Default accepted clock skew between package timestamp and receiver.
pub const DEFAULT_FRESHNESS_WINDOW_MS: u64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailedCheck {
    BadMagic,
    BadSignature,
    AuthFailure,
    DigestMismatch,
    CrcMismatch,
    RollbackVersion,
    ReplayedSequence,
    StaleTimestamp,
    UnknownRegion,
    ResourceOverBudget,
    TrojanSuspect,
}

impl FailedCheck {
    pub const ALL: [FailedCheck; 11] = [
        FailedCheck::BadMagic,
        FailedCheck::BadSignature,
        FailedCheck::AuthFailure,
        FailedCheck::DigestMismatch,
        FailedCheck::CrcMismatch,
        FailedCheck::RollbackVersion,
        FailedCheck::ReplayedSequence,
        FailedCheck::StaleTimestamp,
        FailedCheck::UnknownRegion,
        FailedCheck::ResourceOverBudget,
        FailedCheck::TrojanSuspect,
    ];
}

impl fmt::Display for FailedCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub failed_checks: Vec<FailedCheck>,
    pub checked_at_ms: u64,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }

    pub fn has(&self, check: FailedCheck) -> bool {
        self.failed_checks.contains(&check)
    }

    /// `A,B,C` form used in event details.
    pub fn failure_list(&self) -> String {
        self.failed_checks.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Report plus the decrypted payload, which is only released on acceptance.
#[derive(Debug, Clone)]
pub struct Validation {
    pub report: ValidationReport,
    pub plaintext: Option<Vec<u8>>,
}

/// Read-only lookup of trusted signing keys.
pub trait KeyStoreView {
    fn trusted_key(&self, id: &KeyId) -> Option<&KeyMaterial>;
}

impl KeyStoreView for [KeyMaterial] {
    fn trusted_key(&self, id: &KeyId) -> Option<&KeyMaterial> {
        self.iter().find(|k| &k.key_id == id)
    }
}

impl KeyStoreView for Vec<KeyMaterial> {
    fn trusted_key(&self, id: &KeyId) -> Option<&KeyMaterial> {
        self.as_slice().trusted_key(id)
    }
}

/// Read-only lookup of region budgets.
pub trait RegionTableView {
    fn region_budget(&self, region_id: u8) -> Option<ResourceUsage>;
}

impl RegionTableView for BTreeMap<u8, ResourceUsage> {
    fn region_budget(&self, region_id: u8) -> Option<ResourceUsage> {
        self.get(&region_id).copied()
    }
}

/// A region table with no regions.
pub struct NoRegions;

impl RegionTableView for NoRegions {
    fn region_budget(&self, _: u8) -> Option<ResourceUsage> {
        None
    }
}

/// Inputs to [`validate_package`]. `None` for `stored_version`,
/// `last_sequence` or `freshness_window_ms` disables that check (boot-time
/// verification of static images uses this).
pub struct ValidationContext<'a> {
    pub profile: CryptoProfile,
    pub keys: &'a dyn KeyStoreView,
    pub decrypt_key: Option<&'a KeyMaterial>,
    pub regions: &'a dyn RegionTableView,
    pub stored_version: Option<u32>,
    pub last_sequence: Option<u64>,
    pub now_ms: u64,
    pub freshness_window_ms: Option<u64>,
}

impl<'a> ValidationContext<'a> {
    pub fn new(
        profile: CryptoProfile,
        keys: &'a dyn KeyStoreView,
        decrypt_key: Option<&'a KeyMaterial>,
        regions: &'a dyn RegionTableView,
        now_ms: u64,
    ) -> Self {
        ValidationContext {
            profile,
            keys,
            decrypt_key,
            regions,
            stored_version: None,
            last_sequence: None,
            now_ms,
            freshness_window_ms: Some(DEFAULT_FRESHNESS_WINDOW_MS),
        }
    }

    pub fn stored_version(mut self, v: Option<u32>) -> Self {
        self.stored_version = v;
        self
    }

    pub fn last_sequence(mut self, s: Option<u64>) -> Self {
        self.last_sequence = s;
        self
    }

    pub fn freshness_window(mut self, w: Option<u64>) -> Self {
        self.freshness_window_ms = w;
        self
    }
}

pub fn validate_package(pkg: &UpdatePackage, ctx: &ValidationContext<'_>) -> Validation {
    let mut failed = Vec::new();
    let h = &pkg.header;

    if h.magic != MAGIC || h.format_version != FORMAT_VERSION {
        failed.push(FailedCheck::BadMagic);
    }

    let sig_ok = ctx
        .keys
        .trusted_key(&pkg.signature.signer_key_id)
        .map(|k| ctx.profile.verify(&pkg.signed_bytes(), &pkg.signature, k).unwrap_or(false))
        .unwrap_or(false);
    if !sig_ok {
        failed.push(FailedCheck::BadSignature);
    }

    let plaintext = ctx
        .decrypt_key
        .and_then(|k| aead_decrypt(k, &h.nonce, &pkg.ciphertext, &h.to_bytes()).ok());
    match &plaintext {
        None => failed.push(FailedCheck::AuthFailure),
        Some(pt) => {
            if ctx.profile.digest(pt) != h.plaintext_digest {
                failed.push(FailedCheck::DigestMismatch);
            }
            if crc32(pt) != h.plaintext_crc {
                failed.push(FailedCheck::CrcMismatch);
            }
        }
    }

    if let Some(stored) = ctx.stored_version {
        if h.package_version <= stored {
            failed.push(FailedCheck::RollbackVersion);
        }
    }
    if let Some(last) = ctx.last_sequence {
        if h.sequence_number <= last {
            failed.push(FailedCheck::ReplayedSequence);
        }
    }
    if let Some(window) = ctx.freshness_window_ms {
        if ctx.now_ms.abs_diff(h.timestamp_ms) > window {
            failed.push(FailedCheck::StaleTimestamp);
        }
    }

    let region_required = h.payload_kind == PayloadKind::PartialBitstream || h.target_region_id != NO_REGION;
    let budget = if region_required {
        let b = ctx.regions.region_budget(h.target_region_id);
        if b.is_none() {
            failed.push(FailedCheck::UnknownRegion);
        }
        b
    } else {
        None
    };

    if h.payload_kind == PayloadKind::PartialBitstream {
        if let Some(pt) = &plaintext {
            match SimBitstream::decode(pt) {
                Ok(bs) => {
                    if let Some(b) = budget {
                        if !bs.resource_usage.fits_within(&b) {
                            failed.push(FailedCheck::ResourceOverBudget);
                        }
                    }
                    if trojan_scan(&bs).verdict == ScanVerdict::Suspect {
                        failed.push(FailedCheck::TrojanSuspect);
                    }
                }
                // An authentic payload that cannot be analysed is not loaded.
                Err(_) => failed.push(FailedCheck::TrojanSuspect),
            }
        }
    }

    let verdict = if failed.is_empty() {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    };
    Validation {
        plaintext: if verdict == Verdict::Accepted { plaintext } else { None },
        report: ValidationReport {
            verdict,
            failed_checks: failed,
            checked_at_ms: ctx.now_ms,
        },
    }
}
