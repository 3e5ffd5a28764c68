//! Verified boot over three image slots with golden-image fallback, a
//! watchdog that reverts stalled updates, and staged firmware installation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, KeyMaterial};
use crate::package::{
    build_package, validate_package, FirmwareImage, NoRegions, PackageError, PackageMeta, PayloadKind, UpdatePackage,
    ValidationContext, ValidationReport, NO_REGION,
};
use crate::platform::{Platform, PlatformError, PlatformMode, WorldContext};

pub const STAGE_NAMES: [&str; 3] = ["fsbl", "os", "shell"];
pub const DEFAULT_BOOT_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_UPDATE_TIMEOUT_MS: u64 = 10_000;
/// Simulated cost of verifying one stage.
pub const STAGE_VERIFY_MS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotId {
    Primary,
    Alternate,
    Golden,
}

impl SlotId {
    pub const ALL: [SlotId; 3] = [SlotId::Primary, SlotId::Alternate, SlotId::Golden];
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotId::Primary => "primary",
            SlotId::Alternate => "alternate",
            SlotId::Golden => "golden",
        })
    }
}

impl FromStr for SlotId {
    type Err = BootError;
    fn from_str(s: &str) -> Result<Self, BootError> {
        match s.to_ascii_lowercase().as_str() {
            "primary" => Ok(SlotId::Primary),
            "alternate" => Ok(SlotId::Alternate),
            "golden" => Ok(SlotId::Golden),
            _ => Err(BootError::UnknownSlot(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BootError {
    #[error("fuses not provisioned")]
    FusesNotProvisioned,
    #[error("slot {0} is not writable")]
    SlotNotWritable(SlotId),
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("slot {0} is not installed")]
    SlotMissing(SlotId),
    #[error("stage {stage} out of range for a {len}-stage chain")]
    StageOutOfRange { stage: usize, len: usize },
    #[error("firmware package rejected before validation: {0}")]
    NotFirmware(String),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

/// A boot slot: serialized firmware-stage packages in chain order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootImageSlot {
    slot_id: SlotId,
    stage_chain: Vec<Vec<u8>>,
    writable: bool,
}

impl BootImageSlot {
    pub fn new(slot_id: SlotId, stage_chain: Vec<Vec<u8>>) -> Self {
        BootImageSlot {
            slot_id,
            stage_chain,
            writable: slot_id != SlotId::Golden,
        }
    }

    pub fn slot_id(&self) -> SlotId {
        self.slot_id
    }

    pub fn stage_chain(&self) -> &[Vec<u8>] {
        &self.stage_chain
    }

    pub fn writable(&self) -> bool {
        self.writable
    }
}

/// Builds the three encrypted, signed stage packages of one slot.
pub fn build_stage_chain(
    platform_profile: crate::crypto::CryptoProfile,
    slot: SlotId,
    versions: [u32; 3],
    device_key: &KeyMaterial,
    signer: &KeyMaterial,
) -> Result<Vec<Vec<u8>>, PackageError> {
    (0..3u8)
        .map(|stage| {
            let body = format!("{slot}:{}:v{}", STAGE_NAMES[stage as usize], versions[stage as usize]).into_bytes();
            let payload = FirmwareImage { stage, body }.encode();
            let meta = PackageMeta {
                package_version: versions[stage as usize],
                payload_kind: PayloadKind::FirmwareStage,
                target_region_id: NO_REGION,
                sequence_number: 0,
                timestamp_ms: 0,
                nonce: None,
            };
            Ok(build_package(&platform_profile, &payload, &meta, device_key, signer)?.serialize())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootOutcome {
    BootedPrimary,
    BootedAlternate,
    BootedGolden,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifiedStage {
    pub slot: SlotId,
    pub stage: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageFailure {
    pub slot: SlotId,
    pub stage: usize,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BootReport {
    pub outcome: BootOutcome,
    pub verified_stages: Vec<VerifiedStage>,
    pub failures: Vec<StageFailure>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryTriggered {
    pub label: String,
    pub report: BootReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Watchdog {
    deadline_ms: u64,
    label: String,
}

/// Owns the boot slots and the watchdog.
#[derive(Debug, Clone)]
pub struct BootManager {
    slots: BTreeMap<SlotId, BootImageSlot>,
    watchdog: Option<Watchdog>,
    pub boot_timeout_ms: u64,
    pub update_timeout_ms: u64,
}

impl BootManager {
    pub fn new(slots: impl IntoIterator<Item = BootImageSlot>) -> Self {
        BootManager {
            slots: slots.into_iter().map(|s| (s.slot_id, s)).collect(),
            watchdog: None,
            boot_timeout_ms: DEFAULT_BOOT_TIMEOUT_MS,
            update_timeout_ms: DEFAULT_UPDATE_TIMEOUT_MS,
        }
    }

    pub fn slot(&self, id: SlotId) -> Option<&BootImageSlot> {
        self.slots.get(&id)
    }

    /// Radiation or hardware damage to stored image bytes. Applies to any
    /// slot, including the golden one; it is a fault, not an operation.
    pub fn inject_corruption(&mut self, slot: SlotId, stage: usize, byte: usize) -> Result<(), BootError> {
        let s = self.slots.get_mut(&slot).ok_or(BootError::SlotMissing(slot))?;
        let len = s.stage_chain.len();
        let image = s.stage_chain.get_mut(stage).ok_or(BootError::StageOutOfRange { stage, len })?;
        if image.is_empty() {
            return Ok(());
        }
        let i = byte % image.len();
        image[i] ^= 0xFF;
        Ok(())
    }

    /// Tries Primary, Alternate, then Golden.
    pub fn run_boot(&mut self, platform: &mut Platform) -> Result<BootReport, BootError> {
        self.boot_slots(platform, &SlotId::ALL)
    }

    fn boot_slots(&mut self, platform: &mut Platform, order: &[SlotId]) -> Result<BootReport, BootError> {
        if !platform.fuses().is_programmed() {
            return Err(BootError::FusesNotProvisioned);
        }
        let start = platform.now_ms();
        let mut verified = Vec::new();
        let mut failures = Vec::new();
        for &slot_id in order {
            let Some(slot) = self.slots.get(&slot_id).cloned() else {
                continue;
            };
            match verify_slot(platform, &slot, &mut verified) {
                Ok(version) => {
                    let outcome = match slot_id {
                        SlotId::Primary => BootOutcome::BootedPrimary,
                        SlotId::Alternate => BootOutcome::BootedAlternate,
                        SlotId::Golden => BootOutcome::BootedGolden,
                    };
                    let golden = slot_id == SlotId::Golden;
                    platform.commit_boot(version, !golden);
                    platform.set_mode(if golden {
                        PlatformMode::SafeMode
                    } else {
                        PlatformMode::Operational(slot_id)
                    });
                    platform.append_event(
                        "boot_rom",
                        "boot",
                        "ok",
                        format!("slot={slot_id} version={version} floor={}", platform.firmware_floor()),
                    );
                    return Ok(BootReport {
                        outcome,
                        verified_stages: verified,
                        failures,
                        elapsed_ms: platform.now_ms() - start,
                    });
                }
                Err(f) => failures.push(f),
            }
        }
        platform.set_mode(PlatformMode::Halted);
        platform.append_event("boot_rom", "boot", "alert", "halted: no slot verified");
        Ok(BootReport {
            outcome: BootOutcome::Halted,
            verified_stages: verified,
            failures,
            elapsed_ms: platform.now_ms() - start,
        })
    }

    pub fn arm_watchdog(&mut self, platform: &mut Platform, label: &str, timeout_ms: u64) {
        let deadline_ms = platform.now_ms() + timeout_ms;
        platform.append_event("watchdog", "watchdog_arm", "ok", format!("label={label} deadline_ms={deadline_ms}"));
        self.watchdog = Some(Watchdog {
            deadline_ms,
            label: label.to_string(),
        });
    }

    pub fn checkpoint(&mut self, platform: &mut Platform) {
        if let Some(w) = self.watchdog.take() {
            platform.append_event("watchdog", "watchdog_checkpoint", "ok", format!("label={}", w.label));
        }
    }

    pub fn watchdog_armed(&self) -> bool {
        self.watchdog.is_some()
    }

    pub fn watchdog_deadline(&self) -> Option<u64> {
        self.watchdog.as_ref().map(|w| w.deadline_ms)
    }

    /// Fires when the armed deadline has passed without a checkpoint:
    /// discards non-golden configuration and boots the golden slot. A
    /// platform already running golden is left alone.
    pub fn watchdog_tick(&mut self, platform: &mut Platform) -> Result<Option<RecoveryTriggered>, BootError> {
        let Some(w) = self.watchdog.as_ref() else {
            return Ok(None);
        };
        if platform.now_ms() < w.deadline_ms {
            return Ok(None);
        }
        let w = self.watchdog.take().expect("checked above");
        if platform.mode() == PlatformMode::SafeMode {
            platform.append_event("watchdog", "watchdog_expire", "ignored", format!("label={} already_golden", w.label));
            return Ok(None);
        }
        platform.append_event("watchdog", "recovery_triggered", "ok", format!("label={}", w.label));
        platform.reset_fabric("watchdog");
        let report = self.boot_slots(platform, &[SlotId::Golden])?;
        Ok(Some(RecoveryTriggered { label: w.label, report }))
    }

    /// Validates a firmware stage and stores it into `slot`; it takes effect
    /// at the next boot.
    pub fn install_firmware(
        &mut self,
        platform: &mut Platform,
        pkg_bytes: &[u8],
        slot: SlotId,
    ) -> Result<ValidationReport, BootError> {
        if slot == SlotId::Golden || self.slots.get(&slot).is_some_and(|s| !s.writable) {
            platform.append_event("fsbl", "install_firmware", "deny", format!("slot={slot} reason=SlotNotWritable"));
            return Err(BootError::SlotNotWritable(slot));
        }
        let pkg = match UpdatePackage::parse(pkg_bytes) {
            Ok(p) => p,
            Err(e) => {
                platform.append_event("fsbl", "install_firmware", "reject", format!("slot={slot} failures=Malformed"));
                return Err(e.into());
            }
        };
        if pkg.header.payload_kind != PayloadKind::FirmwareStage {
            platform.append_event(
                "fsbl",
                "install_firmware",
                "reject",
                format!("slot={slot} failures=WrongPayloadKind"),
            );
            return Err(BootError::NotFirmware(format!("{:?}", pkg.header.payload_kind)));
        }
        let validation = {
            let key = platform.keystore().device_key(&WorldContext::secure("fsbl")).ok().cloned();
            let ctx = ValidationContext::new(platform.profile(), platform, key.as_ref(), &NoRegions, platform.now_ms())
                .stored_version(Some(platform.firmware_floor()))
                .last_sequence(platform.last_update_sequence())
                .freshness_window(Some(platform.freshness_window_ms()));
            validate_package(&pkg, &ctx)
        };
        let report = validation.report;
        let stage = validation
            .plaintext
            .as_deref()
            .and_then(|pt| FirmwareImage::decode(pt).ok())
            .map(|fw| fw.stage as usize);
        match stage {
            Some(stage) if report.is_accepted() && stage < STAGE_NAMES.len() => {
                let s = self.slots.get_mut(&slot).ok_or(BootError::SlotMissing(slot))?;
                if s.stage_chain.len() < STAGE_NAMES.len() {
                    s.stage_chain.resize(STAGE_NAMES.len(), Vec::new());
                }
                s.stage_chain[stage] = pkg_bytes.to_vec();
                platform.commit_sequence(pkg.header.sequence_number);
                platform.append_event(
                    "fsbl",
                    "install_firmware",
                    "accept",
                    format!("slot={slot} stage={} version={}", STAGE_NAMES[stage], pkg.header.package_version),
                );
            }
            _ => {
                let failures = if report.is_accepted() {
                    "BadStageIndex".to_string()
                } else {
                    report.failure_list()
                };
                platform.append_event(
                    "fsbl",
                    "install_firmware",
                    "reject",
                    format!("slot={slot} version={} failures={failures}", pkg.header.package_version),
                );
            }
        }
        Ok(report)
    }
}

/// Verifies a slot's chain in order, stopping at the first bad stage.
/// Returns the lowest stage version on success.
fn verify_slot(platform: &mut Platform, slot: &BootImageSlot, verified: &mut Vec<VerifiedStage>) -> Result<u32, StageFailure> {
    let slot_id = slot.slot_id;
    let mut min_version = u32::MAX;
    for (stage, name) in STAGE_NAMES.iter().enumerate() {
        platform.advance_clock(STAGE_VERIFY_MS);
        let actor = if stage == 0 { "boot_rom" } else { "fsbl" };
        let result = slot
            .stage_chain
            .get(stage)
            .ok_or_else(|| "MissingStage".to_string())
            .and_then(|bytes| verify_stage(platform, slot_id, stage, bytes));
        match result {
            Ok((digest, version)) => {
                min_version = min_version.min(version);
                platform.append_event(
                    actor,
                    "verify_stage",
                    "ok",
                    format!("slot={slot_id} stage={name} version={version} digest={}", &digest.to_hex()[..16]),
                );
                verified.push(VerifiedStage {
                    slot: slot_id,
                    stage,
                    digest: digest.to_hex(),
                });
            }
            Err(code) => {
                platform.append_event(actor, "verify_stage", "fail", format!("slot={slot_id} stage={name} failures={code}"));
                return Err(StageFailure {
                    slot: slot_id,
                    stage,
                    code,
                });
            }
        }
    }
    Ok(min_version)
}

fn verify_stage(platform: &Platform, slot: SlotId, stage: usize, bytes: &[u8]) -> Result<(Digest, u32), String> {
    let pkg = UpdatePackage::parse(bytes).map_err(|_| "Malformed".to_string())?;
    if pkg.header.payload_kind != PayloadKind::FirmwareStage {
        return Err("WrongPayloadKind".into());
    }
    let key = platform.keystore().device_key(&WorldContext::secure("boot_rom")).ok().cloned();
    let ctx = ValidationContext::new(platform.profile(), platform, key.as_ref(), &NoRegions, platform.now_ms())
        .freshness_window(None);
    let v = validate_package(&pkg, &ctx);
    let mut codes: Vec<String> = v.report.failed_checks.iter().map(|c| c.to_string()).collect();
    // Golden is pinned and exempt from the floor.
    if slot != SlotId::Golden && pkg.header.package_version < platform.firmware_floor() {
        codes.push("RollbackVersion".into());
    }
    if let Some(pt) = &v.plaintext {
        match FirmwareImage::decode(pt) {
            Ok(fw) if fw.stage as usize == stage => {}
            _ => codes.push("BadStageIndex".into()),
        }
    }
    if codes.is_empty() {
        Ok((pkg.header.plaintext_digest, pkg.header.package_version))
    } else {
        Err(codes.join(","))
    }
}
