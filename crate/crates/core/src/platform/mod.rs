//! The simulated SoC-FPGA device.
//!
//! A [`Platform`] owns the key fuses, volatile key storage, static shell and
//! vFPGA regions, the firewall/interrupt policy, the logical clock and the
//! event log. It is driven by exactly one scheduler at a time.

mod keys;
mod log;
mod region;

pub use self::log::{EventLog, EventRecord};
pub use keys::{derive_puf_key, FuseBank, VolatileKeyStore, World, WorldContext};
pub use region::{AccessOp, AddressRange, RegionLayout, RegionSpec, RegionState, VfpgaRegion};

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::behavioral::LoadedBehavior;
use crate::boot::SlotId;
use crate::crypto::{crc32, CryptoProfile, Digest, KeyId, KeyMaterial};
use crate::package::{KeyStoreView, PayloadKind, RegionTableView, ResourceUsage, DEFAULT_FRESHNESS_WINDOW_MS};

/// Denials from one region (firewall or interrupt) before it is quarantined.
pub const DEFAULT_QUARANTINE_THRESHOLD: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlatformError {
    #[error("fuses already programmed")]
    AlreadyProgrammed,
    #[error("fuses not provisioned")]
    FusesNotProvisioned,
    #[error("operation requires the secure world (caller `{0}`)")]
    NotSecureWorld(String),
    #[error("key store has been zeroized")]
    KeystoreZeroized,
    #[error("no {0} key installed")]
    KeyAbsent(&'static str),
    #[error("unknown region {0}")]
    UnknownRegion(u8),
    #[error("region {region}: illegal transition {from} -> {to}")]
    IllegalTransition {
        region: u8,
        from: RegionState,
        to: RegionState,
    },
    #[error("no reconfigurable region available")]
    Unavailable,
    #[error("region {0} is not active")]
    RegionNotActive(u8),
    #[error("bit index {bit} outside configuration image of {len} bytes")]
    BitOutOfRange { bit: u64, len: usize },
    #[error("bad region layout: {0}")]
    BadLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessDecision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlatformMode {
    Unbooted,
    Operational(SlotId),
    /// Running from the golden image.
    SafeMode,
    Halted,
}

impl fmt::Display for PlatformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlatformMode::Unbooted => f.write_str("unbooted"),
            PlatformMode::Operational(s) => write!(f, "operational:{s}"),
            PlatformMode::SafeMode => f.write_str("safe_mode"),
            PlatformMode::Halted => f.write_str("halted"),
        }
    }
}

/// A bitstream plaintext that passed validation and was programmed; kept
/// in secure storage as the reload source for scrubbing and rollback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptedImage {
    pub version: u32,
    pub owner: Option<String>,
    pub plaintext: Vec<u8>,
}

pub struct Platform {
    profile: CryptoProfile,
    fuses: FuseBank,
    keystore: VolatileKeyStore,
    root_key: Option<KeyMaterial>,
    shell: AddressRange,
    regions: BTreeMap<u8, VfpgaRegion>,
    log: EventLog,
    clock_ms: u64,
    mode: PlatformMode,
    firmware_floor: u32,
    booted_version: Option<u32>,
    last_update_sequence: Option<u64>,
    version_floors: BTreeMap<(PayloadKind, u8), u32>,
    quarantine_threshold: u32,
    freshness_window_ms: u64,
    pub(crate) accepted_images: BTreeMap<u8, Vec<AcceptedImage>>,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform")
            .field("profile", &self.profile.id)
            .field("mode", &self.mode)
            .field("clock_ms", &self.clock_ms)
            .field("regions", &self.regions.keys().collect::<Vec<_>>())
            .field("events", &self.log.len())
            .finish_non_exhaustive()
    }
}

const TA: &str = "trust_anchor";

impl Platform {
    /// A fresh, unprovisioned device. The PUF-derived device key is placed
    /// in volatile storage.
    pub fn new(profile: CryptoProfile, layout: &RegionLayout, device_seed: &[u8]) -> Result<Self, PlatformError> {
        layout.validate()?;
        let mut keystore = VolatileKeyStore::default();
        keystore.install_device_key(&WorldContext::secure(TA), derive_puf_key(device_seed))?;
        Ok(Platform {
            profile,
            fuses: FuseBank::default(),
            keystore,
            root_key: None,
            shell: layout.shell,
            regions: layout.regions.iter().map(|s| (s.id, VfpgaRegion::from_spec(s))).collect(),
            log: EventLog::new(),
            clock_ms: 0,
            mode: PlatformMode::Unbooted,
            firmware_floor: 0,
            booted_version: None,
            last_update_sequence: None,
            version_floors: BTreeMap::new(),
            quarantine_threshold: DEFAULT_QUARANTINE_THRESHOLD,
            freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
            accepted_images: BTreeMap::new(),
        })
    }

    pub fn profile(&self) -> CryptoProfile {
        self.profile
    }

    pub fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn advance_clock(&mut self, ms: u64) {
        self.clock_ms = self.clock_ms.saturating_add(ms);
    }

    pub fn mode(&self) -> PlatformMode {
        self.mode
    }

    pub(crate) fn set_mode(&mut self, mode: PlatformMode) {
        self.mode = mode;
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn append_event(
        &mut self,
        actor: impl Into<String>,
        action: impl Into<String>,
        outcome: impl Into<String>,
        detail: impl Into<String>,
    ) -> u64 {
        self.log.append(self.clock_ms, actor, action, outcome, detail)
    }

    pub fn freshness_window_ms(&self) -> u64 {
        self.freshness_window_ms
    }

    pub fn set_freshness_window_ms(&mut self, ms: u64) {
        self.freshness_window_ms = ms;
    }

    pub fn set_quarantine_threshold(&mut self, n: u32) {
        self.quarantine_threshold = n.max(1);
    }

    // ----- fuses and keys -------------------------------------------------

    pub fn fuses(&self) -> &FuseBank {
        &self.fuses
    }

    pub fn provision_fuses(&mut self, hash: Digest) -> Result<(), PlatformError> {
        match self.fuses.program(hash) {
            Ok(()) => {
                self.append_event("fuses", "provision", "ok", format!("key_hash={}", &hash.to_hex()[..16]));
                Ok(())
            }
            Err(e) => {
                self.append_event("fuses", "provision", "deny", "already programmed");
                Err(e)
            }
        }
    }

    /// Places the root public key next to the boot ROM. It is only trusted
    /// while its digest matches the fused hash.
    pub fn install_root_key(&mut self, public: KeyMaterial) {
        self.root_key = Some(public);
    }

    pub fn keystore(&self) -> &VolatileKeyStore {
        &self.keystore
    }

    pub fn keystore_mut(&mut self) -> &mut VolatileKeyStore {
        &mut self.keystore
    }

    pub fn tamper_zeroize(&mut self, ctx: &WorldContext) -> Result<(), PlatformError> {
        match self.keystore.zeroize(ctx) {
            Ok(()) => {
                self.append_event("keystore", "tamper_zeroize", "ok", format!("by={}", ctx.principal));
                Ok(())
            }
            Err(e) => {
                self.append_event("keystore", "tamper_zeroize", "deny", format!("by={} reason=not_secure_world", ctx.principal));
                Err(e)
            }
        }
    }

    // ----- version and sequence counters ------------------------------------

    pub fn firmware_floor(&self) -> u32 {
        self.firmware_floor
    }

    pub fn booted_version(&self) -> Option<u32> {
        self.booted_version
    }

    /// Two-phase commit of the firmware floor: raised only once new
    /// firmware has actually booted.
    pub(crate) fn commit_boot(&mut self, version: u32, raise_floor: bool) {
        if raise_floor {
            self.firmware_floor = self.firmware_floor.max(version);
        }
        self.booted_version = Some(version);
    }

    pub fn last_update_sequence(&self) -> Option<u64> {
        self.last_update_sequence
    }

    pub(crate) fn commit_sequence(&mut self, seq: u64) {
        self.last_update_sequence = Some(self.last_update_sequence.map_or(seq, |s| s.max(seq)));
    }

    /// Highest accepted version for this payload kind and region; 0 before
    /// any acceptance.
    pub fn version_floor(&self, kind: PayloadKind, region: u8) -> u32 {
        self.version_floors.get(&(kind, region)).copied().unwrap_or(0)
    }

    pub(crate) fn commit_version(&mut self, kind: PayloadKind, region: u8, v: u32) {
        let e = self.version_floors.entry((kind, region)).or_insert(v);
        *e = (*e).max(v);
    }

    // ----- regions ------------------------------------------------------------

    pub fn shell_range(&self) -> AddressRange {
        self.shell
    }

    pub fn region(&self, id: u8) -> Option<&VfpgaRegion> {
        self.regions.get(&id)
    }

    pub fn regions(&self) -> impl Iterator<Item = &VfpgaRegion> {
        self.regions.values()
    }

    pub(crate) fn region_mut(&mut self, id: u8) -> Result<&mut VfpgaRegion, PlatformError> {
        self.regions.get_mut(&id).ok_or(PlatformError::UnknownRegion(id))
    }

    /// Transition with an event for both outcomes, or only for a denial
    /// when `quiet` (protocol steps log their own record).
    fn set_state(&mut self, id: u8, to: RegionState, actor: &str, action: &str, detail: &str, quiet: bool) -> Result<(), PlatformError> {
        let region = self.region_mut(id)?;
        match region.transition(to) {
            Ok(from) => {
                if !quiet {
                    self.append_event(actor, action, "ok", format!("region={id} {from}->{to}{detail}"));
                }
                Ok(())
            }
            Err(e) => {
                self.append_event(actor, action, "deny", format!("region={id} illegal {}->{to}", region_state(self, id)));
                Err(e)
            }
        }
    }

    /// Lowest-id `Empty` region whose budget covers `requested`, now marked
    /// `Configuring`. The caller logs the outcome.
    pub fn allocate_vfpga(&mut self, requested: &ResourceUsage) -> Result<u8, PlatformError> {
        let found = self
            .regions
            .values()
            .find(|r| r.state() == RegionState::Empty && requested.fits_within(&r.budget))
            .map(|r| r.region_id);
        match found {
            Some(id) => {
                self.set_state(id, RegionState::Configuring, TA, "allocate", "", true)?;
                Ok(id)
            }
            None => Err(PlatformError::Unavailable),
        }
    }

    /// Claims a specific region for `principal`: an `Empty` region that fits,
    /// or an `Active` region the same principal already owns.
    pub fn claim_region(&mut self, id: u8, requested: &ResourceUsage, principal: &str) -> Result<(), PlatformError> {
        let region = self.region(id).ok_or(PlatformError::UnknownRegion(id))?;
        let ok = requested.fits_within(&region.budget)
            && match region.state() {
                RegionState::Empty => true,
                RegionState::Active => region.owner().is_none_or(|o| o == principal),
                _ => false,
            };
        if !ok {
            return Err(PlatformError::Unavailable);
        }
        self.set_state(id, RegionState::Configuring, TA, "allocate", "", true)
    }

    /// Aborted reconfiguration: `Configuring → Empty`.
    pub fn abort_configuring(&mut self, id: u8) -> Result<(), PlatformError> {
        self.set_state(id, RegionState::Empty, TA, "region_reset", " cause=abort", true)
    }

    /// Marks a `Configuring` region `Active` with the streamed image.
    pub(crate) fn activate_region(
        &mut self,
        id: u8,
        behavior: LoadedBehavior,
        version: u32,
        image: Vec<u8>,
        owner: Option<String>,
    ) -> Result<(), PlatformError> {
        let region = self.region_mut(id)?;
        region.transition(RegionState::Active)?;
        region.config_crc = crc32(&image);
        region.config_image = image;
        region.loaded_behavior = Some(behavior);
        region.loaded_version = version;
        region.owner = owner;
        region.violations = 0;
        Ok(())
    }

    pub fn accepted_images(&self, id: u8) -> &[AcceptedImage] {
        self.accepted_images.get(&id).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn set_region_behavior(&mut self, id: u8, behavior: LoadedBehavior, image: Vec<u8>) -> Result<(), PlatformError> {
        let region = self.region_mut(id)?;
        if region.state() != RegionState::Active {
            return Err(PlatformError::RegionNotActive(id));
        }
        region.config_crc = crc32(&image);
        region.config_image = image;
        region.loaded_behavior = Some(behavior);
        Ok(())
    }

    pub fn quarantine_vfpga(&mut self, id: u8) -> Result<(), PlatformError> {
        self.quarantine_by(id, TA, "requested")
    }

    fn quarantine_by(&mut self, id: u8, actor: &str, cause: &str) -> Result<(), PlatformError> {
        self.set_state(id, RegionState::Quarantined, actor, "quarantine", &format!(" cause={cause}"), false)
    }

    /// Localized reset: `Quarantined → Empty`, clearing loaded logic.
    pub fn release_vfpga(&mut self, id: u8) -> Result<(), PlatformError> {
        self.set_state(id, RegionState::Empty, TA, "release", "", false)
    }

    /// Drops every non-golden configuration from the fabric.
    pub(crate) fn reset_fabric(&mut self, cause: &str) {
        for r in self.regions.values_mut() {
            r.force_empty();
        }
        self.accepted_images.clear();
        let secure = WorldContext::secure(TA);
        let ids: Vec<u8> = self.regions.keys().copied().collect();
        for id in ids {
            let _ = self.keystore.drop_session_key(&secure, id);
        }
        self.append_event(TA, "fabric_reset", "ok", format!("cause={cause}"));
    }

    /// Whether `[addr, addr+len)` is inside one of the region's windows with
    /// the required permission. Denials are logged and count toward the
    /// quarantine threshold.
    pub fn firewall_check(&mut self, id: u8, addr: u64, len: u64, op: AccessOp) -> Result<AccessDecision, PlatformError> {
        let region = self.region(id).ok_or(PlatformError::UnknownRegion(id))?;
        let reason = if region.state() == RegionState::Quarantined {
            Some("quarantined")
        } else if !region.permits(addr, len, op) {
            Some("outside_window")
        } else {
            None
        };
        match reason {
            None => Ok(AccessDecision::Allow),
            Some(reason) => {
                self.append_event(
                    "firewall",
                    "access",
                    "deny",
                    format!("region={id} addr={addr:#x} len={len} op={op} reason={reason}"),
                );
                self.note_violation(id, "firewall")?;
                Ok(AccessDecision::Deny)
            }
        }
    }

    pub fn interrupt_check(&mut self, id: u8, irq_line: u32) -> Result<AccessDecision, PlatformError> {
        let region = self.region(id).ok_or(PlatformError::UnknownRegion(id))?;
        let reason = if region.state() == RegionState::Quarantined {
            Some("quarantined")
        } else if !region.irq_allowlist.contains(&irq_line) {
            Some("not_allowlisted")
        } else {
            None
        };
        match reason {
            None => Ok(AccessDecision::Allow),
            Some(reason) => {
                self.append_event("irq_ctrl", "interrupt", "deny", format!("region={id} line={irq_line} reason={reason}"));
                self.note_violation(id, "irq_ctrl")?;
                Ok(AccessDecision::Deny)
            }
        }
    }

    fn note_violation(&mut self, id: u8, actor: &str) -> Result<(), PlatformError> {
        let threshold = self.quarantine_threshold;
        let region = self.region_mut(id)?;
        region.violations += 1;
        if region.violations >= threshold && region.state() == RegionState::Active {
            self.quarantine_by(id, actor, "violation_threshold")?;
        }
        Ok(())
    }
}

fn region_state(p: &Platform, id: u8) -> RegionState {
    p.region(id).map_or(RegionState::Empty, |r| r.state())
}

impl KeyStoreView for Platform {
    /// The installed root key, only while its digest matches the fuses.
    fn trusted_key(&self, id: &KeyId) -> Option<&KeyMaterial> {
        let fused = self.fuses.public_key_hash()?;
        self.root_key
            .as_ref()
            .filter(|k| &k.key_id == id && &self.profile.digest(&k.bytes) == fused)
    }
}

impl RegionTableView for Platform {
    fn region_budget(&self, id: u8) -> Option<ResourceUsage> {
        self.region(id).map(|r| r.budget)
    }
}

/// A region table exposing exactly one region; used while a session is bound
/// to its allocated region.
pub struct SingleRegion(pub u8, pub ResourceUsage);

impl RegionTableView for SingleRegion {
    fn region_budget(&self, id: u8) -> Option<ResourceUsage> {
        (id == self.0).then_some(self.1)
    }
}
