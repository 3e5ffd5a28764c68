//! Scenario file schema (TOML).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::HarnessError;
use crate::boot::{SlotId, DEFAULT_BOOT_TIMEOUT_MS, DEFAULT_UPDATE_TIMEOUT_MS};
use crate::crypto::ProfileId;
use crate::link::AdversaryConfig;
use crate::package::{ResourceUsage, DEFAULT_FRESHNESS_WINDOW_MS};
use crate::platform::{AccessOp, RegionLayout, DEFAULT_QUARANTINE_THRESHOLD};
use crate::reconfig::IcapCalibration;

/// Per-region configuration-port calibration as written in a scenario.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingBlock {
    pub region: u8,
    pub base_overhead_ms: f64,
    pub throughput_bytes_per_ms: f64,
    pub jitter_sigma_ms: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TimingBlock {
    pub fn calibration(&self) -> IcapCalibration {
        IcapCalibration {
            region: self.region,
            base_overhead_ms: self.base_overhead_ms,
            throughput_bytes_per_ms: self.throughput_bytes_per_ms,
            jitter_sigma_ms: self.jitter_sigma_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Period of the configuration CRC scrub; 0 disables it.
    pub scrub_interval_ms: u64,
    pub quarantine_threshold: u32,
    pub freshness_window_ms: u64,
    pub boot_timeout_ms: u64,
    pub update_timeout_ms: u64,
    /// Whether updates may be applied; stands in for thermal and power
    /// gating of update windows.
    pub update_window: bool,
    /// Encrypt and authenticate ground-link frames.
    pub secure_pipe: bool,
    pub start_time_ms: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            scrub_interval_ms: 1_000,
            quarantine_threshold: DEFAULT_QUARANTINE_THRESHOLD,
            freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
            boot_timeout_ms: DEFAULT_BOOT_TIMEOUT_MS,
            update_timeout_ms: DEFAULT_UPDATE_TIMEOUT_MS,
            update_window: true,
            secure_pipe: true,
            start_time_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    #[default]
    Cnn,
    Shift,
    Opaque,
}

/// Deliberate defects introduced into a package before it is sent. Each
/// flag targets one validation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Forge {
    pub bad_magic: bool,
    pub foreign_signer: bool,
    pub wrong_key: bool,
    pub digest_mismatch: bool,
    pub crc_mismatch: bool,
    pub rollback: bool,
    pub replay: bool,
    pub stale_timestamp: bool,
    pub unknown_region: bool,
    pub over_budget: bool,
    pub trojan: bool,
}

impl Forge {
    /// Defects that require access to the package header, which only the
    /// ground-side packers have.
    fn header_level(&self) -> bool {
        self.bad_magic || self.wrong_key || self.digest_mismatch || self.crc_mismatch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Faults {
    pub fail_at_step: Option<u8>,
    pub zeroize_before_step: Option<u8>,
    pub tamper_transfer: bool,
    pub stall_at_step: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UplinkKind {
    #[default]
    Bitstream,
    Model,
    Firmware,
    Command,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconfigStep {
    #[serde(default = "default_app")]
    pub app: String,
    #[serde(default)]
    pub workload: Workload,
    /// Preferred region; the allocator chooses when absent.
    pub region: Option<u8>,
    /// Region written into the package header instead of the allocated one.
    pub target_region: Option<u8>,
    #[serde(default = "one")]
    pub repeat: u32,
    pub body_len: Option<usize>,
    /// Declared budget in the request; defaults to the bitstream's usage.
    pub requested: Option<ResourceUsage>,
    #[serde(default)]
    pub forge: Forge,
    #[serde(default)]
    pub faults: Faults,
    /// Simulated time between repetitions.
    #[serde(default)]
    pub spacing_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UplinkStep {
    #[serde(default)]
    pub kind: UplinkKind,
    #[serde(default = "one")]
    pub count: u32,
    pub region: Option<u8>,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default = "default_uplink_body")]
    pub body_len: usize,
    #[serde(default)]
    pub forge: Forge,
    /// Wait for an acknowledgment and retransmit on timeout.
    #[serde(default)]
    pub reliable: bool,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_ms: u64,
    #[serde(default)]
    pub spacing_ms: u64,
}

/// One scripted action. Field names follow the `action` tag.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Provision {
        #[serde(default = "v2")]
        primary: [u32; 3],
        #[serde(default = "v1")]
        alternate: [u32; 3],
        #[serde(default = "v1")]
        golden: [u32; 3],
    },
    Boot {},
    CorruptImage {
        slot: SlotId,
        stage: usize,
        byte: usize,
    },
    InstallFirmware {
        slot: SlotId,
        #[serde(default)]
        stage: u8,
        version: Option<u32>,
        #[serde(default)]
        forge: Forge,
    },
    Reconfig(ReconfigStep),
    Uplink(UplinkStep),
    UpdateModel {
        region: u8,
        #[serde(default)]
        break_validation: bool,
        #[serde(default = "default_vectors")]
        vectors: usize,
    },
    InjectSeu {
        region: u8,
        bit: u64,
    },
    Scrub {},
    Bist {
        region: u8,
        #[serde(default = "default_vectors")]
        vectors: usize,
        #[serde(default)]
        perturb: bool,
    },
    Reload {
        region: u8,
        #[serde(default)]
        rollback: bool,
    },
    Release {
        region: u8,
    },
    Tamper {
        #[serde(default = "yes")]
        secure_world: bool,
    },
    AdvanceClock {
        ms: u64,
    },
    UpdateWindow {
        open: bool,
    },
    Access {
        region: u8,
        addr: u64,
        len: u64,
        op: AccessOp,
    },
    Interrupt {
        region: u8,
        line: u32,
    },
    /// Random firewall and interrupt requests checked against an
    /// independent model of the layout.
    Fuzz {
        #[serde(default)]
        requests: u64,
        #[serde(default)]
        irq_requests: u64,
        #[serde(default)]
        regions: Vec<u8>,
    },
    Mark {
        name: String,
    },
    Expect(Expect),
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Provision { .. } => "provision",
            Action::Boot {} => "boot",
            Action::CorruptImage { .. } => "corrupt_image",
            Action::InstallFirmware { .. } => "install_firmware",
            Action::Reconfig(_) => "reconfig",
            Action::Uplink(_) => "uplink",
            Action::UpdateModel { .. } => "update_model",
            Action::InjectSeu { .. } => "inject_seu",
            Action::Scrub {} => "scrub",
            Action::Bist { .. } => "bist",
            Action::Reload { .. } => "reload",
            Action::Release { .. } => "release",
            Action::Tamper { .. } => "tamper",
            Action::AdvanceClock { .. } => "advance_clock",
            Action::UpdateWindow { .. } => "update_window",
            Action::Access { .. } => "access",
            Action::Interrupt { .. } => "interrupt",
            Action::Fuzz { .. } => "fuzz",
            Action::Mark { .. } => "mark",
            Action::Expect(_) => "expect",
        }
    }

    fn regions(&self) -> Vec<u8> {
        match self {
            Action::Reconfig(r) => r.region.into_iter().collect(),
            Action::Uplink(u) => u.region.into_iter().collect(),
            Action::UpdateModel { region, .. }
            | Action::InjectSeu { region, .. }
            | Action::Bist { region, .. }
            | Action::Reload { region, .. }
            | Action::Release { region }
            | Action::Access { region, .. }
            | Action::Interrupt { region, .. } => vec![*region],
            Action::Fuzz { regions, .. } => regions.clone(),
            Action::Expect(Expect::RegionState { region, .. }) => vec![*region],
            Action::Expect(
                Expect::MetricMean { region, .. } | Expect::MetricStd { region, .. } | Expect::MetricCount { region, .. },
            ) => vec![*region],
            _ => Vec::new(),
        }
    }
}

/// A checkable predicate over platform state, the event log or the
/// runner's counters. Bounds (`equals`, `min`, `max`) are inclusive and all
/// given bounds must hold.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expect {
    /// `unbooted`, `operational:<slot>`, `safe_mode` or `halted`.
    Mode { is: String },
    RegionState { region: u8, is: String },
    BootOutcome { is: String },
    FirmwareFloor { equals: u32 },
    KeystoreZeroized { is: bool },
    EventCount {
        event: String,
        outcome: Option<String>,
        equals: Option<u64>,
        min: Option<u64>,
        max: Option<u64>,
    },
    /// Counts events whose detail contains `contains`.
    EventDetail {
        event: String,
        outcome: Option<String>,
        contains: String,
        equals: Option<u64>,
        min: Option<u64>,
        max: Option<u64>,
    },
    /// Every matching event's detail contains at least one of the strings.
    EveryEvent {
        event: String,
        outcome: Option<String>,
        contains_any: Vec<String>,
    },
    /// Event actions (optionally `action:outcome`) since a mark, in order.
    /// `exact` compares the whole list; otherwise the entries must appear as
    /// a subsequence.
    EventSequence {
        since: Option<String>,
        events: Vec<String>,
        #[serde(default = "yes")]
        exact: bool,
    },
    /// The last reconfiguration session.
    Session {
        is: String,
        reason_contains: Option<String>,
        steps: Option<Vec<u8>>,
    },
    Counter {
        name: String,
        equals: Option<u64>,
        min: Option<u64>,
        max: Option<u64>,
    },
    MetricMean { region: u8, target: f64, rel_tol: f64 },
    MetricStd { region: u8, min: f64, max: f64 },
    MetricCount { region: u8, equals: usize },
    LastAccess { is: String },
    LastBist { passed: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action: Action,
    /// The action is expected to fail with an error containing this text.
    pub expect_error: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_profile")]
    profile: ProfileId,
    keys: Option<PathBuf>,
    layout: Option<RegionLayout>,
    #[serde(default)]
    timing: Vec<TimingBlock>,
    #[serde(default)]
    adversary: AdversaryConfig,
    #[serde(default)]
    settings: Settings,
    #[serde(default)]
    apps: Vec<String>,
    #[serde(default)]
    step: Vec<toml::Table>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub profile: ProfileId,
    /// Key directory, resolved against the scenario file's directory.
    pub keys: Option<PathBuf>,
    pub layout: RegionLayout,
    /// Empty means both calibrated reference regions.
    pub timing: Vec<TimingBlock>,
    pub adversary: AdversaryConfig,
    pub settings: Settings,
    pub apps: Vec<String>,
    pub script: Vec<Step>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Parses and checks a scenario. Relative key paths are resolved
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, HarnessError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| HarnessError::Malformed(e.to_string()))?;
        let mut script = Vec::with_capacity(raw.step.len());
        for (i, mut table) in raw.step.into_iter().enumerate() {
            let expect_error = match table.remove("expect_error") {
                None => None,
                Some(toml::Value::String(s)) => Some(s),
                Some(_) => return Err(HarnessError::Malformed(format!("step {}: expect_error must be a string", i + 1))),
            };
            let action: Action = toml::Value::Table(table)
                .try_into()
                .map_err(|e| HarnessError::Malformed(format!("step {}: {e}", i + 1)))?;
            script.push(Step { action, expect_error });
        }
        let keys = raw.keys.map(|k| match base_dir {
            Some(b) if k.is_relative() => b.join(k),
            _ => k,
        });
        let apps = if raw.apps.is_empty() { vec![default_app()] } else { raw.apps };
        let s = Scenario {
            name: raw.name,
            description: raw.description,
            seed: raw.seed,
            profile: raw.profile,
            keys,
            layout: raw.layout.unwrap_or_default(),
            timing: raw.timing,
            adversary: raw.adversary,
            settings: raw.settings,
            apps,
            script,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Malformed(m));
        if self.name.trim().is_empty() {
            return bad("scenario name is empty".into());
        }
        self.layout.validate().map_err(|e| HarnessError::Malformed(format!("layout: {e}")))?;
        let regions: BTreeSet<u8> = self.layout.regions.iter().map(|r| r.id).collect();
        let mut seen = BTreeSet::new();
        for t in &self.timing {
            if !regions.contains(&t.region) {
                return bad(format!("timing block for undeclared region {}", t.region));
            }
            if !seen.insert(t.region) {
                return bad(format!("duplicate timing block for region {}", t.region));
            }
            t.calibration()
                .validate()
                .map_err(|e| HarnessError::Malformed(format!("timing: {e}")))?;
        }
        self.adversary
            .validate()
            .map_err(|e| HarnessError::Malformed(format!("adversary: {e}")))?;
        let apps: BTreeSet<&str> = self.apps.iter().map(String::as_str).collect();
        if apps.len() != self.apps.len() {
            return bad("duplicate app name".into());
        }
        for (i, step) in self.script.iter().enumerate() {
            let n = i + 1;
            for r in step.action.regions() {
                if !regions.contains(&r) {
                    return bad(format!("step {n}: region {r} is not declared in the layout"));
                }
            }
            match &step.action {
                Action::Reconfig(r) => {
                    if !apps.contains(r.app.as_str()) {
                        return bad(format!("step {n}: app `{}` is not declared", r.app));
                    }
                    if r.forge.header_level() {
                        return bad(format!(
                            "step {n}: reconfig packages are built by the app; only uplink steps take header-level forgeries"
                        ));
                    }
                    for s in [r.faults.fail_at_step, r.faults.zeroize_before_step, r.faults.stall_at_step]
                        .into_iter()
                        .flatten()
                    {
                        if !(1..=9).contains(&s) {
                            return bad(format!("step {n}: fault step {s} outside 1..=9"));
                        }
                    }
                }
                Action::Uplink(u) if u.kind == UplinkKind::Command && u.forge != Forge::default() => {
                    return bad(format!("step {n}: commands carry no package to forge"));
                }
                Action::InstallFirmware { stage, .. } if *stage > 2 => {
                    return bad(format!("step {n}: firmware stage {stage} outside 0..=2"));
                }
                Action::Expect(Expect::EventSequence { since: Some(m), .. }) => {
                    let marked = self.script[..i]
                        .iter()
                        .any(|s| matches!(&s.action, Action::Mark { name } if name == m));
                    if !marked {
                        return bad(format!("step {n}: mark `{m}` is not set by an earlier step"));
                    }
                }
                Action::Expect(Expect::MetricMean { rel_tol, .. }) if rel_tol.is_nan() || *rel_tol < 0.0 => {
                    return bad(format!("step {n}: rel_tol must be non-negative"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn default_profile() -> ProfileId {
    ProfileId::Test
}

fn default_app() -> String {
    "app".to_string()
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn v1() -> [u32; 3] {
    [1; 3]
}

fn v2() -> [u32; 3] {
    [2; 3]
}

fn default_vectors() -> usize {
    16
}

fn default_uplink_body() -> usize {
    256
}

fn default_retries() -> u32 {
    5
}

fn default_ack_timeout() -> u64 {
    2_000
}
