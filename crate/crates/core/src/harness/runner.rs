use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::keys::KeyDirectory;
use super::metrics::{collect_metrics, MetricsSummary};
use super::scenario::{Action, Expect, Forge, ReconfigStep, Scenario, UplinkKind, UplinkStep, Workload};
use super::HarnessError;
use crate::behavioral::{CnnWeights, LoadedBehavior};
use crate::boot::{build_stage_chain, BootImageSlot, BootManager, BootOutcome, SlotId};
use crate::crypto::{sha3_384, CryptoProfile, KeyMaterial, KeyPair};
use crate::link::{
    inject_seu, peek_seq, transmit_reliable, AdversaryConfig, Channel, DeliveryTrace, Endpoint, MessageKind, ReceiveOutcome,
    ReliableOutcome, RetryPolicy, SecurePipe, UplinkReceiver,
};
use crate::package::{
    BehaviorId, FeatureSummary, FirmwareImage, ModelPayload, PackageHeader, PackageMeta, PayloadKind, ResourceUsage,
    SimBitstream, UpdatePackage, FORMAT_VERSION, NO_REGION,
};
use crate::platform::{AccessDecision, AccessOp, EventLog, EventRecord, Platform, RegionSpec, WorldContext};
use crate::reconfig::{
    golden_vectors, run_bist, AccelRequest, FaultPlan, IcapCalibration, IcapTimingModel, ReconfigError,
    ReconfigSession, SessionState, TenantApp, TrustAnchor, VFPGA1_BODY_LEN, VFPGA2_BODY_LEN,
};

/// Result of one `expect` step, or of a step that failed unexpectedly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectationResult {
    pub step: usize,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a finished scenario produced.
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub seed: u64,
    pub platform: Platform,
    pub metrics: MetricsSummary,
    /// Ground uplink trace.
    pub trace: DeliveryTrace,
    /// Every channel's trace, uplink first.
    pub channel_traces: Vec<(String, DeliveryTrace)>,
    pub sessions: Vec<ReconfigSession>,
    pub counters: BTreeMap<String, u64>,
    pub expectations: Vec<ExpectationResult>,
}

impl ScenarioOutcome {
    pub fn log(&self) -> &EventLog {
        self.platform.log()
    }

    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ExpectationResult> {
        self.expectations.iter().filter(|e| !e.passed)
    }

    /// 0 when every expectation holds, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }
}

/// Derives an independent stream seed from the scenario seed.
pub fn sub_seed(seed: u64, label: &str, extra: u64) -> u64 {
    let mut buf = Vec::with_capacity(label.len() + 16);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.extend_from_slice(&extra.to_le_bytes());
    u64::from_le_bytes(sha3_384(&buf).0[..8].try_into().expect("8 bytes"))
}

/// Executes a scenario deterministically under its seed.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioOutcome, HarnessError> {
    let mut r = Runner::new(s)?;
    for (i, step) in s.script.iter().enumerate() {
        let n = i + 1;
        if let Action::Expect(e) = &step.action {
            let (passed, detail) = r.check(e);
            log::info!("step {n}: expect {} -> {}", describe(e), if passed { "pass" } else { "FAIL" });
            r.results.push(ExpectationResult {
                step: n,
                check: describe(e),
                passed,
                detail,
            });
            continue;
        }
        log::debug!("step {n}: {}", step.action.name());
        let result = r.exec(&step.action);
        match (&step.expect_error, result) {
            (None, Ok(())) => {}
            (None, Err(e)) => r.results.push(ExpectationResult {
                step: n,
                check: format!("{} completes", step.action.name()),
                passed: false,
                detail: e.to_string(),
            }),
            (Some(want), Ok(())) => r.results.push(ExpectationResult {
                step: n,
                check: format!("{} fails with {want}", step.action.name()),
                passed: false,
                detail: "completed without error".into(),
            }),
            (Some(want), Err(e)) => {
                let msg = e.to_string();
                r.results.push(ExpectationResult {
                    step: n,
                    check: format!("{} fails with {want}", step.action.name()),
                    passed: msg.contains(want.as_str()),
                    detail: msg,
                });
            }
        }
    }
    Ok(r.finish())
}

fn describe(e: &Expect) -> String {
    match e {
        Expect::Mode { is } => format!("mode is {is}"),
        Expect::RegionState { region, is } => format!("region {region} is {is}"),
        Expect::BootOutcome { is } => format!("boot outcome is {is}"),
        Expect::FirmwareFloor { equals } => format!("firmware floor is {equals}"),
        Expect::KeystoreZeroized { is } => format!("keystore zeroized is {is}"),
        Expect::EventCount { event, outcome, .. } => {
            format!("count of {event}{}", outcome.as_ref().map(|o| format!(":{o}")).unwrap_or_default())
        }
        Expect::EventDetail { event, contains, .. } => format!("{event} events containing {contains}"),
        Expect::EveryEvent { event, contains_any, .. } => {
            format!("every {event} event mentions one of {}", contains_any.join("|"))
        }
        Expect::EventSequence { events, exact, .. } => {
            format!("{} event sequence {}", if *exact { "exact" } else { "ordered" }, events.join(","))
        }
        Expect::Session { is, .. } => format!("last session is {is}"),
        Expect::Counter { name, .. } => format!("counter {name}"),
        Expect::MetricMean { region, target, rel_tol } => {
            format!("region {region} mean within {:.2}% of {target}", rel_tol * 100.0)
        }
        Expect::MetricStd { region, min, max } => format!("region {region} sample std in [{min}, {max}]"),
        Expect::MetricCount { region, equals } => format!("region {region} has {equals} samples"),
        Expect::LastAccess { is } => format!("last access decision is {is}"),
        Expect::LastBist { passed } => format!("last BIST passed is {passed}"),
    }
}

fn within(v: u64, equals: Option<u64>, min: Option<u64>, max: Option<u64>) -> bool {
    equals.is_none_or(|e| v == e) && min.is_none_or(|m| v >= m) && max.is_none_or(|m| v <= m)
}

fn event_matches(r: &EventRecord, event: &str, outcome: Option<&str>) -> bool {
    r.action == event && outcome.is_none_or(|o| r.outcome == o)
}

/// Independent model of the firewall rule, used to audit fuzz decisions.
fn layout_permits(spec: &RegionSpec, addr: u64, len: u64, op: AccessOp) -> bool {
    let Some(end) = addr.checked_add(len) else {
        return false;
    };
    len > 0
        && spec.ranges.iter().any(|r| {
            let allowed = match op {
                AccessOp::Read => r.read,
                AccessOp::Write => r.write,
            };
            allowed && addr >= r.base && end <= r.base + r.length
        })
}

struct Runner<'s> {
    sc: &'s Scenario,
    profile: CryptoProfile,
    keys: KeyDirectory,
    foreign: KeyPair,
    platform: Platform,
    boot: BootManager,
    anchor: TrustAnchor,
    apps: BTreeMap<String, TenantApp>,
    uplink: Channel,
    downlink: Channel,
    ground: Endpoint,
    receiver: UplinkReceiver,
    rng: ChaCha8Rng,
    counters: BTreeMap<String, u64>,
    sessions: Vec<ReconfigSession>,
    marks: BTreeMap<String, u64>,
    originals: BTreeMap<u64, Vec<u8>>,
    captured_seen: usize,
    accepted_msgs: BTreeSet<u64>,
    accepted_pkgs: BTreeSet<u64>,
    issued_versions: BTreeMap<PayloadKind, u32>,
    issued_seq: u64,
    next_scrub_ms: u64,
    window_open: bool,
    last_boot: Option<BootOutcome>,
    last_access: Option<AccessDecision>,
    last_bist: Option<bool>,
    trusted_models: BTreeMap<u8, LoadedBehavior>,
    results: Vec<ExpectationResult>,
}

impl<'s> Runner<'s> {
    fn new(sc: &'s Scenario) -> Result<Self, HarnessError> {
        let seed = sc.seed;
        let keys = match &sc.keys {
            Some(dir) => {
                let k = KeyDirectory::load(dir)?;
                if k.profile != sc.profile {
                    return Err(HarnessError::Malformed(format!(
                        "key directory profile {:?} does not match scenario profile {:?}",
                        k.profile, sc.profile
                    )));
                }
                if !k.has_private_key() {
                    return Err(HarnessError::Malformed("key directory has no root private key".into()));
                }
                k
            }
            None => KeyDirectory::generate(sc.profile, &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "keys", 0)))?,
        };
        let profile = CryptoProfile::from_id(sc.profile);
        let foreign = profile.generate_keypair(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "foreign", 0)))?;

        let mut platform = Platform::new(profile, &sc.layout, &keys.device_seed)?;
        platform.set_freshness_window_ms(sc.settings.freshness_window_ms);
        platform.set_quarantine_threshold(sc.settings.quarantine_threshold);
        platform.advance_clock(sc.settings.start_time_ms);

        let calibrations: Vec<IcapCalibration> = if sc.timing.is_empty() {
            sc.layout
                .regions
                .iter()
                .map(|r| IcapCalibration {
                    region: r.id,
                    ..if r.id == 2 {
                        IcapCalibration::VFPGA2
                    } else {
                        IcapCalibration::VFPGA1
                    }
                })
                .collect()
        } else {
            sc.timing.iter().map(|t| t.calibration()).collect()
        };
        let timing_extra = sc.timing.iter().fold(0u64, |acc, t| acc.rotate_left(13) ^ t.seed);
        let timing = IcapTimingModel::new(calibrations, sub_seed(seed, "timing", timing_extra))?;
        let anchor = TrustAnchor::new(timing, sub_seed(seed, "anchor", 0));

        let mut apps = BTreeMap::new();
        for name in &sc.apps {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("app:{name}"), 0));
            apps.insert(name.clone(), TenantApp::new(name.clone(), profile.generate_keypair(&mut rng)?));
        }

        let adversary = |label: &str| AdversaryConfig {
            rng_seed: sub_seed(seed, label, sc.adversary.rng_seed),
            ..sc.adversary.clone()
        };
        let pipe = || sc.settings.secure_pipe.then(|| SecurePipe::new(keys.link_key.clone()));
        let uplink = Channel::new("uplink", adversary("uplink"))?;
        let downlink = Channel::new("downlink", adversary("downlink"))?;
        let ground = Endpoint::ground(pipe());
        let receiver = UplinkReceiver::new(Endpoint::satellite(pipe()));

        let next_scrub_ms = platform.now_ms() + sc.settings.scrub_interval_ms;
        Ok(Runner {
            sc,
            profile,
            keys,
            foreign,
            platform,
            boot: BootManager::new([]),
            anchor,
            apps,
            uplink,
            downlink,
            ground,
            receiver,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, "script", 0)),
            counters: BTreeMap::new(),
            sessions: Vec::new(),
            marks: BTreeMap::new(),
            originals: BTreeMap::new(),
            captured_seen: 0,
            accepted_msgs: BTreeSet::new(),
            accepted_pkgs: BTreeSet::new(),
            issued_versions: BTreeMap::new(),
            issued_seq: 0,
            next_scrub_ms,
            window_open: sc.settings.update_window,
            last_boot: None,
            last_access: None,
            last_bist: None,
            trusted_models: BTreeMap::new(),
            results: Vec::new(),
        })
    }

    fn finish(self) -> ScenarioOutcome {
        let metrics = collect_metrics(self.platform.log());
        let channel_traces = vec![
            ("uplink".to_string(), self.uplink.trace().clone()),
            ("downlink".to_string(), self.downlink.trace().clone()),
            (self.anchor.channel().name().to_string(), self.anchor.channel().trace().clone()),
        ];
        ScenarioOutcome {
            name: self.sc.name.clone(),
            seed: self.sc.seed,
            trace: self.uplink.trace().clone(),
            platform: self.platform,
            metrics,
            channel_traces,
            sessions: self.sessions,
            counters: self.counters,
            expectations: self.results,
        }
    }

    fn bump(&mut self, name: &str, by: u64) {
        *self.counters.entry(name.to_string()).or_default() += by;
    }

    fn device_key(&self) -> KeyMaterial {
        self.keys.device_key()
    }

    fn exec(&mut self, action: &Action) -> Result<(), HarnessError> {
        match action {
            Action::Provision {
                primary,
                alternate,
                golden,
            } => self.provision([*primary, *alternate, *golden]),
            Action::Boot {} => {
                let report = self.boot.run_boot(&mut self.platform)?;
                self.last_boot = Some(report.outcome);
                Ok(())
            }
            Action::CorruptImage { slot, stage, byte } => Ok(self.boot.inject_corruption(*slot, *stage, *byte)?),
            Action::InstallFirmware {
                slot,
                stage,
                version,
                forge,
            } => self.install_firmware(*slot, *stage, *version, forge),
            Action::Reconfig(r) => self.reconfig(r),
            Action::Uplink(u) => self.uplink(u).map(|_| ()),
            Action::UpdateModel {
                region,
                break_validation,
                vectors,
            } => self.update_model(*region, *break_validation, *vectors),
            Action::InjectSeu { region, bit } => Ok(inject_seu(&mut self.platform, *region, *bit)?),
            Action::Scrub {} => {
                self.scrub();
                Ok(())
            }
            Action::Bist {
                region,
                vectors,
                perturb,
            } => self.bist(*region, *vectors, *perturb),
            Action::Reload { region, rollback } => {
                self.anchor.reload(&mut self.platform, *region, *rollback)?;
                Ok(())
            }
            Action::Release { region } => Ok(self.platform.release_vfpga(*region)?),
            Action::Tamper { secure_world } => {
                let ctx = if *secure_world {
                    WorldContext::secure("tamper_monitor")
                } else {
                    WorldContext::normal("tamper_probe")
                };
                Ok(self.platform.tamper_zeroize(&ctx)?)
            }
            Action::AdvanceClock { ms } => self.advance(*ms),
            Action::UpdateWindow { open } => {
                self.window_open = *open;
                self.platform.append_event(
                    "scheduler",
                    "update_window",
                    if *open { "open" } else { "closed" },
                    "",
                );
                Ok(())
            }
            Action::Access { region, addr, len, op } => {
                self.last_access = Some(self.platform.firewall_check(*region, *addr, *len, *op)?);
                Ok(())
            }
            Action::Interrupt { region, line } => {
                self.last_access = Some(self.platform.interrupt_check(*region, *line)?);
                Ok(())
            }
            Action::Fuzz {
                requests,
                irq_requests,
                regions,
            } => self.fuzz(*requests, *irq_requests, regions),
            Action::Mark { name } => {
                self.marks.insert(name.clone(), self.platform.log().last_seq());
                Ok(())
            }
            Action::Expect(_) => Ok(()),
        }
    }

    /// Whether an update may proceed; a closed window defers it with a log
    /// record.
    fn window_allows(&mut self, what: &str) -> bool {
        if !self.window_open {
            self.platform
                .append_event("scheduler", "update_window", "defer", format!("action={what}"));
            self.bump("updates_deferred", 1);
        }
        self.window_open
    }

    fn provision(&mut self, versions: [[u32; 3]; 3]) -> Result<(), HarnessError> {
        let hash = self.profile.digest(&self.keys.root.public.bytes);
        self.platform.provision_fuses(hash)?;
        self.platform.install_root_key(self.keys.root.public.clone());
        let device_key = self.device_key();
        let mut slots = Vec::new();
        for (slot, v) in SlotId::ALL.into_iter().zip(versions) {
            let chain = build_stage_chain(self.profile, slot, v, &device_key, &self.keys.root.private)?;
            slots.push(BootImageSlot::new(slot, chain));
        }
        self.boot = BootManager::new(slots);
        self.boot.boot_timeout_ms = self.sc.settings.boot_timeout_ms;
        self.boot.update_timeout_ms = self.sc.settings.update_timeout_ms;
        Ok(())
    }

    // ----- package construction ---------------------------------------------

    fn stored_version(&self, kind: PayloadKind, region: u8) -> u32 {
        match kind {
            PayloadKind::FirmwareStage => self.platform.firmware_floor(),
            k => self.platform.version_floor(k, region),
        }
    }

    /// Next version for `kind`, above every committed floor and every
    /// version handed out before.
    fn next_version(&mut self, kind: PayloadKind) -> u32 {
        let floor = match kind {
            PayloadKind::FirmwareStage => self.platform.firmware_floor(),
            k => self
                .sc
                .layout
                .regions
                .iter()
                .map(|r| self.platform.version_floor(k, r.id))
                .max()
                .unwrap_or(0),
        };
        let issued = self.issued_versions.entry(kind).or_default();
        *issued = (*issued).max(floor) + 1;
        *issued
    }

    fn next_seq(&mut self) -> u64 {
        self.issued_seq = self.issued_seq.max(self.platform.last_update_sequence().unwrap_or(0)) + 1;
        self.issued_seq
    }

    fn unused_region(&self) -> u8 {
        (1..NO_REGION)
            .find(|id| self.platform.region(*id).is_none())
            .expect("a layout cannot use every region id")
    }

    fn meta(&mut self, kind: PayloadKind, region: u8, forge: &Forge) -> PackageMeta {
        let package_version = if forge.rollback {
            self.stored_version(kind, region)
        } else {
            self.next_version(kind)
        };
        let sequence_number = if forge.replay {
            self.platform.last_update_sequence().unwrap_or(0)
        } else {
            self.next_seq()
        };
        let now = self.platform.now_ms();
        let timestamp_ms = if forge.stale_timestamp {
            now + self.platform.freshness_window_ms() + 1
        } else {
            now
        };
        PackageMeta {
            package_version,
            payload_kind: kind,
            target_region_id: if forge.unknown_region { self.unused_region() } else { region },
            sequence_number,
            timestamp_ms,
            nonce: None,
        }
    }

    fn seal(&mut self, payload: &[u8], meta: &PackageMeta, forge: &Forge) -> Result<UpdatePackage, HarnessError> {
        let mut header = PackageHeader::for_payload(&self.profile, payload, meta)?;
        if forge.bad_magic {
            header.format_version = FORMAT_VERSION + 1;
        }
        if forge.digest_mismatch {
            header.plaintext_digest.0[0] ^= 0x01;
        }
        if forge.crc_mismatch {
            header.plaintext_crc ^= 0x01;
        }
        let key = if forge.wrong_key {
            KeyMaterial::random_symmetric(&mut self.rng)
        } else {
            self.device_key()
        };
        let signer = if forge.foreign_signer {
            &self.foreign.private
        } else {
            &self.keys.root.private
        };
        Ok(UpdatePackage::seal(&self.profile, header, payload, &key, signer)?)
    }

    fn bitstream(&mut self, workload: Workload, body_len: usize, forge: &Forge) -> SimBitstream {
        let (behavior_id, behavior_params, mut resource_usage) = match workload {
            Workload::Cnn => (BehaviorId::CnnV1, self.random_weights().encode(), ResourceUsage::CNN_ACCELERATOR),
            Workload::Shift => (BehaviorId::ShiftV1, Vec::new(), ResourceUsage::SHIFT_CIRCUIT),
            Workload::Opaque => (BehaviorId::Opaque, Vec::new(), ResourceUsage::SHIFT_CIRCUIT),
        };
        if forge.over_budget {
            resource_usage = ResourceUsage::CNN_ACCELERATOR.scaled(100);
        }
        let mut feature_summary = FeatureSummary::default();
        if forge.trojan {
            feature_summary.ring_oscillator_like = 2;
            feature_summary.sensor_primitives = 1;
        }
        let mut body = vec![0u8; body_len];
        self.rng.fill_bytes(&mut body);
        SimBitstream {
            behavior_id,
            behavior_params,
            resource_usage,
            feature_summary,
            body,
        }
    }

    fn random_weights(&mut self) -> CnnWeights {
        CnnWeights {
            kernel: std::array::from_fn(|_| std::array::from_fn(|_| self.rng.gen_range(-8..=8))),
            quant_shift: self.rng.gen_range(0..=3),
        }
    }

    // ----- firmware -----------------------------------------------------------

    fn install_firmware(&mut self, slot: SlotId, stage: u8, version: Option<u32>, forge: &Forge) -> Result<(), HarnessError> {
        if !self.window_allows("install_firmware") {
            return Ok(());
        }
        let mut meta = self.meta(PayloadKind::FirmwareStage, NO_REGION, forge);
        if let Some(v) = version {
            meta.package_version = v;
        }
        let body = format!("{slot}:{}:v{}", crate::boot::STAGE_NAMES[stage as usize], meta.package_version).into_bytes();
        let payload = FirmwareImage { stage, body }.encode();
        let bytes = self.seal(&payload, &meta, forge)?.serialize();
        let report = self.boot.install_firmware(&mut self.platform, &bytes, slot)?;
        self.bump(
            if report.is_accepted() {
                "firmware_accepted"
            } else {
                "firmware_rejected"
            },
            1,
        );
        Ok(())
    }

    // ----- reconfiguration ------------------------------------------------------

    fn reconfig(&mut self, r: &ReconfigStep) -> Result<(), HarnessError> {
        let body_len = r.body_len.unwrap_or(match r.workload {
            Workload::Cnn => VFPGA1_BODY_LEN,
            Workload::Shift => VFPGA2_BODY_LEN,
            Workload::Opaque => 4_096,
        });
        for i in 0..r.repeat {
            if i > 0 && r.spacing_ms > 0 {
                self.advance(r.spacing_ms)?;
            }
            if !self.window_allows("reconfig") {
                continue;
            }
            let bs = self.bitstream(r.workload, body_len, &r.forge);
            let version_region = r.region.or(r.target_region).unwrap_or(1);
            let meta = self.meta(PayloadKind::PartialBitstream, version_region, &r.forge);
            let mut req = AccelRequest::new(&bs, meta.package_version, meta.sequence_number, meta.timestamp_ms);
            req.preferred_region = r.region;
            req.target_region_override = if r.forge.unknown_region {
                Some(meta.target_region_id)
            } else {
                r.target_region
            };
            if let Some(u) = r.requested {
                req.requested = u;
            } else if r.forge.over_budget {
                // Declare a plausible budget so allocation succeeds and the
                // package check is what catches the overrun.
                req.requested = match r.workload {
                    Workload::Cnn => ResourceUsage::CNN_ACCELERATOR,
                    _ => ResourceUsage::SHIFT_CIRCUIT,
                };
            }
            let faults = FaultPlan {
                fail_at_step: r.faults.fail_at_step,
                zeroize_before_step: r.faults.zeroize_before_step,
                tamper_transfer: r.faults.tamper_transfer,
                stall_at_step: r.faults.stall_at_step,
            };
            let signer = if r.forge.foreign_signer {
                self.foreign.private.clone()
            } else {
                self.keys.root.private.clone()
            };
            let timeout = self.boot.update_timeout_ms;
            self.boot.arm_watchdog(&mut self.platform, &format!("reconfig:{}", r.app), timeout);
            let app = self.apps.get_mut(&r.app).expect("apps are checked at parse time");
            let session = self
                .anchor
                .handle_accel_request(&mut self.platform, app, &req, &signer, &faults);
            if !session.stalled {
                self.boot.checkpoint(&mut self.platform);
            }
            if session.is_acknowledged() {
                if let Some(region) = session.region_id {
                    self.trusted_models.remove(&region);
                }
            }
            let counter = match &session.state {
                SessionState::Acknowledged => "sessions_acknowledged",
                SessionState::Aborted(_) => "sessions_aborted",
                _ => "sessions_stalled",
            };
            self.bump(counter, 1);
            self.sessions.push(session);
        }
        Ok(())
    }

    fn update_model(&mut self, region: u8, break_validation: bool, n: usize) -> Result<(), HarnessError> {
        let behavior = self
            .platform
            .region(region)
            .and_then(|r| r.loaded_behavior().cloned())
            .ok_or(ReconfigError::RegionNotActive(region))?;
        let (behavior_id, params) = match behavior {
            LoadedBehavior::Cnn(_) => (BehaviorId::CnnV1, self.random_weights().encode()),
            LoadedBehavior::Shift => (BehaviorId::ShiftV1, Vec::new()),
            LoadedBehavior::Opaque => (BehaviorId::Opaque, Vec::new()),
        };
        let model = ModelPayload { behavior_id, params };
        let step = UplinkStep {
            kind: UplinkKind::Model,
            count: 1,
            region: Some(region),
            workload: Workload::Cnn,
            body_len: 0,
            forge: Forge::default(),
            reliable: false,
            max_retries: 0,
            ack_timeout_ms: 0,
            spacing_ms: 0,
        };
        let payload = model.encode();
        let outcomes = self.send_packages(&step, vec![(PayloadKind::AiModel, region, payload)])?;
        let accepted = outcomes.into_iter().find_map(|o| match o {
            ReceiveOutcome::Accepted { package, plaintext, .. } if package.header.payload_kind == PayloadKind::AiModel => {
                Some(plaintext)
            }
            _ => None,
        });
        let Some(plaintext) = accepted else {
            self.bump("model_updates_rejected", 1);
            return Ok(());
        };
        // Ground-computed baselines for the new parameters.
        let next = LoadedBehavior::from_bitstream(model.behavior_id, &model.params)?;
        let mut vectors = golden_vectors(&next, n, &mut self.rng);
        if break_validation {
            if let Some(v) = vectors.first_mut() {
                v.expected[0] = v.expected[0].wrapping_add(1);
            }
        }
        match self.anchor.update_model(&mut self.platform, region, &plaintext, &vectors) {
            Ok(()) => {
                self.trusted_models.insert(region, next);
                self.bump("model_updates_applied", 1);
            }
            Err(ReconfigError::ModelRejected(_)) => self.bump("model_updates_rolled_back", 1),
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    // ----- ground link ----------------------------------------------------------

    fn uplink(&mut self, u: &UplinkStep) -> Result<Vec<ReceiveOutcome>, HarnessError> {
        if !self.window_allows("uplink") {
            return Ok(Vec::new());
        }
        if u.kind == UplinkKind::Command {
            let bodies = (0..u.count).map(|i| format!("cmd:{i}").into_bytes()).collect();
            return self.send_frames(MessageKind::Command, bodies, u);
        }
        let default_region = self.sc.layout.regions.first().map_or(NO_REGION, |r| r.id);
        let mut items = Vec::with_capacity(u.count as usize);
        for _ in 0..u.count {
            let (kind, region, payload) = match u.kind {
                UplinkKind::Bitstream => {
                    let bs = self.bitstream(u.workload, u.body_len, &u.forge);
                    (PayloadKind::PartialBitstream, u.region.unwrap_or(default_region), bs.encode())
                }
                UplinkKind::Model => {
                    let params = self.random_weights().encode();
                    let m = ModelPayload {
                        behavior_id: BehaviorId::CnnV1,
                        params,
                    };
                    (PayloadKind::AiModel, u.region.unwrap_or(default_region), m.encode())
                }
                UplinkKind::Firmware => {
                    let mut body = vec![0u8; u.body_len];
                    self.rng.fill_bytes(&mut body);
                    let fw = FirmwareImage { stage: 0, body };
                    (PayloadKind::FirmwareStage, u.region.unwrap_or(NO_REGION), fw.encode())
                }
                UplinkKind::Command => unreachable!("handled above"),
            };
            items.push((kind, region, payload));
        }
        self.send_packages(u, items)
    }

    /// Builds one package per item (interleaved with sending so versions
    /// and sequence numbers track what the satellite has committed).
    fn send_packages(
        &mut self,
        u: &UplinkStep,
        items: Vec<(PayloadKind, u8, Vec<u8>)>,
    ) -> Result<Vec<ReceiveOutcome>, HarnessError> {
        let mut outcomes = Vec::new();
        for (i, (kind, region, payload)) in items.into_iter().enumerate() {
            if i > 0 && u.spacing_ms > 0 {
                self.advance(u.spacing_ms)?;
            }
            let meta = self.meta(kind, region, &u.forge);
            let bytes = self.seal(&payload, &meta, &u.forge)?.serialize();
            outcomes.extend(self.send_frames(MessageKind::PackageTransfer, vec![bytes], u)?);
        }
        Ok(outcomes)
    }

    fn send_frames(&mut self, kind: MessageKind, bodies: Vec<Vec<u8>>, u: &UplinkStep) -> Result<Vec<ReceiveOutcome>, HarnessError> {
        let mut outcomes = Vec::new();
        for body in bodies {
            self.bump("uplink_messages", 1);
            if u.reliable {
                let policy = RetryPolicy {
                    max_retries: u.max_retries,
                    ack_timeout_ms: u.ack_timeout_ms,
                };
                let mut clock = self.platform.now_ms();
                let mut seen: Vec<(Vec<u8>, ReceiveOutcome)> = Vec::new();
                let platform = &mut self.platform;
                let receiver = &mut self.receiver;
                let mut responder = |wire: &[u8], t: u64| {
                    let now = platform.now_ms();
                    if t > now {
                        platform.advance_clock(t - now);
                    }
                    let (o, reply) = receiver.receive(platform, wire);
                    seen.push((wire.to_vec(), o));
                    reply
                };
                let result = transmit_reliable(
                    &mut self.uplink,
                    &mut self.downlink,
                    &mut self.ground,
                    kind,
                    &body,
                    policy,
                    &mut clock,
                    &mut responder,
                )?;
                let now = self.platform.now_ms();
                if clock > now {
                    self.platform.advance_clock(clock - now);
                }
                self.sync_originals();
                for (wire, o) in seen {
                    self.account(&wire, &o);
                    outcomes.push(o);
                }
                let (name, outcome) = match result {
                    ReliableOutcome::Acked { .. } => ("uplink_acked", "acked"),
                    ReliableOutcome::Nacked { .. } => ("uplink_nacked", "nacked"),
                    ReliableOutcome::GaveUp { .. } => ("uplink_gave_up", "gave_up"),
                };
                self.bump(name, 1);
                self.bump("uplink_attempts", result.attempts() as u64);
                self.platform.append_event(
                    "ground",
                    "reliable_transfer",
                    outcome,
                    format!("attempts={}", result.attempts()),
                );
            } else {
                let now = self.platform.now_ms();
                let (msg, wire) = self.ground.seal(kind, &body, now);
                self.uplink.transmit_frame(msg.msg_seq, wire, now)?;
                self.sync_originals();
                let frames = self.uplink.poll(now);
                outcomes.extend(self.deliver(frames));
            }
        }
        // Frames still in flight arrive at their due times.
        while let Some(due) = self.uplink.next_due() {
            let now = self.platform.now_ms();
            if due > now {
                self.platform.advance_clock(due - now);
            }
            let frames = self.uplink.poll(due.max(now));
            outcomes.extend(self.deliver(frames));
        }
        self.downlink.drain_all();
        Ok(outcomes)
    }

    fn deliver(&mut self, frames: Vec<Vec<u8>>) -> Vec<ReceiveOutcome> {
        frames
            .into_iter()
            .map(|wire| {
                let (o, _reply) = self.receiver.receive(&mut self.platform, &wire);
                self.account(&wire, &o);
                o
            })
            .collect()
    }

    fn sync_originals(&mut self) {
        for w in &self.uplink.captured()[self.captured_seen..] {
            if let Some(seq) = peek_seq(w) {
                self.originals.insert(seq, w.clone());
            }
        }
        self.captured_seen = self.uplink.captured().len();
    }

    /// Tallies a delivered frame. A frame counts as tampered when it differs
    /// from what the ground sent under that sequence number.
    fn account(&mut self, wire: &[u8], outcome: &ReceiveOutcome) {
        let seq = peek_seq(wire);
        let tampered = seq.and_then(|s| self.originals.get(&s)).is_none_or(|o| o.as_slice() != wire);
        self.bump("frames_delivered", 1);
        if tampered {
            self.bump("frames_tampered", 1);
        }
        let accepted = match outcome {
            ReceiveOutcome::FrameRejected(_) => {
                self.bump("frames_rejected", 1);
                false
            }
            ReceiveOutcome::Command(_) => {
                self.bump("commands_accepted", 1);
                true
            }
            ReceiveOutcome::Accepted { package, .. } => {
                self.bump("packages_accepted", 1);
                if !self.accepted_pkgs.insert(package.header.sequence_number) {
                    self.bump("duplicates_accepted", 1);
                }
                true
            }
            ReceiveOutcome::Rejected(_) | ReceiveOutcome::Malformed => {
                self.bump("packages_rejected", 1);
                false
            }
            ReceiveOutcome::Reacknowledged { .. } => {
                self.bump("packages_reacknowledged", 1);
                false
            }
            ReceiveOutcome::Ignored(_) => false,
        };
        if accepted {
            if tampered {
                self.bump("tampered_accepted", 1);
            }
            if let Some(s) = seq {
                if !self.accepted_msgs.insert(s) {
                    self.bump("duplicates_accepted", 1);
                }
            }
        }
    }

    // ----- runtime monitoring -----------------------------------------------------

    fn scrub(&mut self) {
        let findings = self.anchor.scrub(&mut self.platform);
        self.bump("scrubs", 1);
        self.bump("scrub_findings", findings.len() as u64);
    }

    fn bist(&mut self, region: u8, n: usize, perturb: bool) -> Result<(), HarnessError> {
        // Baselines come from secure storage (the accepted image or the last
        // accepted model), never from the loaded logic under test.
        let image = self
            .platform
            .accepted_images(region)
            .last()
            .ok_or(ReconfigError::NothingToReload(region))?;
        let behavior = match self.trusted_models.get(&region) {
            Some(b) => b.clone(),
            None => {
                let bs = SimBitstream::decode(&image.plaintext)?;
                LoadedBehavior::from_bitstream(bs.behavior_id, &bs.behavior_params)?
            }
        };
        let mut vectors = golden_vectors(&behavior, n, &mut self.rng);
        if perturb {
            if let Some(v) = vectors.first_mut() {
                v.expected[0] = v.expected[0].wrapping_add(1);
            }
        }
        let outcome = run_bist(&mut self.platform, region, &vectors)?;
        self.last_bist = Some(outcome.passed());
        Ok(())
    }

    /// Advances simulated time, running CRC scrubs on their period and the
    /// watchdog at its deadline.
    fn advance(&mut self, ms: u64) -> Result<(), HarnessError> {
        let interval = self.sc.settings.scrub_interval_ms;
        let target = self.platform.now_ms() + ms;
        loop {
            let now = self.platform.now_ms();
            let mut next = target;
            if interval > 0 {
                next = next.min(self.next_scrub_ms);
            }
            if let Some(d) = self.boot.watchdog_deadline() {
                next = next.min(d);
            }
            if next > now {
                self.platform.advance_clock(next - now);
            }
            let now = self.platform.now_ms();
            if let Some(rec) = self.boot.watchdog_tick(&mut self.platform)? {
                self.bump("recoveries", 1);
                self.last_boot = Some(rec.report.outcome);
            }
            if interval > 0 && now >= self.next_scrub_ms {
                self.scrub();
                self.next_scrub_ms = (now / interval + 1) * interval;
            }
            if now >= target {
                return Ok(());
            }
        }
    }

    fn fuzz(&mut self, requests: u64, irq_requests: u64, regions: &[u8]) -> Result<(), HarnessError> {
        let specs: Vec<RegionSpec> = if regions.is_empty() {
            self.sc.layout.regions.clone()
        } else {
            self.sc
                .layout
                .regions
                .iter()
                .filter(|r| regions.contains(&r.id))
                .cloned()
                .collect()
        };
        if specs.is_empty() {
            return Ok(());
        }
        let mut windows = vec![self.sc.layout.shell];
        windows.extend(specs.iter().flat_map(|s| s.ranges.iter().copied()));
        let lo = windows.iter().map(|w| w.base).min().unwrap_or(0).saturating_sub(0x1000);
        let hi = windows.iter().map(|w| w.end()).max().unwrap_or(0).saturating_add(0x1000);
        for _ in 0..requests {
            let spec = &specs[self.rng.gen_range(0..specs.len())];
            let addr = if self.rng.gen_bool(0.5) {
                let w = windows[self.rng.gen_range(0..windows.len())];
                w.base + self.rng.gen_range(0..w.length)
            } else {
                self.rng.gen_range(lo..hi)
            };
            let len = self.rng.gen_range(1..=64);
            let op = if self.rng.gen() { AccessOp::Read } else { AccessOp::Write };
            let d = self.platform.firewall_check(spec.id, addr, len, op)?;
            self.bump("fuzz_requests", 1);
            if d == AccessDecision::Allow {
                self.bump("fuzz_allowed", 1);
                if !layout_permits(spec, addr, len, op) {
                    self.bump("fuzz_allowed_outside", 1);
                }
            } else {
                self.bump("fuzz_denied", 1);
            }
        }
        let lines: Vec<u32> = specs.iter().flat_map(|s| s.irqs.iter().copied()).collect();
        let irq_lo = lines.iter().min().copied().unwrap_or(0).saturating_sub(8);
        let irq_hi = lines.iter().max().copied().unwrap_or(0) + 8;
        for _ in 0..irq_requests {
            let spec = &specs[self.rng.gen_range(0..specs.len())];
            let line = self.rng.gen_range(irq_lo..=irq_hi);
            let d = self.platform.interrupt_check(spec.id, line)?;
            self.bump("irq_requests", 1);
            if d == AccessDecision::Allow {
                self.bump("irq_allowed", 1);
                if !spec.irqs.contains(&line) {
                    self.bump("irq_allowed_offlist", 1);
                }
            } else {
                self.bump("irq_denied", 1);
            }
        }
        Ok(())
    }

    // ----- expectations -------------------------------------------------------------

    fn check(&self, e: &Expect) -> (bool, String) {
        let records = self.platform.log().records();
        match e {
            Expect::Mode { is } => {
                let m = self.platform.mode().to_string();
                (&m == is, format!("mode={m}"))
            }
            Expect::RegionState { region, is } => match self.platform.region(*region) {
                Some(r) => {
                    let s = r.state().to_string();
                    (&s == is, format!("state={s}"))
                }
                None => (false, "no such region".into()),
            },
            Expect::BootOutcome { is } => {
                let o = self.last_boot.map(|b| format!("{b:?}")).unwrap_or_else(|| "none".into());
                (&o == is, format!("outcome={o}"))
            }
            Expect::FirmwareFloor { equals } => {
                let f = self.platform.firmware_floor();
                (f == *equals, format!("floor={f}"))
            }
            Expect::KeystoreZeroized { is } => {
                let z = self.platform.keystore().is_zeroized();
                (z == *is, format!("zeroized={z}"))
            }
            Expect::EventCount {
                event,
                outcome,
                equals,
                min,
                max,
            } => {
                let n = records
                    .iter()
                    .filter(|r| event_matches(r, event, outcome.as_deref()))
                    .count() as u64;
                (within(n, *equals, *min, *max), format!("count={n}"))
            }
            Expect::EventDetail {
                event,
                outcome,
                contains,
                equals,
                min,
                max,
            } => {
                let n = records
                    .iter()
                    .filter(|r| event_matches(r, event, outcome.as_deref()) && r.detail.contains(contains.as_str()))
                    .count() as u64;
                let min = if equals.is_none() && min.is_none() && max.is_none() { Some(1) } else { *min };
                (within(n, *equals, min, *max), format!("count={n}"))
            }
            Expect::EveryEvent {
                event,
                outcome,
                contains_any,
            } => {
                let matching: Vec<&EventRecord> =
                    records.iter().filter(|r| event_matches(r, event, outcome.as_deref())).collect();
                let bad = matching
                    .iter()
                    .find(|r| !contains_any.iter().any(|c| r.detail.contains(c.as_str())));
                match bad {
                    None => (true, format!("{} events checked", matching.len())),
                    Some(r) => (false, format!("event #{} detail `{}`", r.seq, r.detail)),
                }
            }
            Expect::EventSequence { since, events, exact } => {
                let from = since.as_ref().and_then(|m| self.marks.get(m)).copied().unwrap_or(0);
                let tail: Vec<&EventRecord> = records.iter().filter(|r| r.seq > from).collect();
                let label = |r: &EventRecord, pat: &str| {
                    if pat.contains(':') {
                        format!("{}:{}", r.action, r.outcome)
                    } else {
                        r.action.clone()
                    }
                };
                let observed: Vec<String> = tail
                    .iter()
                    .map(|r| format!("{}:{}", r.action, r.outcome))
                    .collect();
                let ok = if *exact {
                    tail.len() == events.len() && tail.iter().zip(events).all(|(r, p)| &label(r, p) == p)
                } else {
                    let mut want = events.iter().peekable();
                    for r in &tail {
                        if let Some(p) = want.peek() {
                            if &label(r, p) == *p {
                                want.next();
                            }
                        }
                    }
                    want.peek().is_none()
                };
                (ok, format!("observed=[{}]", observed.join(",")))
            }
            Expect::Session {
                is,
                reason_contains,
                steps,
            } => {
                let Some(s) = self.sessions.last() else {
                    return (false, "no session ran".into());
                };
                let state = match &s.state {
                    SessionState::Acknowledged => "acknowledged",
                    SessionState::Aborted(_) => "aborted",
                    _ if s.stalled => "stalled",
                    _ => "incomplete",
                };
                let reason = s.abort_reason().map(|r| r.to_string()).unwrap_or_default();
                let trace = s.trace_steps();
                let ok = state == is
                    && reason_contains.as_ref().is_none_or(|c| reason.contains(c.as_str()))
                    && steps.as_ref().is_none_or(|want| want == &trace);
                (ok, format!("state={state} reason={reason} steps={trace:?}"))
            }
            Expect::Counter { name, equals, min, max } => {
                let v = self.counters.get(name).copied().unwrap_or(0);
                (within(v, *equals, *min, *max), format!("{name}={v}"))
            }
            Expect::MetricMean { region, target, rel_tol } => {
                let m = collect_metrics(self.platform.log());
                match m.regions.get(region) {
                    Some(r) if !r.durations_ms.is_empty() => {
                        let ok = ((r.mean_ms - target) / target).abs() <= *rel_tol;
                        (ok, format!("mean={:.4} n={}", r.mean_ms, r.durations_ms.len()))
                    }
                    _ => (false, "no samples".into()),
                }
            }
            Expect::MetricStd { region, min, max } => {
                let m = collect_metrics(self.platform.log());
                match m.regions.get(region) {
                    Some(r) if r.durations_ms.len() > 1 => {
                        let ok = r.sample_std_ms >= *min && r.sample_std_ms <= *max;
                        (ok, format!("std={:.4} n={}", r.sample_std_ms, r.durations_ms.len()))
                    }
                    _ => (false, "fewer than two samples".into()),
                }
            }
            Expect::MetricCount { region, equals } => {
                let m = collect_metrics(self.platform.log());
                let n = m.regions.get(region).map_or(0, |r| r.durations_ms.len());
                (n == *equals, format!("n={n}"))
            }
            Expect::LastAccess { is } => {
                let d = match self.last_access {
                    Some(AccessDecision::Allow) => "allow",
                    Some(AccessDecision::Deny) => "deny",
                    None => "none",
                };
                (d == is, format!("decision={d}"))
            }
            Expect::LastBist { passed } => match self.last_bist {
                Some(p) => (p == *passed, format!("passed={p}")),
                None => (false, "no BIST ran".into()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_label_and_seed() {
        assert_ne!(sub_seed(1, "a", 0), sub_seed(1, "b", 0));
        assert_ne!(sub_seed(1, "a", 0), sub_seed(2, "a", 0));
        assert_ne!(sub_seed(1, "a", 0), sub_seed(1, "a", 1));
        assert_eq!(sub_seed(7, "timing", 3), sub_seed(7, "timing", 3));
    }

    #[test]
    fn bounds() {
        assert!(within(3, Some(3), None, None));
        assert!(!within(3, None, Some(4), None));
        assert!(within(3, None, Some(1), Some(3)));
    }
}
