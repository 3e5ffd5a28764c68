use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::timing::IcapTimingModel;
use super::ReconfigError;
use crate::behavioral::LoadedBehavior;
use crate::crypto::{crc32, CryptoProfile, KeyId, KeyMaterial, KeyPair};
use crate::link::{Channel, Endpoint, MessageKind};
use crate::package::{
    build_package, validate_package, FailedCheck, ModelPayload, PackageMeta, PayloadKind, ResourceUsage,
    SimBitstream, UpdatePackage, ValidationContext, ValidationReport, HEADER_LEN,
};
use crate::platform::{AcceptedImage, Platform, PlatformError, PlatformMode, RegionState, SingleRegion, WorldContext};

const TA: &str = "trust_anchor";
const SHELL: &str = "fpga_shell";

/// Event action for each workflow step, indexed by step number − 1.
pub const STEP_NAMES: [&str; 9] = [
    "request_initiation",
    "resource_allocation",
    "session_key_exchange",
    "bitstream_preparation",
    "bitstream_transfer",
    "decrypt_and_verify",
    "configuration_instruction",
    "partial_reconfiguration",
    "acknowledgment",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortReason {
    NotOperational,
    Unavailable,
    ZeroizedKeystore,
    KeyExchange(String),
    TransferLost,
    Malformed,
    WrongPayloadKind,
    Rejected(Vec<FailedCheck>),
    ShellRejected(String),
    Program(String),
    Injected(u8),
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::NotOperational => f.write_str("NotOperational"),
            AbortReason::Unavailable => f.write_str("Unavailable"),
            AbortReason::ZeroizedKeystore => f.write_str("ZeroizedKeystore"),
            AbortReason::KeyExchange(e) => write!(f, "KeyExchange({e})"),
            AbortReason::TransferLost => f.write_str("TransferLost"),
            AbortReason::Malformed => f.write_str("Malformed"),
            AbortReason::WrongPayloadKind => f.write_str("WrongPayloadKind"),
            AbortReason::Rejected(c) => {
                let list: Vec<String> = c.iter().map(|c| c.to_string()).collect();
                write!(f, "{}", list.join(","))
            }
            AbortReason::ShellRejected(e) => write!(f, "ShellRejected({e})"),
            AbortReason::Program(e) => write!(f, "Program({e})"),
            AbortReason::Injected(k) => write!(f, "InjectedFault(step={k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionState {
    Requested,
    Allocated,
    Keyed,
    Transferred,
    Verified,
    Programmed,
    Acknowledged,
    Aborted(AbortReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step: u8,
    pub actor: String,
    pub time_ms: u64,
}

/// One reconfiguration session. The session key itself stays in the
/// volatile key store; only its identifier is kept here.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigSession {
    pub session_id: u64,
    pub app_principal: String,
    pub region_id: Option<u8>,
    pub session_key_id: Option<KeyId>,
    pub state: SessionState,
    pub trace: Vec<StepRecord>,
    pub report: Option<ValidationReport>,
    pub duration_ms: Option<f64>,
    /// `Some(true)` ack, `Some(false)` negative ack, `None` when stalled.
    pub acked: Option<bool>,
    pub stalled: bool,
}

impl ReconfigSession {
    pub fn is_acknowledged(&self) -> bool {
        self.state == SessionState::Acknowledged
    }

    pub fn abort_reason(&self) -> Option<&AbortReason> {
        match &self.state {
            SessionState::Aborted(r) => Some(r),
            _ => None,
        }
    }

    pub fn trace_steps(&self) -> Vec<u8> {
        self.trace.iter().map(|s| s.step).collect()
    }
}

/// Scripted faults for a single session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// Abort at the start of this step (1..=8).
    pub fail_at_step: Option<u8>,
    /// Tamper-zeroize the key store just before this step.
    pub zeroize_before_step: Option<u8>,
    /// Flip the first ciphertext byte of the transferred frame.
    pub tamper_transfer: bool,
    /// Stop (without aborting) before this step; the session never
    /// checkpoints.
    pub stall_at_step: Option<u8>,
}

/// A request from a Normal-world application.
#[derive(Debug, Clone)]
pub struct AccelRequest {
    /// Encoded [`SimBitstream`].
    pub bitstream: Vec<u8>,
    /// Budget the application declares in step 1.
    pub requested: ResourceUsage,
    pub preferred_region: Option<u8>,
    /// Region named in the package header; defaults to the allocated one.
    pub target_region_override: Option<u8>,
    pub package_version: u32,
    pub sequence_number: u64,
    pub timestamp_ms: u64,
}

impl AccelRequest {
    pub fn new(bs: &SimBitstream, package_version: u32, sequence_number: u64, timestamp_ms: u64) -> Self {
        AccelRequest {
            bitstream: bs.encode(),
            requested: bs.resource_usage,
            preferred_region: None,
            target_region_override: None,
            package_version,
            sequence_number,
            timestamp_ms,
        }
    }
}

/// Normal-world tenant: holds its key pair and, during a session, the
/// decapsulated session key.
#[derive(Debug)]
pub struct TenantApp {
    pub principal: String,
    keypair: KeyPair,
    endpoint: Endpoint,
    session_key: Option<KeyMaterial>,
}

impl TenantApp {
    pub fn new(principal: impl Into<String>, keypair: KeyPair) -> Self {
        TenantApp {
            principal: principal.into(),
            keypair,
            endpoint: Endpoint::new(2, None),
            session_key: None,
        }
    }

    pub fn public_key(&self) -> &KeyMaterial {
        &self.keypair.public
    }

    fn accept_session(&mut self, profile: &CryptoProfile, blob: &[u8]) -> Result<(), ReconfigError> {
        self.session_key = Some(profile.decapsulate_key(blob, &self.keypair.private)?);
        Ok(())
    }

    /// Step 4: encrypt the bitstream under the session key, with target
    /// region and size bound into the authenticated header.
    fn prepare(
        &self,
        profile: &CryptoProfile,
        req: &AccelRequest,
        region: u8,
        signer: &KeyMaterial,
    ) -> Result<UpdatePackage, ReconfigError> {
        let key = self.session_key.as_ref().ok_or(PlatformError::KeyAbsent("session"))?;
        let meta = PackageMeta {
            package_version: req.package_version,
            payload_kind: PayloadKind::PartialBitstream,
            target_region_id: req.target_region_override.unwrap_or(region),
            sequence_number: req.sequence_number,
            timestamp_ms: req.timestamp_ms,
            nonce: None,
        };
        Ok(build_package(profile, &req.bitstream, &meta, key, signer)?)
    }

    fn end_session(&mut self) {
        if let Some(k) = self.session_key.as_mut() {
            k.bytes.fill(0);
        }
        self.session_key = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrubFinding {
    pub region_id: u8,
    pub expected_crc: u32,
    pub actual_crc: u32,
    pub reloaded: bool,
}

/// Secure-world orchestrator of reconfiguration, including the shell's
/// programming path.
#[derive(Debug)]
pub struct TrustAnchor {
    timing: IcapTimingModel,
    rng: ChaCha8Rng,
    next_session_id: u64,
    channel: Channel,
    receivers: BTreeMap<String, Endpoint>,
}

impl TrustAnchor {
    pub fn new(timing: IcapTimingModel, rng_seed: u64) -> Self {
        TrustAnchor {
            timing,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            next_session_id: 1,
            channel: Channel::null("inter_world"),
            receivers: BTreeMap::new(),
        }
    }

    pub fn timing(&self) -> &IcapTimingModel {
        &self.timing
    }

    pub fn timing_mut(&mut self) -> &mut IcapTimingModel {
        &mut self.timing
    }

    /// Inter-world message path between tenants and the trust anchor.
    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    pub fn channel_mut(&mut self) -> &mut Channel {
        &mut self.channel
    }

    /// Step 3: fresh session key, stored for `region` and encapsulated to
    /// the application.
    pub fn establish_session(
        &mut self,
        platform: &mut Platform,
        region: u8,
        app_pub: &KeyMaterial,
    ) -> Result<(u64, Vec<u8>), ReconfigError> {
        let id = self.next_session_id;
        self.next_session_id += 1;
        let blob = self.exchange(platform, region, app_pub)?;
        Ok((id, blob))
    }

    fn exchange(&mut self, platform: &mut Platform, region: u8, app_pub: &KeyMaterial) -> Result<Vec<u8>, ReconfigError> {
        let secure = WorldContext::secure(TA);
        if platform.keystore().is_zeroized() {
            return Err(ReconfigError::ZeroizedKeystore);
        }
        let key = KeyMaterial::random_symmetric(&mut self.rng);
        let blob = platform.profile().encapsulate_key(&key, app_pub, &mut self.rng)?;
        platform
            .keystore_mut()
            .store_session_key(&secure, region, key)
            .map_err(|e| match e {
                PlatformError::KeystoreZeroized => ReconfigError::ZeroizedKeystore,
                e => e.into(),
            })?;
        Ok(blob)
    }

    /// Runs the full nine-step workflow for one request.
    pub fn handle_accel_request(
        &mut self,
        platform: &mut Platform,
        app: &mut TenantApp,
        req: &AccelRequest,
        signer: &KeyMaterial,
        faults: &FaultPlan,
    ) -> ReconfigSession {
        let mut run = Run {
            session: ReconfigSession {
                session_id: 0,
                app_principal: app.principal.clone(),
                region_id: None,
                session_key_id: None,
                state: SessionState::Requested,
                trace: Vec::new(),
                report: None,
                duration_ms: None,
                acked: None,
                stalled: false,
            },
            faults,
        };
        let result = self.workflow(platform, app, req, signer, &mut run);
        let mut session = run.session;
        match result {
            Ok(()) => {}
            Err(Halt::Stalled(step)) => {
                session.stalled = true;
                platform.append_event(
                    TA,
                    "session_stall",
                    "stalled",
                    format!("session={} before_step={step}", session.session_id),
                );
            }
            Err(Halt::Abort(step, reason)) => {
                if let Some(r) = session.region_id {
                    if platform.region(r).map(|x| x.state()) == Some(RegionState::Configuring) {
                        let _ = platform.abort_configuring(r);
                    }
                    let _ = platform.keystore_mut().drop_session_key(&WorldContext::secure(TA), r);
                }
                session.acked = Some(false);
                platform.append_event(
                    TA,
                    "abort",
                    "nack",
                    format!(
                        "session={} app={} step={step} reason={reason}",
                        session.session_id, session.app_principal
                    ),
                );
                session.state = SessionState::Aborted(reason);
            }
        }
        if !session.stalled {
            app.end_session();
        }
        session
    }

    fn workflow(
        &mut self,
        platform: &mut Platform,
        app: &mut TenantApp,
        req: &AccelRequest,
        signer: &KeyMaterial,
        run: &mut Run<'_>,
    ) -> Result<(), Halt> {
        let profile = platform.profile();
        let principal = app.principal.clone();

        // 1. request initiation
        run.enter(platform, 1)?;
        if !matches!(platform.mode(), PlatformMode::Operational(_)) {
            return Err(run.fail(platform, 1, AbortReason::NotOperational, "platform not operational"));
        }
        run.session.session_id = self.next_session_id;
        self.next_session_id += 1;
        run.done(
            platform,
            1,
            &principal,
            format!("session={} app={principal} bitstream_len={}", run.session.session_id, req.bitstream.len()),
        );

        // 2. resource allocation
        run.enter(platform, 2)?;
        let allocated = match req.preferred_region {
            Some(r) => platform.claim_region(r, &req.requested, &principal).map(|_| r),
            None => platform.allocate_vfpga(&req.requested),
        };
        let region = match allocated {
            Ok(r) => r,
            Err(e) => return Err(run.fail(platform, 2, AbortReason::Unavailable, &e.to_string())),
        };
        run.session.region_id = Some(region);
        run.session.state = SessionState::Allocated;
        run.done(platform, 2, TA, format!("session={} region={region}", run.session.session_id));

        // 3. session key exchange
        run.enter(platform, 3)?;
        let sid = run.session.session_id;
        let blob = match self.exchange(platform, region, app.public_key()) {
            Ok(x) => x,
            Err(ReconfigError::ZeroizedKeystore) => {
                return Err(run.fail(platform, 3, AbortReason::ZeroizedKeystore, "key store zeroized"))
            }
            Err(e) => return Err(run.fail(platform, 3, AbortReason::KeyExchange(e.to_string()), &e.to_string())),
        };
        if let Err(e) = app.accept_session(&profile, &blob) {
            return Err(run.fail(platform, 3, AbortReason::KeyExchange(e.to_string()), &e.to_string()));
        }
        run.session.session_key_id = platform
            .keystore()
            .session_key(&WorldContext::secure(TA), region)
            .ok()
            .map(|k| k.key_id);
        run.session.state = SessionState::Keyed;
        run.done(platform, 3, TA, format!("session={sid} encapsulated_len={}", blob.len()));

        // 4. bitstream preparation (application side)
        run.enter(platform, 4)?;
        let pkg = match app.prepare(&profile, req, region, signer) {
            Ok(p) => p,
            Err(e) => return Err(run.fail(platform, 4, AbortReason::KeyExchange(e.to_string()), &e.to_string())),
        };
        let pkg_bytes = pkg.serialize();
        run.done(
            platform,
            4,
            &principal,
            format!("session={sid} package_len={} region={}", pkg_bytes.len(), pkg.header.target_region_id),
        );

        // 5. transfer over the inter-world path
        run.enter(platform, 5)?;
        let (msg, mut wire) = app.endpoint.seal(MessageKind::PackageTransfer, &pkg_bytes, platform.now_ms());
        if run.faults.tamper_transfer {
            let i = 21 + HEADER_LEN;
            if i < wire.len() {
                wire[i] ^= 0x01;
            }
        }
        if let Err(e) = self.channel.transmit_frame(msg.msg_seq, wire, platform.now_ms()) {
            return Err(run.fail(platform, 5, AbortReason::TransferLost, &e.to_string()));
        }
        let rx = self.receivers.entry(principal.clone()).or_insert_with(|| Endpoint::new(3, None));
        let received = self.channel.drain_all().into_iter().find_map(|w| rx.open(&w).ok());
        let Some(received) = received else {
            return Err(run.fail(platform, 5, AbortReason::TransferLost, "no frame received"));
        };
        run.session.state = SessionState::Transferred;
        run.done(platform, 5, &principal, format!("session={sid} msg_seq={}", received.msg_seq));

        // 6. decrypt and verify
        run.enter(platform, 6)?;
        let pkg = match UpdatePackage::parse(&received.body) {
            Ok(p) => p,
            Err(e) => return Err(run.fail(platform, 6, AbortReason::Malformed, &e.to_string())),
        };
        if pkg.header.payload_kind != PayloadKind::PartialBitstream {
            return Err(run.fail(platform, 6, AbortReason::WrongPayloadKind, "not a partial bitstream"));
        }
        let validation = {
            let secure = WorldContext::secure(TA);
            let key = platform.keystore().session_key(&secure, region).ok().cloned();
            let budget = platform.region(region).map(|r| r.budget).unwrap_or_default();
            let table = SingleRegion(region, budget);
            let ctx = ValidationContext::new(profile, platform, key.as_ref(), &table, platform.now_ms())
                .stored_version(Some(platform.version_floor(PayloadKind::PartialBitstream, region)))
                .last_sequence(platform.last_update_sequence())
                .freshness_window(Some(platform.freshness_window_ms()));
            validate_package(&pkg, &ctx)
        };
        run.session.report = Some(validation.report.clone());
        let plaintext = match validation.plaintext {
            Some(pt) => pt,
            None => {
                let failures = validation.report.failure_list();
                return Err(run.fail(
                    platform,
                    6,
                    AbortReason::Rejected(validation.report.failed_checks.clone()),
                    &format!("failures={failures}"),
                ));
            }
        };
        run.session.state = SessionState::Verified;
        run.done(
            platform,
            6,
            TA,
            format!("session={sid} version={} seq={}", pkg.header.package_version, pkg.header.sequence_number),
        );

        // 7. configuration instruction to the shell
        run.enter(platform, 7)?;
        let decoded = SimBitstream::decode(&plaintext)
            .map_err(|e| e.to_string())
            .and_then(|bs| {
                LoadedBehavior::from_bitstream(bs.behavior_id, &bs.behavior_params)
                    .map(|b| (bs, b))
                    .map_err(|e| e.to_string())
            });
        let (bs, behavior) = match decoded {
            Ok(x) => x,
            Err(e) => return Err(run.fail(platform, 7, AbortReason::ShellRejected(e.clone()), &e)),
        };
        run.done(
            platform,
            7,
            TA,
            format!("session={sid} region={region} size={} behavior={}", plaintext.len(), behavior.name()),
        );

        // 8. partial reconfiguration through the configuration port
        run.enter(platform, 8)?;
        let owner = Some(principal.clone());
        let duration = match icap_program(
            platform,
            region,
            &bs,
            behavior,
            plaintext.clone(),
            pkg.header.package_version,
            owner.clone(),
            &mut self.timing,
        ) {
            Ok(d) => d,
            Err(e) => return Err(run.fail(platform, 8, AbortReason::Program(e.to_string()), &e.to_string())),
        };
        run.session.duration_ms = Some(duration);
        run.session.state = SessionState::Programmed;
        run.done(
            platform,
            8,
            SHELL,
            format!("session={sid} region={region} duration_ms={duration:.6}"),
        );

        // 9. acknowledgment
        run.enter(platform, 9)?;
        platform.commit_sequence(pkg.header.sequence_number);
        platform.commit_version(PayloadKind::PartialBitstream, region, pkg.header.package_version);
        platform.accepted_images.entry(region).or_default().push(AcceptedImage {
            version: pkg.header.package_version,
            owner,
            plaintext,
        });
        let _ = platform.keystore_mut().drop_session_key(&WorldContext::secure(TA), region);
        run.session.acked = Some(true);
        run.session.state = SessionState::Acknowledged;
        run.done(platform, 9, TA, format!("session={sid} app={principal} status=ack"));
        Ok(())
    }

    /// Compares every active region's configuration CRC with the value
    /// recorded at programming time. A mismatch quarantines the region and
    /// reloads the last accepted image.
    pub fn scrub(&mut self, platform: &mut Platform) -> Vec<ScrubFinding> {
        let targets: Vec<(u8, u32, u32)> = platform
            .regions()
            .filter(|r| r.state() == RegionState::Active && !r.config_image.is_empty())
            .map(|r| (r.region_id, r.config_crc, crc32(&r.config_image)))
            .filter(|(_, want, got)| want != got)
            .collect();
        let mut findings = Vec::new();
        for (id, expected_crc, actual_crc) in targets {
            platform.append_event(
                "scrubber",
                "crc_scrub",
                "mismatch",
                format!("region={id} failures=CrcMismatch expected={expected_crc:#010x} actual={actual_crc:#010x}"),
            );
            let _ = platform.quarantine_vfpga(id);
            let reloaded = self.reload(platform, id, false).is_ok();
            findings.push(ScrubFinding {
                region_id: id,
                expected_crc,
                actual_crc,
                reloaded,
            });
        }
        findings
    }

    /// Reprograms a quarantined region from secure storage: the latest
    /// accepted image, or the one before it when `rollback` is set.
    pub fn reload(&mut self, platform: &mut Platform, region: u8, rollback: bool) -> Result<f64, ReconfigError> {
        let state = platform.region(region).ok_or(PlatformError::UnknownRegion(region))?.state();
        if state != RegionState::Quarantined {
            return Err(PlatformError::IllegalTransition {
                region,
                from: state,
                to: RegionState::Configuring,
            }
            .into());
        }
        let history = platform.accepted_images.get(&region).cloned().unwrap_or_default();
        let source = if rollback {
            history.len().checked_sub(2).map(|i| history[i].clone())
        } else {
            history.last().cloned()
        };
        let action = if rollback { "rollback" } else { "reload" };
        let Some(image) = source else {
            platform.append_event(TA, action, "fail", format!("region={region} reason=no_accepted_image"));
            return Err(ReconfigError::NothingToReload(region));
        };
        let bs = SimBitstream::decode(&image.plaintext).expect("accepted images decode");
        let behavior = LoadedBehavior::from_bitstream(bs.behavior_id, &bs.behavior_params).expect("accepted images decode");
        {
            let r = platform.region_mut(region)?;
            r.transition(RegionState::Empty)?;
            r.transition(RegionState::Configuring)?;
        }
        let duration = icap_program(
            platform,
            region,
            &bs,
            behavior,
            image.plaintext.clone(),
            image.version,
            image.owner.clone(),
            &mut self.timing,
        )?;
        if rollback {
            if let Some(h) = platform.accepted_images.get_mut(&region) {
                h.pop();
            }
        }
        platform.append_event(
            TA,
            action,
            "ok",
            format!("region={region} version={} duration_ms={duration:.6}", image.version),
        );
        Ok(duration)
    }

    /// AI-model lifecycle: replaces the parameters of an active accelerator
    /// with an accepted model payload, then validates the new model against
    /// the supplied golden vectors. A failing model is rolled back to the
    /// previous parameters and the region stays active.
    pub fn update_model(
        &mut self,
        platform: &mut Platform,
        region: u8,
        model_plaintext: &[u8],
        vectors: &[super::BistVector],
    ) -> Result<(), ReconfigError> {
        let r = platform.region(region).ok_or(PlatformError::UnknownRegion(region))?;
        let previous = match (r.state(), r.loaded_behavior()) {
            (RegionState::Active, Some(b)) => b.clone(),
            _ => return Err(ReconfigError::RegionNotActive(region)),
        };
        let image = r.config_image.clone();
        let reject = |platform: &mut Platform, why: String| {
            platform.append_event(TA, "model_update", "reject", format!("region={region} reason={why}"));
            Err(ReconfigError::ModelRejected(why))
        };
        let model = match ModelPayload::decode(model_plaintext) {
            Ok(m) => m,
            Err(e) => return reject(platform, e.to_string()),
        };
        let next = match LoadedBehavior::from_bitstream(model.behavior_id, &model.params) {
            Ok(b) if std::mem::discriminant(&b) == std::mem::discriminant(&previous) => b,
            Ok(b) => return reject(platform, format!("behavior {} does not match loaded {}", b.name(), previous.name())),
            Err(e) => return reject(platform, e.to_string()),
        };
        let failures = vectors
            .iter()
            .filter(|v| next.evaluate(&v.input).ok().as_deref() != Some(v.expected.as_slice()))
            .count();
        if failures > 0 {
            platform.append_event(
                TA,
                "model_rollback",
                "ok",
                format!("region={region} mismatches={failures} restored={}", previous.name()),
            );
            return Err(ReconfigError::ModelRejected(format!("{failures} validation mismatches")));
        }
        platform.set_region_behavior(region, next, image)?;
        platform.append_event(
            TA,
            "model_update",
            "ok",
            format!("region={region} vectors={}", vectors.len()),
        );
        Ok(())
    }
}

/// Streams a validated bitstream into a `Configuring` region and activates
/// it. Returns the simulated duration; the platform clock advances by it.
#[allow(clippy::too_many_arguments)]
pub fn icap_program(
    platform: &mut Platform,
    region: u8,
    bs: &SimBitstream,
    behavior: LoadedBehavior,
    image: Vec<u8>,
    version: u32,
    owner: Option<String>,
    timing: &mut IcapTimingModel,
) -> Result<f64, ReconfigError> {
    let r = platform.region(region).ok_or(PlatformError::UnknownRegion(region))?;
    if r.state() != RegionState::Configuring {
        return Err(ReconfigError::RegionNotConfiguring(region));
    }
    if !bs.resource_usage.fits_within(&r.budget) {
        return Err(ReconfigError::OverBudget(region));
    }
    let duration = timing.sample(region, bs.body.len())?;
    platform.advance_clock(duration.round() as u64);
    platform.activate_region(region, behavior, version, image, owner)?;
    Ok(duration)
}

enum Halt {
    Abort(u8, AbortReason),
    Stalled(u8),
}

struct Run<'a> {
    session: ReconfigSession,
    faults: &'a FaultPlan,
}

impl Run<'_> {
    /// Applies scripted faults due before `step`.
    fn enter(&mut self, platform: &mut Platform, step: u8) -> Result<(), Halt> {
        if self.faults.stall_at_step == Some(step) {
            return Err(Halt::Stalled(step));
        }
        if self.faults.zeroize_before_step == Some(step) {
            let _ = platform.tamper_zeroize(&WorldContext::secure("tamper_monitor"));
        }
        if self.faults.fail_at_step == Some(step) {
            return Err(self.fail(platform, step, AbortReason::Injected(step), "injected fault"));
        }
        Ok(())
    }

    fn fail(&mut self, platform: &mut Platform, step: u8, reason: AbortReason, detail: &str) -> Halt {
        let actor = if matches!(step, 1 | 4 | 5) { self.session.app_principal.clone() } else { TA.to_string() };
        platform.append_event(
            actor,
            STEP_NAMES[step as usize - 1],
            "fail",
            format!("session={} {detail}", self.session.session_id),
        );
        Halt::Abort(step, reason)
    }

    fn done(&mut self, platform: &mut Platform, step: u8, actor: &str, detail: String) {
        platform.append_event(actor, STEP_NAMES[step as usize - 1], "ok", detail);
        self.session.trace.push(StepRecord {
            step,
            actor: actor.to_string(),
            time_ms: platform.now_ms(),
        });
    }
}
