//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use aegis_core::behavioral::{cnn_forward, shift_exec, CnnParams, ShiftDirection, ShiftParams};
use aegis_core::boot::{build_stage_chain, BootImageSlot, BootManager, BootOutcome, SlotId};
use aegis_core::crypto::{CryptoProfile, KeyMaterial};
use aegis_core::harness::{export_results, run_scenario, Scenario, ScenarioOutcome, EVENTS_FILE, METRICS_FILE, TRACE_FILE};
use aegis_core::link::FrameAction;
use aegis_core::package::{
    build_package, validate_package, BehaviorId, FailedCheck, FeatureSummary, PackageMeta, PayloadKind, ResourceUsage,
    SimBitstream, UpdatePackage, ValidationContext, NO_REGION,
};
use aegis_core::platform::{derive_puf_key, Platform, PlatformMode, RegionLayout};
use aegis_core::reconfig::{SessionState, STEP_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(name: &str) -> Result<ScenarioOutcome, String> {
    let s = Scenario::load(&scenario_dir().join(format!("{name}.toml"))).map_err(|e| e.to_string())?;
    run_scenario(&s).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn counter(o: &ScenarioOutcome, k: &str) -> u64 {
    o.counters.get(k).copied().unwrap_or(0)
}

fn events<'a>(o: &'a ScenarioOutcome, action: &'a str, outcome: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    o.log()
        .records()
        .iter()
        .filter(move |r| r.action == action && r.outcome == outcome)
        .map(|r| r.detail.as_str())
}

// 1 ------------------------------------------------------------------------

fn timing_reproduction() -> Verdict {
    let mut lines = Vec::new();
    for (name, region, target, sigma) in [("table2_vfpga1", 1u8, 495.21, 8.64), ("table2_vfpga2", 2, 528.21, 0.27)] {
        let start = Instant::now();
        let o = run(name)?;
        let wall = start.elapsed().as_secs_f64();
        let m = o.metrics.regions.get(&region).ok_or(format!("{name}: no samples"))?;
        ensure(m.durations_ms.len() == 25, format!("{name}: {} trials", m.durations_ms.len()))?;
        let rel = (m.mean_ms - target).abs() / target;
        ensure(rel <= 0.01, format!("{name}: mean {:.3} is {:.3}% from {target}", m.mean_ms, rel * 100.0))?;
        ensure(
            (0.5 * sigma..=2.0 * sigma).contains(&m.sample_std_ms),
            format!("{name}: std {:.4} outside [{}, {}]", m.sample_std_ms, 0.5 * sigma, 2.0 * sigma),
        )?;
        let longest = m.durations_ms.iter().cloned().fold(0.0, f64::max);
        ensure(longest < 5_000.0, format!("{name}: a trial took {longest:.1} simulated ms"))?;
        ensure(wall < 5.0, format!("{name}: {wall:.2} s wall clock"))?;
        lines.push(format!(
            "{name} mean={:.3} std={:.4} longest_trial={longest:.1}ms simulated_span={}ms wall={wall:.2}s",
            m.mean_ms,
            m.sample_std_ms,
            o.platform.now_ms()
        ));
    }
    Ok(lines.join("; "))
}

// 2 ------------------------------------------------------------------------

fn nine_step_trace() -> Verdict {
    let o = run("happy_path")?;
    ensure(o.sessions.len() == 1, format!("{} sessions", o.sessions.len()))?;
    let s = &o.sessions[0];
    ensure(s.state == SessionState::Acknowledged, format!("session state {:?}", s.state))?;
    let steps: Vec<u8> = s.trace.iter().map(|r| r.step).collect();
    ensure(steps == (1..=9).collect::<Vec<u8>>(), format!("session steps {steps:?}"))?;
    let tag = format!("session={} ", s.session_id);
    let logged: Vec<&str> = o
        .log()
        .records()
        .iter()
        .filter(|r| STEP_NAMES.contains(&r.action.as_str()) && r.detail.starts_with(&tag))
        .map(|r| r.action.as_str())
        .collect();
    ensure(logged == STEP_NAMES, format!("logged steps {logged:?}"))?;
    Ok("steps 1-9 in order, one event each".into())
}

// 3 ------------------------------------------------------------------------

fn replay_defense() -> Verdict {
    let o = run("replay_attack")?;
    let sent = o.trace.count(|a| matches!(a, FrameAction::Delivered | FrameAction::Dropped | FrameAction::Duplicated));
    let duplicated = o.trace.duplicated();
    ensure(sent >= 1000, format!("only {sent} frames"))?;
    ensure(duplicated == sent, format!("{duplicated} of {sent} frames duplicated"))?;
    ensure(counter(&o, "duplicates_accepted") == 0, "a duplicate was accepted")?;
    let accepted = counter(&o, "packages_accepted") + counter(&o, "commands_accepted");
    ensure(accepted as usize == sent, format!("{accepted} originals accepted of {sent}"))?;
    let rejections: Vec<&str> = events(&o, "frame_receive", "reject").chain(events(&o, "package_validate", "reject")).collect();
    ensure(rejections.len() == duplicated, format!("{} rejections for {duplicated} duplicates", rejections.len()))?;
    ensure(
        rejections.iter().all(|d| d.contains("ReplayedSequence")),
        "a rejection did not log ReplayedSequence",
    )?;
    Ok(format!("{sent} frames, {duplicated} duplicates, 0 accepted, {} ReplayedSequence rejections", rejections.len()))
}

// 4 ------------------------------------------------------------------------

fn tamper_defense() -> Verdict {
    let o = run("tamper_attack")?;
    let tampered = o.trace.tampered();
    ensure(tampered >= 1000, format!("only {tampered} tampered frames"))?;
    ensure(counter(&o, "tampered_accepted") == 0, "a tampered frame was accepted")?;
    ensure(counter(&o, "packages_accepted") == 0, "a package was accepted")?;
    let rejections: Vec<&str> = events(&o, "frame_receive", "reject").chain(events(&o, "package_validate", "reject")).collect();
    ensure(rejections.len() >= tampered, format!("{} rejections for {tampered} frames", rejections.len()))?;
    ensure(
        rejections.iter().all(|d| d.contains("AuthFailure") || d.contains("DigestMismatch")),
        "a rejection logged neither AuthFailure nor DigestMismatch",
    )?;
    Ok(format!("{tampered} tampered frames, 0 accepted, all rejections AuthFailure/DigestMismatch"))
}

// 5 ------------------------------------------------------------------------

fn anti_rollback() -> Verdict {
    let profile = CryptoProfile::TEST;
    let signer = profile.generate_keypair(&mut ChaCha8Rng::seed_from_u64(5)).map_err(|e| e.to_string())?;
    let trusted = vec![signer.public.clone()];
    let key = KeyMaterial::symmetric([0x42; 32]);
    let regions: BTreeMap<u8, ResourceUsage> = BTreeMap::new();
    let mut pairs = 0;
    for v_new in 0..=100u32 {
        let meta = PackageMeta {
            package_version: v_new,
            payload_kind: PayloadKind::AiModel,
            target_region_id: NO_REGION,
            sequence_number: 1,
            timestamp_ms: 0,
            nonce: None,
        };
        let pkg = build_package(&profile, b"weights", &meta, &key, &signer.private).map_err(|e| e.to_string())?;
        for v_stored in 0..=100u32 {
            let ctx = ValidationContext::new(profile, &trusted, Some(&key), &regions, 0).stored_version(Some(v_stored));
            let r = validate_package(&pkg, &ctx).report;
            if v_new <= v_stored {
                ensure(
                    r.failed_checks == [FailedCheck::RollbackVersion],
                    format!("({v_new}, {v_stored}) -> {:?}", r.failed_checks),
                )?;
            } else {
                ensure(r.is_accepted(), format!("({v_new}, {v_stored}) rejected: {:?}", r.failed_checks))?;
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} version pairs"))
}

// 6 ------------------------------------------------------------------------

fn boot_recovery() -> Verdict {
    const SEED: &[u8] = b"acceptance-device";
    let profile = CryptoProfile::TEST;
    let root = profile.generate_keypair(&mut ChaCha8Rng::seed_from_u64(6)).map_err(|e| e.to_string())?;
    let dk = derive_puf_key(SEED);
    let mut slots = Vec::new();
    for (slot, v) in [(SlotId::Primary, 3), (SlotId::Alternate, 2), (SlotId::Golden, 1)] {
        let chain = build_stage_chain(profile, slot, [v; 3], &dk, &root.private).map_err(|e| e.to_string())?;
        slots.push(BootImageSlot::new(slot, chain));
    }
    let platform = || -> Result<Platform, String> {
        let mut p = Platform::new(profile, &RegionLayout::default(), SEED).map_err(|e| e.to_string())?;
        p.provision_fuses(profile.digest(&root.public.bytes)).map_err(|e| e.to_string())?;
        p.install_root_key(root.public.clone());
        Ok(p)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xB007);
    let mut corrupt = |mgr: &mut BootManager, targets: &[SlotId], flips: usize| -> Result<(), String> {
        let mut used = BTreeSet::new();
        while used.len() < flips {
            let slot = targets[rng.gen_range(0..targets.len())];
            let stage = rng.gen_range(0..3);
            let len = mgr.slot(slot).map(|s| s.stage_chain()[stage].len()).unwrap_or(1);
            let byte = rng.gen_range(0..len);
            if used.insert((slot, stage, byte)) {
                mgr.inject_corruption(slot, stage, byte).map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    };
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..500 {
        let mut mgr = BootManager::new(slots.clone());
        let flips = 1 + i % 6;
        corrupt(&mut mgr, &[SlotId::Primary, SlotId::Alternate], flips)?;
        let outcome = mgr.run_boot(&mut platform()?).map_err(|e| e.to_string())?.outcome;
        ensure(outcome != BootOutcome::Halted, format!("pattern {i} halted"))?;
        *tally.entry(format!("{outcome:?}")).or_default() += 1;
    }
    for i in 0..20 {
        let mut mgr = BootManager::new(slots.clone());
        for slot in SlotId::ALL {
            corrupt(&mut mgr, &[slot], 1 + i % 3)?;
        }
        let mut p = platform()?;
        let outcome = mgr.run_boot(&mut p).map_err(|e| e.to_string())?.outcome;
        ensure(outcome == BootOutcome::Halted && p.mode() == PlatformMode::Halted, format!("golden-corrupt run {i}: {outcome:?}"))?;
    }
    Ok(format!("500 patterns {tally:?}; 20 golden-corrupt runs halted"))
}

// 7 ------------------------------------------------------------------------

fn watchdog_revert() -> Verdict {
    let o = run("watchdog_revert")?;
    let stalled = o.sessions.iter().filter(|s| s.stalled).count();
    ensure(stalled == 1, format!("{stalled} stalled sessions"))?;
    let recoveries = o.log().records().iter().filter(|r| r.action == "recovery_triggered").count();
    ensure(recoveries == 1, format!("{recoveries} RecoveryTriggered events"))?;
    let golden_boot = o
        .log()
        .records()
        .iter()
        .rev()
        .find(|r| r.action == "boot")
        .map(|r| r.detail.starts_with("slot=golden"))
        .unwrap_or(false);
    ensure(golden_boot, "last boot was not from the golden slot")?;
    ensure(o.platform.mode() == PlatformMode::SafeMode, format!("mode {}", o.platform.mode()))?;
    Ok("stalled update reverted to golden with one RecoveryTriggered".into())
}

// 8 ------------------------------------------------------------------------

fn tenant_isolation() -> Verdict {
    let o = run("tenant_isolation_fuzz")?;
    let requests = counter(&o, "fuzz_requests");
    ensure(requests >= 10_000, format!("{requests} requests"))?;
    ensure(counter(&o, "fuzz_allowed_outside") == 0, "an access outside the requester's windows was allowed")?;
    ensure(counter(&o, "irq_allowed_offlist") == 0, "an interrupt off the allowlist was allowed")?;
    let q = run("tenant_quarantine")?;
    ensure(q.passed(), "tenant_quarantine expectations failed")?;
    let quarantine = q
        .log()
        .records()
        .iter()
        .position(|r| r.action == "quarantine" && r.detail.contains("region=1"))
        .ok_or("region 1 never quarantined")?;
    let violations_before = q.log().records()[..quarantine]
        .iter()
        .filter(|r| matches!(r.outcome.as_str(), "deny") && r.detail.contains("region=1 "))
        .count();
    ensure(violations_before == 3, format!("quarantined after {violations_before} violations"))?;
    Ok(format!(
        "{requests} requests ({} allowed, {} denied), {} interrupts, 0 escapes; quarantine on 3rd violation",
        counter(&o, "fuzz_allowed"),
        counter(&o, "fuzz_denied"),
        counter(&o, "irq_requests")
    ))
}

// 9 ------------------------------------------------------------------------

fn cnn_brute_force(p: &CnnParams) -> [[i8; 2]; 2] {
    let mut conv = [[0i64; 4]; 4];
    for (r, row) in conv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut acc = 0i64;
            for kr in 0..3 {
                for kc in 0..3 {
                    acc += i64::from(p.kernel[kr][kc]) * i64::from(p.input[r + kr][c + kc]);
                }
            }
            *v = acc.div_euclid(1 << p.quant_shift).clamp(-128, 127).max(0);
        }
    }
    let mut out = [[0i8; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut m = i64::MIN;
            for dr in 0..2 {
                for dc in 0..2 {
                    m = m.max(conv[2 * r + dr][2 * c + dc]);
                }
            }
            out[r][c] = m as i8;
        }
    }
    out
}

fn behavioral_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..1000 {
        let p = CnnParams {
            kernel: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen())),
            quant_shift: if i % 2 == 0 { rng.gen_range(0..=4) } else { rng.gen_range(0..=31) },
            input: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen())),
        };
        ensure(cnn_forward(&p) == cnn_brute_force(&p), format!("cnn case {i}: {p:?}"))?;
    }
    for i in 0..1000 {
        let p = ShiftParams {
            value: rng.gen(),
            direction: if rng.gen() { ShiftDirection::Left } else { ShiftDirection::Right },
            amount: rng.gen_range(0..=31),
        };
        let want = match p.direction {
            ShiftDirection::Left => (u64::from(p.value) * (1u64 << p.amount)) as u32,
            ShiftDirection::Right => (u64::from(p.value) / (1u64 << p.amount)) as u32,
        };
        ensure(shift_exec(&p) == want, format!("shift case {i}: {p:?}"))?;
    }
    Ok("1000 cnn + 1000 shift cases equal".into())
}

// 10 -----------------------------------------------------------------------

fn seu_pipeline() -> Verdict {
    let o = run("seu_scrub")?;
    ensure(o.passed(), format!("scenario expectations: {:?}", o.failures().collect::<Vec<_>>()))?;
    let recs = o.log().records();
    let start = recs.iter().position(|r| r.action == "seu_inject").ok_or("no seu_inject event")?;
    let seq: Vec<String> = recs[start..]
        .iter()
        .take(5)
        .map(|r| format!("{}:{}", r.action, r.outcome))
        .collect();
    let want = ["seu_inject:ok", "crc_scrub:mismatch", "quarantine:ok", "reload:ok", "bist:pass"];
    ensure(seq == want, format!("sequence {seq:?}"))?;
    ensure(recs[start + 1].detail.contains("CrcMismatch"), "scrub event lacks CrcMismatch")?;
    Ok(want.join(" -> "))
}

// 11 -----------------------------------------------------------------------

fn format_stability() -> Verdict {
    let profile = CryptoProfile::TEST;
    let signer = profile.generate_keypair(&mut ChaCha8Rng::seed_from_u64(11)).map_err(|e| e.to_string())?;
    let trusted = vec![signer.public.clone()];
    let key = KeyMaterial::symmetric([0x17; 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(0x11);
    for i in 0..1000 {
        let mut payload = vec![0u8; rng.gen_range(0..4096)];
        rng.fill(payload.as_mut_slice());
        let meta = PackageMeta {
            package_version: rng.gen(),
            payload_kind: PayloadKind::from_u8(rng.gen_range(0..3)).unwrap(),
            target_region_id: rng.gen(),
            sequence_number: rng.gen(),
            timestamp_ms: rng.gen(),
            nonce: Some(rng.gen()),
        };
        let pkg = build_package(&profile, &payload, &meta, &key, &signer.private).map_err(|e| e.to_string())?;
        let bytes = pkg.serialize();
        let back = UpdatePackage::parse(&bytes).map_err(|e| format!("package {i}: {e}"))?;
        ensure(back.serialize() == bytes && back == pkg, format!("package {i} did not round-trip"))?;
    }

    let mut regions = BTreeMap::new();
    regions.insert(1u8, ResourceUsage::CNN_ACCELERATOR.scaled(2));
    let mut body = vec![0u8; 2048];
    rng.fill(body.as_mut_slice());
    let bs = SimBitstream {
        behavior_id: BehaviorId::Opaque,
        behavior_params: Vec::new(),
        resource_usage: ResourceUsage::CNN_ACCELERATOR,
        feature_summary: FeatureSummary::default(),
        body,
    };
    let meta = PackageMeta {
        package_version: 2,
        payload_kind: PayloadKind::PartialBitstream,
        target_region_id: 1,
        sequence_number: 8,
        timestamp_ms: 1000,
        nonce: None,
    };
    let pkg = build_package(&profile, &bs.encode(), &meta, &key, &signer.private).map_err(|e| e.to_string())?;
    let bytes = pkg.serialize();
    let ctx = || {
        ValidationContext::new(profile, &trusted, Some(&key), &regions, 1000)
            .stored_version(Some(1))
            .last_sequence(Some(7))
    };
    ensure(validate_package(&pkg, &ctx()).report.is_accepted(), "baseline package not accepted")?;
    let mut positions = BTreeSet::new();
    while positions.len() < 500 {
        positions.insert(rng.gen_range(0..bytes.len() * 8));
    }
    let mut parse_errors = 0;
    for &bit in &positions {
        let mut f = bytes.clone();
        f[bit / 8] ^= 1 << (bit % 8);
        match UpdatePackage::parse(&f) {
            Err(_) => parse_errors += 1,
            Ok(p) => ensure(!validate_package(&p, &ctx()).report.is_accepted(), format!("flip of bit {bit} accepted"))?,
        }
    }
    Ok(format!("1000 round trips; 500 bit flips rejected ({parse_errors} at parse)"))
}

// 12 -----------------------------------------------------------------------

fn determinism() -> Verdict {
    let mut paths: Vec<PathBuf> = fs::read_dir(scenario_dir())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    for path in &paths {
        let s = Scenario::load(path).map_err(|e| e.to_string())?;
        let mut exported = Vec::new();
        for run_idx in 0..2 {
            let dir = root.path().join(format!("{}-{run_idx}", s.name));
            let o = run_scenario(&s).map_err(|e| e.to_string())?;
            export_results(&o, &dir).map_err(|e| e.to_string())?;
            let files: Vec<Vec<u8>> = [EVENTS_FILE, METRICS_FILE, TRACE_FILE]
                .iter()
                .map(|f| fs::read(dir.join(f)).unwrap_or_default())
                .collect();
            exported.push(files);
        }
        ensure(exported[0] == exported[1], format!("{} differs between runs", s.name))?;
    }
    Ok(format!("{} scenarios byte-identical across runs", paths.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("timing reproduction", timing_reproduction),
        ("nine-step trace", nine_step_trace),
        ("replay defense", replay_defense),
        ("tamper defense", tamper_defense),
        ("anti-rollback", anti_rollback),
        ("boot recovery totality", boot_recovery),
        ("watchdog revert", watchdog_revert),
        ("tenant isolation fuzz", tenant_isolation),
        ("behavioral oracle equivalence", behavioral_oracles),
        ("SEU-to-recovery pipeline", seu_pipeline),
        ("format stability", format_stability),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
