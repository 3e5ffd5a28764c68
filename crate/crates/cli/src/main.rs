//! `aegis`: run scenarios, build and verify update packages, exercise the
//! boot chain and manage key directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aegis_core::boot::{build_stage_chain, BootImageSlot, BootManager, BootOutcome, SlotId, STAGE_NAMES};
use aegis_core::crypto::{CryptoProfile, ProfileId};
use aegis_core::harness::{export_results, run_scenario, HarnessError, KeyDirectory, Scenario};
use aegis_core::package::{
    build_package, validate_package, PackageMeta, PayloadKind, UpdatePackage, ValidationContext, NO_REGION,
};
use aegis_core::platform::{Platform, RegionLayout};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "aegis", version, about = "Secure reconfiguration simulator for SoC-FPGA satellite payloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and evaluate its expectations.
    Run(RunArgs),
    /// Build or verify update packages.
    #[command(subcommand)]
    Pack(PackCommand),
    /// Create boot slots or run the verified boot chain over them.
    #[command(subcommand)]
    Boot(BootCommand),
    /// Run a reconfiguration scenario.
    #[command(subcommand)]
    Reconfig(ReconfigCommand),
    /// Generate key directories.
    #[command(subcommand)]
    Keys(KeysCommand),
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for events.jsonl, metrics.json and trace.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PackCommand {
    Build {
        #[arg(long)]
        payload: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        version: u32,
        #[arg(long)]
        region: Option<u8>,
        #[arg(long)]
        seq: u64,
        #[arg(long, default_value_t = 0)]
        timestamp: u64,
        #[arg(long)]
        key_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Verify {
        package: PathBuf,
        #[arg(long)]
        key_dir: PathBuf,
        /// Installed version; enables the rollback check.
        #[arg(long)]
        stored_version: Option<u32>,
        /// Last accepted sequence number; enables the replay check.
        #[arg(long)]
        last_seq: Option<u64>,
        /// Device time; enables the freshness check.
        #[arg(long)]
        now: Option<u64>,
        /// Write the decrypted payload here when accepted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BootCommand {
    /// Write signed primary, alternate and golden stage chains.
    Init {
        #[arg(long)]
        key_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        primary_version: u32,
        #[arg(long, default_value_t = 1)]
        alternate_version: u32,
        #[arg(long, default_value_t = 1)]
        golden_version: u32,
    },
    Run {
        #[arg(long)]
        slots: PathBuf,
        /// Defaults to `<slots>/keys`.
        #[arg(long)]
        key_dir: Option<PathBuf>,
        /// Flip a stored byte before booting, as `slot:stage:byte`.
        #[arg(long)]
        corrupt: Vec<String>,
    },
}

#[derive(Subcommand)]
enum ReconfigCommand {
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum KeysCommand {
    Gen {
        #[arg(long, value_enum)]
        profile: ProfileArg,
        #[arg(long)]
        out: PathBuf,
        /// Deterministic keys from this seed instead of the OS generator.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Bitstream,
    Model,
    Firmware,
}

impl From<KindArg> for PayloadKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Bitstream => PayloadKind::PartialBitstream,
            KindArg::Model => PayloadKind::AiModel,
            KindArg::Firmware => PayloadKind::FirmwareStage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Reference,
    Test,
}

impl From<ProfileArg> for ProfileId {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Reference => ProfileId::Reference,
            ProfileArg::Test => ProfileId::Test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AEGIS_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(&a.scenario, a.seed, a.out.as_deref()),
        Command::Reconfig(ReconfigCommand::Run { scenario, seed, out }) => run(&scenario, seed, out.as_deref()),
        Command::Pack(p) => pack(p),
        Command::Boot(b) => boot(b),
        Command::Keys(KeysCommand::Gen { profile, out, seed }) => keys_gen(profile.into(), &out, seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<u8> {
    let mut scenario = Scenario::load(path)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let outcome = run_scenario(&scenario)?;
    for e in &outcome.expectations {
        let status = if e.passed { "PASS" } else { "FAIL" };
        println!("{status} step {:>3}: {} ({})", e.step, e.check, e.detail);
    }
    for (region, m) in &outcome.metrics.regions {
        println!(
            "region {region}: n={} mean_ms={:.3} sample_std_ms={:.3}",
            m.durations_ms.len(),
            m.mean_ms,
            m.sample_std_ms
        );
    }
    if let Some(dir) = out {
        let files = export_results(&outcome, dir)?;
        println!("wrote {}, {}, {}", files.events.display(), files.metrics.display(), files.trace.display());
    }
    let failed = outcome.failures().count();
    println!(
        "scenario {}: {} ({} expectations, {failed} failed, {} events)",
        outcome.name,
        if failed == 0 { "passed" } else { "FAILED" },
        outcome.expectations.len(),
        outcome.log().len()
    );
    Ok(outcome.exit_code() as u8)
}

/// A platform with fuses and root key provisioned from `keys`.
fn provisioned_platform(keys: &KeyDirectory) -> Result<Platform> {
    let profile = CryptoProfile::from_id(keys.profile);
    let mut p = Platform::new(profile, &RegionLayout::default(), &keys.device_seed)?;
    p.provision_fuses(profile.digest(&keys.root.public.bytes))?;
    p.install_root_key(keys.root.public.clone());
    Ok(p)
}

fn pack(cmd: PackCommand) -> Result<u8> {
    match cmd {
        PackCommand::Build {
            payload,
            kind,
            version,
            region,
            seq,
            timestamp,
            key_dir,
            out,
        } => {
            let keys = KeyDirectory::load(&key_dir)?;
            if !keys.has_private_key() {
                bail!("{} has no root private key", key_dir.display());
            }
            let data = fs::read(&payload).with_context(|| format!("reading {}", payload.display()))?;
            let meta = PackageMeta {
                package_version: version,
                payload_kind: kind.into(),
                target_region_id: region.unwrap_or(NO_REGION),
                sequence_number: seq,
                timestamp_ms: timestamp,
                nonce: None,
            };
            let profile = CryptoProfile::from_id(keys.profile);
            let pkg = build_package(&profile, &data, &meta, &keys.device_key(), &keys.root.private)?;
            let bytes = pkg.serialize();
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}: {} bytes, kind={:?} version={version} seq={seq} signer={}",
                out.display(),
                bytes.len(),
                meta.payload_kind,
                pkg.signature.signer_key_id
            );
            Ok(0)
        }
        PackCommand::Verify {
            package,
            key_dir,
            stored_version,
            last_seq,
            now,
            out,
        } => {
            let keys = KeyDirectory::load(&key_dir)?;
            let bytes = fs::read(&package).with_context(|| format!("reading {}", package.display()))?;
            let pkg = match UpdatePackage::parse(&bytes) {
                Ok(p) => p,
                Err(e) => {
                    println!("REJECTED: Malformed ({e})");
                    return Ok(1);
                }
            };
            let platform = provisioned_platform(&keys)?;
            let device_key = keys.device_key();
            let ctx = ValidationContext::new(
                platform.profile(),
                &platform,
                Some(&device_key),
                &platform,
                now.unwrap_or(pkg.header.timestamp_ms),
            )
            .stored_version(stored_version)
            .last_sequence(last_seq)
            .freshness_window(now.map(|_| platform.freshness_window_ms()));
            let v = validate_package(&pkg, &ctx);
            if v.report.is_accepted() {
                println!(
                    "ACCEPTED: kind={:?} version={} seq={} payload_len={}",
                    pkg.header.payload_kind, pkg.header.package_version, pkg.header.sequence_number, pkg.header.payload_len
                );
                if let (Some(path), Some(pt)) = (out, v.plaintext) {
                    fs::write(&path, pt).with_context(|| format!("writing {}", path.display()))?;
                }
                Ok(0)
            } else {
                println!("REJECTED: {}", v.report.failure_list());
                Ok(1)
            }
        }
    }
}

fn slot_dir(root: &Path, slot: SlotId) -> PathBuf {
    root.join(slot.to_string())
}

fn boot(cmd: BootCommand) -> Result<u8> {
    match cmd {
        BootCommand::Init {
            key_dir,
            out,
            primary_version,
            alternate_version,
            golden_version,
        } => {
            let keys = KeyDirectory::load(&key_dir)?;
            if !keys.has_private_key() {
                bail!("{} has no root private key", key_dir.display());
            }
            let profile = CryptoProfile::from_id(keys.profile);
            for (slot, v) in SlotId::ALL
                .into_iter()
                .zip([primary_version, alternate_version, golden_version])
            {
                let chain = build_stage_chain(profile, slot, [v; 3], &keys.device_key(), &keys.root.private)?;
                let dir = slot_dir(&out, slot);
                fs::create_dir_all(&dir)?;
                for (name, bytes) in STAGE_NAMES.iter().zip(chain) {
                    fs::write(dir.join(format!("{name}.pkg")), bytes)?;
                }
            }
            keys.save(&out.join("keys"))?;
            println!("wrote boot slots to {}", out.display());
            Ok(0)
        }
        BootCommand::Run { slots, key_dir, corrupt } => {
            let keys = KeyDirectory::load(&key_dir.unwrap_or_else(|| slots.join("keys")))?;
            let mut images = Vec::new();
            for slot in SlotId::ALL {
                let dir = slot_dir(&slots, slot);
                if !dir.exists() {
                    continue;
                }
                let chain = STAGE_NAMES
                    .iter()
                    .map(|n| fs::read(dir.join(format!("{n}.pkg"))).unwrap_or_default())
                    .collect();
                images.push(BootImageSlot::new(slot, chain));
            }
            let mut manager = BootManager::new(images);
            for spec in &corrupt {
                let (slot, stage, byte) = parse_corruption(spec)?;
                manager.inject_corruption(slot, stage, byte)?;
            }
            let mut platform = provisioned_platform(&keys)?;
            let report = manager.run_boot(&mut platform)?;
            for r in platform.log().records() {
                println!("{:>4} {:>6}ms {:<10} {:<14} {:<6} {}", r.seq, r.time_ms, r.actor, r.action, r.outcome, r.detail);
            }
            println!("outcome: {:?}", report.outcome);
            Ok(if report.outcome == BootOutcome::Halted { 1 } else { 0 })
        }
    }
}

fn parse_corruption(spec: &str) -> Result<(SlotId, usize, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [slot, stage, byte] = parts.as_slice() else {
        bail!("corruption `{spec}` is not slot:stage:byte");
    };
    let slot: SlotId = slot.parse()?;
    let stage = match STAGE_NAMES.iter().position(|n| n == stage) {
        Some(i) => i,
        None => stage.parse().map_err(|_| anyhow!("unknown stage `{stage}`"))?,
    };
    let byte = byte.parse().map_err(|_| anyhow!("bad byte offset `{byte}`"))?;
    Ok((slot, stage, byte))
}

fn keys_gen(profile: ProfileId, out: &Path, seed: Option<u64>) -> Result<u8> {
    let keys = match seed {
        Some(s) => KeyDirectory::generate(profile, &mut rand_chacha_from(s))?,
        None => KeyDirectory::generate(profile, &mut OsRng)?,
    };
    keys.save(out)?;
    let mut summary = BTreeMap::new();
    summary.insert("profile", format!("{profile:?}").to_lowercase());
    summary.insert("root_key_id", keys.root.public.key_id.to_string());
    summary.insert("dir", out.display().to_string());
    println!("{}", serde_json::to_string(&summary)?);
    Ok(0)
}

fn rand_chacha_from(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}
