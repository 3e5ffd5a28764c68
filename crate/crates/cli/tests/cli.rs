use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aegis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aegis"))
        .args(args)
        .env("AEGIS_LOG_LEVEL", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn keys(dir: &Path) -> PathBuf {
    let k = dir.join("keys");
    let o = aegis(&["keys", "gen", "--profile", "test", "--out", s(&k), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    k
}

#[test]
fn pack_build_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let k = keys(dir.path());
    let payload = dir.path().join("model.bin");
    fs::write(&payload, vec![7u8; 3000]).unwrap();
    let pkg = dir.path().join("model.pkg");
    let o = aegis(&[
        "pack", "build", "--payload", s(&payload), "--kind", "model", "--version", "4", "--seq", "11", "--key-dir",
        s(&k), "--out", s(&pkg),
    ]);
    assert_eq!(code(&o), 0);

    let out = dir.path().join("decrypted.bin");
    let o = aegis(&["pack", "verify", s(&pkg), "--key-dir", s(&k), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("ACCEPTED"));
    assert_eq!(fs::read(&out).unwrap(), vec![7u8; 3000]);

    let o = aegis(&["pack", "verify", s(&pkg), "--key-dir", s(&k), "--stored-version", "4", "--last-seq", "11"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("RollbackVersion,ReplayedSequence"));

    let mut bytes = fs::read(&pkg).unwrap();
    bytes[150] ^= 0x04;
    fs::write(&pkg, bytes).unwrap();
    let o = aegis(&["pack", "verify", s(&pkg), "--key-dir", s(&k)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("REJECTED"));
}

#[test]
fn pack_verify_with_foreign_keys_fails_signature() {
    let dir = tempfile::tempdir().unwrap();
    let k = keys(dir.path());
    let other = dir.path().join("other");
    assert_eq!(code(&aegis(&["keys", "gen", "--profile", "test", "--out", s(&other), "--seed", "6"])), 0);
    let payload = dir.path().join("fw.bin");
    fs::write(&payload, b"firmware").unwrap();
    let pkg = dir.path().join("fw.pkg");
    let o = aegis(&[
        "pack", "build", "--payload", s(&payload), "--kind", "firmware", "--version", "1", "--seq", "1", "--key-dir",
        s(&other), "--out", s(&pkg),
    ]);
    assert_eq!(code(&o), 0);
    let o = aegis(&["pack", "verify", s(&pkg), "--key-dir", s(&k)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("BadSignature"));
}

#[test]
fn boot_falls_back_and_halts_when_everything_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let k = keys(dir.path());
    let slots = dir.path().join("slots");
    assert_eq!(code(&aegis(&["boot", "init", "--key-dir", s(&k), "--out", s(&slots)])), 0);

    let o = aegis(&["boot", "run", "--slots", s(&slots)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("outcome: BootedPrimary"));

    let o = aegis(&["boot", "run", "--slots", s(&slots), "--corrupt", "primary:os:120"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("outcome: BootedAlternate"));

    let o = aegis(&[
        "boot", "run", "--slots", s(&slots), "--corrupt", "primary:0:5", "--corrupt", "alternate:shell:9", "--corrupt",
        "golden:fsbl:77",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("outcome: Halted"));

    let o = aegis(&["boot", "run", "--slots", s(&slots), "--corrupt", "primary:nine:1"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn run_exports_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = aegis(&["run", s(&scenario("happy_path.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    for f in ["events.jsonl", "metrics.json", "trace.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = aegis(&["reconfig", "run", "--scenario", s(&scenario("seu_scrub.toml"))]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = 'bad'\nseed = 1\n[[step]]\naction = 'nope'\n").unwrap();
    assert_eq!(code(&aegis(&["run", s(&bad)])), 2);

    let failing = dir.path().join("failing.toml");
    fs::write(
        &failing,
        "name = 'failing'\nseed = 1\n[[step]]\naction = 'provision'\n[[step]]\naction = 'boot'\n\
         [[step]]\naction = 'expect'\ncheck = 'mode'\nis = 'halted'\n",
    )
    .unwrap();
    let o = aegis(&["run", s(&failing)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));

    assert_eq!(code(&aegis(&["run", s(&dir.path().join("missing.toml"))])), 2);
}

#[test]
fn seed_override_changes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let path = scenario("table2_vfpga1.toml");
    aegis(&["run", s(&path), "--out", s(&a)]);
    aegis(&["run", s(&path), "--seed", "77", "--out", s(&b)]);
    assert_ne!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
}
