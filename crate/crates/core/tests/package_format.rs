use std::collections::BTreeMap;

use aegis_core::crypto::{CryptoProfile, KeyMaterial, KeyPair};
use aegis_core::package::{
    build_package, validate_package, BehaviorId, FailedCheck, FeatureSummary, PackageMeta, PayloadKind, ResourceUsage,
    SimBitstream, UpdatePackage, ValidationContext, HEADER_LEN, NO_REGION,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOW: u64 = 50_000;

struct Env {
    profile: CryptoProfile,
    signer: KeyPair,
    trusted: Vec<KeyMaterial>,
    key: KeyMaterial,
    regions: BTreeMap<u8, ResourceUsage>,
}

impl Env {
    fn new(seed: u64) -> Self {
        let profile = CryptoProfile::TEST;
        let signer = profile.generate_keypair(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut regions = BTreeMap::new();
        regions.insert(1, ResourceUsage::CNN_ACCELERATOR.scaled(2));
        regions.insert(2, ResourceUsage::SHIFT_CIRCUIT.scaled(2));
        Env {
            profile,
            trusted: vec![signer.public.clone()],
            signer,
            key: KeyMaterial::symmetric([0x5A; 32]),
            regions,
        }
    }

    fn build(&self, payload: &[u8], meta: &PackageMeta) -> UpdatePackage {
        build_package(&self.profile, payload, meta, &self.key, &self.signer.private).unwrap()
    }

    fn ctx(&self, stored: Option<u32>, last_seq: Option<u64>) -> ValidationContext<'_> {
        ValidationContext::new(self.profile, &self.trusted, Some(&self.key), &self.regions, NOW)
            .stored_version(stored)
            .last_sequence(last_seq)
    }
}

fn bitstream(rng: &mut ChaCha8Rng, body_len: usize) -> Vec<u8> {
    let mut body = vec![0u8; body_len];
    rng.fill(body.as_mut_slice());
    SimBitstream {
        behavior_id: BehaviorId::ShiftV1,
        behavior_params: Vec::new(),
        resource_usage: ResourceUsage::SHIFT_CIRCUIT,
        feature_summary: FeatureSummary::default(),
        body,
    }
    .encode()
}

fn meta(version: u32, kind: PayloadKind, region: u8, seq: u64) -> PackageMeta {
    PackageMeta {
        package_version: version,
        payload_kind: kind,
        target_region_id: region,
        sequence_number: seq,
        timestamp_ms: NOW,
        nonce: None,
    }
}

#[test]
fn thousand_random_packages_round_trip_byte_exactly() {
    let env = Env::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0F0F);
    for i in 0..1000 {
        let kind = PayloadKind::from_u8(rng.gen_range(0..3)).unwrap();
        let len = rng.gen_range(0..2048);
        let mut payload = vec![0u8; len];
        rng.fill(payload.as_mut_slice());
        let m = PackageMeta {
            package_version: rng.gen(),
            payload_kind: kind,
            target_region_id: rng.gen(),
            sequence_number: rng.gen(),
            timestamp_ms: rng.gen(),
            nonce: if rng.gen() { Some(rng.gen()) } else { None },
        };
        let pkg = env.build(&payload, &m);
        let bytes = pkg.serialize();
        assert_eq!(bytes.len(), pkg.serialized_len());
        let back = UpdatePackage::parse(&bytes).unwrap_or_else(|e| panic!("package {i}: {e}"));
        assert_eq!(back, pkg);
        assert_eq!(back.serialize(), bytes, "package {i}");
    }
}

#[test]
fn every_sampled_single_bit_flip_is_rejected() {
    let env = Env::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0xB17);
    let pkg = env.build(&bitstream(&mut rng, 1500), &meta(4, PayloadKind::PartialBitstream, 2, 10));
    let bytes = pkg.serialize();
    assert!(validate_package(&pkg, &env.ctx(Some(3), Some(9))).report.is_accepted());

    let total_bits = bytes.len() * 8;
    // Every header bit, then random positions over the rest.
    let mut positions: Vec<usize> = (0..HEADER_LEN * 8).collect();
    while positions.len() < HEADER_LEN * 8 + 500 {
        positions.push(rng.gen_range(HEADER_LEN * 8..total_bits));
    }
    for bit in positions {
        let mut flipped = bytes.clone();
        flipped[bit / 8] ^= 1 << (bit % 8);
        match UpdatePackage::parse(&flipped) {
            Err(_) => {}
            Ok(p) => {
                let v = validate_package(&p, &env.ctx(Some(3), Some(9)));
                assert!(!v.report.is_accepted(), "bit {bit} flip accepted");
                assert!(v.plaintext.is_none());
            }
        }
    }
}

#[test]
fn anti_rollback_is_exhaustive_over_0_to_100() {
    let env = Env::new(3);
    let payload = b"model parameters".to_vec();
    let packages: Vec<UpdatePackage> = (0..=100)
        .map(|v| env.build(&payload, &meta(v, PayloadKind::AiModel, NO_REGION, 1)))
        .collect();
    for stored in 0..=100u32 {
        for (v_new, pkg) in packages.iter().enumerate() {
            let report = validate_package(pkg, &env.ctx(Some(stored), None)).report;
            if v_new as u32 <= stored {
                assert_eq!(report.failed_checks, vec![FailedCheck::RollbackVersion], "{v_new} <= {stored}");
            } else {
                assert!(report.is_accepted(), "{v_new} > {stored}: {:?}", report.failed_checks);
            }
        }
    }
}

#[test]
fn replayed_sequences_are_rejected() {
    let env = Env::new(4);
    for seq in 0..20u64 {
        let pkg = env.build(b"x", &meta(1, PayloadKind::AiModel, NO_REGION, seq));
        for last in 0..20u64 {
            let r = validate_package(&pkg, &env.ctx(None, Some(last))).report;
            assert_eq!(r.has(FailedCheck::ReplayedSequence), seq <= last);
            assert_eq!(r.is_accepted(), seq > last);
        }
    }
}

#[test]
fn untrusted_signer_is_rejected() {
    let env = Env::new(5);
    let other = Env::new(6);
    let pkg = other.build(b"payload", &meta(1, PayloadKind::AiModel, NO_REGION, 1));
    let r = validate_package(&pkg, &env.ctx(None, None)).report;
    assert_eq!(r.failed_checks, vec![FailedCheck::BadSignature]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Failures are reported in the fixed check order, and a package is
    /// accepted exactly when nothing failed.
    #[test]
    fn failures_are_ordered_and_verdict_consistent(
        version in 0u32..8,
        stored in proptest::option::of(0u32..8),
        seq in 0u64..8,
        last in proptest::option::of(0u64..8),
        region in prop_oneof![Just(1u8), Just(2u8), Just(9u8)],
        skew in 0u64..200_000,
        wrong_key in any::<bool>(),
    ) {
        let env = Env::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(version as u64);
        let mut m = meta(version, PayloadKind::PartialBitstream, region, seq);
        m.timestamp_ms = NOW + skew;
        let pkg = env.build(&bitstream(&mut rng, 64), &m);
        let other = KeyMaterial::symmetric([0x11; 32]);
        let key = if wrong_key { &other } else { &env.key };
        let ctx = ValidationContext::new(env.profile, &env.trusted, Some(key), &env.regions, NOW)
            .stored_version(stored)
            .last_sequence(last)
            .freshness_window(Some(100_000));
        let v = validate_package(&pkg, &ctx);
        let order: Vec<usize> = v
            .report
            .failed_checks
            .iter()
            .map(|c| FailedCheck::ALL.iter().position(|a| a == c).unwrap())
            .collect();
        prop_assert!(order.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(v.report.is_accepted(), v.report.failed_checks.is_empty());
        prop_assert_eq!(v.plaintext.is_some(), v.report.is_accepted());
        prop_assert_eq!(v.report.has(FailedCheck::AuthFailure), wrong_key);
        prop_assert_eq!(v.report.has(FailedCheck::RollbackVersion), stored.is_some_and(|s| version <= s));
        prop_assert_eq!(v.report.has(FailedCheck::ReplayedSequence), last.is_some_and(|l| seq <= l));
        prop_assert_eq!(v.report.has(FailedCheck::StaleTimestamp), skew > 100_000);
        prop_assert_eq!(v.report.has(FailedCheck::UnknownRegion), region == 9);
    }

    #[test]
    fn parse_never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        let _ = UpdatePackage::parse(&bytes);
    }
}
