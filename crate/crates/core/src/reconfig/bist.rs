use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ReconfigError;
use crate::behavioral::{encode_shift_input, LoadedBehavior, ShiftDirection, ShiftParams, CNN_INPUT};
use crate::platform::{Platform, RegionState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BistVector {
    #[serde(with = "hex")]
    pub input: Vec<u8>,
    #[serde(with = "hex")]
    pub expected: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BistMismatch {
    pub index: usize,
    pub expected: Vec<u8>,
    /// Empty when the model refused the input.
    pub actual: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BistOutcome {
    Pass,
    Fail(Vec<BistMismatch>),
}

impl BistOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, BistOutcome::Pass)
    }
}

/// Random inputs for `behavior` paired with the outputs of that behavior.
/// `behavior` must come from a trusted source (the accepted image), so the
/// expected values are golden baselines for the loaded region.
pub fn golden_vectors<R: Rng>(behavior: &LoadedBehavior, n: usize, rng: &mut R) -> Vec<BistVector> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let input = match behavior {
            LoadedBehavior::Cnn(_) => (0..CNN_INPUT * CNN_INPUT).map(|_| rng.gen::<u8>()).collect(),
            LoadedBehavior::Shift => encode_shift_input(&ShiftParams {
                value: rng.gen(),
                direction: if rng.gen() { ShiftDirection::Left } else { ShiftDirection::Right },
                amount: rng.gen_range(0..=31),
            }),
            LoadedBehavior::Opaque => return Vec::new(),
        };
        let expected = behavior.evaluate(&input).expect("generated input has the right shape");
        out.push(BistVector { input, expected });
    }
    out
}

/// Runs `vectors` through the region's loaded model. A failure is logged,
/// quarantines the region and leaves it for rollback.
pub fn run_bist(platform: &mut Platform, region_id: u8, vectors: &[BistVector]) -> Result<BistOutcome, ReconfigError> {
    let region = platform.region(region_id).ok_or(crate::platform::PlatformError::UnknownRegion(region_id))?;
    let behavior = match (region.state(), region.loaded_behavior()) {
        (RegionState::Active, Some(b)) => b.clone(),
        _ => return Err(ReconfigError::RegionNotActive(region_id)),
    };
    let mismatches: Vec<BistMismatch> = vectors
        .iter()
        .enumerate()
        .filter_map(|(index, v)| {
            let actual = behavior.evaluate(&v.input).unwrap_or_default();
            (actual != v.expected).then(|| BistMismatch {
                index,
                expected: v.expected.clone(),
                actual,
            })
        })
        .collect();
    if mismatches.is_empty() {
        platform.append_event(
            "trust_anchor",
            "bist",
            "pass",
            format!("region={region_id} vectors={}", vectors.len()),
        );
        Ok(BistOutcome::Pass)
    } else {
        platform.append_event(
            "trust_anchor",
            "bist",
            "fail",
            format!("region={region_id} vectors={} mismatches={}", vectors.len(), mismatches.len()),
        );
        platform.quarantine_vfpga(region_id)?;
        Ok(BistOutcome::Fail(mismatches))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavioral::CnnWeights;
    use crate::crypto::CryptoProfile;
    use crate::package::ResourceUsage;
    use crate::platform::RegionLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn active_cnn() -> (Platform, LoadedBehavior) {
        let mut p = Platform::new(CryptoProfile::TEST, &RegionLayout::default(), b"bist").unwrap();
        let b = LoadedBehavior::Cnn(CnnWeights {
            kernel: [[1, 0, -1], [2, 0, -2], [1, 0, -1]],
            quant_shift: 2,
        });
        p.claim_region(1, &ResourceUsage::default(), "app").unwrap();
        p.activate_region(1, b.clone(), 1, vec![0; 8], None).unwrap();
        (p, b)
    }

    #[test]
    fn golden_vectors_pass() {
        let (mut p, b) = active_cnn();
        let v = golden_vectors(&b, 20, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(run_bist(&mut p, 1, &v), Ok(BistOutcome::Pass));
    }

    #[test]
    fn one_perturbed_vector_fails_and_quarantines() {
        let (mut p, b) = active_cnn();
        let mut v = golden_vectors(&b, 20, &mut ChaCha8Rng::seed_from_u64(2));
        v[7].expected[0] = v[7].expected[0].wrapping_add(1);
        match run_bist(&mut p, 1, &v).unwrap() {
            BistOutcome::Fail(m) => {
                assert_eq!(m.len(), 1);
                assert_eq!(m[0].index, 7);
            }
            BistOutcome::Pass => panic!("perturbed vector must fail"),
        }
        assert_eq!(p.region(1).unwrap().state(), RegionState::Quarantined);
        assert_eq!(p.log().count("bist", Some("fail")), 1);
        assert_eq!(run_bist(&mut p, 1, &v), Err(ReconfigError::RegionNotActive(1)));
    }
}
