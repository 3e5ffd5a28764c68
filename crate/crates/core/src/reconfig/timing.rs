use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ReconfigError;

/// Shared ICAP throughput of the calibrated model (bytes per ms).
pub const CALIBRATED_THROUGHPUT: f64 = 30_000.0 / 33.0;
pub const CALIBRATED_OVERHEAD_MS: f64 = 0.21;
/// Simulator body sizes for the two reference workloads.
pub const VFPGA1_BODY_LEN: usize = 450_000;
pub const VFPGA2_BODY_LEN: usize = 480_000;

/// Per-region timing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcapCalibration {
    pub region: u8,
    pub base_overhead_ms: f64,
    pub throughput_bytes_per_ms: f64,
    pub jitter_sigma_ms: f64,
}

impl IcapCalibration {
    pub const VFPGA1: IcapCalibration = IcapCalibration {
        region: 1,
        base_overhead_ms: CALIBRATED_OVERHEAD_MS,
        throughput_bytes_per_ms: CALIBRATED_THROUGHPUT,
        jitter_sigma_ms: 8.64,
    };

    pub const VFPGA2: IcapCalibration = IcapCalibration {
        region: 2,
        base_overhead_ms: CALIBRATED_OVERHEAD_MS,
        throughput_bytes_per_ms: CALIBRATED_THROUGHPUT,
        jitter_sigma_ms: 0.27,
    };

    pub fn validate(&self) -> Result<(), ReconfigError> {
        let ok = self.base_overhead_ms.is_finite()
            && self.base_overhead_ms >= 0.0
            && self.throughput_bytes_per_ms.is_finite()
            && self.throughput_bytes_per_ms > 0.0
            && self.jitter_sigma_ms.is_finite()
            && self.jitter_sigma_ms >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ReconfigError::BadCalibration(self.region))
        }
    }

    /// Noise-free duration for a body of `len` bytes.
    pub fn mean_ms(&self, len: usize) -> f64 {
        self.base_overhead_ms + len as f64 / self.throughput_bytes_per_ms
    }
}

/// Duration model for streaming a bitstream through the configuration
/// port: `overhead + len / throughput + jitter`, jitter being a normal
/// truncated at ±3σ.
#[derive(Debug, Clone)]
pub struct IcapTimingModel {
    calibrations: BTreeMap<u8, IcapCalibration>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl IcapTimingModel {
    pub fn new(calibrations: impl IntoIterator<Item = IcapCalibration>, rng_seed: u64) -> Result<Self, ReconfigError> {
        let mut map = BTreeMap::new();
        for c in calibrations {
            c.validate()?;
            map.insert(c.region, c);
        }
        Ok(IcapTimingModel {
            calibrations: map,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    /// Both reference regions with their calibrated parameters.
    pub fn calibrated(rng_seed: u64) -> Self {
        Self::new([IcapCalibration::VFPGA1, IcapCalibration::VFPGA2], rng_seed).expect("constants are valid")
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn calibration(&self, region: u8) -> Option<&IcapCalibration> {
        self.calibrations.get(&region)
    }

    pub fn set_calibration(&mut self, c: IcapCalibration) -> Result<(), ReconfigError> {
        c.validate()?;
        self.calibrations.insert(c.region, c);
        Ok(())
    }

    pub fn sample(&mut self, region: u8, len: usize) -> Result<f64, ReconfigError> {
        let c = *self.calibrations.get(&region).ok_or(ReconfigError::NoCalibration(region))?;
        let jitter = truncated_normal(&mut self.rng, c.jitter_sigma_ms);
        Ok((c.mean_ms(len) + jitter).max(f64::MIN_POSITIVE))
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    loop {
        let x = n.sample(rng);
        if x.abs() <= 3.0 * sigma {
            return x;
        }
    }
}
