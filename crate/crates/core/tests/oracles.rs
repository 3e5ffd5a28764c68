//! Behavioral models and calibration checked against independent
//! reference computations.
#![allow(clippy::needless_range_loop, clippy::manual_clamp)]

use aegis_core::behavioral::{cnn_forward, shift_exec, CnnParams, ShiftDirection, ShiftParams};
use aegis_core::crypto::crc32;
use aegis_core::reconfig::{IcapCalibration, CALIBRATED_OVERHEAD_MS, CALIBRATED_THROUGHPUT, VFPGA1_BODY_LEN, VFPGA2_BODY_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line reference: floor division instead of arithmetic shift,
/// explicit saturation, and pooling written out window by window.
fn cnn_reference(p: &CnnParams) -> [[i8; 2]; 2] {
    let mut conv = [[0i64; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            let mut acc = 0i64;
            for kr in 0..3 {
                for kc in 0..3 {
                    acc += i64::from(p.kernel[kr][kc]) * i64::from(p.input[r + kr][c + kc]);
                }
            }
            let q = acc.div_euclid(1i64 << p.quant_shift);
            let sat = if q > 127 {
                127
            } else if q < -128 {
                -128
            } else {
                q
            };
            conv[r][c] = if sat < 0 { 0 } else { sat };
        }
    }
    let mut out = [[0i8; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let w = [conv[2 * r][2 * c], conv[2 * r][2 * c + 1], conv[2 * r + 1][2 * c], conv[2 * r + 1][2 * c + 1]];
            let mut m = w[0];
            for v in w {
                if v > m {
                    m = v;
                }
            }
            out[r][c] = m as i8;
        }
    }
    out
}

fn shift_reference(p: &ShiftParams) -> u32 {
    let factor = 1u64 << p.amount;
    match p.direction {
        ShiftDirection::Left => ((u64::from(p.value) * factor) % (1u64 << 32)) as u32,
        ShiftDirection::Right => (u64::from(p.value) / factor) as u32,
    }
}

#[test]
fn cnn_matches_reference_on_1000_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for case in 0..1000 {
        let p = CnnParams {
            kernel: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen())),
            quant_shift: rng.gen_range(0..=31),
            input: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen())),
        };
        assert_eq!(cnn_forward(&p), cnn_reference(&p), "case {case}: {p:?}");
    }
}

#[test]
fn cnn_matches_reference_with_small_shifts() {
    // Small shifts keep most outputs away from zero, exercising saturation
    // and pooling rather than ReLU alone.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let p = CnnParams {
            kernel: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-16..=16))),
            quant_shift: rng.gen_range(0..=4),
            input: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen())),
        };
        assert_eq!(cnn_forward(&p), cnn_reference(&p));
    }
}

#[test]
fn shift_matches_reference_on_1000_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5417);
    for _ in 0..1000 {
        let p = ShiftParams {
            value: rng.gen(),
            direction: if rng.gen() { ShiftDirection::Left } else { ShiftDirection::Right },
            amount: rng.gen_range(0..=31),
        };
        assert_eq!(shift_exec(&p), shift_reference(&p), "{p:?}");
    }
}

#[test]
fn crc32_matches_library_implementation() {
    let oracle = crc::Crc::<u32>::new(&crc::CRC_32_ISO_HDLC);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for len in [0usize, 1, 3, 64, 1000, 65_537] {
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        assert_eq!(crc32(&data), oracle.checksum(&data), "len {len}");
    }
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
}

#[test]
fn calibrated_timing_means() {
    assert_eq!(CALIBRATED_OVERHEAD_MS, 0.21);
    assert!((CALIBRATED_THROUGHPUT - 30_000.0 / 33.0).abs() < 1e-9);
    assert!((IcapCalibration::VFPGA1.mean_ms(VFPGA1_BODY_LEN) - 495.21).abs() < 1e-6);
    assert!((IcapCalibration::VFPGA2.mean_ms(VFPGA2_BODY_LEN) - 528.21).abs() < 1e-6);
    assert_eq!(IcapCalibration::VFPGA1.jitter_sigma_ms, 8.64);
    assert_eq!(IcapCalibration::VFPGA2.jitter_sigma_ms, 0.27);
}
