//! Executable models of the two vFPGA workloads: a 6×6 CNN feature
//! extractor and a configurable shift circuit. They serve as BIST golden
//! baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::package::BehaviorId;

pub const CNN_INPUT: usize = 6;
pub const CNN_KERNEL: usize = 3;
pub const CNN_CONV_OUT: usize = CNN_INPUT - CNN_KERNEL + 1;
pub const CNN_OUTPUT: usize = CNN_CONV_OUT / 2;
/// Largest accepted quantization shift.
pub const MAX_QUANT_SHIFT: u8 = 31;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BehaviorError {
    #[error("expected {expected} bytes of {what}, got {got}")]
    BadLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("quantization shift {0} out of range")]
    BadShift(u8),
    #[error("shift amount {0} out of range")]
    BadAmount(u8),
    #[error("unknown shift direction {0}")]
    BadDirection(u8),
    #[error("no behavioral model for opaque logic")]
    NoModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnParams {
    pub kernel: [[i8; CNN_KERNEL]; CNN_KERNEL],
    pub quant_shift: u8,
    pub input: [[i8; CNN_INPUT]; CNN_INPUT],
}

/// Valid 3×3 convolution, arithmetic-shift quantization with saturation to
/// i8, ReLU, then 2×2 max-pool with stride 2.
pub fn cnn_forward(p: &CnnParams) -> [[i8; CNN_OUTPUT]; CNN_OUTPUT] {
    let shift = p.quant_shift.min(MAX_QUANT_SHIFT) as u32;
    let mut act = [[0i8; CNN_CONV_OUT]; CNN_CONV_OUT];
    for (r, row) in act.iter_mut().enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            let acc: i32 = p
                .kernel
                .iter()
                .enumerate()
                .flat_map(|(kr, krow)| {
                    krow.iter()
                        .enumerate()
                        .map(move |(kc, &w)| w as i32 * p.input[r + kr][c + kc] as i32)
                })
                .sum();
            let q = (acc >> shift).clamp(i8::MIN as i32, i8::MAX as i32) as i8;
            *out = q.max(0);
        }
    }
    let mut pooled = [[0i8; CNN_OUTPUT]; CNN_OUTPUT];
    for (r, row) in pooled.iter_mut().enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            *out = act[2 * r..2 * r + 2]
                .iter()
                .flat_map(|a| a[2 * c..2 * c + 2].iter().copied())
                .max()
                .unwrap_or(0);
        }
    }
    pooled
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDirection {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftParams {
    pub value: u32,
    pub direction: ShiftDirection,
    /// 0..=31
    pub amount: u8,
}

/// Logical shift with zero fill.
pub fn shift_exec(p: &ShiftParams) -> u32 {
    let amount = u32::from(p.amount.min(31));
    match p.direction {
        ShiftDirection::Left => p.value << amount,
        ShiftDirection::Right => p.value >> amount,
    }
}

/// Static configuration of a CNN accelerator (what a bitstream or AI-model
/// update carries): kernel weights and quantization shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnWeights {
    pub kernel: [[i8; CNN_KERNEL]; CNN_KERNEL],
    pub quant_shift: u8,
}

impl CnnWeights {
    pub const ENCODED_LEN: usize = CNN_KERNEL * CNN_KERNEL + 1;

    pub fn encode(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.kernel.iter().flatten().map(|&w| w as u8).collect();
        v.push(self.quant_shift);
        v
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BehaviorError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(BehaviorError::BadLength {
                what: "cnn weights",
                expected: Self::ENCODED_LEN,
                got: bytes.len(),
            });
        }
        let quant_shift = bytes[9];
        if quant_shift > MAX_QUANT_SHIFT {
            return Err(BehaviorError::BadShift(quant_shift));
        }
        let kernel = std::array::from_fn(|r| std::array::from_fn(|c| bytes[r * CNN_KERNEL + c] as i8));
        Ok(CnnWeights { kernel, quant_shift })
    }
}

/// The behavior a configured region executes, decoded from its bitstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadedBehavior {
    Cnn(CnnWeights),
    Shift,
    Opaque,
}

impl LoadedBehavior {
    pub fn from_bitstream(id: BehaviorId, params: &[u8]) -> Result<Self, BehaviorError> {
        match id {
            BehaviorId::CnnV1 => Ok(LoadedBehavior::Cnn(CnnWeights::decode(params)?)),
            BehaviorId::ShiftV1 => Ok(LoadedBehavior::Shift),
            BehaviorId::Opaque => Ok(LoadedBehavior::Opaque),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoadedBehavior::Cnn(_) => "cnn_v1",
            LoadedBehavior::Shift => "shift_v1",
            LoadedBehavior::Opaque => "opaque",
        }
    }

    /// Runs one test vector through the model.
    ///
    /// CNN input: 36 signed bytes (row-major) → 4 signed bytes.
    /// Shift input: value (u32 LE), direction (0 = left, 1 = right), amount → u32 LE.
    pub fn evaluate(&self, input: &[u8]) -> Result<Vec<u8>, BehaviorError> {
        match self {
            LoadedBehavior::Cnn(w) => {
                if input.len() != CNN_INPUT * CNN_INPUT {
                    return Err(BehaviorError::BadLength {
                        what: "cnn input",
                        expected: CNN_INPUT * CNN_INPUT,
                        got: input.len(),
                    });
                }
                let p = CnnParams {
                    kernel: w.kernel,
                    quant_shift: w.quant_shift,
                    input: std::array::from_fn(|r| std::array::from_fn(|c| input[r * CNN_INPUT + c] as i8)),
                };
                Ok(cnn_forward(&p).iter().flatten().map(|&v| v as u8).collect())
            }
            LoadedBehavior::Shift => {
                if input.len() != 6 {
                    return Err(BehaviorError::BadLength {
                        what: "shift input",
                        expected: 6,
                        got: input.len(),
                    });
                }
                let value = u32::from_le_bytes(input[0..4].try_into().unwrap());
                let direction = match input[4] {
                    0 => ShiftDirection::Left,
                    1 => ShiftDirection::Right,
                    d => return Err(BehaviorError::BadDirection(d)),
                };
                if input[5] > 31 {
                    return Err(BehaviorError::BadAmount(input[5]));
                }
                Ok(shift_exec(&ShiftParams {
                    value,
                    direction,
                    amount: input[5],
                })
                .to_le_bytes()
                .to_vec())
            }
            LoadedBehavior::Opaque => Err(BehaviorError::NoModel),
        }
    }
}

pub fn encode_shift_input(p: &ShiftParams) -> Vec<u8> {
    let mut v = p.value.to_le_bytes().to_vec();
    v.push(match p.direction {
        ShiftDirection::Left => 0,
        ShiftDirection::Right => 1,
    });
    v.push(p.amount);
    v
}
