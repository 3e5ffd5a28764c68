//! Plaintext payload encodings carried inside update packages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("payload truncated")]
    Truncated,
    #[error("payload magic mismatch")]
    BadMagic,
    #[error("unknown behavior id {0}")]
    UnknownBehavior(u8),
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

/// FPGA resource counts, used both as a bitstream's usage and as a region's
/// budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceUsage {
    pub clb_luts: u32,
    pub luts_as_logic: u32,
    pub clb_registers: u32,
    pub registers_as_ff: u32,
    pub f7_muxes: u32,
    pub carry8: u32,
    pub bram_tiles: u32,
}

impl ResourceUsage {
    fn fields(&self) -> [u32; 7] {
        [
            self.clb_luts,
            self.luts_as_logic,
            self.clb_registers,
            self.registers_as_ff,
            self.f7_muxes,
            self.carry8,
            self.bram_tiles,
        ]
    }

    fn from_fields(f: [u32; 7]) -> Self {
        ResourceUsage {
            clb_luts: f[0],
            luts_as_logic: f[1],
            clb_registers: f[2],
            registers_as_ff: f[3],
            f7_muxes: f[4],
            carry8: f[5],
            bram_tiles: f[6],
        }
    }

    /// Component-wise `self <= budget`.
    pub fn fits_within(&self, budget: &ResourceUsage) -> bool {
        self.fields().iter().zip(budget.fields().iter()).all(|(u, b)| u <= b)
    }

    pub fn scaled(&self, factor: u32) -> Self {
        Self::from_fields(self.fields().map(|v| v.saturating_mul(factor)))
    }

    /// vFPGA1 CNN accelerator usage from the floorplanning estimate.
    pub const CNN_ACCELERATOR: ResourceUsage = ResourceUsage {
        clb_luts: 30,
        luts_as_logic: 30,
        clb_registers: 32,
        registers_as_ff: 32,
        f7_muxes: 1,
        carry8: 0,
        bram_tiles: 0,
    };

    /// vFPGA2 shift circuit usage from the floorplanning estimate.
    pub const SHIFT_CIRCUIT: ResourceUsage = ResourceUsage {
        clb_luts: 2,
        luts_as_logic: 2,
        clb_registers: 35,
        registers_as_ff: 35,
        f7_muxes: 0,
        carry8: 5,
        bram_tiles: 1,
    };
}

/// Structural features a trojan scan inspects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSummary {
    pub combinational_loops: u32,
    pub ring_oscillator_like: u32,
    pub sensor_primitives: u32,
    pub power_drain_primitives: u32,
}

impl FeatureSummary {
    pub fn named_counts(&self) -> [(&'static str, u32); 4] {
        [
            ("combinational_loops", self.combinational_loops),
            ("ring_oscillator_like", self.ring_oscillator_like),
            ("sensor_primitives", self.sensor_primitives),
            ("power_drain_primitives", self.power_drain_primitives),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum BehaviorId {
    CnnV1 = 0,
    ShiftV1 = 1,
    Opaque = 2,
}

impl BehaviorId {
    pub fn from_u8(v: u8) -> Result<Self, PayloadError> {
        match v {
            0 => Ok(Self::CnnV1),
            1 => Ok(Self::ShiftV1),
            2 => Ok(Self::Opaque),
            other => Err(PayloadError::UnknownBehavior(other)),
        }
    }
}

/// Simulated partial bitstream: a behavior reference plus the metadata a
/// real toolchain would report, followed by an opaque configuration body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimBitstream {
    pub behavior_id: BehaviorId,
    pub behavior_params: Vec<u8>,
    pub resource_usage: ResourceUsage,
    pub feature_summary: FeatureSummary,
    pub body: Vec<u8>,
}

const BITSTREAM_MAGIC: &[u8; 4] = b"SIMB";
const MODEL_MAGIC: &[u8; 4] = b"AIMD";
const FIRMWARE_MAGIC: &[u8; 4] = b"FWST";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        let end = self.pos.checked_add(n).ok_or(PayloadError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(PayloadError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<(), PayloadError> {
        if self.take(4)? == m {
            Ok(())
        } else {
            Err(PayloadError::BadMagic)
        }
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(PayloadError::TrailingBytes)
        }
    }
}

impl SimBitstream {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 3 + self.behavior_params.len() + 44 + 4 + self.body.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(self.behavior_id as u8);
        out.extend_from_slice(&(self.behavior_params.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.behavior_params);
        for v in self.resource_usage.fields() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (_, v) in self.feature_summary.named_counts() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new(bytes);
        r.magic(BITSTREAM_MAGIC)?;
        let behavior_id = BehaviorId::from_u8(r.u8()?)?;
        let plen = r.u16()? as usize;
        let behavior_params = r.take(plen)?.to_vec();
        let mut usage = [0u32; 7];
        for v in usage.iter_mut() {
            *v = r.u32()?;
        }
        let feature_summary = FeatureSummary {
            combinational_loops: r.u32()?,
            ring_oscillator_like: r.u32()?,
            sensor_primitives: r.u32()?,
            power_drain_primitives: r.u32()?,
        };
        let blen = r.u32()? as usize;
        let body = r.take(blen)?.to_vec();
        r.finish()?;
        Ok(SimBitstream {
            behavior_id,
            behavior_params,
            resource_usage: ResourceUsage::from_fields(usage),
            feature_summary,
            body,
        })
    }
}

/// AI-model parameter update for an already-configured accelerator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPayload {
    pub behavior_id: BehaviorId,
    pub params: Vec<u8>,
}

impl ModelPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = MODEL_MAGIC.to_vec();
        out.push(self.behavior_id as u8);
        out.extend_from_slice(&(self.params.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.params);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let behavior_id = BehaviorId::from_u8(r.u8()?)?;
        let n = r.u16()? as usize;
        let params = r.take(n)?.to_vec();
        r.finish()?;
        Ok(ModelPayload { behavior_id, params })
    }
}

/// One firmware stage image. `stage` is the position in the boot chain
/// (0 = FSBL, 1 = OS, 2 = PL shell).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    pub stage: u8,
    pub body: Vec<u8>,
}

impl FirmwareImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = FIRMWARE_MAGIC.to_vec();
        out.push(self.stage);
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new(bytes);
        r.magic(FIRMWARE_MAGIC)?;
        let stage = r.u8()?;
        let n = r.u32()? as usize;
        let body = r.take(n)?.to_vec();
        r.finish()?;
        Ok(FirmwareImage { stage, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn budgets_compare_componentwise() {
        let budget = ResourceUsage::CNN_ACCELERATOR.scaled(2);
        assert!(ResourceUsage::CNN_ACCELERATOR.fits_within(&budget));
        assert!(!ResourceUsage::SHIFT_CIRCUIT.fits_within(&budget));
        assert!(ResourceUsage::default().fits_within(&ResourceUsage::default()));
    }

    #[test]
    fn bitstream_rejects_garbage() {
        assert_eq!(SimBitstream::decode(b"SIM"), Err(PayloadError::Truncated));
        assert_eq!(SimBitstream::decode(b"XXXX"), Err(PayloadError::BadMagic));
        let mut ok = SimBitstream {
            behavior_id: BehaviorId::Opaque,
            behavior_params: vec![],
            resource_usage: ResourceUsage::default(),
            feature_summary: FeatureSummary::default(),
            body: vec![1, 2, 3],
        }
        .encode();
        ok.push(0);
        assert_eq!(SimBitstream::decode(&ok), Err(PayloadError::TrailingBytes));
        let mut bad_behavior = ok.clone();
        bad_behavior[4] = 9;
        assert_eq!(SimBitstream::decode(&bad_behavior), Err(PayloadError::UnknownBehavior(9)));
    }

    fn arb_usage() -> impl Strategy<Value = ResourceUsage> {
        proptest::array::uniform7(any::<u32>()).prop_map(ResourceUsage::from_fields)
    }

    proptest! {
        #[test]
        fn bitstream_codec_round_trips(
            behavior in 0u8..3,
            params in proptest::collection::vec(any::<u8>(), 0..64),
            usage in arb_usage(),
            feats in proptest::array::uniform4(0u32..4),
            body in proptest::collection::vec(any::<u8>(), 0..512),
        ) {
            let b = SimBitstream {
                behavior_id: BehaviorId::from_u8(behavior).unwrap(),
                behavior_params: params,
                resource_usage: usage,
                feature_summary: FeatureSummary {
                    combinational_loops: feats[0],
                    ring_oscillator_like: feats[1],
                    sensor_primitives: feats[2],
                    power_drain_primitives: feats[3],
                },
                body,
            };
            prop_assert_eq!(SimBitstream::decode(&b.encode()).unwrap(), b);
        }

        #[test]
        fn firmware_and_model_codecs_round_trip(stage in any::<u8>(), body in proptest::collection::vec(any::<u8>(), 0..256)) {
            let f = FirmwareImage { stage, body: body.clone() };
            prop_assert_eq!(FirmwareImage::decode(&f.encode()).unwrap(), f);
            let m = ModelPayload { behavior_id: BehaviorId::CnnV1, params: body };
            prop_assert_eq!(ModelPayload::decode(&m.encode()).unwrap(), m);
        }
    }
}
