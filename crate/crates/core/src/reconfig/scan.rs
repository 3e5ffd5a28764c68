use serde::Serialize;

use crate::package::SimBitstream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScanVerdict {
    Clean,
    Suspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrojanScanReport {
    pub verdict: ScanVerdict,
    pub flagged: Vec<(&'static str, u32)>,
}

/// Rule-based structural scan: any loop, oscillator, sensor or power-drain
/// primitive marks the bitstream as suspect.
pub fn trojan_scan(bs: &SimBitstream) -> TrojanScanReport {
    let flagged: Vec<_> = bs
        .feature_summary
        .named_counts()
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .collect();
    TrojanScanReport {
        verdict: if flagged.is_empty() {
            ScanVerdict::Clean
        } else {
            ScanVerdict::Suspect
        },
        flagged,
    }
}
