//! vFPGA regions, their address windows and lifecycle.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::PlatformError;
use crate::behavioral::LoadedBehavior;
use crate::package::ResourceUsage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessOp {
    Read,
    Write,
}

impl fmt::Display for AccessOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessOp::Read => "read",
            AccessOp::Write => "write",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressRange {
    pub base: u64,
    pub length: u64,
    #[serde(default)]
    pub read: bool,
    #[serde(default)]
    pub write: bool,
}

impl AddressRange {
    pub const fn rw(base: u64, length: u64) -> Self {
        AddressRange {
            base,
            length,
            read: true,
            write: true,
        }
    }

    pub const fn ro(base: u64, length: u64) -> Self {
        AddressRange {
            base,
            length,
            read: true,
            write: false,
        }
    }

    /// Exclusive end, saturating at `u64::MAX`.
    pub fn end(&self) -> u64 {
        self.base.saturating_add(self.length)
    }

    pub fn overlaps(&self, other: &AddressRange) -> bool {
        self.base < other.end() && other.base < self.end()
    }

    /// `[addr, addr+len)` lies entirely inside this range. Empty and
    /// wrapping accesses never match.
    pub fn contains(&self, addr: u64, len: u64) -> bool {
        match addr.checked_add(len) {
            Some(end) if len > 0 => addr >= self.base && end <= self.end(),
            _ => false,
        }
    }

    pub fn permits(&self, op: AccessOp) -> bool {
        match op {
            AccessOp::Read => self.read,
            AccessOp::Write => self.write,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionState {
    Empty,
    Configuring,
    Active,
    Quarantined,
}

impl RegionState {
    /// Legal lifecycle edges. `Configuring → Empty` is the abort path for a
    /// reconfiguration that never loaded logic.
    pub fn can_become(self, to: RegionState) -> bool {
        use RegionState::*;
        matches!(
            (self, to),
            (Empty, Configuring)
                | (Configuring, Active)
                | (Configuring, Empty)
                | (Active, Configuring)
                | (Active, Quarantined)
                | (Quarantined, Empty)
        )
    }
}

impl fmt::Display for RegionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionState::Empty => "empty",
            RegionState::Configuring => "configuring",
            RegionState::Active => "active",
            RegionState::Quarantined => "quarantined",
        })
    }
}

/// Static description of a region, as found in a layout file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: u8,
    pub ranges: Vec<AddressRange>,
    #[serde(default)]
    pub irqs: Vec<u32>,
    pub budget: ResourceUsage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub shell: AddressRange,
    pub regions: Vec<RegionSpec>,
}

impl Default for RegionLayout {
    /// Static shell plus two vFPGA regions with budgets of twice the
    /// reported workload usage.
    fn default() -> Self {
        RegionLayout {
            shell: AddressRange::rw(0xA000_0000, 0x1_0000),
            regions: vec![
                RegionSpec {
                    id: 1,
                    ranges: vec![AddressRange::rw(0xA001_0000, 0x1_0000), AddressRange::ro(0xA003_0000, 0x1000)],
                    irqs: vec![121, 122],
                    budget: ResourceUsage::CNN_ACCELERATOR.scaled(2),
                },
                RegionSpec {
                    id: 2,
                    ranges: vec![AddressRange::rw(0xA002_0000, 0x1_0000), AddressRange::ro(0xA003_1000, 0x1000)],
                    irqs: vec![123, 124],
                    budget: ResourceUsage::SHIFT_CIRCUIT.scaled(2),
                },
            ],
        }
    }
}

impl RegionLayout {
    /// Checks id uniqueness and pairwise disjointness of every window,
    /// including the shell.
    pub fn validate(&self) -> Result<(), PlatformError> {
        let mut ids = BTreeSet::new();
        let mut all: Vec<(Option<u8>, AddressRange)> = vec![(None, self.shell)];
        for r in &self.regions {
            if r.id == crate::package::NO_REGION || !ids.insert(r.id) {
                return Err(PlatformError::BadLayout(format!("invalid or duplicate region id {}", r.id)));
            }
            if r.ranges.is_empty() {
                return Err(PlatformError::BadLayout(format!("region {} has no address ranges", r.id)));
            }
            for range in &r.ranges {
                if range.length == 0 {
                    return Err(PlatformError::BadLayout(format!("region {} has an empty range", r.id)));
                }
                all.push((Some(r.id), *range));
            }
        }
        for (i, (owner_a, a)) in all.iter().enumerate() {
            for (owner_b, b) in &all[i + 1..] {
                if a.overlaps(b) {
                    return Err(PlatformError::BadLayout(format!(
                        "range {:#x}+{:#x} ({:?}) overlaps {:#x}+{:#x} ({:?})",
                        a.base, a.length, owner_a, b.base, b.length, owner_b
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A reconfigurable partition and whatever is currently loaded in it.
#[derive(Debug, Clone)]
pub struct VfpgaRegion {
    pub region_id: u8,
    pub address_ranges: Vec<AddressRange>,
    pub irq_allowlist: BTreeSet<u32>,
    pub budget: ResourceUsage,
    state: RegionState,
    pub(crate) loaded_behavior: Option<LoadedBehavior>,
    pub(crate) loaded_version: u32,
    pub(crate) owner: Option<String>,
    /// Plaintext configuration image as streamed through the ICAP.
    pub(crate) config_image: Vec<u8>,
    pub(crate) config_crc: u32,
    pub(crate) violations: u32,
}

impl VfpgaRegion {
    pub fn from_spec(spec: &RegionSpec) -> Self {
        VfpgaRegion {
            region_id: spec.id,
            address_ranges: spec.ranges.clone(),
            irq_allowlist: spec.irqs.iter().copied().collect(),
            budget: spec.budget,
            state: RegionState::Empty,
            loaded_behavior: None,
            loaded_version: 0,
            owner: None,
            config_image: Vec::new(),
            config_crc: 0,
            violations: 0,
        }
    }

    pub fn state(&self) -> RegionState {
        self.state
    }

    pub fn loaded_behavior(&self) -> Option<&LoadedBehavior> {
        self.loaded_behavior.as_ref()
    }

    pub fn loaded_version(&self) -> u32 {
        self.loaded_version
    }

    pub fn owner(&self) -> Option<&str> {
        self.owner.as_deref()
    }

    pub fn violations(&self) -> u32 {
        self.violations
    }

    pub fn config_image(&self) -> &[u8] {
        &self.config_image
    }

    pub(crate) fn transition(&mut self, to: RegionState) -> Result<RegionState, PlatformError> {
        let from = self.state;
        if !from.can_become(to) {
            return Err(PlatformError::IllegalTransition {
                region: self.region_id,
                from,
                to,
            });
        }
        self.state = to;
        if to == RegionState::Empty {
            self.loaded_behavior = None;
            self.owner = None;
            self.config_image.clear();
            self.config_crc = 0;
        }
        Ok(from)
    }

    /// Unconditional reset used when the whole fabric is reverted.
    pub(crate) fn force_empty(&mut self) {
        self.state = RegionState::Empty;
        self.loaded_behavior = None;
        self.owner = None;
        self.config_image.clear();
        self.config_crc = 0;
        self.violations = 0;
    }

    pub fn permits(&self, addr: u64, len: u64, op: AccessOp) -> bool {
        self.address_ranges.iter().any(|r| r.permits(op) && r.contains(addr, len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment_is_strict() {
        let r = AddressRange::rw(0x1000, 0x100);
        assert!(r.contains(0x1000, 0x100));
        assert!(r.contains(0x10FF, 1));
        assert!(!r.contains(0x10FF, 2));
        assert!(!r.contains(0x0FFF, 2));
        assert!(!r.contains(0x1000, 0));
        assert!(!r.contains(u64::MAX, 2));
    }

    #[test]
    fn transition_table() {
        use RegionState::*;
        let all = [Empty, Configuring, Active, Quarantined];
        let legal: Vec<_> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(
            legal,
            vec![
                (Empty, Configuring),
                (Configuring, Empty),
                (Configuring, Active),
                (Active, Configuring),
                (Active, Quarantined),
                (Quarantined, Empty)
            ]
        );
    }

    #[test]
    fn default_layout_is_disjoint() {
        RegionLayout::default().validate().unwrap();
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let mut l = RegionLayout::default();
        l.regions[1].ranges[0].base = 0xA001_8000;
        assert!(matches!(l.validate(), Err(PlatformError::BadLayout(_))));
        let mut l = RegionLayout::default();
        l.regions[0].ranges.push(AddressRange::rw(0xA000_0100, 4));
        assert!(l.validate().is_err(), "shell overlap must be caught");
        let mut l = RegionLayout::default();
        l.regions[1].id = 1;
        assert!(l.validate().is_err());
    }
}
