//! Simulation of a secured SoC-FPGA payload: verified boot with golden-image
//! recovery, authenticated partial reconfiguration, tenant isolation and an
//! adversarial ground link.

pub mod behavioral;
pub mod boot;
pub mod crypto;
pub mod harness;
pub mod link;
pub mod package;
pub mod platform;
pub mod reconfig;
