//! Capability-sliced MMIO for kernel-bypass NIC drivers, simulated.
//!
//! A software model of CHERI-style capabilities guards sub-page slices of an
//! e1000e-like NIC's register window. A manifest decides which registers a
//! userspace driver may touch; the kernel keeps the rest.

pub mod capability;
pub mod driver;
pub mod harness;
pub mod kernel;
pub mod manifest;
pub mod netstack;
pub mod nic;
pub mod physmem;
pub mod slicer;
