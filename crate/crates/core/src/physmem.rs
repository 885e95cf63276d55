//! Flat simulated physical address space.
//!
//! Holds RAM bytes, one capability tag per 16-byte granule, and the MMIO
//! regions that forward loads and stores to device models. Every data access
//! goes through [`check_access`] first. Also owns the virtual clock: each
//! access charges its cost from the [`AccessCostTable`].

use std::any::Any;
use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::capability::{check_access, check_range, CapFault, Capability, FaultKind, OType, Perms};

/// Size of a tag granule; one capability occupies exactly one granule.
pub const GRANULE: u64 = 16;

/// Virtual time, stored as integer picoseconds so that sub-nanosecond
/// per-byte costs accumulate exactly.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ns(ns: f64) -> SimTime {
        SimTime(ns_to_ps(ns))
    }

    pub fn from_ps(ps: u64) -> SimTime {
        SimTime(ps)
    }

    pub fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_ns(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn plus_ns(self, ns: f64) -> SimTime {
        SimTime(self.0 + ns_to_ps(ns))
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.as_ns())
    }
}

fn ns_to_ps(ns: f64) -> u64 {
    if ns <= 0.0 || !ns.is_finite() {
        0
    } else {
        (ns * 1000.0).round() as u64
    }
}

/// Virtual cost of each class of operation, in nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccessCostTable {
    pub ram_access_ns: f64,
    pub mmio_access_ns: f64,
    pub copy_per_byte_ns: f64,
    /// One kernel entry or exit. 450 cycles at 2.5 GHz.
    pub syscall_ns: f64,
}

impl Default for AccessCostTable {
    fn default() -> Self {
        AccessCostTable {
            ram_access_ns: 10.0,
            mmio_access_ns: 250.0,
            copy_per_byte_ns: 0.25,
            syscall_ns: 180.0,
        }
    }
}

impl AccessCostTable {
    /// Negative costs are clamped to zero.
    pub fn sanitized(self) -> Self {
        let clamp = |v: f64| if v.is_finite() && v > 0.0 { v } else { 0.0 };
        AccessCostTable {
            ram_access_ns: clamp(self.ram_access_ns),
            mmio_access_ns: clamp(self.mmio_access_ns),
            copy_per_byte_ns: clamp(self.copy_per_byte_ns),
            syscall_ns: clamp(self.syscall_ns),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct DeviceId(pub usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RegionKind {
    Ram,
    Mmio(DeviceId),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Region {
    pub base: u64,
    pub length: u64,
    pub kind: RegionKind,
}

impl Region {
    pub fn top(&self) -> u64 {
        self.base + self.length
    }

    fn contains_range(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.top())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PhysError {
    #[error("range {base:#x}+{length:#x} is not inside a single region")]
    RangeNotInRegion { base: u64, length: u64 },
    #[error("region {base:#x}+{length:#x} overlaps an existing region or exceeds the space")]
    BadRegion { base: u64, length: u64 },
}

/// The handle needed to mint tagged capabilities. Created once, together with
/// the [`PhysSpace`], and handed to the kernel.
pub struct RootMinter {
    _priv: (),
}

/// A device model reachable through an MMIO region.
///
/// Offsets are relative to the region base. Capability checks have already
/// passed when these are called.
pub trait MmioDevice: Any {
    fn mmio_read(&mut self, offset: u64, width: u64, bus: &mut DmaBus<'_>) -> u64;
    fn mmio_write(&mut self, offset: u64, width: u64, value: u64, bus: &mut DmaBus<'_>);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// One recorded capability-checked access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub addr: u64,
    pub len: u64,
    pub need: Perms,
    pub ok: bool,
}

struct Memory {
    data: Vec<u8>,
    tags: Vec<bool>,
    // Full capability for each tagged granule; the in-band bytes only carry
    // cursor, perms and otype.
    shadow: HashMap<u64, Capability>,
    regions: Vec<Region>,
    clock: SimTime,
    costs: AccessCostTable,
    log: Option<Vec<AccessRecord>>,
}

impl Memory {
    fn ram_region(&self, addr: u64, len: u64) -> bool {
        self.regions
            .iter()
            .any(|r| r.kind == RegionKind::Ram && r.contains_range(addr, len))
    }

    fn clear_tags(&mut self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = addr / GRANULE;
        let last = (addr + len - 1) / GRANULE;
        for g in first..=last {
            if let Some(t) = self.tags.get_mut(g as usize) {
                if *t {
                    *t = false;
                    self.shadow.remove(&g);
                }
            }
        }
    }

    fn read_ram(&self, addr: u64, len: u64) -> &[u8] {
        &self.data[addr as usize..(addr + len) as usize]
    }

    fn write_ram(&mut self, addr: u64, bytes: &[u8]) {
        self.data[addr as usize..addr as usize + bytes.len()].copy_from_slice(bytes);
        self.clear_tags(addr, bytes.len() as u64);
    }

    fn charge(&mut self, ns: f64) {
        self.clock = self.clock.plus_ns(ns);
    }

    fn record(&mut self, addr: u64, len: u64, need: Perms, ok: bool) {
        if let Some(log) = self.log.as_mut() {
            log.push(AccessRecord {
                addr,
                len,
                need,
                ok,
            });
        }
    }
}

/// What a device model sees of the address space: untyped RAM for DMA and
/// the clock. Devices cannot reach MMIO regions or tags through it, and DMA
/// writes strip tags like any other data store.
pub struct DmaBus<'a> {
    mem: &'a mut Memory,
}

impl DmaBus<'_> {
    /// Reads RAM, or `None` if the range is not entirely RAM.
    pub fn dma_read(&mut self, addr: u64, len: u64) -> Option<Vec<u8>> {
        if !self.mem.ram_region(addr, len) {
            return None;
        }
        Some(self.mem.read_ram(addr, len).to_vec())
    }

    /// Writes RAM; returns false (and writes nothing) outside RAM.
    pub fn dma_write(&mut self, addr: u64, bytes: &[u8]) -> bool {
        if !self.mem.ram_region(addr, bytes.len() as u64) {
            return false;
        }
        self.mem.write_ram(addr, bytes);
        true
    }

    pub fn now(&self) -> SimTime {
        self.mem.clock
    }

    pub fn costs(&self) -> AccessCostTable {
        self.mem.costs
    }

    pub fn charge_ns(&mut self, ns: f64) {
        self.mem.charge(ns);
    }
}

/// The simulated physical address space.
pub struct PhysSpace {
    size: u64,
    mem: Memory,
    devices: Vec<Box<dyn MmioDevice>>,
}

impl PhysSpace {
    /// Creates an empty space and the only handle able to mint root
    /// capabilities over it.
    pub fn new(size: u64, costs: AccessCostTable) -> (PhysSpace, RootMinter) {
        let granules = size.div_ceil(GRANULE) as usize;
        let space = PhysSpace {
            size,
            mem: Memory {
                data: vec![0; size as usize],
                tags: vec![false; granules],
                shadow: HashMap::new(),
                regions: Vec::new(),
                clock: SimTime::ZERO,
                costs: costs.sanitized(),
                log: None,
            },
            devices: Vec::new(),
        };
        (space, RootMinter { _priv: () })
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn regions(&self) -> &[Region] {
        &self.mem.regions
    }

    pub fn costs(&self) -> AccessCostTable {
        self.mem.costs
    }

    pub fn set_costs(&mut self, costs: AccessCostTable) {
        self.mem.costs = costs.sanitized();
    }

    fn insert_region(&mut self, region: Region) -> Result<(), PhysError> {
        let bad = PhysError::BadRegion {
            base: region.base,
            length: region.length,
        };
        let Some(top) = region.base.checked_add(region.length) else {
            return Err(bad);
        };
        if top > self.size
            || self
                .mem
                .regions
                .iter()
                .any(|r| region.base < r.top() && r.base < top)
        {
            return Err(bad);
        }
        self.mem.regions.push(region);
        self.mem.regions.sort_by_key(|r| r.base);
        Ok(())
    }

    pub fn add_ram(&mut self, base: u64, length: u64) -> Result<(), PhysError> {
        self.insert_region(Region {
            base,
            length,
            kind: RegionKind::Ram,
        })
    }

    pub fn add_mmio(
        &mut self,
        base: u64,
        length: u64,
        device: Box<dyn MmioDevice>,
    ) -> Result<DeviceId, PhysError> {
        let id = DeviceId(self.devices.len());
        self.insert_region(Region {
            base,
            length,
            kind: RegionKind::Mmio(id),
        })?;
        self.devices.push(device);
        Ok(id)
    }

    /// Base of the MMIO region owned by `id`.
    pub fn device_region(&self, id: DeviceId) -> Option<Region> {
        self.mem
            .regions
            .iter()
            .copied()
            .find(|r| r.kind == RegionKind::Mmio(id))
    }

    /// Mints a tagged, unsealed capability over a range inside one region.
    pub fn issue_root(
        &self,
        _minter: &RootMinter,
        base: u64,
        length: u64,
        perms: Perms,
    ) -> Result<Capability, PhysError> {
        let inside = self.mem.regions.iter().any(|r| {
            if length == 0 {
                base >= r.base && base <= r.top()
            } else {
                r.contains_range(base, length)
            }
        });
        if !inside {
            return Err(PhysError::RangeNotInRegion { base, length });
        }
        Ok(Capability::mint(base, length, perms))
    }

    /// Mints the root of the otype space, holding SEAL and UNSEAL.
    pub fn issue_sealing_root(&self, _minter: &RootMinter) -> Capability {
        Capability::mint(0, OType::UNSEALED.0 as u64, Perms::SEAL | Perms::UNSEAL)
    }

    pub fn now(&self) -> SimTime {
        self.mem.clock
    }

    /// Moves the clock forward to `t`; never backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.mem.clock {
            self.mem.clock = t;
        }
    }

    pub fn charge_ns(&mut self, ns: f64) {
        self.mem.charge(ns);
    }

    pub fn charge_syscall(&mut self) {
        let ns = self.mem.costs.syscall_ns;
        self.mem.charge(ns);
    }

    pub fn charge_copy(&mut self, bytes: usize) {
        let ns = self.mem.costs.copy_per_byte_ns * bytes as f64;
        self.mem.charge(ns);
    }

    /// Starts recording every capability-checked data access.
    pub fn record_accesses(&mut self, on: bool) {
        self.mem.log = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_access_log(&mut self) -> Vec<AccessRecord> {
        self.mem
            .log
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    fn region_of(&self, addr: u64, len: u64) -> Option<Region> {
        self.mem
            .regions
            .iter()
            .copied()
            .find(|r| r.contains_range(addr, len.max(1)))
    }

    fn checked(&mut self, cap: &Capability, len: u64, need: Perms) -> Result<(), CapFault> {
        let res = check_range(cap, len, need);
        self.mem.record(cap.cursor(), len, need, res.is_ok());
        res
    }

    fn check_width(cap: &Capability, width: u64) -> Result<(), CapFault> {
        if matches!(width, 1 | 2 | 4 | 8) {
            Ok(())
        } else {
            Err(CapFault::new(
                FaultKind::AlignmentFault,
                cap.cursor(),
                format!("unsupported data width {width}"),
            ))
        }
    }

    /// Capability-checked little-endian load of `width` bytes at the cursor.
    pub fn load(&mut self, cap: &Capability, width: u64) -> Result<u64, CapFault> {
        Self::check_width(cap, width)?;
        self.checked(cap, width, Perms::READ)?;
        let addr = cap.cursor();
        match self.region_of(addr, width).map(|r| (r.base, r.kind)) {
            Some((_, RegionKind::Ram)) => {
                self.mem.charge(self.mem.costs.ram_access_ns);
                let mut buf = [0u8; 8];
                buf[..width as usize].copy_from_slice(self.mem.read_ram(addr, width));
                Ok(u64::from_le_bytes(buf))
            }
            Some((base, RegionKind::Mmio(id))) => {
                self.mem.charge(self.mem.costs.mmio_access_ns);
                let mut bus = DmaBus { mem: &mut self.mem };
                Ok(self.devices[id.0].mmio_read(addr - base, width, &mut bus))
            }
            None => Ok(0),
        }
    }

    /// Capability-checked little-endian store. Clears tags of every granule
    /// touched in RAM.
    pub fn store(&mut self, cap: &Capability, width: u64, value: u64) -> Result<(), CapFault> {
        Self::check_width(cap, width)?;
        self.checked(cap, width, Perms::WRITE)?;
        let addr = cap.cursor();
        match self.region_of(addr, width).map(|r| (r.base, r.kind)) {
            Some((_, RegionKind::Ram)) => {
                self.mem.charge(self.mem.costs.ram_access_ns);
                let bytes = value.to_le_bytes();
                self.mem.write_ram(addr, &bytes[..width as usize]);
            }
            Some((base, RegionKind::Mmio(id))) => {
                self.mem.charge(self.mem.costs.mmio_access_ns);
                let mut bus = DmaBus { mem: &mut self.mem };
                self.devices[id.0].mmio_write(addr - base, width, value, &mut bus);
            }
            None => {}
        }
        Ok(())
    }

    /// Bulk copy out of memory at the cursor. Charges one access plus the
    /// per-byte copy cost.
    pub fn load_bytes(&mut self, cap: &Capability, len: u64) -> Result<Vec<u8>, CapFault> {
        self.checked(cap, len, Perms::READ)?;
        let addr = cap.cursor();
        match self.region_of(addr, len).map(|r| (r.base, r.kind)) {
            Some((_, RegionKind::Ram)) => {
                let c = self.mem.costs;
                self.mem
                    .charge(c.ram_access_ns + c.copy_per_byte_ns * len as f64);
                Ok(self.mem.read_ram(addr, len).to_vec())
            }
            Some((base, RegionKind::Mmio(id))) => {
                let mut out = Vec::with_capacity(len as usize);
                for i in 0..len {
                    self.mem.charge(self.mem.costs.mmio_access_ns);
                    let mut bus = DmaBus { mem: &mut self.mem };
                    out.push(self.devices[id.0].mmio_read(addr + i - base, 1, &mut bus) as u8);
                }
                Ok(out)
            }
            None => Ok(vec![0; len as usize]),
        }
    }

    /// Bulk copy into memory at the cursor.
    pub fn store_bytes(&mut self, cap: &Capability, bytes: &[u8]) -> Result<(), CapFault> {
        let len = bytes.len() as u64;
        self.checked(cap, len, Perms::WRITE)?;
        let addr = cap.cursor();
        match self.region_of(addr, len).map(|r| (r.base, r.kind)) {
            Some((_, RegionKind::Ram)) => {
                let c = self.mem.costs;
                self.mem
                    .charge(c.ram_access_ns + c.copy_per_byte_ns * len as f64);
                self.mem.write_ram(addr, bytes);
            }
            Some((base, RegionKind::Mmio(id))) => {
                for (i, b) in bytes.iter().enumerate() {
                    self.mem.charge(self.mem.costs.mmio_access_ns);
                    let mut bus = DmaBus { mem: &mut self.mem };
                    self.devices[id.0].mmio_write(addr + i as u64 - base, 1, *b as u64, &mut bus);
                }
            }
            None => {}
        }
        Ok(())
    }

    fn cap_checks(&self, cap: &Capability, need: Perms) -> Result<u64, CapFault> {
        let addr = cap.cursor();
        if !cap.tag() {
            return Err(CapFault::new(
                FaultKind::TagInvalid,
                addr,
                "untagged authority",
            ));
        }
        if cap.is_sealed() {
            return Err(CapFault::new(
                FaultKind::SealViolation,
                addr,
                "sealed authority",
            ));
        }
        if !addr.is_multiple_of(GRANULE) {
            return Err(CapFault::new(
                FaultKind::AlignmentFault,
                addr,
                "capability access must be 16-byte aligned",
            ));
        }
        check_access(cap, GRANULE, need)?;
        if !self.mem.ram_region(addr, GRANULE) {
            return Err(CapFault::new(
                FaultKind::PermissionDenied,
                addr,
                "capabilities can only be held in tagged RAM",
            ));
        }
        Ok(addr)
    }

    /// Stores a capability into one granule, setting the granule's tag to the
    /// stored value's tag.
    ///
    /// In-band layout: cursor (8 bytes LE), perms (1), zero (3), otype (4 LE).
    /// Bounds travel with the tag, so an untagged granule decodes with zero
    /// length.
    pub fn cap_store(&mut self, cap: &Capability, value: &Capability) -> Result<(), CapFault> {
        let addr = self.cap_checks(cap, Perms::STORE_CAP)?;
        self.mem.charge(self.mem.costs.ram_access_ns);
        let (_, _, cursor, perms, tag, otype) = value.raw_parts();
        let mut bytes = [0u8; 16];
        bytes[..8].copy_from_slice(&cursor.to_le_bytes());
        bytes[8] = perms.bits();
        bytes[12..].copy_from_slice(&otype.0.to_le_bytes());
        self.mem.write_ram(addr, &bytes);
        let g = addr / GRANULE;
        if tag {
            self.mem.tags[g as usize] = true;
            self.mem.shadow.insert(g, *value);
        }
        Ok(())
    }

    /// Loads a capability from one granule. A cleared tag yields the decoded
    /// bit pattern, untagged.
    pub fn cap_load(&mut self, cap: &Capability) -> Result<Capability, CapFault> {
        let addr = self.cap_checks(cap, Perms::LOAD_CAP)?;
        self.mem.charge(self.mem.costs.ram_access_ns);
        let g = addr / GRANULE;
        if self.mem.tags[g as usize] {
            if let Some(c) = self.mem.shadow.get(&g) {
                return Ok(c.with_tag(true));
            }
        }
        let raw = self.mem.read_ram(addr, GRANULE);
        let cursor = u64::from_le_bytes(raw[..8].try_into().unwrap());
        let perms = Perms::from_bits(raw[8]);
        let otype = OType(u32::from_le_bytes(raw[12..16].try_into().unwrap()));
        Ok(Capability::forge(cursor, 0, cursor, perms, otype))
    }

    /// Number of granules currently holding a valid tag.
    pub fn tagged_granules(&self) -> usize {
        self.mem.tags.iter().filter(|t| **t).count()
    }

    pub fn tag_at(&self, addr: u64) -> bool {
        self.mem
            .tags
            .get((addr / GRANULE) as usize)
            .copied()
            .unwrap_or(false)
    }

    /// Typed view of a device model, for the owning system and for tests.
    pub fn device<T: MmioDevice>(&self, id: DeviceId) -> Option<&T> {
        self.devices.get(id.0)?.as_any().downcast_ref()
    }

    pub fn device_mut<T: MmioDevice>(&mut self, id: DeviceId) -> Option<&mut T> {
        self.devices.get_mut(id.0)?.as_any_mut().downcast_mut()
    }

    /// Runs device-side work that is not triggered by a register access,
    /// such as frame arrival from the wire.
    pub fn with_device<T: MmioDevice, R>(
        &mut self,
        id: DeviceId,
        f: impl FnOnce(&mut T, &mut DmaBus<'_>) -> R,
    ) -> Option<R> {
        let dev = self
            .devices
            .get_mut(id.0)?
            .as_any_mut()
            .downcast_mut::<T>()?;
        let mut bus = DmaBus { mem: &mut self.mem };
        Some(f(dev, &mut bus))
    }

    /// Raw RAM read for test oracles; bypasses capability checks.
    pub fn peek_ram(&self, addr: u64, len: u64) -> Option<&[u8]> {
        self.mem
            .ram_region(addr, len)
            .then(|| self.mem.read_ram(addr, len))
    }
}
