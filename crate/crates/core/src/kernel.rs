//! The trusted side: the attach/map interface and the e1000e kernel stub.
//!
//! The kernel owns the [`RootMinter`] and therefore every root capability.
//! Userspace only ever receives sealed tokens, slices, and per-buffer
//! capabilities cut from those roots.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::capability::{derive_bounds, restrict_perms, seal, unseal, Capability, Perms};
use crate::driver::{DriverError, RingEngine, RingHandles};
use crate::manifest::Manifest;
use crate::nic::{
    NicModel, Queue, BAR_LENGTH, BUF_SIZE, CTRL_SLU, DESC_SIZE, ICR_RXT0, ICR_TXDW, RCTL_EN,
    REG_CTRL, REG_IMS, REG_RCTL, REG_RDBAH, REG_RDBAL, REG_RDH, REG_RDLEN, REG_RDT, REG_TCTL,
    REG_TDBAH, REG_TDBAL, REG_TDH, REG_TDLEN, REG_TDT, RING_SIZE, RX_RING_OFFSET, TCTL_EN,
    TX_RING_OFFSET,
};
use crate::physmem::{AccessCostTable, DeviceId, PhysSpace, RootMinter};
use crate::slicer::{otype_authority, SliceTable, Slicer, INTERFACE_OTYPE};

/// RAM spans `[0, RAM_LENGTH)`.
pub const RAM_LENGTH: u64 = 0x80000;
/// Physical base of the NIC BAR.
pub const NIC_BAR_BASE: u64 = 0x80000;
pub const SPACE_SIZE: u64 = NIC_BAR_BASE + BAR_LENGTH;
/// Kernel-private attach records, 16 bytes each.
pub const RECORDS_BASE: u64 = 0x1000;
pub const RECORDS_LENGTH: u64 = 0x1000;
/// Start of the DMA buffer region shared with the driver.
pub const DMA_BASE: u64 = 0x10000;

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("permission denied")]
    Denied,
    #[error("resource busy")]
    Busy,
    #[error("no such device")]
    NoSuchDevice,
    #[error("bad argument")]
    BadArgument,
}

/// Sealed proof that a process attached through the interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttachToken(Capability);

impl AttachToken {
    /// Whatever userspace hands in is a token candidate; only unsealing
    /// decides whether it is genuine.
    pub fn from_capability(cap: Capability) -> Self {
        AttachToken(cap)
    }

    pub fn capability(&self) -> Capability {
        self.0
    }
}

/// Per-descriptor buffer capabilities issued at attach.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferSet {
    pub tx: Vec<Capability>,
    pub rx: Vec<Capability>,
}

/// Where the stub put the rings and buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DmaLayout {
    /// Physical address of each ring (device memory inside the BAR).
    pub tx_ring: u64,
    pub rx_ring: u64,
    pub ring_len: u32,
    pub buf_size: u64,
    pub tx_bufs: u64,
    pub rx_bufs: u64,
}

impl DmaLayout {
    pub fn new(bar_base: u64, dma_base: u64, ring_len: u32, buf_size: u64) -> Self {
        let tx_bufs = dma_base;
        let rx_bufs = tx_bufs + ring_len as u64 * buf_size;
        DmaLayout {
            tx_ring: bar_base + TX_RING_OFFSET,
            rx_ring: bar_base + RX_RING_OFFSET,
            ring_len,
            buf_size,
            tx_bufs,
            rx_bufs,
        }
    }

    pub fn tx_buf(&self, k: u32) -> u64 {
        self.tx_bufs + k as u64 * self.buf_size
    }

    pub fn rx_buf(&self, k: u32) -> u64 {
        self.rx_bufs + k as u64 * self.buf_size
    }

    pub fn ring_bytes(&self) -> u64 {
        self.ring_len as u64 * DESC_SIZE
    }

    /// `[base, end)` of every buffer the process may hand the device.
    pub fn buffer_region(&self) -> (u64, u64) {
        (
            self.tx_bufs,
            self.rx_bufs + self.ring_len as u64 * self.buf_size,
        )
    }

    pub fn in_buffer_region(&self, addr: u64, len: u64) -> bool {
        let (lo, hi) = self.buffer_region();
        addr >= lo && addr.checked_add(len).is_some_and(|end| end <= hi)
    }
}

struct AttachRecord {
    pid: u32,
    live: bool,
    mmio_mapped: bool,
    bufs_mapped: bool,
}

struct AttachedDevice {
    name: String,
    nic: DeviceId,
    bar_root: Capability,
    manifest: Manifest,
    layout: DmaLayout,
    sockets: RingEngine,
}

pub struct Kernel {
    minter: RootMinter,
    slicer: Slicer,
    interface: Capability,
    ram_root: Capability,
    device: Option<AttachedDevice>,
    records: BTreeMap<u64, AttachRecord>,
    next_record: u64,
    invocations: u64,
}

impl Kernel {
    pub fn new(space: &PhysSpace, minter: RootMinter) -> Kernel {
        let sealing = space.issue_sealing_root(&minter);
        let ram_root = space
            .issue_root(&minter, 0, RAM_LENGTH, Perms::RW)
            .expect("RAM region at 0");
        Kernel {
            slicer: Slicer::new(sealing),
            interface: otype_authority(sealing, INTERFACE_OTYPE),
            ram_root,
            minter,
            device: None,
            records: BTreeMap::new(),
            next_record: RECORDS_BASE,
            invocations: 0,
        }
    }

    /// Calls into the interface so far.
    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    pub fn layout(&self) -> Option<DmaLayout> {
        self.device.as_ref().map(|d| d.layout)
    }

    pub fn manifest(&self) -> Option<&Manifest> {
        self.device.as_ref().map(|d| &d.manifest)
    }

    fn reg_write(space: &mut PhysSpace, bar: Capability, off: u64, width: u64, v: u64) {
        let cap = derive_bounds(bar, bar.base() + off, width);
        space
            .store(&cap, width, v)
            .expect("kernel root covers the BAR");
    }

    /// Brings the NIC up: rings, preprogrammed buffer addresses, TX/RX
    /// enable, and registration of `manifest` with the interface.
    pub fn stub_attach(
        &mut self,
        space: &mut PhysSpace,
        nic: DeviceId,
        manifest: Manifest,
    ) -> Result<(), KernelError> {
        if self.device.is_some() {
            return Err(KernelError::Busy);
        }
        if space.device::<NicModel>(nic).is_none() {
            return Err(KernelError::NoSuchDevice);
        }
        let region = space.device_region(nic).ok_or(KernelError::NoSuchDevice)?;
        let manifest = manifest
            .into_validated()
            .map_err(|_| KernelError::BadArgument)?;
        if manifest.bar_length > region.length {
            return Err(KernelError::BadArgument);
        }
        let bar = space
            .issue_root(&self.minter, region.base, region.length, Perms::RW)
            .map_err(|_| KernelError::NoSuchDevice)?;

        let n = RING_SIZE;
        let layout = DmaLayout::new(region.base, DMA_BASE, n, BUF_SIZE);
        let (_, dma_end) = layout.buffer_region();
        if dma_end > RAM_LENGTH {
            return Err(KernelError::BadArgument);
        }

        Self::reg_write(space, bar, REG_TCTL, 4, 0);
        Self::reg_write(space, bar, REG_RCTL, 4, 0);
        Self::reg_write(space, bar, REG_CTRL, 4, CTRL_SLU as u64);
        Self::reg_write(space, bar, REG_TDBAL, 4, TX_RING_OFFSET);
        Self::reg_write(space, bar, REG_TDBAH, 4, 0);
        Self::reg_write(space, bar, REG_TDLEN, 4, layout.ring_bytes());
        Self::reg_write(space, bar, REG_TDH, 4, 0);
        Self::reg_write(space, bar, REG_TDT, 4, 0);
        Self::reg_write(space, bar, REG_RDBAL, 4, RX_RING_OFFSET);
        Self::reg_write(space, bar, REG_RDBAH, 4, 0);
        Self::reg_write(space, bar, REG_RDLEN, 4, layout.ring_bytes());
        Self::reg_write(space, bar, REG_RDH, 4, 0);
        for k in 0..n {
            let tx = TX_RING_OFFSET + k as u64 * DESC_SIZE;
            let rx = RX_RING_OFFSET + k as u64 * DESC_SIZE;
            Self::reg_write(space, bar, tx, 8, layout.tx_buf(k));
            Self::reg_write(space, bar, tx + 8, 8, 0);
            Self::reg_write(space, bar, rx, 8, layout.rx_buf(k));
            Self::reg_write(space, bar, rx + 8, 8, 0);
        }
        Self::reg_write(space, bar, REG_RDT, 4, (n - 1) as u64);
        Self::reg_write(space, bar, REG_IMS, 4, (ICR_RXT0 | ICR_TXDW) as u64);
        Self::reg_write(space, bar, REG_TCTL, 4, TCTL_EN as u64);
        Self::reg_write(space, bar, REG_RCTL, 4, RCTL_EN as u64);

        let sockets = RingEngine::new(self.kernel_handles(bar, &layout));
        self.device = Some(AttachedDevice {
            name: manifest.device_name.clone(),
            nic,
            bar_root: bar,
            manifest,
            layout,
            sockets,
        });
        Ok(())
    }

    fn kernel_handles(&self, bar: Capability, l: &DmaLayout) -> RingHandles {
        let reg = |off: u64| derive_bounds(bar, bar.base() + off, 4);
        let tail = |ring: u64, k: u32| derive_bounds(bar, ring + k as u64 * DESC_SIZE + 8, 8);
        let buf = |addr: u64| derive_bounds(self.ram_root, addr, l.buf_size);
        RingHandles {
            tdt: reg(REG_TDT),
            rdt: reg(REG_RDT),
            tx_desc: (0..l.ring_len).map(|k| tail(l.tx_ring, k)).collect(),
            rx_desc: (0..l.ring_len).map(|k| tail(l.rx_ring, k)).collect(),
            tx_bufs: (0..l.ring_len).map(|k| buf(l.tx_buf(k))).collect(),
            rx_bufs: (0..l.ring_len).map(|k| buf(l.rx_buf(k))).collect(),
        }
    }

    /// Attaches process `pid` to `device`, returning its sealed token.
    pub fn attach(
        &mut self,
        space: &mut PhysSpace,
        pid: u32,
        device: &str,
    ) -> Result<AttachToken, KernelError> {
        self.invocations += 1;
        let dev = self.device.as_ref().ok_or(KernelError::NoSuchDevice)?;
        if dev.name != device {
            return Err(KernelError::NoSuchDevice);
        }
        if self.next_record + 16 > RECORDS_BASE + RECORDS_LENGTH {
            return Err(KernelError::Busy);
        }
        let addr = self.next_record;
        self.next_record += 16;

        let record = derive_bounds(self.ram_root, addr, 16);
        space
            .store(&record, 8, pid as u64 | (dev.nic.0 as u64) << 32)
            .map_err(|_| KernelError::BadArgument)?;
        space
            .store(&record.offset(8), 8, 1)
            .map_err(|_| KernelError::BadArgument)?;
        let token = seal(record, self.interface).map_err(|_| KernelError::BadArgument)?;
        self.records.insert(
            addr,
            AttachRecord {
                pid,
                live: true,
                mmio_mapped: false,
                bufs_mapped: false,
            },
        );
        Ok(AttachToken(token))
    }

    /// Unseals a token and returns its live record's address.
    fn verify(&self, token: &AttachToken) -> Result<u64, KernelError> {
        let record = unseal(token.0, self.interface).map_err(|_| KernelError::Denied)?;
        if record.length() != 16 {
            return Err(KernelError::Denied);
        }
        match self.records.get(&record.base()) {
            Some(r) if r.live => Ok(record.base()),
            _ => Err(KernelError::Denied),
        }
    }

    /// Process id behind a token, if it is genuine.
    pub fn token_owner(&self, token: &AttachToken) -> Result<u32, KernelError> {
        let addr = self.verify(token)?;
        Ok(self.records[&addr].pid)
    }

    /// Hands out the register and descriptor slices. Once per attach.
    pub fn map_mmio(
        &mut self,
        _space: &mut PhysSpace,
        token: &AttachToken,
    ) -> Result<SliceTable, KernelError> {
        self.invocations += 1;
        let addr = self.verify(token)?;
        let dev = self.device.as_ref().ok_or(KernelError::NoSuchDevice)?;
        let rec = self.records.get_mut(&addr).ok_or(KernelError::Denied)?;
        if rec.mmio_mapped {
            return Err(KernelError::Denied);
        }
        let table = self
            .slicer
            .slice(dev.bar_root, &dev.manifest)
            .map_err(|_| KernelError::BadArgument)?;
        rec.mmio_mapped = true;
        Ok(table)
    }

    /// Hands out one RW capability per DMA buffer. Once per attach.
    pub fn map_buffers(
        &mut self,
        _space: &mut PhysSpace,
        token: &AttachToken,
    ) -> Result<BufferSet, KernelError> {
        self.invocations += 1;
        let addr = self.verify(token)?;
        let dev = self.device.as_ref().ok_or(KernelError::NoSuchDevice)?;
        let rec = self.records.get_mut(&addr).ok_or(KernelError::Denied)?;
        if rec.bufs_mapped {
            return Err(KernelError::Denied);
        }
        rec.bufs_mapped = true;
        let l = dev.layout;
        let cut = |a: u64| restrict_perms(derive_bounds(self.ram_root, a, l.buf_size), Perms::RW);
        Ok(BufferSet {
            tx: (0..l.ring_len).map(|k| cut(l.tx_buf(k))).collect(),
            rx: (0..l.ring_len).map(|k| cut(l.rx_buf(k))).collect(),
        })
    }

    /// Takes back a mapping given its sealed root.
    pub fn unmap_mmio(
        &mut self,
        _space: &mut PhysSpace,
        token: &AttachToken,
        sealed_root: Capability,
    ) -> Result<(), KernelError> {
        self.invocations += 1;
        let addr = self.verify(token)?;
        let dev = self.device.as_ref().ok_or(KernelError::NoSuchDevice)?;
        let root = self
            .slicer
            .unmap(sealed_root)
            .map_err(|_| KernelError::Denied)?;
        if root != dev.bar_root {
            return Err(KernelError::Denied);
        }
        if let Some(r) = self.records.get_mut(&addr) {
            r.mmio_mapped = false;
        }
        Ok(())
    }

    /// Ends an attach; the token stops working.
    pub fn detach(&mut self, token: &AttachToken) -> Result<(), KernelError> {
        self.invocations += 1;
        let addr = self.verify(token)?;
        if let Some(r) = self.records.get_mut(&addr) {
            r.live = false;
        }
        Ok(())
    }

    /// Privileged write of a descriptor's buffer address.
    ///
    /// `buf` must be a tagged, unsealed capability with READ (and WRITE for
    /// receive) covering at least one full buffer inside the DMA buffer
    /// region. Its base is what gets written.
    pub fn ioctl_set_desc_addr(
        &mut self,
        space: &mut PhysSpace,
        token: &AttachToken,
        queue: Queue,
        index: u32,
        buf: Capability,
    ) -> Result<(), KernelError> {
        self.invocations += 1;
        self.verify(token)?;
        let dev = self.device.as_ref().ok_or(KernelError::NoSuchDevice)?;
        let l = dev.layout;
        if index >= l.ring_len {
            return Err(KernelError::BadArgument);
        }
        let need = match queue {
            Queue::Tx => Perms::READ,
            Queue::Rx => Perms::RW,
        };
        let ok = buf.tag()
            && !buf.is_sealed()
            && buf.perms().contains(need)
            && buf.length() >= l.buf_size
            && l.in_buffer_region(buf.base(), buf.length());
        if !ok {
            return Err(KernelError::Denied);
        }
        let ring = match queue {
            Queue::Tx => l.tx_ring,
            Queue::Rx => l.rx_ring,
        };
        let field = derive_bounds(dev.bar_root, ring + index as u64 * DESC_SIZE, 8);
        space
            .store(&field, 8, buf.base())
            .map_err(|_| KernelError::BadArgument)?;
        Ok(())
    }

    fn socket_error(e: DriverError) -> KernelError {
        match e {
            DriverError::Busy => KernelError::Busy,
            _ => KernelError::BadArgument,
        }
    }

    /// Socket-style send: kernel entry, copy in from the caller, transmit
    /// with the kernel's own capabilities, kernel exit.
    pub fn mediated_send(
        &mut self,
        space: &mut PhysSpace,
        token: &AttachToken,
        frame: &[u8],
    ) -> Result<(), KernelError> {
        self.invocations += 1;
        space.charge_syscall();
        let res = self.verify(token).and_then(|_| {
            space.charge_copy(frame.len());
            let dev = self.device.as_mut().ok_or(KernelError::NoSuchDevice)?;
            dev.sockets.send(space, frame).map_err(Self::socket_error)
        });
        space.charge_syscall();
        res
    }

    /// Socket-style receive of everything pending.
    pub fn mediated_recv(
        &mut self,
        space: &mut PhysSpace,
        token: &AttachToken,
    ) -> Result<Vec<Vec<u8>>, KernelError> {
        self.invocations += 1;
        space.charge_syscall();
        let res = self.verify(token).and_then(|_| {
            let dev = self.device.as_mut().ok_or(KernelError::NoSuchDevice)?;
            let frames = dev.sockets.poll_recv(space).map_err(Self::socket_error)?;
            space.charge_copy(frames.iter().map(Vec::len).sum());
            Ok(frames)
        });
        space.charge_syscall();
        res
    }

    /// Reads a register through the kernel root. For tests and audits.
    pub fn read_reg(&self, space: &mut PhysSpace, offset: u64) -> Option<u32> {
        let dev = self.device.as_ref()?;
        let cap = derive_bounds(dev.bar_root, dev.bar_root.base() + offset, 4);
        space.load(&cap, 4).ok().map(|v| v as u32)
    }
}

/// One host: address space, kernel and NIC.
pub struct Machine {
    pub space: PhysSpace,
    pub kernel: Kernel,
    pub nic: DeviceId,
}

impl Machine {
    /// A machine with the NIC cabled but not yet initialised.
    pub fn new(costs: AccessCostTable, mac: [u8; 6]) -> Machine {
        let (mut space, minter) = PhysSpace::new(SPACE_SIZE, costs);
        space.add_ram(0, RAM_LENGTH).expect("fresh space");
        let mut nic_model = NicModel::new(mac);
        nic_model.set_link(true);
        let nic = space
            .add_mmio(NIC_BAR_BASE, BAR_LENGTH, Box::new(nic_model))
            .expect("fresh space");
        let kernel = Kernel::new(&space, minter);
        Machine { space, kernel, nic }
    }

    /// A machine whose kernel stub has attached with `manifest`.
    pub fn boot(
        costs: AccessCostTable,
        mac: [u8; 6],
        manifest: Manifest,
    ) -> Result<Machine, KernelError> {
        let mut m = Machine::new(costs, mac);
        m.kernel.stub_attach(&mut m.space, m.nic, manifest)?;
        Ok(m)
    }

    pub fn nic(&self) -> &NicModel {
        self.space.device(self.nic).expect("NIC registered")
    }

    pub fn nic_mut(&mut self) -> &mut NicModel {
        self.space.device_mut(self.nic).expect("NIC registered")
    }

    /// Hands a frame from the wire to the NIC.
    pub fn deliver(&mut self, frame: &[u8]) -> bool {
        self.space
            .with_device::<NicModel, _>(self.nic, |n, bus| n.deliver_frame(frame, bus))
            .unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::{FaultKind, OType};
    use crate::manifest::E1000E_MANIFEST;
    use crate::nic::{REG_STATUS, STATUS_LU};

    fn booted() -> Machine {
        Machine::boot(
            AccessCostTable::default(),
            [2, 0, 0, 0, 0, 1],
            Manifest::parse(E1000E_MANIFEST).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn stub_attach_brings_link_up() {
        let mut m = booted();
        let status = m.kernel.read_reg(&mut m.space, REG_STATUS).unwrap();
        assert_eq!(status & STATUS_LU, STATUS_LU);
        assert_eq!(m.nic().reg(REG_STATUS) & STATUS_LU, STATUS_LU);
    }

    #[test]
    fn rx_descriptors_preprogrammed() {
        let m = booted();
        let l = m.kernel.layout().unwrap();
        for k in 0..RING_SIZE {
            assert_eq!(m.nic().rx_desc(k).unwrap().addr, l.rx_buf(k));
            assert_eq!(m.nic().tx_desc(k).unwrap().addr, l.tx_buf(k));
        }
    }

    #[test]
    fn tx_ring_empty_after_init() {
        let m = booted();
        assert_eq!(m.nic().reg(REG_TDT), 0);
        assert_eq!(m.nic().reg(REG_TDH), 0);
        assert_eq!(m.nic().reg(REG_RDT), RING_SIZE - 1);
    }

    #[test]
    fn double_stub_attach() {
        let mut m = booted();
        let nic = m.nic;
        assert_eq!(
            m.kernel
                .stub_attach(&mut m.space, nic, Manifest::parse(E1000E_MANIFEST).unwrap()),
            Err(KernelError::Busy)
        );
    }

    #[test]
    fn attach_before_stub() {
        let mut m = Machine::new(AccessCostTable::default(), [0; 6]);
        assert_eq!(
            m.kernel.attach(&mut m.space, 1, "e1000e"),
            Err(KernelError::NoSuchDevice)
        );
        let mut m = booted();
        assert_eq!(
            m.kernel.attach(&mut m.space, 1, "virtio-net"),
            Err(KernelError::NoSuchDevice)
        );
    }

    #[test]
    fn attach_tokens() {
        let mut m = booted();
        let t1 = m.kernel.attach(&mut m.space, 41, "e1000e").unwrap();
        let t2 = m.kernel.attach(&mut m.space, 42, "e1000e").unwrap();
        assert!(t1.capability().is_sealed());
        assert_eq!(t1.capability().otype(), INTERFACE_OTYPE);
        assert_ne!(t1.capability().base(), t2.capability().base());
        assert_eq!(m.kernel.token_owner(&t1), Ok(41));
        assert_eq!(m.kernel.token_owner(&t2), Ok(42));
        // record is 16 bytes, 16-aligned
        assert_eq!(t1.capability().length(), 16);
        assert_eq!(t1.capability().base() % 16, 0);
        let f = m.space.load(&t1.capability(), 4).unwrap_err();
        assert_eq!(f.kind, FaultKind::SealViolation);
    }

    #[test]
    fn map_mmio_once() {
        let mut m = booted();
        let t = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
        let table = m.kernel.map_mmio(&mut m.space, &t).unwrap();
        assert!(table.get("CTRL").is_some());
        assert!(table.get("TXD[0]").is_some());
        assert_eq!(
            m.kernel.map_mmio(&mut m.space, &t),
            Err(KernelError::Denied)
        );
    }

    #[test]
    fn forged_token_denied() {
        let mut m = booted();
        let t = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
        let c = t.capability();
        let forged = Capability::forge(c.base(), 16, c.base(), Perms::READ, INTERFACE_OTYPE);
        assert_eq!(
            m.kernel
                .map_mmio(&mut m.space, &AttachToken::from_capability(forged)),
            Err(KernelError::Denied)
        );
    }

    #[test]
    fn unmap_returns_root() {
        let mut m = booted();
        let t = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
        let table = m.kernel.map_mmio(&mut m.space, &t).unwrap();
        // a token is sealed under the wrong otype for unmapping
        assert_eq!(
            m.kernel.unmap_mmio(&mut m.space, &t, t.capability()),
            Err(KernelError::Denied)
        );
        m.kernel
            .unmap_mmio(&mut m.space, &t, table.sealed_root())
            .unwrap();
        // remapping is allowed after unmap
        m.kernel.map_mmio(&mut m.space, &t).unwrap();
    }

    #[test]
    fn detached_token_dies() {
        let mut m = booted();
        let t = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
        m.kernel.detach(&t).unwrap();
        assert_eq!(
            m.kernel.map_mmio(&mut m.space, &t),
            Err(KernelError::Denied)
        );
    }

    #[test]
    fn ioctl_checks() {
        let mut m = booted();
        let t = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
        let bufs = m.kernel.map_buffers(&mut m.space, &t).unwrap();
        let l = m.kernel.layout().unwrap();

        m.kernel
            .ioctl_set_desc_addr(&mut m.space, &t, Queue::Tx, 5, bufs.rx[9])
            .unwrap();
        assert_eq!(m.nic().tx_desc(5).unwrap().addr, l.rx_buf(9));

        let writes = m.nic().counters().mmio_writes;
        let before = m.nic().tx_desc(6).unwrap();
        let untagged = bufs.tx[0].cleared();
        let private = derive_bounds(m.kernel.ram_root, 0x60000, BUF_SIZE);
        let short = derive_bounds(bufs.tx[0], bufs.tx[0].base(), 64);
        let ro = restrict_perms(bufs.rx[0], Perms::READ);
        let sealed = seal(
            bufs.tx[0],
            otype_authority(m.space.issue_sealing_root(&m.kernel.minter), OType(9)),
        )
        .unwrap();
        for bad in [untagged, private, short, sealed] {
            assert_eq!(
                m.kernel
                    .ioctl_set_desc_addr(&mut m.space, &t, Queue::Tx, 6, bad),
                Err(KernelError::Denied),
                "{bad:?}"
            );
        }
        assert_eq!(
            m.kernel
                .ioctl_set_desc_addr(&mut m.space, &t, Queue::Rx, 6, ro),
            Err(KernelError::Denied)
        );
        assert_eq!(
            m.kernel
                .ioctl_set_desc_addr(&mut m.space, &t, Queue::Tx, 64, bufs.tx[0]),
            Err(KernelError::BadArgument)
        );
        assert_eq!(m.nic().tx_desc(6).unwrap(), before);
        assert_eq!(m.nic().counters().mmio_writes, writes);
    }

    #[test]
    fn mediated_costs() {
        let mut m = booted();
        let t = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
        let t0 = m.space.now();
        let res = m.kernel.mediated_recv(&mut m.space, &t).unwrap();
        assert!(res.is_empty());
        // two crossings plus one descriptor status read
        assert_eq!(m.space.now(), t0.plus_ns(2.0 * 180.0 + 250.0));
    }
}
