//! e1000e-style NIC model.
//!
//! Register offsets follow the 8254x map. Descriptor rings are held in
//! device memory inside the BAR (`DESC_WINDOW`), so the manifest can carve
//! each descriptor into a kernel-only address field and a driver-writable
//! tail. Packet buffers live in host RAM and are reached by DMA through the
//! address field of each descriptor.

use std::any::Any;
use std::collections::VecDeque;

use crate::physmem::{DmaBus, MmioDevice, SimTime};

pub const REG_CTRL: u64 = 0x0000;
pub const REG_STATUS: u64 = 0x0008;
pub const REG_ICR: u64 = 0x00C0;
pub const REG_IMS: u64 = 0x00D0;
pub const REG_RCTL: u64 = 0x0100;
pub const REG_TCTL: u64 = 0x0400;
pub const REG_RDBAL: u64 = 0x2800;
pub const REG_RDBAH: u64 = 0x2804;
pub const REG_RDLEN: u64 = 0x2808;
pub const REG_RDH: u64 = 0x2810;
pub const REG_RDT: u64 = 0x2818;
pub const REG_TDBAL: u64 = 0x3800;
pub const REG_TDBAH: u64 = 0x3804;
pub const REG_TDLEN: u64 = 0x3808;
pub const REG_TDH: u64 = 0x3810;
pub const REG_TDT: u64 = 0x3818;

pub const BAR_LENGTH: u64 = 0x20000;
/// Device-resident descriptor memory.
pub const DESC_WINDOW: u64 = 0x10000;
pub const DESC_WINDOW_LEN: u64 = 0x10000;
/// Default ring placement inside the window.
pub const TX_RING_OFFSET: u64 = 0x10000;
pub const RX_RING_OFFSET: u64 = 0x11000;

pub const DESC_SIZE: u64 = 16;
pub const RING_SIZE: u32 = 64;
pub const BUF_SIZE: u64 = 2048;
/// Largest Ethernet frame without FCS.
pub const MAX_FRAME: usize = 1518;

pub const CTRL_SLU: u32 = 1 << 6;
pub const STATUS_FD: u32 = 1 << 0;
pub const STATUS_LU: u32 = 1 << 1;
pub const RCTL_EN: u32 = 1 << 1;
pub const TCTL_EN: u32 = 1 << 1;
pub const ICR_TXDW: u32 = 1 << 0;
pub const ICR_RXT0: u32 = 1 << 7;

pub const TX_CMD_EOP: u8 = 1 << 0;
pub const TX_CMD_IFCS: u8 = 1 << 1;
pub const TX_CMD_RS: u8 = 1 << 3;
pub const DESC_DD: u8 = 1 << 0;
pub const RX_STATUS_EOP: u8 = 1 << 1;
/// Set with DD on a transmit descriptor the device refused.
pub const TX_STATUS_ERR: u8 = 1 << 1;

/// Legacy transmit descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TxDescriptor {
    pub addr: u64,
    pub length: u16,
    pub cso: u8,
    pub cmd: u8,
    pub status: u8,
    pub css: u8,
    pub special: u16,
}

impl TxDescriptor {
    pub fn from_bytes(b: &[u8; 16]) -> Self {
        TxDescriptor {
            addr: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            length: u16::from_le_bytes([b[8], b[9]]),
            cso: b[10],
            cmd: b[11],
            status: b[12],
            css: b[13],
            special: u16::from_le_bytes([b[14], b[15]]),
        }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..10].copy_from_slice(&self.length.to_le_bytes());
        b[10] = self.cso;
        b[11] = self.cmd;
        b[12] = self.status;
        b[13] = self.css;
        b[14..16].copy_from_slice(&self.special.to_le_bytes());
        b
    }
}

/// Legacy receive descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RxDescriptor {
    pub addr: u64,
    pub length: u16,
    pub checksum: u16,
    pub status: u8,
    pub errors: u8,
    pub special: u16,
}

impl RxDescriptor {
    pub fn from_bytes(b: &[u8; 16]) -> Self {
        RxDescriptor {
            addr: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            length: u16::from_le_bytes([b[8], b[9]]),
            checksum: u16::from_le_bytes([b[10], b[11]]),
            status: b[12],
            errors: b[13],
            special: u16::from_le_bytes([b[14], b[15]]),
        }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..10].copy_from_slice(&self.length.to_le_bytes());
        b[10..12].copy_from_slice(&self.checksum.to_le_bytes());
        b[12] = self.status;
        b[13] = self.errors;
        b[14..16].copy_from_slice(&self.special.to_le_bytes());
        b
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NicCounters {
    pub tx_frames: u64,
    pub tx_errors: u64,
    pub rx_frames: u64,
    pub rx_dropped: u64,
    pub mmio_reads: u64,
    pub mmio_writes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Queue {
    Tx,
    Rx,
}

#[derive(Default)]
struct Regs {
    ctrl: u32,
    status: u32,
    icr: u32,
    ims: u32,
    rctl: u32,
    tctl: u32,
    rdbal: u32,
    rdbah: u32,
    rdlen: u32,
    rdh: u32,
    rdt: u32,
    tdbal: u32,
    tdbah: u32,
    tdlen: u32,
    tdh: u32,
    tdt: u32,
}

/// A frame put on the wire, stamped with the device clock at emission.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireFrame {
    pub at: SimTime,
    pub bytes: Vec<u8>,
}

pub struct NicModel {
    regs: Regs,
    mac: [u8; 6],
    link_attached: bool,
    desc_mem: Vec<u8>,
    outbox: VecDeque<WireFrame>,
    counters: NicCounters,
    dd_log: Option<Vec<(Queue, u32)>>,
}

fn merge(old: u32, value: u64, width: u64, byte: u64) -> u32 {
    // sub-word writes land in place within the 32-bit register
    let shift = (byte % 4) * 8;
    let mask: u64 = if width >= 4 {
        0xffff_ffff
    } else {
        ((1u64 << (width * 8)) - 1) << shift
    };
    let v = (value << shift) & mask;
    ((old as u64 & !mask) | v) as u32
}

impl NicModel {
    pub fn new(mac: [u8; 6]) -> Self {
        NicModel {
            regs: Regs::default(),
            mac,
            link_attached: false,
            desc_mem: vec![0; DESC_WINDOW_LEN as usize],
            outbox: VecDeque::new(),
            counters: NicCounters::default(),
            dd_log: None,
        }
    }

    pub fn mac(&self) -> [u8; 6] {
        self.mac
    }

    pub fn counters(&self) -> NicCounters {
        self.counters
    }

    /// Plugs or unplugs the cable.
    pub fn set_link(&mut self, attached: bool) {
        self.link_attached = attached;
        self.refresh_status();
    }

    fn refresh_status(&mut self) {
        let up = self.link_attached && self.regs.ctrl & CTRL_SLU != 0;
        self.regs.status = if up { STATUS_LU | STATUS_FD } else { 0 };
    }

    /// Register value for tests and oracles.
    pub fn reg(&self, offset: u64) -> u32 {
        self.reg_ref(offset).unwrap_or_default()
    }

    fn reg_ref(&self, offset: u64) -> Option<u32> {
        let r = &self.regs;
        Some(match offset {
            REG_CTRL => r.ctrl,
            REG_STATUS => r.status,
            REG_ICR => r.icr,
            REG_IMS => r.ims,
            REG_RCTL => r.rctl,
            REG_TCTL => r.tctl,
            REG_RDBAL => r.rdbal,
            REG_RDBAH => r.rdbah,
            REG_RDLEN => r.rdlen,
            REG_RDH => r.rdh,
            REG_RDT => r.rdt,
            REG_TDBAL => r.tdbal,
            REG_TDBAH => r.tdbah,
            REG_TDLEN => r.tdlen,
            REG_TDH => r.tdh,
            REG_TDT => r.tdt,
            _ => return None,
        })
    }

    fn ring_len(len_reg: u32) -> u32 {
        len_reg / DESC_SIZE as u32
    }

    pub fn tx_ring_len(&self) -> u32 {
        Self::ring_len(self.regs.tdlen)
    }

    pub fn rx_ring_len(&self) -> u32 {
        Self::ring_len(self.regs.rdlen)
    }

    fn ring_base(lo: u32, hi: u32) -> u64 {
        ((hi as u64) << 32) | lo as u64
    }

    /// BAR offset of descriptor `index` in `queue`, if the ring is inside
    /// descriptor memory.
    pub fn desc_offset(&self, queue: Queue, index: u32) -> Option<u64> {
        let (base, n) = match queue {
            Queue::Tx => (
                Self::ring_base(self.regs.tdbal, self.regs.tdbah),
                self.tx_ring_len(),
            ),
            Queue::Rx => (
                Self::ring_base(self.regs.rdbal, self.regs.rdbah),
                self.rx_ring_len(),
            ),
        };
        if index >= n {
            return None;
        }
        let off = base + index as u64 * DESC_SIZE;
        (off >= DESC_WINDOW && off + DESC_SIZE <= DESC_WINDOW + DESC_WINDOW_LEN).then_some(off)
    }

    fn desc_bytes(&self, off: u64) -> [u8; 16] {
        let i = (off - DESC_WINDOW) as usize;
        self.desc_mem[i..i + 16].try_into().unwrap()
    }

    fn put_desc_bytes(&mut self, off: u64, b: [u8; 16]) {
        let i = (off - DESC_WINDOW) as usize;
        self.desc_mem[i..i + 16].copy_from_slice(&b);
    }

    pub fn tx_desc(&self, index: u32) -> Option<TxDescriptor> {
        self.desc_offset(Queue::Tx, index)
            .map(|o| TxDescriptor::from_bytes(&self.desc_bytes(o)))
    }

    pub fn rx_desc(&self, index: u32) -> Option<RxDescriptor> {
        self.desc_offset(Queue::Rx, index)
            .map(|o| RxDescriptor::from_bytes(&self.desc_bytes(o)))
    }

    /// Address fields of every descriptor in both rings.
    pub fn desc_addresses(&self) -> Vec<(Queue, u32, u64)> {
        let mut out = Vec::new();
        for i in 0..self.tx_ring_len() {
            if let Some(d) = self.tx_desc(i) {
                out.push((Queue::Tx, i, d.addr));
            }
        }
        for i in 0..self.rx_ring_len() {
            if let Some(d) = self.rx_desc(i) {
                out.push((Queue::Rx, i, d.addr));
            }
        }
        out
    }

    /// Records every descriptor whose DD bit the device sets.
    pub fn log_dd(&mut self, on: bool) {
        self.dd_log = on.then(Vec::new);
    }

    pub fn take_dd_log(&mut self) -> Vec<(Queue, u32)> {
        self.dd_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Frames emitted since the last call, oldest first.
    pub fn take_outbox(&mut self) -> Vec<WireFrame> {
        self.outbox.drain(..).collect()
    }

    /// Walks TDH up to TDT, DMA-reading and emitting each frame.
    pub fn process_tx(&mut self, bus: &mut DmaBus<'_>) -> usize {
        let n = self.tx_ring_len();
        if n == 0 || self.regs.tctl & TCTL_EN == 0 {
            return 0;
        }
        let mut emitted = 0;
        while self.regs.tdh != self.regs.tdt {
            let idx = self.regs.tdh;
            let Some(off) = self.desc_offset(Queue::Tx, idx) else {
                break;
            };
            let mut d = TxDescriptor::from_bytes(&self.desc_bytes(off));
            let len = d.length as u64;
            let frame = if len == 0 || len > BUF_SIZE || len as usize > MAX_FRAME {
                None
            } else {
                bus.dma_read(d.addr, len)
            };
            match frame {
                Some(bytes) => {
                    bus.charge_ns(bus.costs().copy_per_byte_ns * len as f64);
                    self.outbox.push_back(WireFrame {
                        at: bus.now(),
                        bytes,
                    });
                    self.counters.tx_frames += 1;
                    d.status = DESC_DD;
                    emitted += 1;
                }
                None => {
                    self.counters.tx_errors += 1;
                    d.status = DESC_DD | TX_STATUS_ERR;
                }
            }
            self.put_desc_bytes(off, d.to_bytes());
            if let Some(log) = self.dd_log.as_mut() {
                log.push((Queue::Tx, idx));
            }
            self.regs.tdh = (idx + 1) % n;
        }
        if emitted > 0 {
            self.regs.icr |= ICR_TXDW;
        }
        emitted
    }

    /// Receives one frame from the wire into the next free descriptor.
    /// Returns false if it was dropped.
    pub fn deliver_frame(&mut self, frame: &[u8], bus: &mut DmaBus<'_>) -> bool {
        let n = self.rx_ring_len();
        let ready = n > 0 && self.regs.rctl & RCTL_EN != 0 && self.link_attached;
        if !ready
            || self.regs.rdh == self.regs.rdt
            || frame.len() as u64 > BUF_SIZE
            || frame.len() > MAX_FRAME
        {
            self.counters.rx_dropped += 1;
            return false;
        }
        let idx = self.regs.rdh;
        let Some(off) = self.desc_offset(Queue::Rx, idx) else {
            self.counters.rx_dropped += 1;
            return false;
        };
        let mut d = RxDescriptor::from_bytes(&self.desc_bytes(off));
        if !bus.dma_write(d.addr, frame) {
            self.counters.rx_dropped += 1;
            return false;
        }
        d.length = frame.len() as u16;
        d.checksum = 0;
        d.errors = 0;
        d.status = DESC_DD | RX_STATUS_EOP;
        self.put_desc_bytes(off, d.to_bytes());
        if let Some(log) = self.dd_log.as_mut() {
            log.push((Queue::Rx, idx));
        }
        self.regs.rdh = (idx + 1) % n;
        self.regs.icr |= ICR_RXT0;
        self.counters.rx_frames += 1;
        true
    }

    fn read_window(&self, offset: u64, width: u64) -> u64 {
        let i = (offset - DESC_WINDOW) as usize;
        let mut b = [0u8; 8];
        let w = width as usize;
        if i + w <= self.desc_mem.len() {
            b[..w].copy_from_slice(&self.desc_mem[i..i + w]);
        }
        u64::from_le_bytes(b)
    }

    fn write_window(&mut self, offset: u64, width: u64, value: u64) {
        let i = (offset - DESC_WINDOW) as usize;
        let w = width as usize;
        if i + w <= self.desc_mem.len() {
            self.desc_mem[i..i + w].copy_from_slice(&value.to_le_bytes()[..w]);
        }
    }
}

impl MmioDevice for NicModel {
    fn mmio_read(&mut self, offset: u64, width: u64, _bus: &mut DmaBus<'_>) -> u64 {
        self.counters.mmio_reads += 1;
        if (DESC_WINDOW..DESC_WINDOW + DESC_WINDOW_LEN).contains(&offset) {
            return self.read_window(offset, width);
        }
        let reg = offset & !3;
        let Some(v) = self.reg_ref(reg) else {
            return 0;
        };
        if reg == REG_ICR {
            // read-to-clear
            self.regs.icr = 0;
        }
        let shifted = (v as u64) >> ((offset % 4) * 8);
        if width >= 4 {
            shifted
        } else {
            shifted & ((1u64 << (width * 8)) - 1)
        }
    }

    fn mmio_write(&mut self, offset: u64, width: u64, value: u64, bus: &mut DmaBus<'_>) {
        self.counters.mmio_writes += 1;
        if (DESC_WINDOW..DESC_WINDOW + DESC_WINDOW_LEN).contains(&offset) {
            self.write_window(offset, width, value);
            return;
        }
        let reg = offset & !3;
        let Some(old) = self.reg_ref(reg) else {
            return;
        };
        let v = merge(old, value, width, offset);
        let r = &mut self.regs;
        match reg {
            REG_CTRL => {
                r.ctrl = v;
                self.refresh_status();
            }
            REG_STATUS => {}
            REG_ICR => r.icr &= !v,
            REG_IMS => r.ims |= v,
            REG_RCTL => r.rctl = v,
            REG_TCTL => {
                r.tctl = v;
                self.process_tx(bus);
            }
            REG_RDBAL => r.rdbal = v & !0xf,
            REG_RDBAH => r.rdbah = v,
            REG_RDLEN => r.rdlen = v & !0x7f,
            REG_RDH => r.rdh = v,
            REG_TDBAL => r.tdbal = v & !0xf,
            REG_TDBAH => r.tdbah = v,
            REG_TDLEN => r.tdlen = v & !0x7f,
            REG_TDH => r.tdh = v,
            REG_RDT => {
                if v < Self::ring_len(r.rdlen) {
                    r.rdt = v;
                }
            }
            REG_TDT if v < Self::ring_len(r.tdlen) => {
                r.tdt = v;
                self.process_tx(bus);
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Ethernet preamble, start delimiter and inter-frame gap, in bytes.
pub const WIRE_OVERHEAD: usize = 20;
/// Minimum frame on the wire, without FCS.
pub const MIN_FRAME: usize = 60;
pub const FCS_LEN: usize = 4;
/// Byte time at 1 Gb/s.
pub const GIGABIT_NS_PER_BYTE: f64 = 8.0;

/// Bytes a frame occupies on the wire, padding and framing included.
pub fn wire_bytes(frame_len: usize) -> usize {
    frame_len.max(MIN_FRAME) + FCS_LEN + WIRE_OVERHEAD
}

/// Two unidirectional FIFO queues with a propagation delay and, optionally,
/// a serialisation rate.
#[derive(Debug)]
pub struct FrameLink {
    delay_ns: f64,
    ns_per_byte: f64,
    queues: [VecDeque<WireFrame>; 2],
    wire_free: [SimTime; 2],
}

/// Which end of a [`FrameLink`] a frame leaves from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkEnd {
    A,
    B,
}

impl FrameLink {
    /// A link with propagation delay only.
    pub fn new(delay_ns: f64) -> Self {
        Self::with_rate(delay_ns, 0.0)
    }

    /// A link that also serialises frames at `ns_per_byte`.
    pub fn with_rate(delay_ns: f64, ns_per_byte: f64) -> Self {
        FrameLink {
            delay_ns,
            ns_per_byte: ns_per_byte.max(0.0),
            queues: [VecDeque::new(), VecDeque::new()],
            wire_free: [SimTime::ZERO; 2],
        }
    }

    fn q(from: LinkEnd) -> usize {
        match from {
            LinkEnd::A => 0,
            LinkEnd::B => 1,
        }
    }

    /// Puts a frame on the wire; returns its arrival time at the far end.
    pub fn send(&mut self, from: LinkEnd, frame: WireFrame) -> SimTime {
        let i = Self::q(from);
        let start = frame.at.max(self.wire_free[i]);
        let done = if self.ns_per_byte > 0.0 {
            start.plus_ns(self.ns_per_byte * wire_bytes(frame.bytes.len()) as f64)
        } else {
            start
        };
        self.wire_free[i] = done;
        let q = &mut self.queues[i];
        let mut arrive = done.plus_ns(self.delay_ns);
        // FIFO: never overtake the frame ahead
        if let Some(last) = q.back() {
            arrive = arrive.max(last.at);
        }
        q.push_back(WireFrame {
            at: arrive,
            bytes: frame.bytes,
        });
        arrive
    }

    /// Frames sent from `from` that have arrived by `now`.
    pub fn arrived(&mut self, from: LinkEnd, now: SimTime) -> Vec<Vec<u8>> {
        let q = &mut self.queues[Self::q(from)];
        let mut out = Vec::new();
        while q.front().is_some_and(|f| f.at <= now) {
            out.push(q.pop_front().unwrap().bytes);
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }
}
