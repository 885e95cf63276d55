//! Userspace e1000e driver.
//!
//! [`RingEngine`] is the TX/RX ring logic, written against a set of
//! capabilities ([`RingHandles`]) rather than a base address. The bypass
//! [`Driver`] feeds it the slices it got from the kernel; the kernel's
//! socket path feeds it capabilities cut from its own root.

use thiserror::Error;

use crate::capability::{CapFault, Capability};
use crate::kernel::{AttachToken, BufferSet, Kernel, KernelError};
use crate::nic::{Queue, BUF_SIZE, DESC_DD, TX_CMD_EOP, TX_CMD_IFCS, TX_CMD_RS};
use crate::physmem::PhysSpace;
use crate::slicer::SliceTable;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DriverError {
    #[error("transmit ring full")]
    Busy,
    #[error("frame of {0} bytes does not fit a buffer")]
    FrameTooLarge(usize),
    #[error("slice `{0}` missing from the mapping")]
    MissingSlice(String),
    #[error(transparent)]
    Fault(#[from] CapFault),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Capabilities the ring logic needs: the two tail registers, the writable
/// tail of every descriptor, and one buffer per descriptor.
#[derive(Clone, Debug)]
pub struct RingHandles {
    pub tdt: Capability,
    pub rdt: Capability,
    pub tx_desc: Vec<Capability>,
    pub rx_desc: Vec<Capability>,
    pub tx_bufs: Vec<Capability>,
    pub rx_bufs: Vec<Capability>,
}

impl RingHandles {
    /// Resolves handles by slice name: `TDT`, `RDT`, `TXD[k]`, `RXD[k]`.
    pub fn from_slices(table: &SliceTable, bufs: &BufferSet) -> Result<Self, DriverError> {
        let get = |name: &str| {
            table
                .get(name)
                .ok_or_else(|| DriverError::MissingSlice(name.to_string()))
        };
        let ring = |prefix: &str, n: usize| -> Result<Vec<Capability>, DriverError> {
            (0..n).map(|k| get(&format!("{prefix}[{k}]"))).collect()
        };
        Ok(RingHandles {
            tdt: get("TDT")?,
            rdt: get("RDT")?,
            tx_desc: ring("TXD", bufs.tx.len())?,
            rx_desc: ring("RXD", bufs.rx.len())?,
            tx_bufs: bufs.tx.clone(),
            rx_bufs: bufs.rx.clone(),
        })
    }
}

// descriptor tail layout (bytes 8..16 of a legacy descriptor)
const TAIL_STATUS_SHIFT: u32 = 32;

fn tx_tail_word(len: usize) -> u64 {
    let cmd = TX_CMD_EOP | TX_CMD_IFCS | TX_CMD_RS;
    len as u64 | (cmd as u64) << 24
}

/// Producer/consumer state for one TX ring and one RX ring.
#[derive(Clone, Debug)]
pub struct RingEngine {
    h: RingHandles,
    tx_tail: usize,
    tx_clean: usize,
    rx_next: usize,
    rx_tail: usize,
}

impl RingEngine {
    /// Assumes the rings were just initialised: TDH = TDT = 0, RDH = 0 and
    /// RDT = n - 1.
    pub fn new(handles: RingHandles) -> Self {
        let rx_tail = handles.rx_desc.len().saturating_sub(1);
        RingEngine {
            h: handles,
            tx_tail: 0,
            tx_clean: 0,
            rx_next: 0,
            rx_tail,
        }
    }

    pub fn handles(&self) -> &RingHandles {
        &self.h
    }

    pub fn tx_tail(&self) -> usize {
        self.tx_tail
    }

    pub fn rx_tail(&self) -> usize {
        self.rx_tail
    }

    fn tx_len(&self) -> usize {
        self.h.tx_desc.len()
    }

    fn rx_len(&self) -> usize {
        self.h.rx_desc.len()
    }

    /// Replaces the buffer paired with a descriptor.
    pub fn rebind(&mut self, queue: Queue, index: usize, buf: Capability) {
        let v = match queue {
            Queue::Tx => &mut self.h.tx_bufs,
            Queue::Rx => &mut self.h.rx_bufs,
        };
        if let Some(slot) = v.get_mut(index) {
            *slot = buf;
        }
    }

    fn desc_status(space: &mut PhysSpace, desc: &Capability) -> Result<(u8, u16), CapFault> {
        let v = space.load(desc, 8)?;
        Ok(((v >> TAIL_STATUS_SHIFT) as u8, v as u16))
    }

    /// Retires the oldest in-flight transmit descriptor if the device is
    /// done with it. One per send keeps the cost flat.
    fn reclaim_one(&mut self, space: &mut PhysSpace) -> Result<(), CapFault> {
        if self.tx_clean == self.tx_tail {
            return Ok(());
        }
        let (status, _) = Self::desc_status(space, &self.h.tx_desc[self.tx_clean])?;
        if status & DESC_DD != 0 {
            self.tx_clean = (self.tx_clean + 1) % self.tx_len();
        }
        Ok(())
    }

    /// Copies `frame` into the next transmit buffer and bumps TDT.
    pub fn send(&mut self, space: &mut PhysSpace, frame: &[u8]) -> Result<(), DriverError> {
        let n = self.tx_len();
        if n == 0 {
            return Err(DriverError::Busy);
        }
        if frame.len() as u64 > BUF_SIZE || frame.len() > u16::MAX as usize {
            return Err(DriverError::FrameTooLarge(frame.len()));
        }
        self.reclaim_one(space)?;
        let next = (self.tx_tail + 1) % n;
        if next == self.tx_clean {
            return Err(DriverError::Busy);
        }
        let slot = self.tx_tail;
        space.store_bytes(&self.h.tx_bufs[slot], frame)?;
        // status byte written as zero: clears DD
        space.store(&self.h.tx_desc[slot], 8, tx_tail_word(frame.len()))?;
        self.tx_tail = next;
        space.store(&self.h.tdt, 4, next as u64)?;
        Ok(())
    }

    /// Drains every completed receive descriptor and hands them back to the
    /// device by moving RDT to the last one consumed.
    pub fn poll_recv(&mut self, space: &mut PhysSpace) -> Result<Vec<Vec<u8>>, DriverError> {
        let n = self.rx_len();
        let mut frames = Vec::new();
        for _ in 0..n {
            let slot = self.rx_next;
            let (status, len) = Self::desc_status(space, &self.h.rx_desc[slot])?;
            if status & DESC_DD == 0 {
                break;
            }
            let len = (len as u64).min(BUF_SIZE);
            frames.push(space.load_bytes(&self.h.rx_bufs[slot], len)?);
            space.store(&self.h.rx_desc[slot], 8, 0)?;
            self.rx_tail = slot;
            self.rx_next = (slot + 1) % n;
        }
        if !frames.is_empty() {
            space.store(&self.h.rdt, 4, self.rx_tail as u64)?;
        }
        Ok(frames)
    }
}

/// How frames travel between the application and the NIC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IoPath {
    /// Straight through the driver's slices.
    Bypass,
    /// Through the kernel's socket path.
    Mediated,
}

impl IoPath {
    pub fn name(self) -> &'static str {
        match self {
            IoPath::Bypass => "bypass",
            IoPath::Mediated => "mediated",
        }
    }
}

/// The userspace driver for one attached NIC.
pub struct Driver {
    token: AttachToken,
    slices: SliceTable,
    engine: RingEngine,
}

impl Driver {
    /// Attaches to `device` and maps its registers, rings and buffers.
    pub fn attach(
        kernel: &mut Kernel,
        space: &mut PhysSpace,
        pid: u32,
        device: &str,
    ) -> Result<Driver, DriverError> {
        let token = kernel.attach(space, pid, device)?;
        let slices = kernel.map_mmio(space, &token)?;
        let bufs = kernel.map_buffers(space, &token)?;
        let engine = RingEngine::new(RingHandles::from_slices(&slices, &bufs)?);
        Ok(Driver {
            token,
            slices,
            engine,
        })
    }

    pub fn token(&self) -> &AttachToken {
        &self.token
    }

    pub fn slices(&self) -> &SliceTable {
        &self.slices
    }

    pub fn handles(&self) -> &RingHandles {
        self.engine.handles()
    }

    /// Last value written to TDT.
    pub fn tx_tail_shadow(&self) -> usize {
        self.engine.tx_tail()
    }

    /// Last value written to RDT.
    pub fn rx_tail_shadow(&self) -> usize {
        self.engine.rx_tail()
    }

    pub fn send(&mut self, space: &mut PhysSpace, frame: &[u8]) -> Result<(), DriverError> {
        self.engine.send(space, frame)
    }

    pub fn poll_recv(&mut self, space: &mut PhysSpace) -> Result<Vec<Vec<u8>>, DriverError> {
        self.engine.poll_recv(space)
    }

    pub fn mediated_send(
        &self,
        kernel: &mut Kernel,
        space: &mut PhysSpace,
        frame: &[u8],
    ) -> Result<(), DriverError> {
        Ok(kernel.mediated_send(space, &self.token, frame)?)
    }

    pub fn mediated_recv(
        &self,
        kernel: &mut Kernel,
        space: &mut PhysSpace,
    ) -> Result<Vec<Vec<u8>>, DriverError> {
        Ok(kernel.mediated_recv(space, &self.token)?)
    }

    pub fn send_via(
        &mut self,
        path: IoPath,
        kernel: &mut Kernel,
        space: &mut PhysSpace,
        frame: &[u8],
    ) -> Result<(), DriverError> {
        match path {
            IoPath::Bypass => self.send(space, frame),
            IoPath::Mediated => self.mediated_send(kernel, space, frame),
        }
    }

    pub fn recv_via(
        &mut self,
        path: IoPath,
        kernel: &mut Kernel,
        space: &mut PhysSpace,
    ) -> Result<Vec<Vec<u8>>, DriverError> {
        match path {
            IoPath::Bypass => self.poll_recv(space),
            IoPath::Mediated => self.mediated_recv(kernel, space),
        }
    }

    /// Points a descriptor at another buffer the process owns, through the
    /// privileged ioctl.
    pub fn set_desc_buffer(
        &mut self,
        kernel: &mut Kernel,
        space: &mut PhysSpace,
        queue: Queue,
        index: u32,
        buf: Capability,
    ) -> Result<(), DriverError> {
        kernel.ioctl_set_desc_addr(space, &self.token, queue, index, buf)?;
        self.engine.rebind(queue, index as usize, buf);
        Ok(())
    }
}
