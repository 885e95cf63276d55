//! Isolation scenarios and the virtual-time echo latency sweep.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::capability::{Capability, FaultKind};
use crate::driver::{Driver, DriverError, IoPath};
use crate::kernel::{AttachToken, KernelError, Machine};
use crate::manifest::{Manifest, E1000E_MANIFEST, MINIMAL_MANIFEST};
use crate::netstack::{decode_udp, echo_step, encode_udp, UdpEndpoint, MAX_PAYLOAD};
use crate::nic::{FrameLink, LinkEnd, Queue, BAR_LENGTH, GIGABIT_NS_PER_BYTE};
use crate::physmem::{AccessCostTable, SimTime};
use crate::slicer::{audit_reachability, manifest_reachability, SliceTable};

pub const SUT_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
pub const PEER_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x02];

pub const SUT: UdpEndpoint = UdpEndpoint {
    mac: SUT_MAC,
    ipv4: [10, 0, 0, 1],
    port: 7,
};

/// Peer source ports start here; each outstanding packet gets its own.
const PEER_PORT_BASE: u16 = 20000;
const PEER_PORTS: usize = 32768;

/// Base the golden slice dump is printed at.
pub const DUMP_BASE: u64 = 0x40add000;

/// Slice lines the three-entry example manifest must produce.
pub const SLICE_DUMP_GOLDEN: &str = "\
CTRL:   0x40add000, len=4, Read+Write
STATUS: 0x40add008, len=4, Read Only
TDT:    0x40ae0818, len=4, Read+Write
";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("packet size {0} exceeds {MAX_PAYLOAD}")]
    SizeTooLarge(usize),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("window must be between 1 and {PEER_PORTS}")]
    BadWindow,
    #[error("nothing to sweep")]
    Empty,
    #[error("manifest rejected: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub packet_sizes: Vec<usize>,
    pub delays_us: Vec<u64>,
    pub trials: usize,
    pub modes: Vec<IoPath>,
    pub seed: u64,
    pub costs: AccessCostTable,
    /// One-way propagation delay.
    pub link_ns: f64,
    /// Serialisation time per byte on the wire; 8 ns is 1 Gb/s.
    pub wire_ns_per_byte: f64,
    /// Most packets the peer keeps outstanding. At 1 the peer sends the next
    /// packet once the echo is back and `delay` has passed.
    pub window: usize,
    pub manifest: Manifest,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            packet_sizes: vec![1, 16, 64, 128, 256, 512, 1024, 1472],
            delays_us: vec![0, 100, 1000, 5000, 10000],
            trials: 1000,
            modes: vec![IoPath::Bypass, IoPath::Mediated],
            seed: 0x00CA_F10E,
            costs: AccessCostTable::default(),
            link_ns: 1000.0,
            wire_ns_per_byte: GIGABIT_NS_PER_BYTE,
            window: 1,
            manifest: Manifest::parse(E1000E_MANIFEST).expect("shipped manifest parses"),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(&s) = self.packet_sizes.iter().find(|&&s| s > MAX_PAYLOAD) {
            return Err(ConfigError::SizeTooLarge(s));
        }
        if self.trials == 0 {
            return Err(ConfigError::NoTrials);
        }
        if self.window == 0 || self.window > PEER_PORTS {
            return Err(ConfigError::BadWindow);
        }
        if self.packet_sizes.is_empty() || self.delays_us.is_empty() || self.modes.is_empty() {
            return Err(ConfigError::Empty);
        }
        self.manifest
            .validate()
            .map_err(|v| ConfigError::Manifest(format!("{} violation(s)", v.len())))
    }

    fn cell_seed(&self, size: usize, delay_us: u64) -> u64 {
        self.seed ^ (size as u64) << 40 ^ delay_us.rotate_left(17)
    }
}

/// Nearest-rank percentile of an ascending slice; 0 for an empty one.
pub fn nearest_rank(sorted: &[u64], pct: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn improvement_pct(mediated_p99: u64, bypass_p99: u64) -> f64 {
    if mediated_p99 == 0 {
        return 0.0;
    }
    100.0 * (mediated_p99 as f64 - bypass_p99 as f64) / mediated_p99 as f64
}

/// What one echo run observed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EchoRun {
    /// Round trip of every matched echo, in send order.
    pub rtts_ns: Vec<u64>,
    /// Frames the peer's NIC put on the wire.
    pub sent: u64,
    /// Frames the peer's driver got back.
    pub received: u64,
    /// Frames lost somewhere on the path, by drop counters.
    pub dropped: u64,
    /// Echoes whose payload differed from what was sent.
    pub corrupt: u64,
    /// Packets that never came back, by sequence accounting.
    pub lost: u64,
    /// Interface calls the system under test made after attaching.
    pub sut_kernel_calls: u64,
}

impl EchoRun {
    pub fn conserved(&self) -> bool {
        self.sent == self.received + self.dropped
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ev {
    PeerSend,
    PeerPoll,
    SutPoll,
    Arrive(Side),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Sut,
    Peer,
}

struct Events {
    heap: BinaryHeap<Reverse<(SimTime, u64, usize)>>,
    kinds: Vec<Ev>,
}

impl Events {
    fn new() -> Self {
        Events {
            heap: BinaryHeap::new(),
            kinds: Vec::new(),
        }
    }

    fn push(&mut self, at: SimTime, ev: Ev) {
        let seq = self.kinds.len();
        self.kinds.push(ev);
        self.heap.push(Reverse((at, seq as u64, seq)));
    }

    fn pop(&mut self) -> Option<(SimTime, Ev)> {
        self.heap.pop().map(|Reverse((t, _, i))| (t, self.kinds[i]))
    }
}

struct Host {
    m: Machine,
    drv: Driver,
}

impl Host {
    fn boot(
        costs: AccessCostTable,
        mac: [u8; 6],
        manifest: &Manifest,
    ) -> Result<Host, DriverError> {
        let mut m = Machine::boot(costs, mac, manifest.clone())?;
        let drv = Driver::attach(&mut m.kernel, &mut m.space, 1, &manifest.device_name)?;
        Ok(Host { m, drv })
    }

    fn recv(&mut self, path: IoPath) -> Vec<Vec<u8>> {
        self.drv
            .recv_via(path, &mut self.m.kernel, &mut self.m.space)
            .unwrap_or_default()
    }

    fn send(&mut self, path: IoPath, frame: &[u8]) -> bool {
        self.drv
            .send_via(path, &mut self.m.kernel, &mut self.m.space, frame)
            .is_ok()
    }

    /// Moves everything the NIC transmitted onto the link; returns the
    /// arrival times.
    fn flush(&mut self, link: &mut FrameLink, from: LinkEnd) -> Vec<SimTime> {
        let out = self.m.nic_mut().take_outbox();
        out.into_iter().map(|f| link.send(from, f)).collect()
    }

    fn deliver_arrived(&mut self, link: &mut FrameLink, from: LinkEnd, now: SimTime) -> u64 {
        let mut dropped = 0;
        for f in link.arrived(from, now) {
            if !self.m.deliver(&f) {
                dropped += 1;
            }
        }
        dropped
    }
}

struct Outstanding {
    seq: usize,
    sent_at: SimTime,
    payload: Vec<u8>,
}

/// Runs `trials` echoes of `size`-byte payloads, the peer starting one every
/// `delay_us` (or as soon as it can, at zero), the system under test
/// echoing through `path`.
pub fn run_echo(
    cfg: &SweepConfig,
    path: IoPath,
    size: usize,
    delay_us: u64,
) -> Result<EchoRun, DriverError> {
    let mut sut = Host::boot(cfg.costs, SUT_MAC, &cfg.manifest)?;
    let mut peer = Host::boot(cfg.costs, PEER_MAC, &cfg.manifest)?;
    let calls_at_attach = sut.m.kernel.invocations();
    let mut link = FrameLink::with_rate(cfg.link_ns, cfg.wire_ns_per_byte);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.cell_seed(size, delay_us));
    let delay_ns = delay_us as f64 * 1000.0;

    let peer_ep = |port: u16| UdpEndpoint {
        mac: PEER_MAC,
        ipv4: [10, 0, 0, 2],
        port,
    };

    let mut ev = Events::new();
    let mut run = EchoRun::default();
    let mut outstanding: HashMap<u16, Outstanding> = HashMap::new();
    let mut rtts: Vec<(usize, u64)> = Vec::with_capacity(cfg.trials);
    let mut next_seq = 0usize;
    let mut next_at = SimTime::ZERO;
    let mut peer_waiting = false;
    let mut sut_poll_pending = false;
    let mut peer_poll_pending = false;
    let mut sut_dropped = 0u64;

    ev.push(SimTime::ZERO, Ev::PeerSend);
    while let Some((t, e)) = ev.pop() {
        match e {
            Ev::PeerSend => {
                peer.m.space.advance_to(t);
                if outstanding.len() >= cfg.window {
                    peer_waiting = true;
                    continue;
                }
                let seq = next_seq;
                next_seq += 1;
                let mut payload = vec![0u8; size];
                rng.fill_bytes(&mut payload);
                let port = PEER_PORT_BASE + (seq % PEER_PORTS) as u16;
                let frame = encode_udp(&peer_ep(port), &SUT, &payload).expect("size validated");
                let sent_at = peer.m.space.now();
                if peer.send(IoPath::Bypass, &frame) {
                    outstanding.insert(
                        port,
                        Outstanding {
                            seq,
                            sent_at,
                            payload,
                        },
                    );
                    for at in peer.flush(&mut link, LinkEnd::B) {
                        ev.push(at, Ev::Arrive(Side::Sut));
                    }
                }
                if next_seq < cfg.trials {
                    next_at = sent_at.plus_ns(delay_ns).max(peer.m.space.now());
                    ev.push(next_at, Ev::PeerSend);
                }
            }
            Ev::Arrive(Side::Sut) => {
                sut_dropped += sut.deliver_arrived(&mut link, LinkEnd::B, t);
                if !sut_poll_pending {
                    sut_poll_pending = true;
                    ev.push(t.max(sut.m.space.now()), Ev::SutPoll);
                }
            }
            Ev::SutPoll => {
                sut_poll_pending = false;
                sut.m.space.advance_to(t);
                for f in sut.recv(path) {
                    match echo_step(&f) {
                        Some(reply) if sut.send(path, &reply) => {}
                        _ => sut_dropped += 1,
                    }
                }
                for at in sut.flush(&mut link, LinkEnd::A) {
                    ev.push(at, Ev::Arrive(Side::Peer));
                }
            }
            Ev::Arrive(Side::Peer) => {
                run.dropped += peer.deliver_arrived(&mut link, LinkEnd::A, t);
                if !peer_poll_pending {
                    peer_poll_pending = true;
                    ev.push(t.max(peer.m.space.now()), Ev::PeerPoll);
                }
            }
            Ev::PeerPoll => {
                peer_poll_pending = false;
                peer.m.space.advance_to(t);
                let frames = peer.recv(IoPath::Bypass);
                let now = peer.m.space.now();
                for f in frames {
                    run.received += 1;
                    let Ok(d) = decode_udp(&f) else {
                        run.corrupt += 1;
                        continue;
                    };
                    let Some(o) = outstanding.remove(&d.dst.port) else {
                        run.corrupt += 1;
                        continue;
                    };
                    if d.payload != o.payload.as_slice() || d.src != SUT {
                        run.corrupt += 1;
                        continue;
                    }
                    rtts.push((o.seq, now.saturating_sub(o.sent_at).as_ns() as u64));
                }
                if peer_waiting && outstanding.len() < cfg.window {
                    peer_waiting = false;
                    ev.push(next_at.max(now), Ev::PeerSend);
                }
            }
        }
    }

    let sut_nic = sut.m.nic().counters();
    let peer_nic = peer.m.nic().counters();
    run.sent = peer_nic.tx_frames;
    run.dropped += sut_dropped + sut_nic.tx_errors;
    run.lost = (cfg.trials - rtts.len()) as u64;
    rtts.sort_by_key(|&(seq, _)| seq);
    run.rtts_ns = rtts.into_iter().map(|(_, r)| r).collect();
    run.sut_kernel_calls = sut.m.kernel.invocations() - calls_at_attach;
    Ok(run)
}

/// One CSV row: a (mode, size, delay) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub mode: IoPath,
    pub packet_size: usize,
    pub delay_us: u64,
    pub trials: usize,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub drops: u64,
    pub sut_kernel_calls: u64,
}

impl CellResult {
    /// More than 1% of the trials never came back.
    pub fn flagged(&self) -> bool {
        self.drops * 100 > self.trials as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapCell {
    pub packet_size: usize,
    pub delay_us: u64,
    pub bypass_p50_ns: u64,
    pub bypass_p99_ns: u64,
    pub mediated_p50_ns: u64,
    pub mediated_p99_ns: u64,
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<CellResult>,
    pub cells: Vec<HeatmapCell>,
}

impl SweepReport {
    pub fn cell(&self, size: usize, delay_us: u64) -> Option<&HeatmapCell> {
        self.cells
            .iter()
            .find(|c| c.packet_size == size && c.delay_us == delay_us)
    }

    pub fn results_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mode",
            "packet_size",
            "delay_us",
            "trials",
            "p50_ns",
            "p99_ns",
            "drops",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.mode.name().to_string(),
                r.packet_size.to_string(),
                r.delay_us.to_string(),
                r.trials.to_string(),
                r.p50_ns.to_string(),
                r.p99_ns.to_string(),
                r.drops.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn improvement_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["packet_size", "delay_us", "improvement_pct"])
            .expect("in-memory write");
        for c in &self.cells {
            w.write_record([
                c.packet_size.to_string(),
                c.delay_us.to_string(),
                format!("{:.3}", c.improvement_pct),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.results_csv())?;
        std::fs::write(dir.join("improvement.csv"), self.improvement_csv())
    }

    /// Mean improvement over all sizes, per delay, in sweep order.
    pub fn mean_improvement_by_delay(&self) -> Vec<(u64, f64)> {
        let mut delays: Vec<u64> = Vec::new();
        for c in &self.cells {
            if !delays.contains(&c.delay_us) {
                delays.push(c.delay_us);
            }
        }
        delays
            .into_iter()
            .map(|d| {
                let v: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.delay_us == d)
                    .map(|c| c.improvement_pct)
                    .collect();
                (d, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{mode} {size} B / {delay_us} us: {err}")]
    Cell {
        mode: &'static str,
        size: usize,
        delay_us: u64,
        err: DriverError,
    },
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport, SweepError> {
    cfg.validate()?;
    let mut report = SweepReport::default();
    for &size in &cfg.packet_sizes {
        for &delay_us in &cfg.delays_us {
            let mut p99 = HashMap::new();
            let mut p50 = HashMap::new();
            for &mode in &cfg.modes {
                let run = run_echo(cfg, mode, size, delay_us).map_err(|err| SweepError::Cell {
                    mode: mode.name(),
                    size,
                    delay_us,
                    err,
                })?;
                let mut sorted = run.rtts_ns.clone();
                sorted.sort_unstable();
                let row = CellResult {
                    mode,
                    packet_size: size,
                    delay_us,
                    trials: cfg.trials,
                    p50_ns: nearest_rank(&sorted, 50.0),
                    p99_ns: nearest_rank(&sorted, 99.0),
                    drops: run.lost,
                    sut_kernel_calls: run.sut_kernel_calls,
                };
                p50.insert(mode, row.p50_ns);
                p99.insert(mode, row.p99_ns);
                report.rows.push(row);
            }
            if let (Some(&b99), Some(&m99)) = (p99.get(&IoPath::Bypass), p99.get(&IoPath::Mediated))
            {
                report.cells.push(HeatmapCell {
                    packet_size: size,
                    delay_us,
                    bypass_p50_ns: p50[&IoPath::Bypass],
                    bypass_p99_ns: b99,
                    mediated_p50_ns: p50[&IoPath::Mediated],
                    mediated_p99_ns: m99,
                    improvement_pct: improvement_pct(m99, b99),
                });
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsolationReport {
    pub scenarios: Vec<ScenarioOutcome>,
    /// Slices issued for the manifest under audit, rebased at [`DUMP_BASE`].
    pub slice_dump: String,
    /// (byte, permission) pairs compared by the reachability audit.
    pub audit_checks: u64,
}

impl IsolationReport {
    pub fn passed(&self) -> bool {
        self.scenarios.iter().all(|s| s.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.scenarios {
            let verdict = if s.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{verdict} {}: {}", s.name, s.detail);
        }
        let _ = writeln!(out, "\nslices:");
        out.push_str(&self.slice_dump);
        out
    }
}

fn outcome(name: &'static str, res: Result<String, String>) -> ScenarioOutcome {
    match res {
        Ok(detail) => ScenarioOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => ScenarioOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

fn boot_attached(manifest: &Manifest) -> Result<Host, String> {
    Host::boot(AccessCostTable::default(), SUT_MAC, manifest)
        .map_err(|e| format!("attach failed: {e}"))
}

/// Boots a machine with `manifest` and maps its slices, without needing the
/// registers a driver would.
pub fn map_slices(manifest: &Manifest) -> Result<(Machine, SliceTable), String> {
    let mut m = Machine::boot(AccessCostTable::default(), SUT_MAC, manifest.clone())
        .map_err(|e| format!("kernel stub refused manifest: {e}"))?;
    let token = m
        .kernel
        .attach(&mut m.space, 1, &manifest.device_name)
        .map_err(|e| format!("attach failed: {e}"))?;
    let table = m
        .kernel
        .map_mmio(&mut m.space, &token)
        .map_err(|e| format!("map failed: {e}"))?;
    Ok((m, table))
}

fn slice_dump_golden() -> Result<String, String> {
    let manifest = Manifest::parse(MINIMAL_MANIFEST).map_err(|e| e.to_string())?;
    let (_, table) = map_slices(&manifest)?;
    let dump = table.dump(Some(DUMP_BASE));
    if table.get("IMS").is_some() {
        return Err("IMS was sliced".into());
    }
    if dump == SLICE_DUMP_GOLDEN {
        Ok(format!("{} slices match, IMS absent", table.len()))
    } else {
        Err(format!("dump differs:\n{dump}"))
    }
}

fn offset_attack(manifest: &Manifest) -> Result<String, String> {
    let mut host = boot_attached(manifest)?;
    let ctrl = host.drv.slices().get("CTRL").ok_or("no CTRL slice")?;
    let target = ctrl.cursor() + 0xD0;
    let before = host.m.nic().counters().mmio_writes;
    let fault = match host
        .m
        .space
        .store(&ctrl.with_cursor(target), 4, 0xffff_ffff)
    {
        Ok(()) => return Err("store through CTRL+0xD0 succeeded".into()),
        Err(f) => f,
    };
    if fault.kind != FaultKind::BoundsViolation || fault.address != target {
        return Err(format!(
            "wrong fault {:?} at {:#x}",
            fault.kind, fault.address
        ));
    }
    if host.m.nic().counters().mmio_writes != before {
        return Err("device was written".into());
    }
    Ok(format!("BoundsViolation at {:#x}", fault.address))
}

fn descriptor_attack(manifest: &Manifest) -> Result<String, String> {
    let mut host = boot_attached(manifest)?;
    let layout = host.m.kernel.layout().ok_or("no layout")?;
    let mut tried = 0;
    for (queue, prefix) in [(Queue::Tx, "TXD"), (Queue::Rx, "RXD")] {
        for k in [0u32, 17, 63] {
            let name = format!("{prefix}[{k}]");
            let tail = host
                .drv
                .slices()
                .get(&name)
                .ok_or(format!("no {name} slice"))?;
            let before = host.m.nic().desc_addresses();
            // the address field sits in the 8 bytes below the writable tail
            let field = tail.cursor() - 8;
            match host.m.space.store(&tail.with_cursor(field), 8, 0x60000) {
                Ok(()) => return Err(format!("{name}: address field written")),
                Err(f) if f.kind != FaultKind::BoundsViolation => {
                    return Err(format!("{name}: {:?}", f.kind))
                }
                Err(_) => {}
            }
            if host.m.nic().desc_addresses() != before {
                return Err(format!("{name}: descriptor changed"));
            }
            let expect = match queue {
                Queue::Tx => layout.tx_buf(k),
                Queue::Rx => layout.rx_buf(k),
            };
            let addr = match queue {
                Queue::Tx => host.m.nic().tx_desc(k).map(|d| d.addr),
                Queue::Rx => host.m.nic().rx_desc(k).map(|d| d.addr),
            };
            if addr != Some(expect) {
                return Err(format!("{name}: address is {addr:?}"));
            }
            tried += 1;
        }
    }
    Ok(format!(
        "{tried} address-field stores faulted with BoundsViolation"
    ))
}

fn forged_token(manifest: &Manifest) -> Result<String, String> {
    let mut m = Machine::boot(AccessCostTable::default(), SUT_MAC, manifest.clone())
        .map_err(|e| e.to_string())?;
    let device = manifest.device_name.clone();
    let real = m
        .kernel
        .attach(&mut m.space, 7, &device)
        .map_err(|e| e.to_string())?
        .capability();
    let forged = AttachToken::from_capability(Capability::forge(
        real.base(),
        real.length(),
        real.cursor(),
        real.perms(),
        real.otype(),
    ));
    let before = m.nic().counters().mmio_writes;
    let map = m.kernel.map_mmio(&mut m.space, &forged);
    let bufs = m.kernel.map_buffers(&mut m.space, &forged);
    if map != Err(KernelError::Denied) || bufs != Err(KernelError::Denied) {
        return Err("forged token accepted".into());
    }
    if m.nic().counters().mmio_writes != before {
        return Err("device written on denial".into());
    }
    Ok("map_mmio Denied, no device writes".into())
}

fn reachability(manifest: &Manifest) -> Result<(String, String, u64), String> {
    let (_, table) = map_slices(manifest)?;
    let bar = manifest.bar_length.min(BAR_LENGTH);
    let seen = audit_reachability(&table, bar);
    let oracle = manifest_reachability(manifest, bar);
    let bad = seen.mismatches(&oracle);
    let checks = 2 * bar;
    let dump = table.dump(Some(DUMP_BASE));
    if bad.is_empty() {
        Ok((format!("{checks} checks, 0 mismatches"), dump, checks))
    } else {
        let (off, p) = bad[0];
        Err(format!(
            "{} mismatches over {checks} checks, first at {off:#x} ({p:?})",
            bad.len()
        ))
    }
}

/// Runs the scripted isolation scenarios against `manifest`.
pub fn run_isolation_suite(manifest: &Manifest) -> IsolationReport {
    let mut scenarios = vec![
        outcome("slice-dump", slice_dump_golden()),
        outcome("offset-attack", offset_attack(manifest)),
        outcome("descriptor-attack", descriptor_attack(manifest)),
        outcome("forged-token", forged_token(manifest)),
    ];
    let (audit, slice_dump, audit_checks) = match reachability(manifest) {
        Ok((detail, dump, n)) => (Ok(detail), dump, n),
        Err(e) => (Err(e), String::new(), 0),
    };
    scenarios.push(outcome("reachability-audit", audit));
    IsolationReport {
        scenarios,
        slice_dump,
        audit_checks,
    }
}
