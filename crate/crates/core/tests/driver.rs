use capio::capability::FaultKind;
use capio::driver::{Driver, DriverError, IoPath};
use capio::kernel::Machine;
use capio::manifest::{Manifest, E1000E_MANIFEST};
use capio::netstack::{decode_udp, encode_udp, UdpEndpoint};
use capio::nic::{NicModel, Queue, REG_RDT, REG_TCTL, REG_TDH, RING_SIZE, TCTL_EN};
use capio::physmem::{AccessCostTable, MmioDevice};

fn machine(costs: AccessCostTable) -> (Machine, Driver) {
    let manifest = Manifest::parse(E1000E_MANIFEST).unwrap();
    let mut m = Machine::boot(costs, [2, 0, 0, 0, 0, 1], manifest).unwrap();
    let d = Driver::attach(&mut m.kernel, &mut m.space, 1, "e1000e").unwrap();
    (m, d)
}

/// Writes a NIC register behind the driver's back, as the kernel would.
fn kernel_write(m: &mut Machine, offset: u64, value: u64) {
    m.space
        .with_device::<NicModel, _>(m.nic, |n, bus| n.mmio_write(offset, 4, value, bus))
        .unwrap();
}

fn frame(n: u8, len: usize) -> Vec<u8> {
    let a = UdpEndpoint {
        mac: [2, 0, 0, 0, 0, 2],
        ipv4: [10, 0, 0, 2],
        port: 9000 + n as u16,
    };
    let b = UdpEndpoint {
        mac: [2, 0, 0, 0, 0, 1],
        ipv4: [10, 0, 0, 1],
        port: 7,
    };
    encode_udp(&a, &b, &vec![n; len]).unwrap()
}

#[test]
fn send_puts_frame_on_wire() {
    let (mut m, mut d) = machine(AccessCostTable::default());
    let f = frame(1, 100);
    d.send(&mut m.space, &f).unwrap();
    let out = m.nic_mut().take_outbox();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].bytes, f);
    assert_eq!(d.tx_tail_shadow(), 1);
    assert_eq!(m.nic().reg(REG_TDH), 1);
}

#[test]
fn full_ring_is_busy() {
    let (mut m, mut d) = machine(AccessCostTable::default());
    kernel_write(&mut m, REG_TCTL, 0);
    // TDT == TDH means empty, so one slot always stays free
    for i in 0..RING_SIZE - 1 {
        d.send(&mut m.space, &frame(i as u8, 10)).unwrap();
    }
    assert_eq!(d.send(&mut m.space, &frame(0, 10)), Err(DriverError::Busy));
    assert!(m.nic_mut().take_outbox().is_empty());

    kernel_write(&mut m, REG_TCTL, TCTL_EN as u64);
    assert_eq!(m.nic_mut().take_outbox().len(), (RING_SIZE - 1) as usize);
    d.send(&mut m.space, &frame(9, 10)).unwrap();
    assert_eq!(m.nic_mut().take_outbox().len(), 1);
}

#[test]
fn oversized_frame_refused() {
    let (mut m, mut d) = machine(AccessCostTable::default());
    assert_eq!(
        d.send(&mut m.space, &[0; 2049]),
        Err(DriverError::FrameTooLarge(2049))
    );
}

#[test]
fn receive_many_in_order() {
    let (mut m, mut d) = machine(AccessCostTable::default());
    let mut got = Vec::new();
    for i in 0..200u32 {
        assert!(m.deliver(&frame(i as u8, 20 + (i as usize % 50))));
        if i % 7 == 6 {
            got.extend(d.poll_recv(&mut m.space).unwrap());
        }
    }
    got.extend(d.poll_recv(&mut m.space).unwrap());
    assert_eq!(got.len(), 200);
    for (i, f) in got.iter().enumerate() {
        assert_eq!(f, &frame(i as u8, 20 + i % 50));
        assert!(decode_udp(f).is_ok());
    }
    assert_eq!(m.nic().reg(REG_RDT) as usize, d.rx_tail_shadow());
    assert_eq!(m.nic().counters().rx_dropped, 0);
}

#[test]
fn receive_overflow_drops() {
    let (mut m, mut d) = machine(AccessCostTable::default());
    let mut accepted = 0;
    for i in 0..100 {
        if m.deliver(&frame(i, 10)) {
            accepted += 1;
        }
    }
    assert_eq!(accepted, RING_SIZE - 1);
    assert_eq!(m.nic().counters().rx_dropped, 100 - (RING_SIZE - 1) as u64);
    assert_eq!(d.poll_recv(&mut m.space).unwrap().len(), accepted as usize);
}

#[test]
fn mediated_matches_bypass_without_kernel_costs() {
    let costs = AccessCostTable {
        syscall_ns: 0.0,
        copy_per_byte_ns: 0.0,
        ..AccessCostTable::default()
    };
    let f = frame(3, 300);
    let mut deltas = Vec::new();
    for path in [IoPath::Bypass, IoPath::Mediated] {
        let (mut m, mut d) = machine(costs);
        m.deliver(&f);
        let t0 = m.space.now();
        let got = d.recv_via(path, &mut m.kernel, &mut m.space).unwrap();
        assert_eq!(got, vec![f.clone()]);
        d.send_via(path, &mut m.kernel, &mut m.space, &f).unwrap();
        deltas.push(m.space.now().saturating_sub(t0));
        assert_eq!(m.nic_mut().take_outbox()[0].bytes, f);
    }
    assert_eq!(deltas[0], deltas[1]);
}

#[test]
fn mediated_costs_more_by_default() {
    let f = frame(3, 64);
    let mut deltas = Vec::new();
    for path in [IoPath::Bypass, IoPath::Mediated] {
        let (mut m, mut d) = machine(AccessCostTable::default());
        m.deliver(&f);
        let t0 = m.space.now();
        d.recv_via(path, &mut m.kernel, &mut m.space).unwrap();
        d.send_via(path, &mut m.kernel, &mut m.space, &f).unwrap();
        deltas.push(m.space.now().saturating_sub(t0).as_ns());
    }
    // four crossings and two payload copies
    let extra = 4.0 * 180.0 + 2.0 * 0.25 * f.len() as f64;
    assert!((deltas[1] - deltas[0] - extra).abs() < 1e-6, "{deltas:?}");
}

#[test]
fn rebinding_a_descriptor() {
    let (mut m, mut d) = machine(AccessCostTable::default());
    let target = d.handles().rx_bufs[10];
    d.set_desc_buffer(&mut m.kernel, &mut m.space, Queue::Tx, 0, target)
        .unwrap();
    assert_eq!(m.nic().tx_desc(0).unwrap().addr, target.base());
    let f = frame(5, 40);
    d.send(&mut m.space, &f).unwrap();
    assert_eq!(m.nic_mut().take_outbox()[0].bytes, f);
    assert_eq!(
        m.space.peek_ram(target.base(), f.len() as u64).unwrap(),
        &f[..]
    );
}

#[test]
fn head_registers_unreachable() {
    let (mut m, d) = machine(AccessCostTable::default());
    let tdt = d.handles().tdt;
    let tdh = tdt.base() - 8;
    let err = m.space.store(&tdt.with_cursor(tdh), 4, 0).unwrap_err();
    assert_eq!(err.kind, FaultKind::BoundsViolation);
    assert_eq!(err.address, tdh);
    assert!(d.slices().get("TDH").is_none());
}
