use capio::driver::IoPath;
use capio::harness::{run_sweep, SweepConfig};
use capio::kernel::{KernelError, Machine};
use capio::manifest::{Manifest, E1000E_MANIFEST};
use capio::physmem::AccessCostTable;

fn boot() -> Machine {
    Machine::boot(
        AccessCostTable::default(),
        [2, 0, 0, 0, 0, 1],
        Manifest::parse(E1000E_MANIFEST).unwrap(),
    )
    .unwrap()
}

#[test]
fn attach_map_unmap_detach() {
    let mut m = boot();
    let t = m.kernel.attach(&mut m.space, 5, "e1000e").unwrap();
    let table = m.kernel.map_mmio(&mut m.space, &t).unwrap();
    let bufs = m.kernel.map_buffers(&mut m.space, &t).unwrap();
    assert_eq!(bufs.tx.len(), 64);
    assert_eq!(
        m.kernel.map_buffers(&mut m.space, &t),
        Err(KernelError::Denied)
    );
    m.kernel
        .unmap_mmio(&mut m.space, &t, table.sealed_root())
        .unwrap();
    m.kernel.detach(&t).unwrap();
    assert_eq!(
        m.kernel.map_mmio(&mut m.space, &t),
        Err(KernelError::Denied)
    );
    assert_eq!(m.kernel.detach(&t), Err(KernelError::Denied));
}

#[test]
fn two_processes_get_distinct_tokens() {
    let mut m = boot();
    let a = m.kernel.attach(&mut m.space, 1, "e1000e").unwrap();
    let b = m.kernel.attach(&mut m.space, 2, "e1000e").unwrap();
    m.kernel.detach(&a).unwrap();
    assert_eq!(m.kernel.token_owner(&b), Ok(2));
    assert!(m.kernel.map_mmio(&mut m.space, &b).is_ok());
}

#[test]
fn sweep_is_deterministic_and_bypass_stays_out_of_the_kernel() {
    let cfg = SweepConfig {
        packet_sizes: vec![1, 256, 1472],
        delays_us: vec![0, 1000],
        trials: 100,
        ..SweepConfig::default()
    };
    let a = run_sweep(&cfg).unwrap();
    let b = run_sweep(&cfg).unwrap();
    assert_eq!(a.results_csv(), b.results_csv());
    assert_eq!(a.improvement_csv(), b.improvement_csv());
    for r in &a.rows {
        assert_eq!(r.drops, 0);
        match r.mode {
            IoPath::Bypass => assert_eq!(r.sut_kernel_calls, 0),
            IoPath::Mediated => assert_eq!(r.sut_kernel_calls, 2 * 100),
        }
    }
    assert!(a.cells.iter().all(|c| c.improvement_pct > 0.0));
}

#[test]
fn zero_kernel_costs_erase_the_gap() {
    let mut cfg = SweepConfig {
        packet_sizes: vec![1, 1472],
        delays_us: vec![0],
        trials: 50,
        ..SweepConfig::default()
    };
    cfg.costs.syscall_ns = 0.0;
    cfg.costs.copy_per_byte_ns = 0.0;
    let r = run_sweep(&cfg).unwrap();
    for c in &r.cells {
        assert!(c.improvement_pct.abs() < 1.0, "{c:?}");
    }
}
