use proptest::prelude::*;

use capio::capability::{derive_bounds, restrict_perms, Perms};
use capio::manifest::{Manifest, Repeat, SliceEntry, SlicePerm};
use capio::netstack::{decode_udp, echo_step, encode_udp, UdpEndpoint, MAX_PAYLOAD};
use capio::physmem::{AccessCostTable, PhysSpace};
use capio::slicer::{audit_reachability, manifest_reachability, Slicer, SLICER_OTYPE};

#[derive(Clone, Debug)]
enum Step {
    Derive { shift: u64, len: u64, outside: bool },
    Restrict(u8),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (any::<u64>(), any::<u64>(), any::<bool>()).prop_map(|(shift, len, outside)| {
            Step::Derive {
                shift,
                len,
                outside,
            }
        }),
        (0u8..64).prop_map(Step::Restrict),
    ]
}

proptest! {
    #[test]
    fn derivation_never_amplifies(steps in prop::collection::vec(step(), 1..12)) {
        let (mut space, minter) = PhysSpace::new(0x10000, AccessCostTable::default());
        space.add_ram(0, 0x10000).unwrap();
        let mut cap = space.issue_root(&minter, 0, 0x10000, Perms::ALL).unwrap();
        for s in steps {
            let parent = cap;
            cap = match s {
                Step::Restrict(bits) => restrict_perms(parent, Perms::from_bits(bits)),
                Step::Derive { shift, len, outside } => {
                    let plen = parent.length();
                    if outside {
                        // one byte past the parent's top
                        let base = parent.base() + shift % (plen + 1);
                        let len = parent.top() - base + 1;
                        let c = derive_bounds(parent, base, len);
                        prop_assert!(!c.tag());
                        c
                    } else {
                        let off = if plen == 0 { 0 } else { shift % plen };
                        let len = if plen == off { 0 } else { len % (plen - off + 1) };
                        derive_bounds(parent, parent.base() + off, len)
                    }
                }
            };
            if cap.tag() {
                prop_assert!(parent.tag());
                prop_assert!(cap.base() >= parent.base() && cap.top() <= parent.top());
                prop_assert!(parent.perms().contains(cap.perms()));
            }
        }
    }
}

#[derive(Clone, Debug)]
struct EntryGen {
    gap: u64,
    size: u64,
    perm: SlicePerm,
    count: u32,
    interleave: Option<SlicePerm>,
}

fn perm() -> impl Strategy<Value = SlicePerm> {
    prop_oneof![
        Just(SlicePerm::Rw),
        Just(SlicePerm::Ro),
        Just(SlicePerm::Kernel)
    ]
}

fn entry_gen() -> impl Strategy<Value = EntryGen> {
    (
        0u64..64,
        1u64..24,
        perm(),
        1u32..5,
        prop::option::of(perm()),
    )
        .prop_map(|(gap, size, perm, count, interleave)| EntryGen {
            gap,
            size,
            perm,
            count,
            interleave,
        })
}

/// Packs entries one after another; an interleaved companion takes the
/// second half of every stride.
fn build(specs: &[EntryGen], tail: u64) -> Manifest {
    let mut entries = Vec::new();
    let mut at = 0;
    for (i, s) in specs.iter().enumerate() {
        let offset = at + s.gap;
        let stride = if s.interleave.is_some() {
            2 * s.size
        } else {
            s.size
        };
        let repeat = (s.count > 1).then_some(Repeat {
            count: s.count,
            stride,
        });
        entries.push(SliceEntry {
            name: format!("R{i}"),
            offset,
            size: s.size,
            perm: s.perm,
            repeat,
        });
        if let Some(p) = s.interleave {
            entries.push(SliceEntry {
                name: format!("I{i}"),
                offset: offset + s.size,
                size: s.size,
                perm: p,
                repeat: Some(Repeat {
                    count: s.count,
                    stride,
                }),
            });
        }
        at = offset + stride * s.count as u64;
    }
    Manifest {
        device_name: "dev".into(),
        bar_length: at + tail,
        entries,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slices_match_manifest(specs in prop::collection::vec(entry_gen(), 0..8), tail in 0u64..32) {
        let m = build(&specs, tail);
        prop_assert_eq!(m.validate(), Ok(()));
        let bar = m.bar_length.max(1);
        let base = 0x1000;
        let (mut space, minter) = PhysSpace::new(base + bar, AccessCostTable::default());
        space.add_ram(base, bar).unwrap();
        let root = space.issue_root(&minter, base, bar, Perms::RW).unwrap();
        let sealing = space.issue_sealing_root(&minter);
        let table = Slicer::new(sealing).slice(root, &m).unwrap();
        prop_assert_eq!(table.sealed_root().otype(), SLICER_OTYPE);
        let seen = audit_reachability(&table, m.bar_length);
        let oracle = manifest_reachability(&m, m.bar_length);
        prop_assert!(seen.mismatches(&oracle).is_empty());
        for s in table.slices() {
            prop_assert!(!s.cap.perms().contains(Perms::LOAD_CAP));
            prop_assert!(!s.cap.perms().contains(Perms::STORE_CAP));
        }
    }

    #[test]
    fn manifest_text_round_trips(specs in prop::collection::vec(entry_gen(), 0..8), tail in 0u64..32) {
        let m = build(&specs, tail);
        let back = Manifest::parse(&m.to_string()).unwrap();
        prop_assert_eq!(back, m);
    }
}

fn endpoint() -> impl Strategy<Value = UdpEndpoint> {
    (any::<[u8; 6]>(), any::<[u8; 4]>(), any::<u16>()).prop_map(|(mac, ipv4, port)| UdpEndpoint {
        mac,
        ipv4,
        port,
    })
}

proptest! {
    #[test]
    fn udp_round_trip(
        src in endpoint(),
        dst in endpoint(),
        payload in prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD),
    ) {
        let f = encode_udp(&src, &dst, &payload).unwrap();
        let d = decode_udp(&f).unwrap();
        prop_assert_eq!(d.src, src);
        prop_assert_eq!(d.dst, dst);
        prop_assert_eq!(d.payload, payload.as_slice());

        let echoed = echo_step(&f).unwrap();
        let e = decode_udp(&echoed).unwrap();
        prop_assert_eq!(e.src, dst);
        prop_assert_eq!(e.dst, src);
        prop_assert_eq!(e.payload, payload.as_slice());
    }
}
