//! Turns a device root capability and a manifest into per-register slices.

use std::fmt::Write as _;

use thiserror::Error;

use crate::capability::{
    check_access, derive_bounds, restrict_perms, seal, unseal, CapFault, Capability, OType, Perms,
};
use crate::manifest::{Manifest, SlicePerm, Violation};

/// otype binding the sealed root returned with every slice table.
pub const SLICER_OTYPE: OType = OType(1);
/// otype binding attach tokens minted by the kernel interface.
pub const INTERFACE_OTYPE: OType = OType(2);

/// Derives the authority for one otype from the sealing root.
pub fn otype_authority(sealing_root: Capability, otype: OType) -> Capability {
    derive_bounds(sealing_root, otype.0 as u64, 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub name: String,
    pub cap: Capability,
}

/// Slices in manifest order plus the sealed root needed to unmap them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceTable {
    slices: Vec<Slice>,
    sealed_root: Capability,
}

impl SliceTable {
    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<Capability> {
        self.slices.iter().find(|s| s.name == name).map(|s| s.cap)
    }

    pub fn sealed_root(&self) -> Capability {
        self.sealed_root
    }

    /// Base of the mapping the slices were cut from.
    pub fn bar_base(&self) -> u64 {
        self.sealed_root.base()
    }

    /// One line per slice: `NAME: <cursor>, len=<n>, <perms>`.
    ///
    /// With `rebase`, cursors are shown relative to that address instead of
    /// the physical mapping, so dumps compare across layouts.
    pub fn dump(&self, rebase: Option<u64>) -> String {
        let mut out = String::new();
        for s in &self.slices {
            let addr = match rebase {
                Some(b) => s.cap.cursor() - self.bar_base() + b,
                None => s.cap.cursor(),
            };
            let _ = writeln!(
                out,
                "{:<7} {:#010x}, len={}, {}",
                format!("{}:", s.name),
                addr,
                s.cap.length(),
                perm_words(s.cap.perms())
            );
        }
        out
    }
}

pub fn perm_words(p: Perms) -> &'static str {
    match (p.contains(Perms::READ), p.contains(Perms::WRITE)) {
        (true, true) => "Read+Write",
        (true, false) => "Read Only",
        (false, true) => "Write Only",
        (false, false) => "No Access",
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SliceError {
    #[error("root capability is untagged")]
    RootUntagged,
    #[error("root capability is sealed")]
    RootSealed,
    #[error("root capability needs READ and WRITE")]
    RootPerms,
    #[error("root covers {root:#x} bytes but the BAR is {bar:#x}")]
    RootTooSmall { root: u64, bar: u64 },
    #[error("{name} falls outside the root capability")]
    OutsideRoot { name: String },
    #[error("manifest is invalid: {0:?}")]
    InvalidManifest(Vec<Violation>),
    #[error(transparent)]
    Fault(#[from] CapFault),
}

/// The trusted slicing component. Holds the SLICER_OTYPE authority.
pub struct Slicer {
    authority: Capability,
}

impl Slicer {
    pub fn new(sealing_root: Capability) -> Slicer {
        Slicer {
            authority: otype_authority(sealing_root, SLICER_OTYPE),
        }
    }

    pub fn slice(&self, root: Capability, manifest: &Manifest) -> Result<SliceTable, SliceError> {
        if !root.tag() {
            return Err(SliceError::RootUntagged);
        }
        if root.is_sealed() {
            return Err(SliceError::RootSealed);
        }
        if !root.perms().contains(Perms::RW) {
            return Err(SliceError::RootPerms);
        }
        if root.length() < manifest.bar_length {
            return Err(SliceError::RootTooSmall {
                root: root.length(),
                bar: manifest.bar_length,
            });
        }
        manifest.validate().map_err(SliceError::InvalidManifest)?;

        let mut slices = Vec::new();
        for range in manifest.expand() {
            let Some(perms) = range.perm.cap_perms() else {
                continue;
            };
            let base = root.base().checked_add(range.offset);
            let cap = match base {
                Some(b) => restrict_perms(derive_bounds(root, b, range.size), perms),
                None => Capability::NULL,
            };
            if !cap.tag() {
                return Err(SliceError::OutsideRoot { name: range.name });
            }
            slices.push(Slice {
                name: range.name,
                cap,
            });
        }
        let sealed_root = seal(root.with_cursor(root.base()), self.authority)?;
        Ok(SliceTable {
            slices,
            sealed_root,
        })
    }

    /// Recovers the root from a table's sealed root, for teardown.
    pub fn unmap(&self, sealed_root: Capability) -> Result<Capability, CapFault> {
        unseal(sealed_root, self.authority)
    }
}

/// Per-byte reachability over a BAR, for READ and WRITE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReachMap {
    pub read: Vec<bool>,
    pub write: Vec<bool>,
}

impl ReachMap {
    pub fn empty(bar_length: u64) -> ReachMap {
        ReachMap {
            read: vec![false; bar_length as usize],
            write: vec![false; bar_length as usize],
        }
    }

    pub fn bar_length(&self) -> u64 {
        self.read.len() as u64
    }

    /// `(offset, perm)` pairs where the two maps disagree.
    pub fn mismatches(&self, other: &ReachMap) -> Vec<(u64, Perms)> {
        let mut out = Vec::new();
        for (perm, a, b) in [
            (Perms::READ, &self.read, &other.read),
            (Perms::WRITE, &self.write, &other.write),
        ] {
            let n = a.len().max(b.len());
            for i in 0..n {
                if a.get(i).copied().unwrap_or(false) != b.get(i).copied().unwrap_or(false) {
                    out.push((i as u64, perm));
                }
            }
        }
        out
    }

    pub fn allows(&self, offset: u64, perm: Perms) -> bool {
        let v = if perm == Perms::WRITE {
            &self.write
        } else {
            &self.read
        };
        v.get(offset as usize).copied().unwrap_or(false)
    }

    /// Offsets set for `perm`, as inclusive runs.
    pub fn runs(&self, perm: Perms) -> Vec<(u64, u64)> {
        let v = if perm == Perms::WRITE {
            &self.write
        } else {
            &self.read
        };
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for (i, set) in v.iter().enumerate() {
            if !*set {
                continue;
            }
            let i = i as u64;
            match runs.last_mut() {
                Some((_, end)) if *end + 1 == i => *end = i,
                _ => runs.push((i, i)),
            }
        }
        runs
    }
}

/// Reachability found by trying a one-byte access at every BAR offset through
/// every slice in the table.
pub fn audit_reachability(table: &SliceTable, bar_length: u64) -> ReachMap {
    let mut map = ReachMap::empty(bar_length);
    let base = table.bar_base();
    for s in table.slices() {
        for off in 0..bar_length {
            let probe = s.cap.with_cursor(base + off);
            let i = off as usize;
            if !map.read[i] && check_access(&probe, 1, Perms::READ).is_ok() {
                map.read[i] = true;
            }
            if !map.write[i] && check_access(&probe, 1, Perms::WRITE).is_ok() {
                map.write[i] = true;
            }
        }
    }
    map
}

/// Reachability implied by the manifest text alone.
pub fn manifest_reachability(manifest: &Manifest, bar_length: u64) -> ReachMap {
    let mut map = ReachMap::empty(bar_length);
    for r in manifest.expand_all() {
        let (read, write) = match r.perm {
            SlicePerm::Rw => (true, true),
            SlicePerm::Ro => (true, false),
            SlicePerm::Kernel => (false, false),
        };
        for off in r.offset..r.end().min(bar_length) {
            map.read[off as usize] |= read;
            map.write[off as usize] |= write;
        }
    }
    map
}
