//! Software model of CHERI-style capabilities.
//!
//! A [`Capability`] is a bounded, permissioned, tagged reference. Bounds are
//! exact byte ranges (no compressed-bounds rounding). Deriving outside the
//! parent or mutating a sealed value clears the tag instead of failing, so
//! misuse only surfaces when the result is dereferenced through
//! [`check_access`].

use std::fmt;
use std::ops::{BitAnd, BitOr};

use thiserror::Error;

/// Set of capability permissions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const READ: Perms = Perms(1 << 0);
    pub const WRITE: Perms = Perms(1 << 1);
    pub const LOAD_CAP: Perms = Perms(1 << 2);
    pub const STORE_CAP: Perms = Perms(1 << 3);
    pub const SEAL: Perms = Perms(1 << 4);
    pub const UNSEAL: Perms = Perms(1 << 5);

    pub const RW: Perms = Perms(Self::READ.0 | Self::WRITE.0);
    pub const ALL: Perms = Perms(0x3f);

    pub const fn bits(self) -> u8 {
        self.0
    }

    /// Unknown bits are dropped.
    pub const fn from_bits(bits: u8) -> Perms {
        Perms(bits & Self::ALL.0)
    }

    pub const fn contains(self, other: Perms) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn intersect(self, other: Perms) -> Perms {
        Perms(self.0 & other.0)
    }

    pub const fn union(self, other: Perms) -> Perms {
        Perms(self.0 | other.0)
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for Perms {
    type Output = Perms;
    fn bitor(self, rhs: Perms) -> Perms {
        self.union(rhs)
    }
}

impl BitAnd for Perms {
    type Output = Perms;
    fn bitand(self, rhs: Perms) -> Perms {
        self.intersect(rhs)
    }
}

impl fmt::Debug for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(Perms, &str); 6] = [
            (Perms::READ, "R"),
            (Perms::WRITE, "W"),
            (Perms::LOAD_CAP, "LC"),
            (Perms::STORE_CAP, "SC"),
            (Perms::SEAL, "SE"),
            (Perms::UNSEAL, "US"),
        ];
        let names: Vec<&str> = NAMES
            .iter()
            .filter(|(p, _)| self.contains(*p))
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Object type a capability is sealed with.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct OType(pub u32);

impl OType {
    /// Reserved maximum value marking an unsealed capability.
    pub const UNSEALED: OType = OType(u32::MAX);

    pub fn is_sealed(self) -> bool {
        self != Self::UNSEALED
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum FaultKind {
    TagInvalid,
    BoundsViolation,
    PermissionDenied,
    SealViolation,
    AlignmentFault,
    WrongOType,
}

/// A failed capability check. `address` is the cursor at fault time.
#[derive(Clone, PartialEq, Eq, Debug, Error)]
#[error("capability fault {kind:?} at {address:#x}: {detail}")]
pub struct CapFault {
    pub kind: FaultKind,
    pub address: u64,
    pub detail: String,
}

impl CapFault {
    pub fn new(kind: FaultKind, address: u64, detail: impl Into<String>) -> Self {
        CapFault {
            kind,
            address,
            detail: detail.into(),
        }
    }
}

/// Bounded, permissioned, tagged reference.
///
/// Tagged capabilities can only be minted by the physical address space
/// (see [`crate::physmem::RootMinter`]); everything else is derived from
/// them. [`Capability::forge`] builds arbitrary bit patterns, which are
/// always untagged.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Capability {
    base: u64,
    length: u64,
    cursor: u64,
    perms: Perms,
    tag: bool,
    otype: OType,
}

impl fmt::Debug for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Cap[{:#x}+{:#x} @{:#x} {:?}{}{}]",
            self.base,
            self.length,
            self.cursor,
            self.perms,
            if self.tag { "" } else { " untagged" },
            if self.otype.is_sealed() {
                format!(" sealed:{}", self.otype.0)
            } else {
                String::new()
            }
        )
    }
}

impl Capability {
    /// Only the physical address space may call this.
    pub(crate) fn mint(base: u64, length: u64, perms: Perms) -> Capability {
        debug_assert!(base.checked_add(length).is_some());
        Capability {
            base,
            length,
            cursor: base,
            perms,
            tag: true,
            otype: OType::UNSEALED,
        }
    }

    /// An arbitrary bit pattern presented as a capability. Never tagged.
    pub fn forge(base: u64, length: u64, cursor: u64, perms: Perms, otype: OType) -> Capability {
        Capability {
            base,
            length,
            cursor,
            perms,
            tag: false,
            otype,
        }
    }

    /// The null capability.
    pub const NULL: Capability = Capability {
        base: 0,
        length: 0,
        cursor: 0,
        perms: Perms::NONE,
        tag: false,
        otype: OType::UNSEALED,
    };

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    /// One past the last byte in bounds. Saturates for malformed patterns.
    pub fn top(&self) -> u64 {
        self.base.saturating_add(self.length)
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn perms(&self) -> Perms {
        self.perms
    }

    pub fn tag(&self) -> bool {
        self.tag
    }

    pub fn otype(&self) -> OType {
        self.otype
    }

    pub fn is_sealed(&self) -> bool {
        self.otype.is_sealed()
    }

    /// Moves the cursor. Out-of-bounds cursors are legal until dereferenced;
    /// moving the cursor of a sealed capability clears its tag.
    pub fn with_cursor(self, cursor: u64) -> Capability {
        Capability {
            cursor,
            tag: self.tag && !self.is_sealed(),
            ..self
        }
    }

    /// Cursor arithmetic relative to the current cursor (wrapping).
    pub fn offset(self, delta: i64) -> Capability {
        self.with_cursor(self.cursor.wrapping_add(delta as u64))
    }

    /// Same as `self` with the tag cleared.
    pub fn cleared(self) -> Capability {
        Capability { tag: false, ..self }
    }

    /// True if `[addr, addr + len)` lies within bounds.
    pub fn covers(&self, addr: u64, len: u64) -> bool {
        match addr.checked_add(len) {
            Some(end) => addr >= self.base && end <= self.top(),
            None => false,
        }
    }

    pub(crate) fn raw_parts(&self) -> (u64, u64, u64, Perms, bool, OType) {
        (
            self.base,
            self.length,
            self.cursor,
            self.perms,
            self.tag,
            self.otype,
        )
    }

    pub(crate) fn with_tag(self, tag: bool) -> Capability {
        Capability { tag, ..self }
    }
}

/// Narrows `parent` to `[new_base, new_base + new_length)`.
///
/// Never fails: the result is untagged unless the parent is tagged, unsealed,
/// and the requested range is contained in the parent's bounds.
pub fn derive_bounds(parent: Capability, new_base: u64, new_length: u64) -> Capability {
    let legal = parent.tag && !parent.is_sealed() && parent.covers(new_base, new_length);
    Capability {
        base: new_base,
        length: new_length,
        cursor: new_base,
        perms: parent.perms,
        tag: legal,
        otype: parent.otype,
    }
}

/// Intersects the permissions of `parent` with `keep`.
pub fn restrict_perms(parent: Capability, keep: Perms) -> Capability {
    Capability {
        perms: parent.perms & keep,
        tag: parent.tag && !parent.is_sealed(),
        ..parent
    }
}

fn check_authority(authority: &Capability, need: Perms, what: &str) -> Result<(), CapFault> {
    if !authority.tag {
        return Err(CapFault::new(
            FaultKind::TagInvalid,
            authority.cursor,
            format!("{what} authority is untagged"),
        ));
    }
    if authority.is_sealed() {
        return Err(CapFault::new(
            FaultKind::SealViolation,
            authority.cursor,
            format!("{what} authority is sealed"),
        ));
    }
    if !authority.perms.contains(need) {
        return Err(CapFault::new(
            FaultKind::PermissionDenied,
            authority.cursor,
            format!("{what} authority lacks {need:?}"),
        ));
    }
    if !authority.covers(authority.cursor, 1) {
        return Err(CapFault::new(
            FaultKind::BoundsViolation,
            authority.cursor,
            format!("{what} authority cursor outside its otype range"),
        ));
    }
    Ok(())
}

fn cursor_otype(authority: &Capability) -> Result<OType, CapFault> {
    u32::try_from(authority.cursor)
        .ok()
        .filter(|v| *v != OType::UNSEALED.0)
        .map(OType)
        .ok_or_else(|| {
            CapFault::new(
                FaultKind::BoundsViolation,
                authority.cursor,
                "authority cursor is not a valid otype",
            )
        })
}

/// Seals `target` with the otype designated by `authority`'s cursor.
pub fn seal(target: Capability, authority: Capability) -> Result<Capability, CapFault> {
    if !target.tag {
        return Err(CapFault::new(
            FaultKind::TagInvalid,
            target.cursor,
            "cannot seal an untagged value",
        ));
    }
    check_authority(&authority, Perms::SEAL, "seal")?;
    if target.is_sealed() {
        return Err(CapFault::new(
            FaultKind::SealViolation,
            target.cursor,
            "target is already sealed",
        ));
    }
    let otype = cursor_otype(&authority)?;
    Ok(Capability { otype, ..target })
}

/// Unseals `target` if `authority`'s cursor names its otype.
pub fn unseal(target: Capability, authority: Capability) -> Result<Capability, CapFault> {
    if !target.tag {
        return Err(CapFault::new(
            FaultKind::TagInvalid,
            target.cursor,
            "cannot unseal an untagged value",
        ));
    }
    check_authority(&authority, Perms::UNSEAL, "unseal")?;
    if !target.is_sealed() {
        return Err(CapFault::new(
            FaultKind::SealViolation,
            target.cursor,
            "target is not sealed",
        ));
    }
    let otype = cursor_otype(&authority)?;
    if otype != target.otype {
        return Err(CapFault::new(
            FaultKind::WrongOType,
            target.cursor,
            format!(
                "sealed with {} but authority is {}",
                target.otype.0, otype.0
            ),
        ));
    }
    Ok(Capability {
        otype: OType::UNSEALED,
        ..target
    })
}

/// Checks a `len`-byte access at the cursor. Used for bulk copies; fault
/// ordering matches [`check_access`].
pub fn check_range(cap: &Capability, len: u64, need: Perms) -> Result<(), CapFault> {
    if !cap.tag {
        return Err(CapFault::new(
            FaultKind::TagInvalid,
            cap.cursor,
            "dereference of untagged capability",
        ));
    }
    if cap.is_sealed() {
        return Err(CapFault::new(
            FaultKind::SealViolation,
            cap.cursor,
            "dereference of sealed capability",
        ));
    }
    if !cap.perms.contains(need) {
        return Err(CapFault::new(
            FaultKind::PermissionDenied,
            cap.cursor,
            format!("need {:?}, have {:?}", need, cap.perms),
        ));
    }
    if !cap.covers(cap.cursor, len) {
        return Err(CapFault::new(
            FaultKind::BoundsViolation,
            cap.cursor,
            format!(
                "{len}-byte access outside [{:#x}, {:#x})",
                cap.base,
                cap.top()
            ),
        ));
    }
    Ok(())
}

/// The single chokepoint for every data load/store.
pub fn check_access(cap: &Capability, width: u64, need: Perms) -> Result<(), CapFault> {
    if !matches!(width, 1 | 2 | 4 | 8 | 16) {
        return Err(CapFault::new(
            FaultKind::AlignmentFault,
            cap.cursor,
            format!("unsupported access width {width}"),
        ));
    }
    check_range(cap, width, need)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BAR: u64 = 0x20000;

    fn root() -> Capability {
        Capability::mint(0, BAR, Perms::RW)
    }

    fn sealer(otype: u32) -> Capability {
        Capability::mint(0, 1 << 32, Perms::SEAL | Perms::UNSEAL).with_cursor(otype as u64)
    }

    #[test]
    fn derive_ctrl_slice() {
        let c = derive_bounds(root(), 0, 4);
        assert!(c.tag());
        assert_eq!((c.base(), c.length(), c.cursor()), (0, 4, 0));
        assert_eq!(c.perms(), Perms::RW);
    }

    #[test]
    fn identity_derivation() {
        let c = derive_bounds(root(), 0, BAR);
        assert!(c.tag());
        assert_eq!((c.base(), c.length()), (0, BAR));
    }

    #[test]
    fn derive_past_parent_clears_tag() {
        let small = derive_bounds(root(), 0, 4);
        let big = derive_bounds(small, 0, 8);
        assert!(!big.tag());
        // and derivation from an untagged value stays untagged
        assert!(!derive_bounds(big, 0, 1).tag());
    }

    #[test]
    fn derive_overflowing_range() {
        let c = derive_bounds(root(), u64::MAX - 1, 4);
        assert!(!c.tag());
    }

    #[test]
    fn restrict_is_intersection() {
        let ro = restrict_perms(root(), Perms::READ);
        assert_eq!(ro.perms(), Perms::READ);
        assert!(ro.tag());
        assert_eq!(restrict_perms(root(), Perms::RW).perms(), Perms::RW);
        assert_eq!(restrict_perms(ro, Perms::RW).perms(), Perms::READ);
    }

    #[test]
    fn restrict_sealed_clears_tag() {
        let s = seal(root(), sealer(7)).unwrap();
        assert!(!restrict_perms(s, Perms::READ).tag());
    }

    #[test]
    fn seal_roundtrip() {
        let r = root().with_cursor(0x10);
        let s = seal(r, sealer(7)).unwrap();
        assert_eq!(s.otype(), OType(7));
        assert!(s.tag());
        assert_eq!(
            check_access(&s, 4, Perms::READ).unwrap_err().kind,
            FaultKind::SealViolation
        );
        assert_eq!(unseal(s, sealer(7)).unwrap(), r);
    }

    #[test]
    fn seal_errors() {
        let s = seal(root(), sealer(7)).unwrap();
        assert_eq!(
            seal(s, sealer(7)).unwrap_err().kind,
            FaultKind::SealViolation
        );
        assert_eq!(
            seal(root().cleared(), sealer(7)).unwrap_err().kind,
            FaultKind::TagInvalid
        );
        assert_eq!(
            seal(root(), sealer(7).cleared()).unwrap_err().kind,
            FaultKind::TagInvalid
        );
        let no_seal = restrict_perms(sealer(7), Perms::UNSEAL);
        assert_eq!(
            seal(root(), no_seal).unwrap_err().kind,
            FaultKind::PermissionDenied
        );
    }

    #[test]
    fn unseal_errors() {
        let s = seal(root(), sealer(7)).unwrap();
        assert_eq!(
            unseal(s, sealer(9)).unwrap_err().kind,
            FaultKind::WrongOType
        );
        let forged = Capability::forge(0, BAR, 0, Perms::RW, OType(7));
        assert_eq!(
            unseal(forged, sealer(7)).unwrap_err().kind,
            FaultKind::TagInvalid
        );
        assert_eq!(
            unseal(root(), sealer(7)).unwrap_err().kind,
            FaultKind::SealViolation
        );
        let no_unseal = restrict_perms(sealer(7), Perms::SEAL);
        assert_eq!(
            unseal(s, no_unseal).unwrap_err().kind,
            FaultKind::PermissionDenied
        );
    }

    #[test]
    fn sealed_cursor_move_clears_tag() {
        let s = seal(root(), sealer(3)).unwrap();
        assert!(!s.offset(4).tag());
    }

    #[test]
    fn check_access_examples() {
        let ctrl = derive_bounds(root(), 0x100, 4);
        assert!(check_access(&ctrl, 4, Perms::WRITE).is_ok());
        let ims = ctrl.offset(0xD0);
        let f = check_access(&ims, 4, Perms::WRITE).unwrap_err();
        assert_eq!(f.kind, FaultKind::BoundsViolation);
        assert_eq!(f.address, 0x1D0);
        let status = restrict_perms(derive_bounds(root(), 8, 4), Perms::READ);
        assert_eq!(
            check_access(&status, 4, Perms::WRITE).unwrap_err().kind,
            FaultKind::PermissionDenied
        );
    }

    #[test]
    fn fault_order() {
        // untagged + sealed + wrong perms + out of bounds: tag wins
        let bad = Capability::forge(0, 4, 100, Perms::NONE, OType(3));
        assert_eq!(
            check_access(&bad, 4, Perms::WRITE).unwrap_err().kind,
            FaultKind::TagInvalid
        );
        let sealed = seal(restrict_perms(root(), Perms::NONE), sealer(3))
            .unwrap()
            .with_tag(true);
        assert_eq!(
            check_access(&sealed, 4, Perms::WRITE).unwrap_err().kind,
            FaultKind::SealViolation
        );
        let ro_oob = restrict_perms(derive_bounds(root(), 0, 4), Perms::READ).offset(8);
        assert_eq!(
            check_access(&ro_oob, 4, Perms::WRITE).unwrap_err().kind,
            FaultKind::PermissionDenied
        );
    }

    #[test]
    fn odd_width_is_alignment_fault() {
        assert_eq!(
            check_access(&root(), 3, Perms::READ).unwrap_err().kind,
            FaultKind::AlignmentFault
        );
    }

    #[test]
    fn zero_length_cap_faults_everything() {
        let z = derive_bounds(root(), 0x40, 0);
        assert!(z.tag());
        for w in [1, 2, 4, 8, 16] {
            assert_eq!(
                check_access(&z, w, Perms::READ).unwrap_err().kind,
                FaultKind::BoundsViolation
            );
        }
    }
}
