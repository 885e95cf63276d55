//! Device manifests: the declarative register-map policy for one BAR.
//!
//! Line format, `#` starts a comment:
//!
//! ```text
//! device <name>
//! bar <length>
//! reg <name> <offset> <size> <RW|RO|KERNEL> [repeat=<count> stride=<bytes>]
//! ```
//!
//! Numbers with a `0x` prefix are hexadecimal, otherwise decimal.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::capability::Perms;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum SlicePerm {
    Rw,
    Ro,
    /// Kernel only. Never exported; reserves bytes against overlap.
    Kernel,
}

impl SlicePerm {
    /// Capability permissions granted to userspace, `None` for kernel-only.
    pub fn cap_perms(self) -> Option<Perms> {
        match self {
            SlicePerm::Rw => Some(Perms::RW),
            SlicePerm::Ro => Some(Perms::READ),
            SlicePerm::Kernel => None,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            SlicePerm::Rw => "RW",
            SlicePerm::Ro => "RO",
            SlicePerm::Kernel => "KERNEL",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Repeat {
    pub count: u32,
    pub stride: u64,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SliceEntry {
    pub name: String,
    pub offset: u64,
    pub size: u64,
    pub perm: SlicePerm,
    pub repeat: Option<Repeat>,
}

impl SliceEntry {
    fn instances(&self) -> impl Iterator<Item = (String, u64)> + '_ {
        let (count, stride) = match self.repeat {
            Some(r) => (r.count as u64, r.stride),
            None => (1, 0),
        };
        (0..count).map(move |k| {
            let name = if count > 1 {
                format!("{}[{}]", self.name, k)
            } else {
                self.name.clone()
            };
            (name, self.offset.saturating_add(k.saturating_mul(stride)))
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Manifest {
    pub device_name: String,
    pub bar_length: u64,
    pub entries: Vec<SliceEntry>,
}

/// One concrete byte range after repeat expansion.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ExpandedRange {
    pub name: String,
    pub offset: u64,
    pub size: u64,
    pub perm: SlicePerm,
}

impl ExpandedRange {
    pub fn end(&self) -> u64 {
        self.offset.saturating_add(self.size)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown directive `{directive}`")]
    UnknownDirective { line: usize, directive: String },
    #[error("line {line}: cannot parse number `{text}`")]
    BadNumber { line: usize, text: String },
    #[error("line {line}: duplicate register name `{name}`")]
    DuplicateName { line: usize, name: String },
    #[error("missing `{0}` header")]
    MissingHeader(&'static str),
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum Violation {
    #[error("{name}: size must be at least 1")]
    ZeroSize { name: String },
    #[error("{name}: repeat count must be at least 1")]
    ZeroCount { name: String },
    #[error("{name}: stride {stride:#x} is smaller than size {size}")]
    StrideTooSmall {
        name: String,
        stride: u64,
        size: u64,
    },
    #[error("{name}: range {offset:#x}+{size} exceeds BAR length {bar:#x}")]
    OutsideBar {
        name: String,
        offset: u64,
        size: u64,
        bar: u64,
    },
    #[error("{first} and {second} overlap at {offset:#x}")]
    Overlap {
        first: String,
        second: String,
        offset: u64,
    },
}

fn parse_number(text: &str, line: usize) -> Result<u64, ParseError> {
    let parsed = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => text.parse::<u64>(),
    };
    parsed.map_err(|_| ParseError::BadNumber {
        line,
        text: text.to_string(),
    })
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, ParseError> {
        let mut device = None;
        let mut bar = None;
        let mut entries = Vec::new();
        let mut names = HashSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let syntax = |msg: &str| ParseError::Syntax {
                line,
                msg: msg.to_string(),
            };
            match words[0] {
                "device" => {
                    if words.len() != 2 || !valid_name(words[1]) {
                        return Err(syntax("expected `device <name>`"));
                    }
                    if device.replace(words[1].to_string()).is_some() {
                        return Err(syntax("`device` given twice"));
                    }
                }
                "bar" => {
                    if words.len() != 2 {
                        return Err(syntax("expected `bar <length>`"));
                    }
                    if bar.replace(parse_number(words[1], line)?).is_some() {
                        return Err(syntax("`bar` given twice"));
                    }
                }
                "reg" => {
                    if words.len() < 5 {
                        return Err(syntax(
                            "expected `reg <name> <offset> <size> <RW|RO|KERNEL>`",
                        ));
                    }
                    let name = words[1];
                    if !valid_name(name) {
                        return Err(syntax("register names are [A-Za-z0-9_.-]+"));
                    }
                    let offset = parse_number(words[2], line)?;
                    let size = parse_number(words[3], line)?;
                    let perm = match words[4] {
                        "RW" => SlicePerm::Rw,
                        "RO" => SlicePerm::Ro,
                        "KERNEL" => SlicePerm::Kernel,
                        other => {
                            return Err(syntax(&format!("unknown permission `{other}`")));
                        }
                    };
                    let mut count = None;
                    let mut stride = None;
                    for opt in &words[5..] {
                        match opt.split_once('=') {
                            Some(("repeat", v)) if count.is_none() => {
                                let n = parse_number(v, line)?;
                                count =
                                    Some(u32::try_from(n).map_err(|_| ParseError::BadNumber {
                                        line,
                                        text: v.to_string(),
                                    })?);
                            }
                            Some(("stride", v)) if stride.is_none() => {
                                stride = Some(parse_number(v, line)?);
                            }
                            _ => return Err(syntax(&format!("unexpected option `{opt}`"))),
                        }
                    }
                    let repeat = match (count, stride) {
                        (None, None) => None,
                        (Some(count), Some(stride)) => Some(Repeat { count, stride }),
                        _ => return Err(syntax("`repeat=` and `stride=` go together")),
                    };
                    if !names.insert(name.to_string()) {
                        return Err(ParseError::DuplicateName {
                            line,
                            name: name.to_string(),
                        });
                    }
                    entries.push(SliceEntry {
                        name: name.to_string(),
                        offset,
                        size,
                        perm,
                        repeat,
                    });
                }
                other => {
                    return Err(ParseError::UnknownDirective {
                        line,
                        directive: other.to_string(),
                    })
                }
            }
        }

        Ok(Manifest {
            device_name: device.ok_or(ParseError::MissingHeader("device"))?,
            bar_length: bar.ok_or(ParseError::MissingHeader("bar"))?,
            entries,
        })
    }

    /// Every policy violation, in a stable order.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        for e in &self.entries {
            if e.size == 0 {
                violations.push(Violation::ZeroSize {
                    name: e.name.clone(),
                });
            }
            if let Some(r) = e.repeat {
                if r.count == 0 {
                    violations.push(Violation::ZeroCount {
                        name: e.name.clone(),
                    });
                }
                if r.stride < e.size {
                    violations.push(Violation::StrideTooSmall {
                        name: e.name.clone(),
                        stride: r.stride,
                        size: e.size,
                    });
                }
            }
        }

        let mut ranges = self.expand_all();
        for r in &ranges {
            if r.offset
                .checked_add(r.size)
                .is_none_or(|end| end > self.bar_length)
            {
                violations.push(Violation::OutsideBar {
                    name: r.name.clone(),
                    offset: r.offset,
                    size: r.size,
                    bar: self.bar_length,
                });
            }
        }

        ranges.sort_by(|a, b| (a.offset, &a.name).cmp(&(b.offset, &b.name)));
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if b.offset >= a.end() {
                    break;
                }
                if b.size > 0 && a.size > 0 {
                    violations.push(Violation::Overlap {
                        first: a.name.clone(),
                        second: b.name.clone(),
                        offset: b.offset,
                    });
                }
            }
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Validates and orders entries by offset.
    pub fn into_validated(mut self) -> Result<Manifest, Vec<Violation>> {
        self.validate()?;
        self.entries.sort_by_key(|e| e.offset);
        Ok(self)
    }

    /// All ranges including kernel-only ones.
    pub fn expand_all(&self) -> Vec<ExpandedRange> {
        self.entries
            .iter()
            .flat_map(|e| {
                e.instances().map(|(name, offset)| ExpandedRange {
                    name,
                    offset,
                    size: e.size,
                    perm: e.perm,
                })
            })
            .collect()
    }

    /// The ranges exported to userspace, in manifest order. Kernel-only
    /// entries are left out.
    pub fn expand(&self) -> Vec<ExpandedRange> {
        self.expand_all()
            .into_iter()
            .filter(|r| r.perm != SlicePerm::Kernel)
            .collect()
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "device {}", self.device_name)?;
        writeln!(f, "bar {:#x}", self.bar_length)?;
        for e in &self.entries {
            write!(
                f,
                "reg {} {:#06x} {} {}",
                e.name,
                e.offset,
                e.size,
                e.perm.keyword()
            )?;
            if let Some(r) = e.repeat {
                write!(f, " repeat={} stride={:#x}", r.count, r.stride)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// The four-register e1000e policy exactly as published.
pub const MINIMAL_MANIFEST: &str = include_str!("../manifests/e1000e-minimal.manifest");

/// The full policy the kernel stub registers, including the descriptor
/// rings.
pub const E1000E_MANIFEST: &str = include_str!("../manifests/e1000e.manifest");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest_parses() {
        let m = Manifest::parse(MINIMAL_MANIFEST).unwrap();
        assert_eq!(m.device_name, "e1000e");
        assert_eq!(m.bar_length, 0x20000);
        let got: Vec<_> = m
            .entries
            .iter()
            .map(|e| (e.name.as_str(), e.offset, e.size, e.perm))
            .collect();
        assert_eq!(
            got,
            vec![
                ("CTRL", 0x0000, 4, SlicePerm::Rw),
                ("STATUS", 0x0008, 4, SlicePerm::Ro),
                ("IMS", 0x00D0, 4, SlicePerm::Kernel),
                ("TDT", 0x3818, 4, SlicePerm::Rw),
            ]
        );
        m.validate().unwrap();
    }

    #[test]
    fn headers_only() {
        let m = Manifest::parse("device x\nbar 0x1000\n").unwrap();
        assert!(m.entries.is_empty());
        assert!(m.expand().is_empty());
    }

    #[test]
    fn repeat_entry() {
        let m = Manifest::parse("device d\nbar 0x20000\nreg TXD 0x3900 8 RW repeat=64 stride=16\n")
            .unwrap();
        assert_eq!(
            m.entries[0].repeat,
            Some(Repeat {
                count: 64,
                stride: 16
            })
        );
        assert_eq!(m.expand().len(), 64);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            Manifest::parse("device d\nbar 0x10\nfoo bar\n"),
            Err(ParseError::UnknownDirective { line: 3, .. })
        ));
        assert!(matches!(
            Manifest::parse("device d\nbar 0x10\nreg A 0xZZ 4 RW\n"),
            Err(ParseError::BadNumber { line: 3, .. })
        ));
        assert!(matches!(
            Manifest::parse("device d\nbar 0x10\nreg A 0 4 RW\nreg A 4 4 RO\n"),
            Err(ParseError::DuplicateName { line: 4, .. })
        ));
        assert!(matches!(
            Manifest::parse("device d\nbar 0x10\nreg A 0 4 RX\n"),
            Err(ParseError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            Manifest::parse("device d\nbar 0x10\nreg A 0 4 RW repeat=2\n"),
            Err(ParseError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            Manifest::parse("bar 0x10\n"),
            Err(ParseError::MissingHeader("device"))
        ));
        assert!(matches!(
            Manifest::parse("device d\n"),
            Err(ParseError::MissingHeader("bar"))
        ));
    }

    #[test]
    fn overlap_names_both() {
        let m =
            Manifest::parse("device d\nbar 0x100\nreg A 0x0 12 RW\nreg B 0x8 4 KERNEL\n").unwrap();
        let v = m.validate().unwrap_err();
        assert_eq!(
            v,
            vec![Violation::Overlap {
                first: "A".into(),
                second: "B".into(),
                offset: 8
            }]
        );
    }

    #[test]
    fn containment_violation() {
        let m = Manifest::parse("device d\nbar 0x20000\nreg X 0x1FFFE 4 RW\n").unwrap();
        assert!(matches!(
            m.validate().unwrap_err()[..],
            [Violation::OutsideBar {
                offset: 0x1FFFE,
                ..
            }]
        ));
    }

    #[test]
    fn every_violation_reported() {
        let m = Manifest::parse(
            "device d\nbar 0x100\nreg A 0 0 RW\nreg B 0xF0 32 RW\nreg C 0x10 8 RO repeat=2 stride=4\n",
        )
        .unwrap();
        let v = m.validate().unwrap_err();
        assert!(v.iter().any(|x| matches!(x, Violation::ZeroSize { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::OutsideBar { .. })));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::StrideTooSmall { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::Overlap { .. })));
    }

    #[test]
    fn expand_minimal_manifest_drops_kernel() {
        let m = Manifest::parse(MINIMAL_MANIFEST).unwrap();
        let names: Vec<_> = m.expand().into_iter().map(|r| r.name).collect();
        assert_eq!(names, ["CTRL", "STATUS", "TDT"]);
    }

    #[test]
    fn expand_repeat_offsets() {
        let m = Manifest::parse("device d\nbar 0x4000\nreg D 0x3908 8 RW repeat=4 stride=16\n")
            .unwrap();
        // hand-enumerated 0x3908 + k*16
        let offs: Vec<_> = m.expand().iter().map(|r| r.offset).collect();
        assert_eq!(offs, [0x3908, 0x3918, 0x3928, 0x3938]);
    }

    #[test]
    fn repeat_once_equals_plain() {
        let a =
            Manifest::parse("device d\nbar 0x100\nreg D 0x8 8 RW repeat=1 stride=16\n").unwrap();
        let b = Manifest::parse("device d\nbar 0x100\nreg D 0x8 8 RW\n").unwrap();
        assert_eq!(a.expand(), b.expand());
    }

    #[test]
    fn full_manifest_is_valid() {
        let m = Manifest::parse(E1000E_MANIFEST)
            .unwrap()
            .into_validated()
            .unwrap();
        for r in m.expand() {
            assert!(r.perm != SlicePerm::Kernel);
        }
    }

    #[test]
    fn print_reparses() {
        let m = Manifest::parse(E1000E_MANIFEST).unwrap();
        assert_eq!(Manifest::parse(&m.to_string()).unwrap(), m);
    }
}
