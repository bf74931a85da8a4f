//! Parser for a small SMILES subset.
//!
//! Accepted: organic-subset atoms `B C N O P S F Cl Br I`, aromatic atoms
//! `c n o s`, bonds `- = #`, branches and single-digit ring closures.
//! Everything else (bracket atoms, charges, stereo marks, `%nn` closures,
//! dot-disconnected fragments) is rejected with the byte offset of the
//! offending token. Hydrogens stay implicit.

use crate::error::{Error, Result};
use crate::graph::{BondOrder, Edge, Graph};

/// Atom symbols indexed by label id. Aromatic atoms get their own ids.
pub const ATOM_SYMBOLS: [&str; 14] = [
    "B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "c", "n", "o", "s",
];

pub const ALPHABET_SIZE: usize = ATOM_SYMBOLS.len();

const FIRST_AROMATIC: usize = 10;

pub fn label_symbol(label: usize) -> Option<&'static str> {
    ATOM_SYMBOLS.get(label).copied()
}

pub fn is_aromatic_label(label: usize) -> bool {
    (FIRST_AROMATIC..ALPHABET_SIZE).contains(&label)
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct OpenRing {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    labels: Vec<usize>,
    edges: Vec<Edge>,
    prev: Option<usize>,
    pending: Option<(BondOrder, usize)>,
    branches: Vec<(Option<usize>, usize)>,
    rings: [Option<OpenRing>; 10],
}

pub fn parse_smiles(text: &str) -> Result<Graph> {
    if text.is_empty() {
        return Err(parse_error(0, "empty SMILES string"));
    }
    let mut p = Parser {
        bytes: text.as_bytes(),
        labels: Vec::new(),
        edges: Vec::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: Default::default(),
    };
    p.run()?;
    let mut g = Graph::new(p.labels, p.edges)?;
    g.smiles = Some(text.to_owned());
    Ok(g)
}

impl Parser<'_> {
    fn run(&mut self) -> Result<()> {
        let mut i = 0;
        while i < self.bytes.len() {
            let c = self.bytes[i];
            let next = self.bytes.get(i + 1).copied();
            match c {
                b'C' if next == Some(b'l') => {
                    self.atom(7)?;
                    i += 1;
                }
                b'B' if next == Some(b'r') => {
                    self.atom(8)?;
                    i += 1;
                }
                b'B' => self.atom(0)?,
                b'C' => self.atom(1)?,
                b'N' => self.atom(2)?,
                b'O' => self.atom(3)?,
                b'P' => self.atom(4)?,
                b'S' => self.atom(5)?,
                b'F' => self.atom(6)?,
                b'I' => self.atom(9)?,
                b'c' => self.atom(10)?,
                b'n' => self.atom(11)?,
                b'o' => self.atom(12)?,
                b's' => self.atom(13)?,
                b'-' => self.bond(BondOrder::Single, i)?,
                b'=' => self.bond(BondOrder::Double, i)?,
                b'#' => self.bond(BondOrder::Triple, i)?,
                b'(' => {
                    if self.prev.is_none() {
                        return Err(parse_error(i, "branch opened before any atom"));
                    }
                    if let Some((_, at)) = self.pending {
                        return Err(parse_error(at, "bond symbol before a branch"));
                    }
                    self.branches.push((self.prev, i));
                }
                b')' => {
                    if let Some((_, at)) = self.pending {
                        return Err(parse_error(at, "bond symbol with no atom before ')'"));
                    }
                    let Some((prev, _)) = self.branches.pop() else {
                        return Err(parse_error(i, "unmatched ')'"));
                    };
                    self.prev = prev;
                }
                b'1'..=b'9' => self.ring((c - b'0') as usize, i)?,
                b'[' => return Err(parse_error(i, "bracket atoms are not supported")),
                b'%' => return Err(parse_error(i, "two-digit ring closures are not supported")),
                b'.' => return Err(parse_error(i, "disconnected fragments are not supported")),
                b'/' | b'\\' | b'@' => {
                    return Err(parse_error(i, "stereo markers are not supported"))
                }
                _ => {
                    let ch = std::str::from_utf8(&self.bytes[i..])
                        .ok()
                        .and_then(|s| s.chars().next())
                        .unwrap_or('?');
                    return Err(parse_error(i, format!("unsupported token '{ch}'")));
                }
            }
            i += 1;
        }
        if let Some((_, at)) = self.pending {
            return Err(parse_error(at, "dangling bond at end of input"));
        }
        if let Some(&(_, at)) = self.branches.last() {
            return Err(parse_error(at, "unmatched '('"));
        }
        if let Some(open) = self.rings.iter().flatten().min_by_key(|r| r.offset) {
            return Err(parse_error(open.offset, "unmatched ring-closure digit"));
        }
        Ok(())
    }

    fn default_order(&self, a: usize, b: usize) -> BondOrder {
        if is_aromatic_label(self.labels[a]) && is_aromatic_label(self.labels[b]) {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn atom(&mut self, label: usize) -> Result<()> {
        let id = self.labels.len();
        self.labels.push(label);
        if let Some(prev) = self.prev {
            let order = match self.pending.take() {
                Some((o, _)) => o,
                None => self.default_order(prev, id),
            };
            self.edges.push(Edge::new(prev, id, order));
        } else if let Some((_, at)) = self.pending {
            return Err(parse_error(at, "bond symbol before the first atom"));
        }
        self.prev = Some(id);
        Ok(())
    }

    fn bond(&mut self, order: BondOrder, offset: usize) -> Result<()> {
        if self.prev.is_none() {
            return Err(parse_error(offset, "bond symbol before the first atom"));
        }
        if self.pending.is_some() {
            return Err(parse_error(offset, "two consecutive bond symbols"));
        }
        self.pending = Some((order, offset));
        Ok(())
    }

    fn ring(&mut self, digit: usize, offset: usize) -> Result<()> {
        let Some(here) = self.prev else {
            return Err(parse_error(offset, "ring-closure digit before any atom"));
        };
        let bond = self.pending.take().map(|(o, _)| o);
        match self.rings[digit].take() {
            None => {
                self.rings[digit] = Some(OpenRing {
                    atom: here,
                    bond,
                    offset,
                });
            }
            Some(open) => {
                if open.atom == here {
                    return Err(parse_error(offset, "ring closure onto the same atom"));
                }
                let order = match (open.bond, bond) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(parse_error(offset, "conflicting ring-closure bond orders"))
                    }
                    (Some(o), _) | (None, Some(o)) => o,
                    (None, None) => self.default_order(open.atom, here),
                };
                let key = (open.atom.min(here), open.atom.max(here));
                if self.edges.iter().any(|e| e.key() == key) {
                    return Err(parse_error(offset, "ring closure duplicates an existing bond"));
                }
                self.edges.push(Edge::new(open.atom, here, order));
            }
        }
        Ok(())
    }
}
