//! SMILES subset parser producing heavy-atom molecular graphs.
//!
//! Supported: organic-subset atoms (`B C N O P S F Cl Br I` and aromatic
//! `b c n o p s`), bracket atoms `[isotope? symbol chirality? Hcount?
//! charge? class?]`, bonds `- = # :` (stereo bonds `/ \` read as single),
//! branches, ring closures `0-9` / `%nn`, and `.` disconnections.
//!
//! Hydrogens written as bracket atoms (`[H]`, `[2H]`) are folded into the
//! hydrogen count of their neighbour; the returned graph holds heavy atoms
//! only. Aromaticity is taken from the notation, never perceived.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    EmptyInput,
    #[error("unbalanced branch at byte {position}")]
    UnbalancedBranch { position: usize },
    #[error("ring closure {ring} is never closed")]
    UnclosedRing { ring: u16 },
    #[error("unsupported token {token:?} at byte {position}")]
    UnknownToken { position: usize, token: char },
    #[error("token {token:?} at byte {position} is not allowed here")]
    Misplaced { position: usize, token: char },
    #[error("invalid bond at byte {position}: {reason}")]
    InvalidBond { position: usize, reason: &'static str },
    #[error("unterminated bracket atom starting at byte {position}")]
    UnterminatedBracket { position: usize },
}

const ELEMENT_SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// A chemical element, stored as its atomic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub const HYDROGEN: Element = Element(1);
    pub const BORON: Element = Element(5);
    pub const CARBON: Element = Element(6);
    pub const NITROGEN: Element = Element(7);
    pub const OXYGEN: Element = Element(8);
    pub const FLUORINE: Element = Element(9);
    pub const PHOSPHORUS: Element = Element(15);
    pub const SULFUR: Element = Element(16);
    pub const CHLORINE: Element = Element(17);
    pub const BROMINE: Element = Element(35);
    pub const IODINE: Element = Element(53);

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        ELEMENT_SYMBOLS
            .iter()
            .position(|s| *s == symbol)
            .map(|i| Element(i as u8 + 1))
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        (1..=118).contains(&z).then_some(Element(z))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        ELEMENT_SYMBOLS[self.0 as usize - 1]
    }

    /// Elements that may be written aromatic (lowercase).
    pub fn can_be_aromatic(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 15 | 16)
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    /// Hydrogen count written inside brackets; `None` for organic-subset atoms.
    pub explicit_h: Option<u8>,
    pub index: usize,
}

impl Atom {
    pub fn is_bracket(&self) -> bool {
        self.explicit_h.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Bond order in half-units (aromatic = 1.5 = 3 halves).
    pub fn halves(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        }
    }
}

/// Undirected bond; `a < b` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> Option<usize> {
        if self.a == atom {
            Some(self.b)
        } else if self.b == atom {
            Some(self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn bonds_of(&self, atom: usize) -> impl Iterator<Item = &Bond> + '_ {
        self.bonds.iter().filter(move |b| b.a == atom || b.b == atom)
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds_of(atom).count()
    }

    pub fn neighbors(&self, atom: usize) -> Vec<usize> {
        self.bonds_of(atom).filter_map(|b| b.other(atom)).collect()
    }
}

struct RingOpening {
    atom: usize,
    order: Option<BondOrder>,
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    branch_stack: Vec<usize>,
    prev: Option<usize>,
    pending_bond: Option<(BondOrder, usize)>,
    rings: HashMap<u16, RingOpening>,
}

/// Parse a SMILES string into a heavy-atom [`MolecularGraph`].
pub fn parse_smiles(text: &str) -> Result<MolecularGraph, SmilesError> {
    if text.is_empty() {
        return Err(SmilesError::EmptyInput);
    }
    if let Some((position, token)) = text.char_indices().find(|(_, c)| !c.is_ascii()) {
        return Err(SmilesError::UnknownToken { position, token });
    }
    let mut parser = Parser {
        text: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        branch_stack: Vec::new(),
        prev: None,
        pending_bond: None,
        rings: HashMap::new(),
    };
    parser.run()?;
    Ok(fold_hydrogens(parser.atoms, parser.bonds))
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<u8> {
        self.text.get(self.pos + offset).copied()
    }

    fn token_err(&self, position: usize) -> SmilesError {
        SmilesError::UnknownToken {
            position,
            token: self.text[position] as char,
        }
    }

    fn misplaced(&self, position: usize) -> SmilesError {
        SmilesError::Misplaced {
            position,
            token: self.text[position] as char,
        }
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        // Whether the next token must be an atom (start, after '(', '.' or a bond).
        let mut expect_atom = true;
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' | b'b' | b'c' | b'n'
                | b'o' | b'p' | b's' => {
                    let atom = self.organic_atom()?;
                    self.attach(atom, start)?;
                    expect_atom = false;
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.attach(atom, start)?;
                    expect_atom = false;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if self.prev.is_none() || self.pending_bond.is_some() {
                        return Err(SmilesError::InvalidBond {
                            position: start,
                            reason: "bond symbol without a preceding atom",
                        });
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        _ => BondOrder::Single,
                    };
                    self.pending_bond = Some((order, start));
                    self.pos += 1;
                    expect_atom = true;
                }
                b'(' => {
                    let Some(prev) = self.prev else {
                        return Err(SmilesError::UnbalancedBranch { position: start });
                    };
                    if expect_atom {
                        return Err(self.misplaced(start));
                    }
                    self.branch_stack.push(prev);
                    self.pos += 1;
                    expect_atom = true;
                }
                b')' => {
                    let Some(anchor) = self.branch_stack.pop() else {
                        return Err(SmilesError::UnbalancedBranch { position: start });
                    };
                    if expect_atom {
                        return Err(self.misplaced(start));
                    }
                    self.prev = Some(anchor);
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    // a ring digit may follow an atom, or a bond written after one
                    if expect_atom && self.pending_bond.is_none() {
                        return Err(self.misplaced(start));
                    }
                    let ring = self.ring_number()?;
                    self.ring_closure(ring, start)?;
                    expect_atom = false;
                }
                b'.' => {
                    if expect_atom || !self.branch_stack.is_empty() {
                        return Err(self.misplaced(start));
                    }
                    self.prev = None;
                    self.pos += 1;
                    expect_atom = true;
                }
                _ => return Err(self.token_err(start)),
            }
        }
        if !self.branch_stack.is_empty() {
            return Err(SmilesError::UnbalancedBranch {
                position: self.text.len(),
            });
        }
        if let Some((_, position)) = self.pending_bond {
            return Err(SmilesError::InvalidBond {
                position,
                reason: "dangling bond symbol",
            });
        }
        if let Some(ring) = self.rings.keys().min() {
            return Err(SmilesError::UnclosedRing { ring: *ring });
        }
        if expect_atom {
            return Err(SmilesError::Misplaced {
                position: self.text.len() - 1,
                token: *self.text.last().unwrap() as char,
            });
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, SmilesError> {
        let c = self.text[self.pos];
        let (element, aromatic, width) = match (c, self.peek_at(1)) {
            (b'C', Some(b'l')) => (Element::CHLORINE, false, 2),
            (b'B', Some(b'r')) => (Element::BROMINE, false, 2),
            (b'B', _) => (Element::BORON, false, 1),
            (b'C', _) => (Element::CARBON, false, 1),
            (b'N', _) => (Element::NITROGEN, false, 1),
            (b'O', _) => (Element::OXYGEN, false, 1),
            (b'P', _) => (Element::PHOSPHORUS, false, 1),
            (b'S', _) => (Element::SULFUR, false, 1),
            (b'F', _) => (Element::FLUORINE, false, 1),
            (b'I', _) => (Element::IODINE, false, 1),
            (b'b', _) => (Element::BORON, true, 1),
            (b'c', _) => (Element::CARBON, true, 1),
            (b'n', _) => (Element::NITROGEN, true, 1),
            (b'o', _) => (Element::OXYGEN, true, 1),
            (b'p', _) => (Element::PHOSPHORUS, true, 1),
            (b's', _) => (Element::SULFUR, true, 1),
            _ => return Err(self.token_err(self.pos)),
        };
        self.pos += width;
        Ok(Atom {
            element,
            aromatic,
            formal_charge: 0,
            explicit_h: None,
            index: 0,
        })
    }

    fn digits(&mut self) -> Option<u32> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.text[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        self.pos += 1;
        let _isotope = self.digits();

        let sym_start = self.pos;
        let first = self.peek().ok_or(SmilesError::UnterminatedBracket { position: open })?;
        let (element, aromatic) = if first.is_ascii_lowercase() {
            let element = match first {
                b'b' => Element::BORON,
                b'c' => Element::CARBON,
                b'n' => Element::NITROGEN,
                b'o' => Element::OXYGEN,
                b'p' => Element::PHOSPHORUS,
                b's' => Element::SULFUR,
                _ => return Err(self.token_err(sym_start)),
            };
            self.pos += 1;
            (element, true)
        } else if first.is_ascii_uppercase() {
            let two = self
                .peek_at(1)
                .filter(u8::is_ascii_lowercase)
                .and_then(|second| {
                    let sym = [first, second];
                    Element::from_symbol(std::str::from_utf8(&sym).ok()?)
                });
            match two {
                Some(element) => {
                    self.pos += 2;
                    (element, false)
                }
                None => {
                    let sym = [first];
                    let element = std::str::from_utf8(&sym)
                        .ok()
                        .and_then(Element::from_symbol)
                        .ok_or_else(|| self.token_err(sym_start))?;
                    self.pos += 1;
                    (element, false)
                }
            }
        } else {
            return Err(self.token_err(sym_start));
        };

        // Chirality: discarded.
        if self.peek() == Some(b'@') {
            while self.peek() == Some(b'@') {
                self.pos += 1;
            }
            let tag = (self.peek(), self.peek_at(1));
            if matches!(
                tag,
                (Some(b'T'), Some(b'H'))
                    | (Some(b'A'), Some(b'L'))
                    | (Some(b'S'), Some(b'P'))
                    | (Some(b'T'), Some(b'B'))
                    | (Some(b'O'), Some(b'H'))
            ) {
                self.pos += 2;
                self.digits();
            }
        }

        let mut hydrogens = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = match self.digits() {
                Some(n) => u8::try_from(n).map_err(|_| self.token_err(self.pos - 1))?,
                None => 1,
            };
        }

        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.digits() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }
        let formal_charge = i8::try_from(charge).map_err(|_| self.token_err(self.pos - 1))?;

        // Atom class: discarded.
        if self.peek() == Some(b':') {
            self.pos += 1;
            if self.digits().is_none() {
                return Err(self.token_err(self.pos.min(self.text.len() - 1)));
            }
        }

        match self.peek() {
            Some(b']') => self.pos += 1,
            Some(_) => return Err(self.token_err(self.pos)),
            None => return Err(SmilesError::UnterminatedBracket { position: open }),
        }

        Ok(Atom {
            element,
            aromatic,
            formal_charge,
            explicit_h: Some(hydrogens),
            index: 0,
        })
    }

    fn ring_number(&mut self) -> Result<u16, SmilesError> {
        let start = self.pos;
        if self.text[start] == b'%' {
            let (Some(d1 @ b'0'..=b'9'), Some(d2 @ b'0'..=b'9')) = (self.peek_at(1), self.peek_at(2))
            else {
                return Err(self.token_err(start));
            };
            self.pos += 3;
            Ok(u16::from(d1 - b'0') * 10 + u16::from(d2 - b'0'))
        } else {
            self.pos += 1;
            Ok(u16::from(self.text[start] - b'0'))
        }
    }

    fn ring_closure(&mut self, ring: u16, position: usize) -> Result<(), SmilesError> {
        let current = self.prev.expect("ring closure follows an atom");
        let order = self.pending_bond.take().map(|(o, _)| o);
        match self.rings.remove(&ring) {
            None => {
                self.rings.insert(ring, RingOpening { atom: current, order });
            }
            Some(open) => {
                let order = match (open.order, order) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(SmilesError::InvalidBond {
                            position,
                            reason: "ring closure bond orders disagree",
                        })
                    }
                    (Some(a), _) | (None, Some(a)) => Some(a),
                    (None, None) => None,
                };
                self.add_bond(open.atom, current, order, position)?;
            }
        }
        Ok(())
    }

    fn attach(&mut self, mut atom: Atom, position: usize) -> Result<(), SmilesError> {
        let index = self.atoms.len();
        atom.index = index;
        self.atoms.push(atom);
        let order = self.pending_bond.take().map(|(o, _)| o);
        if let Some(prev) = self.prev {
            self.add_bond(prev, index, order, position)?;
        }
        self.prev = Some(index);
        Ok(())
    }

    fn add_bond(
        &mut self,
        a: usize,
        b: usize,
        order: Option<BondOrder>,
        position: usize,
    ) -> Result<(), SmilesError> {
        if a == b {
            return Err(SmilesError::InvalidBond {
                position,
                reason: "atom bonded to itself",
            });
        }
        let (a, b) = (a.min(b), a.max(b));
        if self.bonds.iter().any(|bond| bond.a == a && bond.b == b) {
            return Err(SmilesError::InvalidBond {
                position,
                reason: "duplicate bond between the same atoms",
            });
        }
        let order = order.unwrap_or(if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }
}

/// Remove bracket hydrogen atoms, crediting them to bracket neighbours.
/// Organic-subset neighbours recover the hydrogen through the valence rule.
fn fold_hydrogens(mut atoms: Vec<Atom>, bonds: Vec<Bond>) -> MolecularGraph {
    let is_h: Vec<bool> = atoms
        .iter()
        .map(|a| a.element == Element::HYDROGEN)
        .collect();
    if !is_h.iter().any(|&h| h) {
        return MolecularGraph { atoms, bonds };
    }
    for bond in &bonds {
        for (h, heavy) in [(bond.a, bond.b), (bond.b, bond.a)] {
            if is_h[h] && !is_h[heavy] {
                if let Some(count) = atoms[heavy].explicit_h.as_mut() {
                    *count = count.saturating_add(1);
                }
            }
        }
    }
    let mut remap = vec![usize::MAX; atoms.len()];
    let mut kept = Vec::with_capacity(atoms.len());
    for (old, mut atom) in atoms.drain(..).enumerate() {
        if !is_h[old] {
            remap[old] = kept.len();
            atom.index = kept.len();
            kept.push(atom);
        }
    }
    let bonds = bonds
        .into_iter()
        .filter(|b| !is_h[b.a] && !is_h[b.b])
        .map(|b| Bond {
            a: remap[b.a],
            b: remap[b.b],
            order: b.order,
        })
        .collect();
    MolecularGraph { atoms: kept, bonds }
}
