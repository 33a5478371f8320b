//! Atom feature rows (78 binary columns) and adjacency matrices.

use ndarray::Array2;
use thiserror::Error;

use crate::smiles::{Element, MolecularGraph};

pub const NUM_ATOM_FEATURES: usize = 78;

/// Atom-symbol vocabulary; a symbol outside it maps to the trailing "other" slot.
pub const ATOM_SYMBOLS: [&str; 43] = [
    "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg", "Na", "Ca", "Fe", "As", "Al", "I", "B",
    "V", "K", "Tl", "Yb", "Sb", "Sn", "Ag", "Pd", "Co", "Se", "Ti", "Zn", "H", "Li", "Ge", "Cu",
    "Au", "Ni", "Cd", "In", "Mn", "Zr", "Cr", "Pt", "Hg", "Pb",
];

pub const SYMBOL_OFFSET: usize = 0;
pub const SYMBOL_SLOTS: usize = 44;
pub const DEGREE_OFFSET: usize = 44;
pub const HYDROGEN_OFFSET: usize = 55;
pub const VALENCE_OFFSET: usize = 66;
pub const COUNT_SLOTS: usize = 11;
pub const AROMATIC_COLUMN: usize = 77;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeaturizeError {
    #[error("atom index {index} out of range for a graph with {atoms} atoms")]
    IndexOutOfRange { index: usize, atoms: usize },
    #[error("cannot featurize a graph with no atoms")]
    EmptyGraph,
}

/// N x 78 binary matrix, one row per atom in parse order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix(pub Array2<f64>);

/// Symmetric 0/1 matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix(pub Array2<u8>);

impl AdjacencyMatrix {
    pub fn from_graph(graph: &MolecularGraph) -> Self {
        let n = graph.atom_count();
        let mut a = Array2::zeros((n, n));
        for bond in &graph.bonds {
            a[[bond.a, bond.b]] = 1;
            a[[bond.b, bond.a]] = 1;
        }
        AdjacencyMatrix(a)
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_valid(&self) -> bool {
        let a = &self.0;
        let n = a.nrows();
        a.ncols() == n
            && (0..n).all(|i| {
                a[[i, i]] == 0 && (0..n).all(|j| a[[i, j]] <= 1 && a[[i, j]] == a[[j, i]])
            })
    }
}

/// Valence used to infer implicit hydrogens, adjusted by formal charge:
/// cations of N/P/O/S gain one bond per unit charge, anions lose one.
/// Boron follows the opposite rule (B- is tetravalent) and carbon loses
/// one bond for either sign.
pub fn default_valence(element: Element, formal_charge: i8) -> Option<i32> {
    let base = match element {
        Element::CARBON => 4,
        Element::NITROGEN | Element::PHOSPHORUS | Element::BORON => 3,
        Element::OXYGEN | Element::SULFUR => 2,
        Element::FLUORINE | Element::CHLORINE | Element::BROMINE | Element::IODINE => 1,
        _ => return None,
    };
    let charge = i32::from(formal_charge);
    let adjusted = match element {
        Element::BORON => base - charge,
        Element::CARBON => base - charge.abs(),
        _ => base + charge,
    };
    Some(adjusted.max(0))
}

/// (attached hydrogens, implicit valence) of one atom.
///
/// Bracket atoms report their written H count and zero implicit valence.
/// Organic-subset atoms infer hydrogens from the default valence minus the
/// bond-order sum (aromatic bonds as 1.5, total rounded down), clamped at 0,
/// and report the same number as implicit valence.
pub fn hydrogen_counts(graph: &MolecularGraph, atom: usize) -> (usize, usize) {
    let a = &graph.atoms[atom];
    if let Some(h) = a.explicit_h {
        return (usize::from(h), 0);
    }
    let halves: u32 = graph.bonds_of(atom).map(|b| b.order.halves()).sum();
    let bond_sum = (halves / 2) as i32;
    let h = default_valence(a.element, a.formal_charge)
        .map(|v| (v - bond_sum).max(0) as usize)
        .unwrap_or(0);
    (h, h)
}

pub fn symbol_slot(element: Element) -> usize {
    ATOM_SYMBOLS
        .iter()
        .position(|s| *s == element.symbol())
        .unwrap_or(SYMBOL_SLOTS - 1)
}

pub fn atom_feature_row(
    atom_index: usize,
    graph: &MolecularGraph,
) -> Result<[f64; NUM_ATOM_FEATURES], FeaturizeError> {
    let atom = graph
        .atoms
        .get(atom_index)
        .ok_or(FeaturizeError::IndexOutOfRange {
            index: atom_index,
            atoms: graph.atom_count(),
        })?;
    let mut row = [0.0; NUM_ATOM_FEATURES];
    let clamp = |v: usize| v.min(COUNT_SLOTS - 1);
    let (h, implicit) = hydrogen_counts(graph, atom_index);
    row[SYMBOL_OFFSET + symbol_slot(atom.element)] = 1.0;
    row[DEGREE_OFFSET + clamp(graph.degree(atom_index))] = 1.0;
    row[HYDROGEN_OFFSET + clamp(h)] = 1.0;
    row[VALENCE_OFFSET + clamp(implicit)] = 1.0;
    if atom.aromatic {
        row[AROMATIC_COLUMN] = 1.0;
    }
    Ok(row)
}

pub fn featurize(
    graph: &MolecularGraph,
) -> Result<(NodeFeatureMatrix, AdjacencyMatrix), FeaturizeError> {
    let n = graph.atom_count();
    if n == 0 {
        return Err(FeaturizeError::EmptyGraph);
    }
    let mut x = Array2::zeros((n, NUM_ATOM_FEATURES));
    for i in 0..n {
        let row = atom_feature_row(i, graph)?;
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok((NodeFeatureMatrix(x), AdjacencyMatrix::from_graph(graph)))
}
