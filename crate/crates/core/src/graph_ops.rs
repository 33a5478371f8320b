//! Power graphs and symmetric normalization of drug adjacency matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{featurize, AdjacencyMatrix, FeaturizeError};
use crate::smiles::MolecularGraph;

pub const MAX_POWER: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphOpsError {
    #[error("power-graph exponent must be 1, 2 or 3, got {0}")]
    BadExponent(usize),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
}

/// How the k-th adjacency input of a drug is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerMode {
    /// Graph power: connect nodes within k hops, zero diagonal.
    #[default]
    Binarized,
    /// Walk-count matrix A^k, diagonal included.
    Raw,
}

impl std::str::FromStr for PowerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binarized" => Ok(PowerMode::Binarized),
            "raw" => Ok(PowerMode::Raw),
            other => Err(format!("unknown power mode {other:?} (expected binarized|raw)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub values: Array2<f64>,
    pub power: usize,
}

/// Node features plus the normalized A, A^2 and A^3 inputs of one drug.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub features: Array2<f64>,
    pub adjacency: [NormalizedAdjacency; MAX_POWER],
}

impl GraphInputs {
    pub fn atom_count(&self) -> usize {
        self.features.nrows()
    }

    /// Relabel atoms: new atom `i` is old atom `perm[i]`.
    pub fn permute_atoms(&self, perm: &[usize]) -> GraphInputs {
        let n = self.atom_count();
        assert_eq!(perm.len(), n, "permutation length");
        let features = Array2::from_shape_fn(self.features.dim(), |(i, c)| {
            self.features[[perm[i], c]]
        });
        let adjacency = self.adjacency.clone().map(|adj| NormalizedAdjacency {
            values: Array2::from_shape_fn((n, n), |(i, j)| adj.values[[perm[i], perm[j]]]),
            power: adj.power,
        });
        GraphInputs { features, adjacency }
    }
}

fn check_exponent(k: usize) -> Result<(), GraphOpsError> {
    if (1..=MAX_POWER).contains(&k) {
        Ok(())
    } else {
        Err(GraphOpsError::BadExponent(k))
    }
}

/// Connect every pair of distinct nodes at shortest-path distance <= k.
pub fn power_graph(a: &AdjacencyMatrix, k: usize) -> Result<AdjacencyMatrix, GraphOpsError> {
    check_exponent(k)?;
    let n = a.size();
    let mut reach = a.0.clone();
    for _ in 1..k {
        // one more hop from every currently reachable node
        let mut next = reach.clone();
        for i in 0..n {
            for m in 0..n {
                if reach[[i, m]] == 0 {
                    continue;
                }
                for j in 0..n {
                    if a.0[[m, j]] != 0 && i != j {
                        next[[i, j]] = 1;
                    }
                }
            }
        }
        reach = next;
    }
    Ok(AdjacencyMatrix(reach))
}

/// Integer walk-count power A^k as reals.
pub fn raw_power(a: &AdjacencyMatrix, k: usize) -> Result<Array2<f64>, GraphOpsError> {
    check_exponent(k)?;
    let base = a.0.mapv(f64::from);
    let mut out = base.clone();
    for _ in 1..k {
        out = out.dot(&base);
    }
    Ok(out)
}

/// D^{-1/2} (W + I) D^{-1/2}, D the row sums of W + I.
pub fn sym_normalize_weighted(weights: &Array2<f64>, power: usize) -> NormalizedAdjacency {
    let n = weights.nrows();
    let mut w = weights.clone();
    for i in 0..n {
        w[[i, i]] += 1.0;
    }
    let degree: Vec<f64> = w.rows().into_iter().map(|r| r.sum()).collect();
    // sqrt(d_i * d_j) keeps the result exactly symmetric
    let values = Array2::from_shape_fn((n, n), |(i, j)| {
        let wij = w[[i, j]];
        if wij == 0.0 {
            0.0
        } else {
            wij / (degree[i] * degree[j]).sqrt()
        }
    });
    NormalizedAdjacency { values, power }
}

pub fn sym_normalize(a: &AdjacencyMatrix) -> NormalizedAdjacency {
    sym_normalize_weighted(&a.0.mapv(f64::from), 1)
}

pub fn normalized_power(
    a: &AdjacencyMatrix,
    k: usize,
    mode: PowerMode,
) -> Result<NormalizedAdjacency, GraphOpsError> {
    let weights = match mode {
        PowerMode::Binarized => power_graph(a, k)?.0.mapv(f64::from),
        PowerMode::Raw => raw_power(a, k)?,
    };
    Ok(sym_normalize_weighted(&weights, k))
}

pub fn build_graph_inputs(
    graph: &MolecularGraph,
    mode: PowerMode,
) -> Result<GraphInputs, GraphOpsError> {
    let (x, a) = featurize(graph)?;
    Ok(GraphInputs {
        features: x.0,
        adjacency: [
            normalized_power(&a, 1, mode)?,
            normalized_power(&a, 2, mode)?,
            normalized_power(&a, 3, mode)?,
        ],
    })
}
