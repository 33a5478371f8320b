//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use deepglstm::autodiff::{seeded_rng, Rng};
use deepglstm::datasets::{AffinityDataset, AffinityRecord, Measure};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const TOY_SEQ_LEN: usize = 64;

/// Drug-like molecules with rings, charges, brackets and aromatic systems.
pub const REFERENCE_SMILES: [&str; 12] = [
    "CC(=O)Oc1ccccc1C(=O)O",
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "CC(=O)Nc1ccc(O)cc1",
    "Cc1ccc(cc1Nc1nccc(n1)c1cccnc1)NC(=O)c1ccc(cc1)CN1CCN(C)CC1",
    "C[N+](C)(C)CC(=O)[O-]",
    "O=C(O)c1ccccc1O",
    "C1CCC2(CC1)OCCO2",
    "c1ccc2ccccc2c1",
    "N#Cc1ccc(Cl)cc1F",
    "CS(=O)(=O)N1CCC(CC1)Nc1ncc(Br)cn1",
    "C=CC(=O)N[C@@H](Cc1c[nH]c2ccccc12)C(=O)O",
];

const ALIPHATIC: [&str; 10] = ["C", "C", "C", "C", "N", "O", "S", "F", "Cl", "N"];

/// A random connected molecule written as SMILES: a spanning tree of
/// aliphatic atoms with extra ring closures, occasional double bonds and
/// phenyl or pyridyl substituents.
pub fn random_smiles(rng: &mut Rng, min_atoms: usize, max_atoms: usize) -> String {
    let n = rng.gen_range(min_atoms..=max_atoms);
    let elements: Vec<&str> = (0..n)
        .map(|i| if i == 0 { "C" } else { ALIPHATIC[rng.gen_range(0..ALIPHATIC.len())] })
        .collect();
    // halogens are terminal: only carbons and heteroatoms get children
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut parent = vec![usize::MAX; n];
    for i in 1..n {
        let candidates: Vec<usize> = (0..i)
            .filter(|&j| !matches!(elements[j], "F" | "Cl") && children[j].len() < 3)
            .collect();
        let p = *candidates.choose(rng).unwrap_or(&0);
        parent[i] = p;
        children[p].push(i);
    }
    let mut closures: Vec<(usize, usize)> = Vec::new();
    for _ in 0..rng.gen_range(0..=2) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let terminal = |x: usize| matches!(elements[x], "F" | "Cl");
        let bonded = parent[a] == b || parent[b] == a;
        let used = closures.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a));
        if a != b && !bonded && !used && !terminal(a) && !terminal(b) {
            closures.push((a.min(b), a.max(b)));
        }
    }
    let double: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
    let aryl: Vec<Option<&str>> = (0..n)
        .map(|i| {
            (elements[i] == "C" && rng.gen_bool(0.12))
                .then(|| if rng.gen_bool(0.7) { "c%Rccccc%R" } else { "c%Rccncc%R" })
        })
        .collect();

    let mut out = String::new();
    let mut next_ring = 1;
    let mut open: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    write_atom(0, &elements, &children, &closures, &double, &aryl, &mut open, &mut next_ring, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn write_atom(
    i: usize,
    elements: &[&str],
    children: &[Vec<usize>],
    closures: &[(usize, usize)],
    double: &[bool],
    aryl: &[Option<&str>],
    open: &mut BTreeMap<(usize, usize), usize>,
    next_ring: &mut usize,
    out: &mut String,
) {
    out.push_str(elements[i]);
    for &(a, b) in closures {
        if a == i || b == i {
            let key = (a, b);
            if let Some(r) = open.remove(&key) {
                push_ring(r, out);
            } else {
                let r = *next_ring;
                *next_ring += 1;
                open.insert(key, r);
                push_ring(r, out);
            }
        }
    }
    if let Some(template) = aryl[i] {
        let r = *next_ring;
        *next_ring += 1;
        let mut label = String::new();
        push_ring(r, &mut label);
        out.push('(');
        out.push_str(&template.replace("%R", &label));
        out.push(')');
    }
    let kids = &children[i];
    for (k, &c) in kids.iter().enumerate() {
        let last = k + 1 == kids.len();
        if !last {
            out.push('(');
        }
        if double[c] && elements[c] != "F" && elements[c] != "Cl" {
            out.push('=');
        }
        write_atom(c, elements, children, closures, double, aryl, open, next_ring, out);
        if !last {
            out.push(')');
        }
    }
}

fn push_ring(r: usize, out: &mut String) {
    if r < 10 {
        let _ = write!(out, "{r}");
    } else {
        let _ = write!(out, "%{r:02}");
    }
}

const RESIDUES: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

pub fn random_protein(rng: &mut Rng, min_len: usize, max_len: usize) -> String {
    let len = rng.gen_range(min_len..=max_len);
    (0..len)
        .map(|_| RESIDUES[rng.gen_range(0..RESIDUES.len())] as char)
        .collect()
}

/// 8 drugs x 4 proteins with affinities spread over 5..9.
pub fn toy_dataset(seed: u64) -> AffinityDataset {
    let mut rng = seeded_rng(seed);
    let drugs: BTreeMap<String, String> = REFERENCE_SMILES[..8]
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("D{i}"), s.to_string()))
        .collect();
    let proteins: BTreeMap<String, String> = (0..4)
        .map(|i| (format!("P{i}"), random_protein(&mut rng, 30, 60)))
        .collect();
    let mut records = Vec::new();
    for d in drugs.keys() {
        for p in proteins.keys() {
            records.push(AffinityRecord {
                drug_id: d.clone(),
                protein_id: p.clone(),
                value: 5.0 + 4.0 * rng.gen::<f64>(),
                measure: Measure::Pkd,
            });
        }
    }
    AffinityDataset {
        drugs,
        proteins,
        records,
    }
}

/// Davis-shaped synthetic data written as raw Kd (nM) CSVs: 68 drugs,
/// `n_proteins` kinase-length sequences, and `n_pairs` sampled pairs. Most
/// pairs sit at the 10 µM floor (pKd 5); the rest follow additive drug and
/// protein effects plus a low-rank interaction.
pub fn write_davis_like(dir: &Path, seed: u64, n_proteins: usize, n_pairs: usize, seq_range: (usize, usize)) {
    let mut rng = seeded_rng(seed);
    let n_drugs = 68;
    let drugs: Vec<String> = (0..n_drugs).map(|_| random_smiles(&mut rng, 12, 34)).collect();
    let proteins: Vec<String> = (0..n_proteins)
        .map(|_| random_protein(&mut rng, seq_range.0, seq_range.1))
        .collect();
    let drug_effect: Vec<f64> = (0..n_drugs).map(|_| rng.gen_range(-1.5..2.0)).collect();
    let protein_effect: Vec<f64> = (0..n_proteins).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let u: Vec<[f64; 2]> = (0..n_drugs).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let v: Vec<[f64; 2]> = (0..n_proteins).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();

    let mut pairs: Vec<(usize, usize)> = (0..n_drugs)
        .flat_map(|d| (0..n_proteins).map(move |p| (d, p)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(n_pairs);

    let mut drugs_csv = String::from("id,smiles\n");
    for (i, s) in drugs.iter().enumerate() {
        let _ = writeln!(drugs_csv, "DRUG{i:03},{s}");
    }
    let mut proteins_csv = String::from("id,sequence\n");
    for (i, s) in proteins.iter().enumerate() {
        let _ = writeln!(proteins_csv, "KIN{i:03},{s}");
    }
    let mut aff = String::from("drug_id,protein_id,value\n");
    for (d, p) in pairs {
        let signal = drug_effect[d] + protein_effect[p] + u[d][0] * v[p][0] + u[d][1] * v[p][1];
        let noise = 0.1 * (rng.gen::<f64>() - 0.5);
        let pkd = 5.0 + (signal + noise).max(0.0);
        let kd = 10f64.powf(9.0 - pkd);
        let _ = writeln!(aff, "DRUG{d:03},KIN{p:03},{kd}");
    }
    std::fs::write(dir.join("drugs.csv"), drugs_csv).unwrap();
    std::fs::write(dir.join("proteins.csv"), proteins_csv).unwrap();
    std::fs::write(dir.join("affinities.csv"), aff).unwrap();
}

/// Every labelled connected simple graph on `n` nodes, as adjacency lists of
/// edges (`n <= 6` gives at most 2^15 candidates).
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let slots: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << slots.len()) {
        let edges: Vec<(usize, usize)> = slots
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, &e)| e)
            .collect();
        if is_connected(n, &edges) {
            out.push(edges);
        }
    }
    out
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(a, b) in edges {
            let w = if a == v { b } else if b == v { a } else { continue };
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().all(|&s| s)
}
