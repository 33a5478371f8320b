//! Affinity datasets on disk: three CSV files holding the drug registry,
//! the protein registry and the measured affinities.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::seeded_rng;
use crate::smiles::parse_smiles;

pub const DRUGS_FILE: &str = "drugs.csv";
pub const PROTEINS_FILE: &str = "proteins.csv";
pub const AFFINITIES_FILE: &str = "affinities.csv";
pub const DEFAULT_TEST_FRACTION: f64 = 1.0 / 6.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {reason}")]
    MalformedRow {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("{file}:{line}: unknown {kind} id {id:?}")]
    DanglingId {
        file: String,
        line: u64,
        kind: &'static str,
        id: String,
    },
    #[error("{file}:{line}: duplicate record ({drug_id}, {protein_id}, {measure})")]
    DuplicateRecord {
        file: String,
        line: u64,
        drug_id: String,
        protein_id: String,
        measure: Measure,
    },
    #[error("Kd must be positive, got {0}")]
    NonPositiveKd(f64),
    #[error("test fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// What a record's value measures. Raw files for `Pkd` hold Kd in nM and
/// files for `StitchScores` hold unscaled scores; both are transformed on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "pKd")]
    Pkd,
    #[serde(rename = "KIBA")]
    Kiba,
    #[serde(rename = "pKi")]
    Pki,
    #[serde(rename = "AC50")]
    Ac50,
    #[serde(rename = "STITCH_SCORES")]
    StitchScores,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::Pkd,
        Measure::Kiba,
        Measure::Pki,
        Measure::Ac50,
        Measure::StitchScores,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Pkd => "pKd",
            Measure::Kiba => "KIBA",
            Measure::Pki => "pKi",
            Measure::Ac50 => "AC50",
            Measure::StitchScores => "STITCH_SCORES",
        }
    }

    /// Map a raw file value to the stored value.
    pub fn transform(self, raw: f64) -> Result<f64> {
        match self {
            Measure::Pkd => pkd_transform(raw),
            Measure::StitchScores => Ok(stitch_scale(raw)),
            _ => Ok(raw),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                format!("unknown measure {s:?} (expected pKd, KIBA, pKi, AC50 or STITCH_SCORES)")
            })
    }
}

/// Kd in nanomolar to pKd: `-log10(Kd / 1e9)`.
pub fn pkd_transform(kd_nanomolar: f64) -> Result<f64> {
    if !(kd_nanomolar > 0.0) {
        return Err(DatasetError::NonPositiveKd(kd_nanomolar));
    }
    // 9 - log10(kd) is exact at powers of ten, unlike log10(kd / 1e9)
    Ok(9.0 - kd_nanomolar.log10())
}

pub fn stitch_scale(score: f64) -> f64 {
    score / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityRecord {
    pub drug_id: String,
    pub protein_id: String,
    pub value: f64,
    pub measure: Measure,
}

/// Rows skipped while loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Drugs whose SMILES failed to parse, with the parser message.
    pub dropped_drugs: Vec<(String, String)>,
    /// Affinity records removed along with those drugs.
    pub dropped_records: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffinityDataset {
    pub drugs: BTreeMap<String, String>,
    pub proteins: BTreeMap<String, String>,
    pub records: Vec<AffinityRecord>,
}

#[derive(Deserialize)]
struct RegistryRow(String, String);

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn malformed(file: &str, line: u64, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedRow {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

fn read_registry(path: &Path, kind: &str) -> Result<BTreeMap<String, String>> {
    let label = file_label(path);
    let mut reader = open(path)?;
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| malformed(&label, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = line_of(&row);
        if row.len() != 2 {
            return Err(malformed(&label, line, format!("expected 2 columns, found {}", row.len())));
        }
        let RegistryRow(id, text) = row
            .deserialize(None)
            .map_err(|e| malformed(&label, line, e.to_string()))?;
        if id.is_empty() {
            return Err(malformed(&label, line, format!("empty {kind} id")));
        }
        if kind == "protein" && !text.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(malformed(&label, line, "sequence contains non-letter characters"));
        }
        if out.insert(id.clone(), text).is_some() {
            return Err(malformed(&label, line, format!("duplicate {kind} id {id:?}")));
        }
    }
    Ok(out)
}

/// Read `drugs.csv` and `proteins.csv`, dropping drugs whose SMILES do not
/// parse.
pub fn load_registries(
    dir: &Path,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, String>, LoadReport)> {
    let mut drugs = read_registry(&dir.join(DRUGS_FILE), "drug")?;
    let proteins = read_registry(&dir.join(PROTEINS_FILE), "protein")?;
    let mut report = LoadReport::default();
    drugs.retain(|id, smiles| match parse_smiles(smiles) {
        Ok(g) if g.atom_count() > 0 => true,
        Ok(_) => {
            report.dropped_drugs.push((id.clone(), "no atoms".into()));
            false
        }
        Err(e) => {
            report.dropped_drugs.push((id.clone(), e.to_string()));
            false
        }
    });
    Ok((drugs, proteins, report))
}

impl AffinityDataset {
    /// Load `drugs.csv`, `proteins.csv` and `affinities.csv` from `dir`.
    ///
    /// Affinity rows with three columns hold raw values of `measure` and are
    /// transformed; rows with a fourth `measure` column hold stored values
    /// (the form written by [`AffinityDataset::save`]) and are taken as-is.
    /// Drugs whose SMILES do not parse are dropped with their records.
    pub fn load(dir: &Path, measure: Measure) -> Result<(Self, LoadReport)> {
        let (drugs, proteins, mut report) = load_registries(dir)?;
        let dropped: HashSet<&str> = report.dropped_drugs.iter().map(|(id, _)| id.as_str()).collect();

        let path = dir.join(AFFINITIES_FILE);
        let label = file_label(&path);
        let mut reader = open(&path)?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in reader.records() {
            let row = row.map_err(|e| malformed(&label, e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = line_of(&row);
            if row.len() != 3 && row.len() != 4 {
                return Err(malformed(
                    &label,
                    line,
                    format!("expected 3 or 4 columns, found {}", row.len()),
                ));
            }
            let drug_id = row[0].to_string();
            let protein_id = row[1].to_string();
            let raw: f64 = row[2]
                .parse()
                .map_err(|_| malformed(&label, line, format!("value {:?} is not a number", &row[2])))?;
            if !raw.is_finite() {
                return Err(malformed(&label, line, "value is not finite"));
            }
            let (value, measure) = match row.get(3) {
                Some(m) => (raw, m.parse().map_err(|e: String| malformed(&label, line, e))?),
                None => (
                    measure
                        .transform(raw)
                        .map_err(|e| malformed(&label, line, e.to_string()))?,
                    measure,
                ),
            };
            if dropped.contains(drug_id.as_str()) {
                report.dropped_records += 1;
                continue;
            }
            if !drugs.contains_key(&drug_id) {
                return Err(DatasetError::DanglingId {
                    file: label,
                    line,
                    kind: "drug",
                    id: drug_id,
                });
            }
            if !proteins.contains_key(&protein_id) {
                return Err(DatasetError::DanglingId {
                    file: label,
                    line,
                    kind: "protein",
                    id: protein_id,
                });
            }
            if !seen.insert((drug_id.clone(), protein_id.clone(), measure)) {
                return Err(DatasetError::DuplicateRecord {
                    file: label,
                    line,
                    drug_id,
                    protein_id,
                    measure,
                });
            }
            records.push(AffinityRecord {
                drug_id,
                protein_id,
                value,
                measure,
            });
        }
        if !report.dropped_drugs.is_empty() {
            log::warn!(
                "dropped {} drugs with unparseable SMILES and {} of their records",
                report.dropped_drugs.len(),
                report.dropped_records
            );
        }
        Ok((
            AffinityDataset {
                drugs,
                proteins,
                records,
            },
            report,
        ))
    }

    /// Write the dataset in stored-value form; `load` reproduces it exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(DRUGS_FILE))?;
        w.write_record(["id", "smiles"])?;
        for (id, smiles) in &self.drugs {
            w.write_record([id, smiles])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(PROTEINS_FILE))?;
        w.write_record(["id", "sequence"])?;
        for (id, seq) in &self.proteins {
            w.write_record([id, seq])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(AFFINITIES_FILE))?;
        w.write_record(["drug_id", "protein_id", "value", "measure"])?;
        for r in &self.records {
            // `{:?}` prints the shortest string that parses back to the same f64
            w.write_record([
                r.drug_id.as_str(),
                r.protein_id.as_str(),
                &format!("{:?}", r.value),
                r.measure.name(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    /// Same registries, a subset of records.
    pub fn with_records(&self, records: Vec<AffinityRecord>) -> Self {
        AffinityDataset {
            drugs: self.drugs.clone(),
            proteins: self.proteins.clone(),
            records,
        }
    }

    /// Seeded record-level shuffle split; the test part has
    /// `round(len * test_fraction)` records.
    pub fn split(&self, seed: u64, test_fraction: f64) -> Result<(Self, Self)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DatasetError::BadFraction(test_fraction));
        }
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut seeded_rng(seed));
        let n_test = (self.records.len() as f64 * test_fraction).round() as usize;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.records[i].clone()).collect();
        let (test, train) = order.split_at(n_test);
        Ok((self.with_records(pick(train)), self.with_records(pick(test))))
    }
}
