//! Combined scoring of KIBA-model and pKd-model predictions for ranking
//! candidate drugs against a target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepurposeError {
    #[error("no rows to score")]
    EmptyBatch,
    #[error("maximum {column} prediction is {max}, must be positive")]
    NonPositiveMax { column: &'static str, max: f64 },
    #[error("no scored rows for protein {0:?}")]
    UnknownProtein(String),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub drug_id: String,
    pub protein_id: String,
    pub kiba_pred: f64,
    pub pkd_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedScoreRow {
    pub drug_id: String,
    pub protein_id: String,
    pub kiba_pred: f64,
    pub pkd_pred: f64,
    pub k_component: f64,
    pub d_component: f64,
    pub cb: f64,
}

/// Per-pair combined score `cb = (K + D) / 2` with `K = 1 − KB/max(KB)`
/// (low KIBA means strong binding) and `D = DB/max(DB)`, maxima over the
/// batch. Negative predictions are clipped to zero first.
pub fn combined_scores(rows: &[PredictionRow]) -> Result<Vec<CombinedScoreRow>, RepurposeError> {
    if rows.is_empty() {
        return Err(RepurposeError::EmptyBatch);
    }
    let clipped = rows
        .iter()
        .filter(|r| r.kiba_pred < 0.0 || r.pkd_pred < 0.0)
        .count();
    if clipped > 0 {
        log::info!("clipped negative predictions to 0 in {clipped} rows");
    }
    let kb: Vec<f64> = rows.iter().map(|r| r.kiba_pred.max(0.0)).collect();
    let db: Vec<f64> = rows.iter().map(|r| r.pkd_pred.max(0.0)).collect();
    let max_of = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (max_kb, max_db) = (max_of(&kb), max_of(&db));
    if !(max_kb > 0.0) {
        return Err(RepurposeError::NonPositiveMax {
            column: "kiba",
            max: max_kb,
        });
    }
    if !(max_db > 0.0) {
        return Err(RepurposeError::NonPositiveMax {
            column: "pkd",
            max: max_db,
        });
    }
    Ok(rows
        .iter()
        .zip(kb.iter().zip(&db))
        .map(|(r, (&k, &d))| {
            let k_component = 1.0 - k / max_kb;
            let d_component = d / max_db;
            CombinedScoreRow {
                drug_id: r.drug_id.clone(),
                protein_id: r.protein_id.clone(),
                kiba_pred: r.kiba_pred,
                pkd_pred: r.pkd_pred,
                k_component,
                d_component,
                cb: (k_component + d_component) / 2.0,
            }
        })
        .collect())
}

/// Descending cb, ties by ascending drug id.
pub fn sort_scores(rows: &mut [CombinedScoreRow]) {
    rows.sort_by(|a, b| {
        b.cb.total_cmp(&a.cb)
            .then_with(|| a.drug_id.cmp(&b.drug_id))
            .then_with(|| a.protein_id.cmp(&b.protein_id))
    });
}

/// The `k` best-scoring drugs for `protein_id`, best first.
pub fn rank_top_k(
    scored: &[CombinedScoreRow],
    protein_id: &str,
    k: usize,
) -> Result<Vec<CombinedScoreRow>, RepurposeError> {
    if k == 0 {
        return Err(RepurposeError::ZeroK);
    }
    let mut rows: Vec<CombinedScoreRow> = scored
        .iter()
        .filter(|r| r.protein_id == protein_id)
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(RepurposeError::UnknownProtein(protein_id.to_string()));
    }
    sort_scores(&mut rows);
    rows.truncate(k);
    Ok(rows)
}
