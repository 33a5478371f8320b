//! Training loop, evaluation and input preparation.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;


use crate::autodiff::{
    finite_difference_check, seeded_rng, Adam, AdamConfig, AutodiffError, GradCheckReport, Scalar, Tape,
};
use crate::datasets::{AffinityDataset, AffinityRecord, DatasetError};
use crate::graph_ops::{build_graph_inputs, GraphOpsError, PowerMode};
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::checkpoint::{save_checkpoint, CheckpointError};
use crate::model::{HyperParams, Mode, ModelConfig, ModelError, ModelParameters, PairBatch, PreparedDrug};
use crate::protein::{tokenize, ProteinError, TokenSequence};
use crate::smiles::{parse_smiles, SmilesError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("drug {id}: {source}")]
    Smiles { id: String, source: SmilesError },
    #[error("drug {id}: {source}")]
    Graph { id: String, source: GraphOpsError },
    #[error("protein {id}: {source}")]
    Protein { id: String, source: ProteinError },
    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch}: {records:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        records: Vec<(String, String)>,
    },
    #[error("batch size {batch_size} exceeds the {records} training records")]
    BatchTooLarge { batch_size: usize, records: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid hyperparameters: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Drug graphs and protein tokens keyed by registry id, built once.
#[derive(Debug, Clone)]
pub struct PreparedInputs<T: Scalar> {
    pub drugs: HashMap<String, PreparedDrug<T>>,
    pub proteins: HashMap<String, TokenSequence>,
    pub seq_len: usize,
}

impl<T: Scalar> PreparedInputs<T> {
    /// Featurize every drug and tokenize every protein in the registries.
    pub fn from_dataset(dataset: &AffinityDataset, mode: PowerMode, seq_len: usize) -> Result<Self> {
        let drug_list: Vec<(&String, &String)> = dataset.drugs.iter().collect();
        let drugs = drug_list
            .par_iter()
            .map(|&(id, smiles)| Ok((id.clone(), prepare_drug(id, smiles, mode)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        let proteins = dataset
            .proteins
            .iter()
            .map(|(id, seq)| {
                tokenize(seq, seq_len)
                    .map(|t| (id.clone(), t))
                    .map_err(|source| TrainError::Protein {
                        id: id.clone(),
                        source,
                    })
            })
            .collect::<Result<_>>()?;
        Ok(PreparedInputs {
            drugs,
            proteins,
            seq_len,
        })
    }

    fn drug(&self, id: &str) -> Result<&PreparedDrug<T>> {
        self.drugs.get(id).ok_or_else(|| TrainError::UnknownId {
            kind: "drug",
            id: id.to_string(),
        })
    }

    fn protein(&self, id: &str) -> Result<&TokenSequence> {
        self.proteins.get(id).ok_or_else(|| TrainError::UnknownId {
            kind: "protein",
            id: id.to_string(),
        })
    }

    fn batch<'a>(&'a self, records: &[&'a AffinityRecord]) -> Result<PairBatch<'a, T>> {
        let mut batch = PairBatch::new();
        for r in records {
            batch.push(
                &r.drug_id,
                self.drug(&r.drug_id)?,
                &r.protein_id,
                self.protein(&r.protein_id)?,
            );
        }
        Ok(batch)
    }
}

pub fn prepare_drug<T: Scalar>(id: &str, smiles: &str, mode: PowerMode) -> Result<PreparedDrug<T>> {
    let graph = parse_smiles(smiles).map_err(|source| TrainError::Smiles {
        id: id.to_string(),
        source,
    })?;
    let inputs = build_graph_inputs(&graph, mode).map_err(|source| TrainError::Graph {
        id: id.to_string(),
        source,
    })?;
    Ok(PreparedDrug::new(&inputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub model: ModelConfig,
    /// Checkpoint path rewritten every `checkpoint_every` epochs and at the end.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Line-delimited JSON epoch log.
    pub log_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(hyper: HyperParams, model: ModelConfig) -> Self {
        TrainConfig {
            hyper,
            model,
            checkpoint: None,
            checkpoint_every: None,
            log_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Eval-mode MSE over the training set after the epoch's updates.
    pub train_mse: f64,
    /// Mean of the (dropout-mode) mini-batch losses during the epoch.
    pub mean_batch_loss: f64,
    pub test_mse: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// Equality of everything but wall time, bit for bit.
    pub fn same_trajectory(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && self.train_mse.to_bits() == other.train_mse.to_bits()
            && self.mean_batch_loss.to_bits() == other.mean_batch_loss.to_bits()
            && self.test_mse.map(f64::to_bits) == other.test_mse.map(f64::to_bits)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub logs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub measured: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<f64>,
    pub scatter: Vec<ScatterRow>,
}

/// Eval-mode predictions in record order.
pub fn predict_records<T: Scalar>(
    params: &ModelParameters<T>,
    inputs: &PreparedInputs<T>,
    records: &[AffinityRecord],
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&AffinityRecord> = records.iter().collect();
    let batch = inputs.batch(&refs)?;
    let predictions = params.predict_pairs(&batch)?;
    Ok(predictions.into_iter().map(|v| v.as_f64()).collect())
}

pub fn evaluate<T: Scalar>(
    params: &ModelParameters<T>,
    inputs: &PreparedInputs<T>,
    dataset: &AffinityDataset,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let predictions = predict_records(params, inputs, &dataset.records)?;
    let truth = dataset.values();
    let report = MetricsReport::compute(&predictions, &truth)?;
    let scatter = truth
        .iter()
        .zip(&predictions)
        .map(|(&measured, &predicted)| ScatterRow {
            measured,
            predicted,
        })
        .collect();
    Ok(Evaluation {
        report,
        predictions,
        scatter,
    })
}

/// Mini-batch Adam on the MSE loss. The seed fixes initialization, every
/// epoch's shuffle and every dropout mask.
pub fn train(
    config: &TrainConfig,
    train_set: &AffinityDataset,
    test_set: Option<&AffinityDataset>,
) -> Result<TrainOutcome> {
    let hp = config.hyper;
    hp.validate().map_err(TrainError::InvalidConfig)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if hp.batch_size > train_set.len() {
        return Err(TrainError::BatchTooLarge {
            batch_size: hp.batch_size,
            records: train_set.len(),
        });
    }
    let inputs = PreparedInputs::<f32>::from_dataset(train_set, config.model.power_mode, hp.seq_len)?;
    let test_inputs = match test_set {
        Some(t) if !t.is_empty() => Some((
            t,
            PreparedInputs::<f32>::from_dataset(t, config.model.power_mode, hp.seq_len)?,
        )),
        _ => None,
    };

    let mut params = ModelParameters::<f32>::init(config.model, hp.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: hp.lr,
            ..AdamConfig::default()
        },
        params.values(),
    );
    // a separate stream from initialization
    let mut rng = seeded_rng(hp.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log_file = match &config.log_path {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(path)?))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(hp.epochs);
    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let records: Vec<&AffinityRecord> = idx.iter().map(|&i| &train_set.records[i]).collect();
            let batch = inputs.batch(&records)?;
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let pred = params.forward(&mut tape, &vars, &batch, &mut Mode::Train(&mut rng), hp.dropout)?;
            let target = Array2::from_shape_fn((records.len(), 1), |(i, _)| records[i].value as f32);
            let target = tape.constant(target);
            let loss = tape.mse(pred, target)?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    records: records
                        .iter()
                        .map(|r| (r.drug_id.clone(), r.protein_id.clone()))
                        .collect(),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Array2<f32>> = vars
                .iter()
                .zip(params.values())
                .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Array2::zeros(p.dim())))
                .collect();
            drop(tape);
            adam.step(params.values_mut(), &grads)?;
            loss_sum += f64::from(loss_value);
            batches += 1;
        }

        let train_mse = evaluate(&params, &inputs, train_set)?.report.mse;
        let test_mse = match &test_inputs {
            Some((t, ti)) => Some(evaluate(&params, ti, t)?.report.mse),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            train_mse,
            mean_batch_loss: loss_sum / batches as f64,
            test_mse,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train mse {train_mse:.5}{}",
            test_mse.map_or(String::new(), |m| format!(", test mse {m:.5}"))
        );
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        logs.push(entry);

        if let (Some(path), Some(every)) = (&config.checkpoint, config.checkpoint_every) {
            if every > 0 && epoch % every == 0 && epoch != hp.epochs {
                save_checkpoint(path, &params, &hp, epoch)?;
            }
        }
    }
    if let Some(path) = &config.checkpoint {
        save_checkpoint(path, &params, &hp, hp.epochs)?;
    }
    Ok(TrainOutcome { params, logs })
}

/// Drug and protein of the end-to-end gradient check.
pub const GRADCHECK_SMILES: &str = "CCO";
pub const GRADCHECK_PROTEIN: &str = "MKTAYIAKQR";
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_COORDS: usize = 200;

/// Central-difference check of the full predict→MSE loss in `f64`, on a
/// freshly initialized model with the target one unit above its initial
/// prediction.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let params = ModelParameters::<f64>::init(ModelConfig::default(), seed);
    let drug = prepare_drug::<f64>("gradcheck", GRADCHECK_SMILES, PowerMode::Binarized)?;
    let protein = tokenize(GRADCHECK_PROTEIN, GRADCHECK_PROTEIN.len()).map_err(|source| {
        TrainError::Protein {
            id: "gradcheck".into(),
            source,
        }
    })?;
    let target = params.predict(&drug, &protein)? + 1.0;
    let mut batch = PairBatch::new();
    batch.push("d", &drug, "p", &protein);
    let mut values = params.values().to_vec();
    let mut rng = seeded_rng(seed);
    let report = finite_difference_check(
        &mut values,
        |tape, vars| {
            let pred = params
                .forward(tape, vars, &batch, &mut Mode::Eval, 0.0)
                .map_err(|e| match e {
                    ModelError::Autodiff(e) => e,
                    other => AutodiffError::InvalidArgument {
                        op: "forward",
                        reason: other.to_string(),
                    },
                })?;
            let t = tape.constant(Array2::from_elem((1, 1), target));
            tape.mse(pred, t)
        },
        GRADCHECK_EPS,
        GRADCHECK_COORDS,
        &mut rng,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Measure;
    use std::collections::BTreeMap;

    fn tiny() -> AffinityDataset {
        let drugs: BTreeMap<String, String> = [("a", "CCO"), ("b", "c1ccccc1O"), ("c", "CC(=O)N")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let proteins: BTreeMap<String, String> = [("x", "MKTAYIAKQR"), ("y", "GGSWLLPQ")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut records = Vec::new();
        for (i, d) in drugs.keys().enumerate() {
            for (j, p) in proteins.keys().enumerate() {
                records.push(AffinityRecord {
                    drug_id: d.clone(),
                    protein_id: p.clone(),
                    value: 5.0 + i as f64 + 0.5 * j as f64,
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

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig::new(
            HyperParams {
                batch_size: 4,
                epochs,
                seq_len: 12,
                seed: 3,
                ..HyperParams::default()
            },
            ModelConfig::default(),
        )
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let report = gradient_check(1).unwrap();
        assert!(report.checked >= 150, "{report:?}");
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = tiny();
        let a = train(&config(6), &ds, Some(&ds)).unwrap();
        let b = train(&config(6), &ds, Some(&ds)).unwrap();
        assert_eq!(a.logs.len(), 6);
        assert!(a.logs.iter().zip(&b.logs).all(|(x, y)| x.same_trajectory(y)));
        assert!(a.params.bitwise_eq(&b.params));
        assert!(a.logs[5].train_mse < a.logs[0].train_mse);
        let inputs = PreparedInputs::from_dataset(&ds, PowerMode::Binarized, 12).unwrap();
        let eval = evaluate(&a.params, &inputs, &ds).unwrap();
        assert_eq!(eval.report.mse.to_bits(), a.logs[5].train_mse.to_bits());
        assert_eq!(eval.scatter.len(), ds.len());
    }

    #[test]
    fn rejects_oversized_batches_and_empty_sets() {
        let ds = tiny();
        let mut cfg = config(1);
        cfg.hyper.batch_size = 7;
        assert!(matches!(train(&cfg, &ds, None), Err(TrainError::BatchTooLarge { .. })));
        let empty = ds.with_records(Vec::new());
        assert!(matches!(train(&config(1), &empty, None), Err(TrainError::EmptyDataset)));
        let params = ModelParameters::<f32>::init(ModelConfig::default(), 0);
        let inputs = PreparedInputs::from_dataset(&ds, PowerMode::Binarized, 12).unwrap();
        assert!(matches!(evaluate(&params, &inputs, &empty), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let mut ds = tiny();
        ds.records[0].value = f64::INFINITY;
        match train(&config(1), &ds, None) {
            Err(TrainError::NonFiniteLoss { records, .. }) => {
                assert!(records.contains(&("a".to_string(), "x".to_string())));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_and_checkpoint_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(3);
        cfg.log_path = Some(dir.path().join("log.jsonl"));
        cfg.checkpoint = Some(dir.path().join("model.ckpt"));
        cfg.checkpoint_every = Some(1);
        let out = train(&cfg, &tiny(), None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let parsed: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), 3);
        assert!(parsed.iter().zip(&out.logs).all(|(a, b)| a.same_trajectory(b)));
        let ck = crate::model::checkpoint::load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
        assert!(ck.params.bitwise_eq(&out.params));
        assert_eq!(ck.epoch, 3);
    }
}
