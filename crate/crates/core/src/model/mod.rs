//! The affinity network: three GCN blocks over A, A^2 and A^3, max-pooled
//! and projected to a 128-d drug code; a Bi-LSTM over embedded residues for
//! a 128-d protein code; and a dense head on their concatenation.

pub mod checkpoint;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{cast_array, seeded_rng, AutodiffError, Rng, Scalar, Tape, Var};
use crate::featurize::NUM_ATOM_FEATURES;
use crate::graph_ops::{GraphInputs, PowerMode};
use crate::protein::{TokenSequence, VOCAB_SIZE};

/// Layer widths of each GCN block, input first.
pub const GCN_BLOCK_WIDTHS: [&[usize]; 3] = [
    &[NUM_ATOM_FEATURES, 78, 156, 312],
    &[NUM_ATOM_FEATURES, 78, 156],
    &[NUM_ATOM_FEATURES, 78],
];
pub const DRUG_HIDDEN: usize = 1024;
pub const DRUG_CODE: usize = 128;
pub const EMBED_DIM: usize = 128;
pub const LSTM_HIDDEN: usize = 64;
pub const PROTEIN_CODE: usize = 2 * LSTM_HIDDEN;
pub const HEAD_WIDTHS: [usize; 2] = [1024, 512];
/// Pairs per head evaluation in [`ModelParameters::predict_pairs`].
pub const HEAD_CHUNK: usize = 256;
pub const EMBED_INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("token sequences in one batch must share a length ({expected} vs {found})")]
    RaggedTokens { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which GCN blocks are active (block k consumes the normalized A^k).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockMask([bool; 3]);

impl BlockMask {
    pub const ALL: BlockMask = BlockMask([true, true, true]);

    pub fn new(blocks: [bool; 3]) -> Option<Self> {
        blocks.iter().any(|&b| b).then_some(BlockMask(blocks))
    }

    pub fn contains(&self, block: usize) -> bool {
        self.0[block]
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..3).filter(move |&b| self.0[b])
    }

    /// Width of the concatenated block outputs.
    pub fn graph_width(&self) -> usize {
        self.active()
            .map(|b| *GCN_BLOCK_WIDTHS[b].last().expect("nonempty"))
            .sum()
    }
}

impl Default for BlockMask {
    fn default() -> Self {
        BlockMask::ALL
    }
}

impl FromStr for BlockMask {
    type Err = String;

    /// Parses comma-separated block numbers, e.g. `1,2,3` or `2`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut blocks = [false; 3];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "1" | "2" | "3" => blocks[part.parse::<usize>().unwrap() - 1] = true,
                other => return Err(format!("unknown GCN block {other:?} (expected 1, 2 or 3)")),
            }
        }
        BlockMask::new(blocks).ok_or_else(|| "block mask must name at least one block".to_string())
    }
}

impl fmt::Display for BlockMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.active().map(|b| (b + 1).to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProteinEncoderKind {
    #[default]
    BiLstm,
    /// Drug-only ablation: the head sees only the drug code.
    None,
}

impl FromStr for ProteinEncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bilstm" => Ok(ProteinEncoderKind::BiLstm),
            "none" => Ok(ProteinEncoderKind::None),
            other => Err(format!("unknown protein encoder {other:?} (expected bilstm|none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: BlockMask,
    pub protein_encoder: ProteinEncoderKind,
    /// How A^2 and A^3 inputs are built; fixed for a trained model.
    #[serde(default)]
    pub power_mode: PowerMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Protein token length n.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 0.0005,
            dropout: 0.2,
            batch_size: 512,
            epochs: 1000,
            seq_len: crate::protein::DEFAULT_SEQ_LEN,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Smaller batches for the Davis set.
    pub fn davis() -> Self {
        HyperParams {
            batch_size: 128,
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return Err("batch size must be at least 1".into());
        }
        if self.seq_len == 0 {
            return Err("sequence length must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    ForgetBias,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LstmDirection {
    w_input: usize,
    w_hidden: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ProteinLayout {
    embedding: usize,
    forward: LstmDirection,
    backward: LstmDirection,
}

/// Indices of every tensor in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    gcn: [Vec<usize>; 3],
    drug_fc1: Dense,
    drug_fc2: Dense,
    protein: Option<ProteinLayout>,
    head: [Dense; 3],
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: (usize, usize),
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(TensorSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: self.push(format!("{name}.weight"), (fan_in, fan_out), Init::Glorot),
            bias: self.push(format!("{name}.bias"), (1, fan_out), Init::Zeros),
        }
    }

    fn lstm(&mut self, name: &str) -> LstmDirection {
        LstmDirection {
            w_input: self.push(
                format!("{name}.w_input"),
                (EMBED_DIM, 4 * LSTM_HIDDEN),
                Init::Glorot,
            ),
            w_hidden: self.push(
                format!("{name}.w_hidden"),
                (LSTM_HIDDEN, 4 * LSTM_HIDDEN),
                Init::Glorot,
            ),
            bias: self.push(format!("{name}.bias"), (1, 4 * LSTM_HIDDEN), Init::ForgetBias),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<TensorSpec>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let mut gcn: [Vec<usize>; 3] = Default::default();
    for block in config.blocks.active() {
        let widths = GCN_BLOCK_WIDTHS[block];
        for (layer, pair) in widths.windows(2).enumerate() {
            let idx = b.push(
                format!("gcn{}.layer{}.weight", block + 1, layer),
                (pair[0], pair[1]),
                Init::Glorot,
            );
            gcn[block].push(idx);
        }
    }
    let drug_fc1 = b.dense("drug_fc1", config.blocks.graph_width(), DRUG_HIDDEN);
    let drug_fc2 = b.dense("drug_fc2", DRUG_HIDDEN, DRUG_CODE);
    let protein = match config.protein_encoder {
        ProteinEncoderKind::BiLstm => Some(ProteinLayout {
            embedding: b.push("embedding".into(), (VOCAB_SIZE, EMBED_DIM), Init::Embedding),
            forward: b.lstm("lstm_forward"),
            backward: b.lstm("lstm_backward"),
        }),
        ProteinEncoderKind::None => None,
    };
    let joint = DRUG_CODE + if protein.is_some() { PROTEIN_CODE } else { 0 };
    let head = [
        b.dense("head_fc1", joint, HEAD_WIDTHS[0]),
        b.dense("head_fc2", HEAD_WIDTHS[0], HEAD_WIDTHS[1]),
        b.dense("head_out", HEAD_WIDTHS[1], 1),
    ];
    (
        Layout {
            gcn,
            drug_fc1,
            drug_fc2,
            protein,
            head,
        },
        b.specs,
    )
}

/// Parameter shapes and names for a configuration, in storage order.
pub fn parameter_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    build_layout(config).1
}

/// A drug's graph inputs converted to the training scalar type.
#[derive(Debug, Clone)]
pub struct PreparedDrug<T: Scalar> {
    pub features: Array2<T>,
    pub adjacency: [Arc<Array2<T>>; 3],
}

impl<T: Scalar> PreparedDrug<T> {
    pub fn new(inputs: &GraphInputs) -> Self {
        PreparedDrug {
            features: cast_array(&inputs.features),
            adjacency: inputs
                .adjacency
                .each_ref()
                .map(|a| Arc::new(cast_array(&a.values))),
        }
    }
}

/// Forward-pass mode; training carries the dropout generator.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl Mode<'_> {
    fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, p: f64) -> Result<Var> {
        Ok(match self {
            Mode::Train(rng) => tape.dropout(x, p, rng, true)?,
            Mode::Eval => x,
        })
    }
}

/// Drug/protein pairs with shared encoders computed once per distinct input.
pub struct PairBatch<'a, T: Scalar> {
    drugs: Vec<&'a PreparedDrug<T>>,
    proteins: Vec<&'a TokenSequence>,
    drug_keys: HashMap<&'a str, usize>,
    protein_keys: HashMap<&'a str, usize>,
    pairs: Vec<(usize, usize)>,
}

impl<'a, T: Scalar> Default for PairBatch<'a, T> {
    fn default() -> Self {
        PairBatch {
            drugs: Vec::new(),
            proteins: Vec::new(),
            drug_keys: HashMap::new(),
            protein_keys: HashMap::new(),
            pairs: Vec::new(),
        }
    }
}

impl<'a, T: Scalar> PairBatch<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        drug_id: &'a str,
        drug: &'a PreparedDrug<T>,
        protein_id: &'a str,
        protein: &'a TokenSequence,
    ) {
        let d = *self.drug_keys.entry(drug_id).or_insert_with(|| {
            self.drugs.push(drug);
            self.drugs.len() - 1
        });
        let p = *self.protein_keys.entry(protein_id).or_insert_with(|| {
            self.proteins.push(protein);
            self.proteins.len() - 1
        });
        self.pairs.push((d, p));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T: Scalar> {
    pub config: ModelConfig,
    names: Vec<String>,
    values: Vec<Array2<T>>,
    layout: Layout,
}

impl<T: Scalar> ModelParameters<T> {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1 and
    /// embeddings uniform in (-0.05, 0.05); fully determined by `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let (layout, specs) = build_layout(&config);
        let mut rng = seeded_rng(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for spec in specs {
            let (rows, cols) = spec.shape;
            let value: Array2<f64> = match spec.init {
                Init::Glorot => {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    Array2::from_shape_simple_fn(spec.shape, || rng.gen_range(-limit..limit))
                }
                Init::Zeros => Array2::zeros(spec.shape),
                Init::ForgetBias => Array2::from_shape_fn(spec.shape, |(_, c)| {
                    if (LSTM_HIDDEN..2 * LSTM_HIDDEN).contains(&c) {
                        1.0
                    } else {
                        0.0
                    }
                }),
                Init::Embedding => Array2::from_shape_simple_fn(spec.shape, || {
                    rng.gen_range(-EMBED_INIT_RANGE..EMBED_INIT_RANGE)
                }),
            };
            names.push(spec.name);
            values.push(cast_array(&value));
        }
        ModelParameters {
            config,
            names,
            values,
            layout,
        }
    }

    /// Assemble from named tensors, checking names and shapes against the
    /// configuration's layout.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Array2<T>)>,
    ) -> std::result::Result<Self, String> {
        let (layout, specs) = build_layout(&config);
        if specs.len() != tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            ));
        }
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (spec, (name, value)) in specs.iter().zip(tensors) {
            if spec.name != name || spec.shape != value.dim() {
                return Err(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    value.dim(),
                    spec.name,
                    spec.shape
                ));
            }
            names.push(name);
            values.push(value);
        }
        Ok(ModelParameters {
            config,
            names,
            values,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.values[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config,
            names: self.names.clone(),
            values: self.values.iter().map(cast_array).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| x.bits() == y.bits())
            })
    }

    /// Place every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    fn dense(tape: &mut Tape<T>, vars: &[Var], layer: Dense, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[layer.weight])?;
        Ok(tape.add_row(y, vars[layer.bias])?)
    }

    /// One graph convolution: relu(A_norm . H . W).
    pub fn gcn_layer(
        tape: &mut Tape<T>,
        h: Var,
        adjacency: Arc<Array2<T>>,
        weight: Var,
    ) -> Result<Var> {
        let hw = tape.matmul(h, weight)?;
        let propagated = tape.aggregate(adjacency, hw)?;
        Ok(tape.relu(propagated))
    }

    /// Concatenated block outputs, max-pooled over atoms (`1 x width`).
    pub fn pooled_graph_features(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        drug: &PreparedDrug<T>,
    ) -> Result<Var> {
        let x = tape.constant(drug.features.clone());
        let mut outputs = Vec::with_capacity(3);
        for block in self.config.blocks.active() {
            let mut h = x;
            for &w in &self.layout.gcn[block] {
                h = Self::gcn_layer(tape, h, drug.adjacency[block].clone(), vars[w])?;
            }
            outputs.push(h);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(1, &outputs)?
        };
        Ok(tape.row_max_pool(joined)?)
    }

    /// Dense projection of pooled graph features to the drug code.
    fn drug_projection(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        pooled: Var,
        mode: &mut Mode<'_>,
        dropout: f64,
    ) -> Result<Var> {
        let h = Self::dense(tape, vars, self.layout.drug_fc1, pooled)?;
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, dropout)?;
        let h = Self::dense(tape, vars, self.layout.drug_fc2, h)?;
        mode.dropout(tape, h, dropout)
    }

    /// Final forward and backward LSTM states, concatenated (`U x 128`).
    /// Returns `None` when the configuration has no protein encoder.
    pub fn protein_codes(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        proteins: &[&TokenSequence],
    ) -> Result<Option<Var>> {
        let Some(layout) = self.layout.protein else {
            return Ok(None);
        };
        let Some(first) = proteins.first() else {
            return Err(ModelError::EmptyBatch);
        };
        let n = first.len();
        if let Some(bad) = proteins.iter().find(|p| p.len() != n) {
            return Err(ModelError::RaggedTokens {
                expected: n,
                found: bad.len(),
            });
        }
        let tokens: Vec<&[u8]> = proteins.iter().map(|p| p.tokens()).collect();
        let forward = self.lstm_pass(tape, vars, layout.embedding, layout.forward, &tokens, false)?;
        let backward = self.lstm_pass(tape, vars, layout.embedding, layout.backward, &tokens, true)?;
        Ok(Some(tape.concat(1, &[forward, backward])?))
    }

    fn lstm_pass(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        embedding: usize,
        dir: LstmDirection,
        tokens: &[&[u8]],
        reverse: bool,
    ) -> Result<Var> {
        let n = tokens[0].len();
        // embedding followed by the input projection equals a lookup into
        // the projected table, which is only VOCAB_SIZE rows
        let projected = tape.matmul(vars[embedding], vars[dir.w_input])?;
        let steps: Vec<Vec<usize>> = (0..n)
            .map(|step| {
                let t = if reverse { n - 1 - step } else { step };
                tokens.iter().map(|seq| usize::from(seq[t])).collect()
            })
            .collect();
        Ok(tape.lstm(projected, vars[dir.w_hidden], vars[dir.bias], &steps)?)
    }

    /// Predictions for every pair in the batch (`B x 1`).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &PairBatch<'_, T>,
        mode: &mut Mode<'_>,
        dropout: f64,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let pooled: Vec<Var> = batch
            .drugs
            .iter()
            .map(|d| self.pooled_graph_features(tape, vars, d))
            .collect::<Result<_>>()?;
        let pooled = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat(0, &pooled)?
        };
        let drug_rows: Vec<usize> = batch.pairs.iter().map(|&(d, _)| d).collect();
        let per_pair = tape.gather_rows(pooled, &drug_rows)?;
        let drug_code = self.drug_projection(tape, vars, per_pair, mode, dropout)?;

        let joint = match self.protein_codes(tape, vars, &batch.proteins)? {
            Some(codes) => {
                let rows: Vec<usize> = batch.pairs.iter().map(|&(_, p)| p).collect();
                let protein_code = tape.gather_rows(codes, &rows)?;
                tape.concat(1, &[drug_code, protein_code])?
            }
            None => drug_code,
        };

        let [fc1, fc2, out] = self.layout.head;
        let h = Self::dense(tape, vars, fc1, joint)?;
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, dropout)?;
        let h = Self::dense(tape, vars, fc2, h)?;
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, dropout)?;
        Self::dense(tape, vars, out, h)
    }

    /// Drug code (`1 x 128`) for one molecule.
    pub fn drug_encoder(
        &self,
        drug: &PreparedDrug<T>,
        mut mode: Mode<'_>,
        dropout: f64,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let pooled = self.pooled_graph_features(&mut tape, &vars, drug)?;
        let code = self.drug_projection(&mut tape, &vars, pooled, &mut mode, dropout)?;
        Ok(tape.value(code).clone())
    }

    /// Protein code (`1 x 128`); `None` without a protein encoder.
    pub fn protein_encoder(&self, tokens: &TokenSequence) -> Result<Option<Array2<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let code = self.protein_codes(&mut tape, &vars, &[tokens])?;
        Ok(code.map(|c| tape.value(c).clone()))
    }

    /// Eval-mode affinity for a single pair.
    pub fn predict(&self, drug: &PreparedDrug<T>, protein: &TokenSequence) -> Result<T> {
        Ok(self.predict_batch(&[(drug, protein)])?[0])
    }

    /// Eval-mode affinities; distinct inputs are identified by address.
    pub fn predict_batch(&self, pairs: &[(&PreparedDrug<T>, &TokenSequence)]) -> Result<Vec<T>> {
        let keys: Vec<(String, String)> = pairs
            .iter()
            .map(|(d, p)| {
                (
                    format!("{:p}", *d as *const PreparedDrug<T>),
                    format!("{:p}", *p as *const TokenSequence),
                )
            })
            .collect();
        let mut batch = PairBatch::new();
        for ((d, p), (dk, pk)) in pairs.iter().zip(&keys) {
            batch.push(dk, d, pk, p);
        }
        self.predict_pairs(&batch)
    }

    /// Eval-mode affinities for a batch of any size. Each distinct drug and
    /// protein is encoded once; the head runs over `HEAD_CHUNK` pairs at a
    /// time.
    pub fn predict_pairs(&self, batch: &PairBatch<'_, T>) -> Result<Vec<T>> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        let pooled: Vec<Var> = batch
            .drugs
            .iter()
            .map(|d| self.pooled_graph_features(&mut tape, &vars, d))
            .collect::<Result<_>>()?;
        let pooled = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat(0, &pooled)?
        };
        let drug_codes = self.drug_projection(&mut tape, &vars, pooled, &mut Mode::Eval, 0.0)?;
        let protein_codes = self.protein_codes(&mut tape, &vars, &batch.proteins)?;
        let drug_codes = tape.value(drug_codes);
        let protein_codes = protein_codes.map(|c| tape.value(c));

        let dense = |x: &Array2<T>, layer: Dense| x.dot(&self.values[layer.weight]) + &self.values[layer.bias];
        let relu = |x: Array2<T>| x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let [fc1, fc2, out] = self.layout.head;
        let width = drug_codes.ncols() + protein_codes.map_or(0, |c| c.ncols());
        let mut predictions = Vec::with_capacity(batch.len());
        for chunk in batch.pairs.chunks(HEAD_CHUNK) {
            let mut joint = Array2::zeros((chunk.len(), width));
            for (row, &(d, p)) in chunk.iter().enumerate() {
                let split = drug_codes.ncols();
                joint.slice_mut(s![row, ..split]).assign(&drug_codes.row(d));
                if let Some(codes) = protein_codes {
                    joint.slice_mut(s![row, split..]).assign(&codes.row(p));
                }
            }
            let h = relu(dense(&joint, fc1));
            let h = relu(dense(&h, fc2));
            predictions.extend(dense(&h, out).column(0).iter().copied());
        }
        Ok(predictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ops::{build_graph_inputs, PowerMode};
    use crate::protein::tokenize;
    use crate::smiles::parse_smiles;

    fn drug(smiles: &str) -> PreparedDrug<f64> {
        PreparedDrug::new(&build_graph_inputs(&parse_smiles(smiles).unwrap(), PowerMode::Binarized).unwrap())
    }

    #[test]
    fn full_layout_shapes() {
        let specs = parameter_specs(&ModelConfig::default());
        let shape = |name: &str| specs.iter().find(|s| s.name == name).unwrap().shape;
        assert_eq!(shape("gcn1.layer0.weight"), (78, 78));
        assert_eq!(shape("gcn1.layer1.weight"), (78, 156));
        assert_eq!(shape("gcn1.layer2.weight"), (156, 312));
        assert_eq!(shape("gcn2.layer0.weight"), (78, 78));
        assert_eq!(shape("gcn2.layer1.weight"), (78, 156));
        assert_eq!(shape("gcn3.layer0.weight"), (78, 78));
        assert_eq!(shape("drug_fc1.weight"), (546, 1024));
        assert_eq!(shape("drug_fc2.weight"), (1024, 128));
        assert_eq!(shape("embedding"), (27, 128));
        assert_eq!(shape("lstm_forward.w_input"), (128, 256));
        assert_eq!(shape("lstm_backward.w_hidden"), (64, 256));
        assert_eq!(shape("head_fc1.weight"), (256, 1024));
        assert_eq!(shape("head_fc2.weight"), (1024, 512));
        assert_eq!(shape("head_out.weight"), (512, 1));
        assert_eq!(specs.len(), 23);
        assert_eq!(BlockMask::ALL.graph_width(), 546);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ModelParameters::<f32>::init(cfg, 4);
        let b = ModelParameters::<f32>::init(cfg, 4);
        let c = ModelParameters::<f32>::init(cfg, 5);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
        let bias = a.get("lstm_forward.bias").unwrap();
        assert!(bias.iter().enumerate().all(|(i, &v)| v == if (64..128).contains(&i) { 1.0 } else { 0.0 }));
        assert!(a.get("embedding").unwrap().iter().all(|v| v.abs() < 0.05));
        let limit = (6.0f32 / (546.0 + 1024.0)).sqrt();
        assert!(a.get("drug_fc1.weight").unwrap().iter().all(|v| v.abs() <= limit));
        assert!(a.get("head_out.bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_mask_parsing() {
        assert_eq!("1,2,3".parse::<BlockMask>().unwrap(), BlockMask::ALL);
        let m: BlockMask = "2".parse().unwrap();
        assert_eq!(m.graph_width(), 156);
        assert_eq!(m.to_string(), "2");
        assert!("".parse::<BlockMask>().is_err());
        assert!("4".parse::<BlockMask>().is_err());
    }

    #[test]
    fn parameter_counts_grow_with_blocks() {
        let count = |mask: &str| {
            let cfg = ModelConfig {
                blocks: mask.parse().unwrap(),
                ..ModelConfig::default()
            };
            parameter_specs(&cfg).iter().map(|s| s.shape.0 * s.shape.1).sum::<usize>()
        };
        let (one, two, three) = (count("1"), count("1,2"), count("1,2,3"));
        assert!(one < two && two < three);
        assert_eq!(three, ModelParameters::<f32>::init(ModelConfig::default(), 0).parameter_count());
    }

    #[test]
    fn gcn_layer_identity_case() {
        let mut tape = Tape::<f64>::new();
        let h0 = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let h = tape.constant(h0.clone());
        let w = tape.constant(Array2::eye(4));
        let out = ModelParameters::gcn_layer(&mut tape, h, Arc::new(Array2::eye(3)), w).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn gcn_layer_two_node_hand_case() {
        // A_norm = [[.5,.5],[.5,.5]], H = [[1,2],[3,-4]], W = [[1,0],[-1,2]]
        // HW = [[-1,4],[7,-8]] ; A.HW = [[3,-2],[3,-2]] ; relu -> [[3,0],[3,0]]
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(ndarray::array![[1.0, 2.0], [3.0, -4.0]]);
        let w = tape.constant(ndarray::array![[1.0, 0.0], [-1.0, 2.0]]);
        let adj = Arc::new(ndarray::array![[0.5, 0.5], [0.5, 0.5]]);
        let out = ModelParameters::gcn_layer(&mut tape, h, adj, w).unwrap();
        assert_eq!(tape.value(out), &ndarray::array![[3.0, 0.0], [3.0, 0.0]]);
    }

    #[test]
    fn single_node_layer_is_relu_hw() {
        let mut rng = seeded_rng(9);
        let h0 = Array2::from_shape_simple_fn((1, 78), || rng.gen_range(0.0..1.0));
        let w0 = Array2::from_shape_simple_fn((78, 16), || rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(h0.clone());
        let w = tape.constant(w0.clone());
        let out = ModelParameters::gcn_layer(&mut tape, h, Arc::new(ndarray::array![[1.0]]), w).unwrap();
        assert_eq!(tape.value(out), &h0.dot(&w0).mapv(|v: f64| v.max(0.0)));
    }

    #[test]
    fn encoder_shapes() {
        let params = ModelParameters::<f64>::init(ModelConfig::default(), 1);
        for smiles in ["C", "CCO", "CC(=O)Oc1ccccc1C(=O)O.CCCCCCCCCCCCCCCCCCCCCCCCCC"] {
            let code = params.drug_encoder(&drug(smiles), Mode::Eval, 0.2).unwrap();
            assert_eq!(code.dim(), (1, 128));
        }
        let code = params.protein_encoder(&tokenize("MKV", 12).unwrap()).unwrap().unwrap();
        assert_eq!(code.dim(), (1, 128));
    }

    #[test]
    fn padding_only_protein_is_deterministic() {
        let params = ModelParameters::<f32>::init(ModelConfig::default(), 2);
        let pad = tokenize("", 30).unwrap();
        let a = params.protein_encoder(&pad).unwrap().unwrap();
        let b = params.protein_encoder(&pad).unwrap().unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn swapping_direction_weights_swaps_halves_on_palindromes() {
        let params = ModelParameters::<f64>::init(ModelConfig::default(), 3);
        let mut swapped = params.clone();
        for suffix in ["w_input", "w_hidden", "bias"] {
            let f = params.get(&format!("lstm_forward.{suffix}")).unwrap().clone();
            let b = params.get(&format!("lstm_backward.{suffix}")).unwrap().clone();
            *swapped.get_mut(&format!("lstm_forward.{suffix}")).unwrap() = b;
            *swapped.get_mut(&format!("lstm_backward.{suffix}")).unwrap() = f;
        }
        let seq = tokenize("ACDKDCA", 7).unwrap();
        let a = params.protein_encoder(&seq).unwrap().unwrap();
        let b = swapped.protein_encoder(&seq).unwrap().unwrap();
        for k in 0..LSTM_HIDDEN {
            assert_eq!(a[[0, k]].to_bits(), b[[0, k + LSTM_HIDDEN]].to_bits());
            assert_eq!(a[[0, k + LSTM_HIDDEN]].to_bits(), b[[0, k]].to_bits());
        }
    }

    #[test]
    fn ragged_tokens_rejected() {
        let params = ModelParameters::<f64>::init(ModelConfig::default(), 3);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let a = tokenize("AC", 4).unwrap();
        let b = tokenize("AC", 5).unwrap();
        assert!(matches!(
            params.protein_codes(&mut tape, &vars, &[&a, &b]),
            Err(ModelError::RaggedTokens { expected: 4, found: 5 })
        ));
    }

    #[test]
    fn eval_predict_is_pure_and_batches_agree() {
        let params = ModelParameters::<f64>::init(ModelConfig::default(), 6);
        let drugs = [drug("CCO"), drug("c1ccccc1N"), drug("CC(=O)O")];
        let prots = [tokenize("MKTAYIAK", 16).unwrap(), tokenize("GGSSW", 16).unwrap()];
        let pairs: Vec<_> = [(0, 0), (1, 1), (2, 0), (0, 1)]
            .iter()
            .map(|&(d, p)| (&drugs[d], &prots[p]))
            .collect();
        let batched = params.predict_batch(&pairs).unwrap();
        for (k, (d, p)) in pairs.iter().enumerate() {
            let single = params.predict(d, p).unwrap();
            assert_eq!(single.to_bits(), params.predict(d, p).unwrap().to_bits());
            assert!((single - batched[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let params = ModelParameters::<f64>::init(ModelConfig::default(), 8);
        let d = drug("CC(=O)Nc1ccc(O)cc1");
        let p = tokenize("MKTAYIAKQRQISFVKSHFS", 20).unwrap();
        let mut batch = PairBatch::new();
        batch.push("d", &d, "p", &p);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let out = params.forward(&mut tape, &vars, &batch, &mut Mode::Eval, 0.2).unwrap();
        let target = tape.constant(ndarray::array![[7.0]]);
        let loss = tape.mse(out, target).unwrap();
        tape.backward(loss).unwrap();
        for (name, v) in params.names().iter().zip(&vars) {
            let g = tape.grad(*v).unwrap();
            assert!(g.iter().any(|&x| x != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn drug_only_ablation_has_narrow_head() {
        let cfg = ModelConfig {
            blocks: "3".parse().unwrap(),
            protein_encoder: ProteinEncoderKind::None,
            ..ModelConfig::default()
        };
        let params = ModelParameters::<f32>::init(cfg, 0);
        assert_eq!(params.get("head_fc1.weight").unwrap().dim(), (128, 1024));
        assert!(params.get("embedding").is_none());
        let d = PreparedDrug::<f32>::new(&build_graph_inputs(&parse_smiles("CCN").unwrap(), PowerMode::Binarized).unwrap());
        let value = params.predict(&d, &tokenize("AAA", 3).unwrap()).unwrap();
        assert!(value.is_finite());
        assert!(params.protein_encoder(&tokenize("AAA", 3).unwrap()).unwrap().is_none());
    }
}
