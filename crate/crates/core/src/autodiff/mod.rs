//! Dense reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every value produced during a forward pass; [`Var`]
//! handles index into it. Vectors are represented as `1 x n` rows and
//! scalars as `1 x 1`. Leaves created with [`Tape::param`] keep a gradient
//! accumulator that survives repeated [`Tape::backward`] calls.

mod adam;
mod gradcheck;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, GradCheckReport, GRADIENT_FLOOR};

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::AddAssign;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng as _, SeedableRng};
use thiserror::Error;

/// Deterministic generator used for initialization, shuffling and dropout:
/// ChaCha with 8 rounds, whose output stream is fixed across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Element type of tape values (`f32` for training, `f64` for checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }

    fn bits(self) -> u64;
}

impl Scalar for f32 {
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat { axis: Axis, parts: Vec<Var> },
    RowMaxPool { input: Var, argmax: Vec<usize> },
    Gather { table: Var, rows: Vec<usize> },
    Dropout { input: Var, mask: Array2<T> },
    Mse { pred: Var, target: Var },
    Sum(Var),
    SliceCols { input: Var, start: usize },
    Aggregate { adjacency: Arc<Array2<T>>, input: Var },
    Lstm(Box<LstmTrace<T>>),
}

/// Everything the LSTM backward pass needs: per-step row ids, activated
/// gates, cell states and the hidden state entering each step. Step `t`
/// occupies rows `t*U..(t+1)*U` of each array.
#[derive(Debug)]
struct LstmTrace<T> {
    table: Var,
    w_hidden: Var,
    bias: Var,
    steps: Vec<Vec<usize>>,
    gates: Array2<T>,
    cells: Array2<T>,
    /// `tanh` of `cells`.
    squashed: Array2<T>,
    hidden_in: Array2<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `tanh` through a single `exp`; absolute error stays within a few ulps of
/// one, which is what the recurrence needs, and it is much cheaper than libm.
fn fast_tanh<T: Scalar>(x: T) -> T {
    let two = T::one() + T::one();
    two / (T::one() + (-two * x).exp()) - T::one()
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Array2<T>>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// First element of a value, typically a `1 x 1` loss.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Move a leaf's accumulated gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Array2<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: Array2<T>) -> Var {
        let zeros = Array2::zeros(value.dim());
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].grad = Some(zeros);
        v
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: (ra, ca),
                right: (rb, cb),
            });
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Add a `1 x n` row (bias) to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || cr != ca {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: (ra, ca),
                right: (rr, cr),
            });
        }
        let value = self.value(a) + self.value(row);
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(T::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Concatenate along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        };
        if axis > 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} on a 2-D value"),
            });
        }
        let other = 1 - axis;
        let reference = self.shape(first);
        for &p in parts {
            let shape = self.shape(p);
            let (r, s) = ([reference.0, reference.1], [shape.0, shape.1]);
            if r[other] != s[other] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: reference,
                    right: shape,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("shapes checked");
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                axis: Axis(axis),
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise maximum over rows, giving a `1 x n` row. Ties go to the
    /// lowest row index, which is also where the gradient is routed.
    pub fn row_max_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if rows == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "row_max_pool",
                reason: "no rows".into(),
            });
        }
        let mut argmax = vec![0usize; cols];
        let mut value = Array2::zeros((1, cols));
        for c in 0..cols {
            let mut best = 0;
            for r in 1..rows {
                if x[[r, c]] > x[[best, c]] {
                    best = r;
                }
            }
            argmax[c] = best;
            value[[0, c]] = x[[best, c]];
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::RowMaxPool { input: a, argmax }, rg))
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {n} rows"),
            });
        }
        let t = self.value(table);
        let mut value = Array2::zeros((rows.len(), d));
        for (out, &r) in rows.iter().enumerate() {
            value.row_mut(out).assign(&t.row(r));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        self.gather_rows(table, tokens)
    }

    /// Inverted dropout: at train time zero each entry with probability `p`
    /// and scale survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let mask = Array2::from_shape_simple_fn(self.shape(a), || {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let value = self.value(a) * &mask;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Dropout { input: a, mask }, rg))
    }

    /// Mean squared error as a `1 x 1` value.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let diff = self.value(pred) - self.value(target);
        let n = T::from_usize(diff.len()).expect("length fits");
        let loss = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / n;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::Mse { pred, target },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.any_grad(&[a]);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let _ = r;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceCols { input: a, start }, rg))
    }

    /// Left-multiply by a fixed square matrix (graph propagation).
    ///
    /// Each output row sums its neighbours' rows in a canonical order (by
    /// edge weight, then by the neighbour's input row compared elementwise),
    /// so relabelling nodes (permuting rows and columns of `adjacency`
    /// together with the rows of `input`) permutes the output rows bit for
    /// bit.
    pub fn aggregate(&mut self, adjacency: Arc<Array2<T>>, input: Var) -> Result<Var> {
        let (n, d) = self.shape(input);
        if adjacency.dim() != (n, n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "aggregate",
                left: adjacency.dim(),
                right: (n, d),
            });
        }
        let h = self.value(input);
        let row_order = |a: &usize, b: &usize| {
            h.row(*a)
                .iter()
                .zip(h.row(*b))
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        };
        let mut by_row: Vec<usize> = (0..n).collect();
        by_row.sort_by(row_order);
        let mut rank = vec![0usize; n];
        for k in 1..n {
            let same = row_order(&by_row[k - 1], &by_row[k]).is_eq();
            rank[by_row[k]] = if same { rank[by_row[k - 1]] } else { k };
        }
        let mut value = Array2::zeros((n, d));
        let mut neighbours: Vec<(usize, T)> = Vec::with_capacity(n);
        for i in 0..n {
            neighbours.clear();
            neighbours.extend((0..n).filter_map(|j| {
                let w = adjacency[[i, j]];
                (w != T::zero()).then_some((j, w))
            }));
            neighbours.sort_by(|(ja, wa), (jb, wb)| {
                wa.partial_cmp(wb).unwrap_or(Ordering::Equal).then(rank[*ja].cmp(&rank[*jb]))
            });
            let mut out = value.row_mut(i);
            for &(j, w) in &neighbours {
                out.zip_mut_with(&h.row(j), |o, &x| *o += w * x);
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Aggregate { adjacency, input }, rg))
    }

    /// Run an LSTM over `steps` and return the final hidden state (`U x H`).
    ///
    /// `table` (`V x 4H`) holds input projections looked up by row id at each
    /// step, `w_hidden` is `H x 4H` and `bias` is `1 x 4H`; gates are ordered
    /// input, forget, cell, output. Every step must list `U` row ids. Zero
    /// initial state.
    pub fn lstm(&mut self, table: Var, w_hidden: Var, bias: Var, steps: &[Vec<usize>]) -> Result<Var> {
        let (v, four_h) = self.shape(table);
        let (h_dim, wc) = self.shape(w_hidden);
        if wc != four_h || four_h != 4 * h_dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "lstm",
                left: (v, four_h),
                right: (h_dim, wc),
            });
        }
        if self.shape(bias) != (1, four_h) {
            return Err(AutodiffError::ShapeMismatch {
                op: "lstm",
                left: (1, four_h),
                right: self.shape(bias),
            });
        }
        let u = steps.first().map_or(0, Vec::len);
        if u == 0 || steps.iter().any(|ids| ids.len() != u) {
            return Err(AutodiffError::InvalidArgument {
                op: "lstm",
                reason: "every step needs the same nonzero number of rows".into(),
            });
        }
        if let Some(&bad) = steps.iter().flatten().find(|&&r| r >= v) {
            return Err(AutodiffError::InvalidArgument {
                op: "lstm",
                reason: format!("row {bad} out of range for {v} rows"),
            });
        }
        let rg = self.any_grad(&[table, w_hidden, bias]);
        let (x, w, b) = (self.value(table), self.value(w_hidden), self.value(bias));
        let mut h = Array2::<T>::zeros((u, h_dim));
        let mut c = Array2::<T>::zeros((u, h_dim));
        let mut z = Array2::<T>::zeros((u, four_h));
        let kept = if rg { steps.len() * u } else { 0 };
        let mut gates = Array2::<T>::zeros((kept, four_h));
        let mut cells = Array2::<T>::zeros((kept, h_dim));
        let mut squashed = Array2::<T>::zeros((kept, h_dim));
        let mut tc = Array2::<T>::zeros((u, h_dim));
        let mut hidden_in = Array2::<T>::zeros((kept, h_dim));
        for (t, ids) in steps.iter().enumerate() {
            for (r, &id) in ids.iter().enumerate() {
                let mut row = z.row_mut(r);
                row.assign(&x.row(id));
                row += &b.row(0);
            }
            ndarray::linalg::general_mat_mul(T::one(), &h, w, T::one(), &mut z);
            if rg {
                hidden_in.slice_mut(s![t * u..(t + 1) * u, ..]).assign(&h);
            }
            for r in 0..u {
                let zr = z.row_mut(r).into_slice().expect("standard layout");
                let cr = c.row_mut(r).into_slice().expect("standard layout");
                let hr = h.row_mut(r).into_slice().expect("standard layout");
                let tr = tc.row_mut(r).into_slice().expect("standard layout");
                for k in 0..h_dim {
                    let i = sigmoid(zr[k]);
                    let f = sigmoid(zr[h_dim + k]);
                    let g = fast_tanh(zr[2 * h_dim + k]);
                    let o = sigmoid(zr[3 * h_dim + k]);
                    cr[k] = f * cr[k] + i * g;
                    tr[k] = fast_tanh(cr[k]);
                    hr[k] = o * tr[k];
                    zr[k] = i;
                    zr[h_dim + k] = f;
                    zr[2 * h_dim + k] = g;
                    zr[3 * h_dim + k] = o;
                }
            }
            if rg {
                gates.slice_mut(s![t * u..(t + 1) * u, ..]).assign(&z);
                cells.slice_mut(s![t * u..(t + 1) * u, ..]).assign(&c);
                squashed.slice_mut(s![t * u..(t + 1) * u, ..]).assign(&tc);
            }
        }
        let trace = LstmTrace {
            table,
            w_hidden,
            bias,
            steps: if rg { steps.to_vec() } else { Vec::new() },
            gates,
            cells,
            squashed,
            hidden_in,
        };
        Ok(self.push(h, Op::Lstm(Box::new(trace)), rg))
    }

    /// Hash of every non-differentiable switch taken in the forward pass
    /// (relu signs, max-pool winners). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for &x in self.nodes[input.0].value.iter() {
                        (x > T::zero()).hash(&mut hasher);
                    }
                }
                Op::RowMaxPool { argmax, .. } => argmax.hash(&mut hasher),
                _ => {}
            }
        }
        hasher.finish()
    }

    /// Accumulate d(loss)/d(leaf) into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, contribution: Array2<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(existing) => *existing += &contribution,
                    None => grads[v.0] = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        send(a, g.dot(&self.nodes[b.0].value.t()));
                    }
                    if self.nodes[b.0].requires_grad {
                        send(b, self.nodes[a.0].value.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::AddRow(a, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    send(a, &g * &self.nodes[b.0].value);
                    send(b, &g * &self.nodes[a.0].value);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(&self.nodes[a.0].value, |g, &x| {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    send(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |g, &y| *g = *g * y * (T::one() - y));
                    send(*a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |g, &y| *g = *g * (T::one() - y * y));
                    send(*a, d);
                }
                Op::Concat { axis, parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.nodes[p.0].value.len_of(*axis);
                        let piece = g
                            .slice_axis(*axis, ndarray::Slice::from(offset..offset + width))
                            .to_owned();
                        offset += width;
                        send(p, piece);
                    }
                }
                Op::RowMaxPool { input, argmax } => {
                    let mut d = Array2::zeros(self.nodes[input.0].value.dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        d[[r, c]] += g[[0, c]];
                    }
                    send(*input, d);
                }
                Op::Gather { table, rows } => {
                    let mut d = Array2::zeros(self.nodes[table.0].value.dim());
                    for (out, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(out);
                    }
                    send(*table, d);
                }
                Op::Dropout { input, mask } => send(*input, &g * mask),
                Op::Mse { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let diff = &self.nodes[pred.0].value - &self.nodes[target.0].value;
                    let n = T::from_usize(diff.len()).expect("length fits");
                    let scale = g[[0, 0]] * T::of_f64(2.0) / n;
                    let d = diff.mapv(|x| x * scale);
                    if self.nodes[target.0].requires_grad {
                        send(target, d.mapv(|x| -x));
                    }
                    send(pred, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                    send(*a, d);
                }
                Op::SliceCols { input, start } => {
                    let mut d = Array2::zeros(self.nodes[input.0].value.dim());
                    let width = g.ncols();
                    d.slice_mut(s![.., *start..*start + width]).assign(&g);
                    send(*input, d);
                }
                Op::Aggregate { adjacency, input } => {
                    send(*input, adjacency.t().dot(&g));
                }
                Op::Lstm(trace) => {
                    let vocab = self.nodes[trace.table.0].value.nrows();
                    let w = &self.nodes[trace.w_hidden.0].value;
                    let [dx, dw, db] = lstm_backward(trace, vocab, w, g);
                    send(trace.table, dx);
                    send(trace.w_hidden, dw);
                    send(trace.bias, db);
                }
            }
        }

        for (id, g) in leaf_grads {
            match self.nodes[id].grad.as_mut() {
                Some(acc) => *acc += &g,
                None => self.nodes[id].grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Backpropagation through time for [`Tape::lstm`]; returns gradients for
/// the input table, the recurrent weights and the bias.
fn lstm_backward<T: Scalar>(
    trace: &LstmTrace<T>,
    vocab: usize,
    w: &Array2<T>,
    g: Array2<T>,
) -> [Array2<T>; 3] {
    let (h_dim, four_h) = w.dim();
    let u = g.nrows();
    let n = trace.steps.len();
    let one = T::one();
    let mut dz = Array2::<T>::zeros((n * u, four_h));
    let mut dh = g;
    let mut dc = Array2::<T>::zeros((u, h_dim));
    for t in (0..n).rev() {
        for r in 0..u {
            let row = t * u + r;
            let gr = trace.gates.row(row);
            let gr = gr.as_slice().expect("standard layout");
            let squashed = trace.squashed.row(row);
            let squashed = squashed.as_slice().expect("standard layout");
            let prev = (t > 0).then(|| trace.cells.row(row - u));
            let dhr = dh.row(r);
            let dhr = dhr.as_slice().expect("standard layout");
            let dcr = dc.row_mut(r).into_slice().expect("standard layout");
            let dzr = dz.row_mut(row).into_slice().expect("standard layout");
            for k in 0..h_dim {
                let (i, f, gg, o) = (gr[k], gr[h_dim + k], gr[2 * h_dim + k], gr[3 * h_dim + k]);
                let c_prev = prev.as_ref().map_or(T::zero(), |p| p[k]);
                let tc = squashed[k];
                let d_o = dhr[k] * tc;
                let dck = dcr[k] + dhr[k] * o * (one - tc * tc);
                dcr[k] = flush(dck * f);
                dzr[k] = flush(dck * gg * i * (one - i));
                dzr[h_dim + k] = flush(dck * c_prev * f * (one - f));
                dzr[2 * h_dim + k] = flush(dck * i * (one - gg * gg));
                dzr[3 * h_dim + k] = flush(d_o * o * (one - o));
            }
        }
        dh = dz.slice(s![t * u..(t + 1) * u, ..]).dot(&w.t());
        dh.mapv_inplace(flush);
    }
    let dw = trace.hidden_in.t().dot(&dz);
    let db = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = Array2::<T>::zeros((vocab, four_h));
    for (t, ids) in trace.steps.iter().enumerate() {
        for (r, &id) in ids.iter().enumerate() {
            let mut dst = dx.row_mut(id);
            dst += &dz.row(t * u + r);
        }
    }
    [dx, dw, db]
}

/// Gradients that decay through long sequences underflow into subnormals,
/// which are very slow on most CPUs; treat them as zero.
fn flush<T: Scalar>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::zero()
    } else {
        x
    }
}

/// Convert an array between scalar types.
pub fn cast_array<A: Scalar, B: Scalar>(a: &Array2<A>) -> Array2<B> {
    a.mapv(|x| B::of_f64(x.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn mse_of_equal_vectors_is_zero() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(array![[1.0, 2.0, 3.0]]);
        let b = t.constant(array![[1.0, 2.0, 3.0]]);
        let l = t.mse(a, b).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut t = Tape::<f64>::new();
        let x = t.param(array![[-1.0, 0.0, 2.0]]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &array![[0.0, 0.0, 2.0]]);
        // upstream [1,1,1] via sum
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::<f64>::new();
        let w = t.param(array![[3.0]]);
        let y = t.mul(w, w).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn linear_mse_matches_closed_form() {
        // loss = mean((X W - Y)^2) ; dL/dW = 2/n X^T (XW - Y)
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let w = array![[0.5, -0.25], [1.5, 2.0]];
        let y = array![[1.0, 0.0], [-2.0, 4.0]];
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let wv = t.param(w.clone());
        let yv = t.constant(y.clone());
        let p = t.matmul(xv, wv).unwrap();
        let l = t.mse(p, yv).unwrap();
        t.backward(l).unwrap();
        let residual = x.dot(&w) - &y;
        let expected_loss = residual.mapv(|r| r * r).sum() / 4.0;
        let expected = x.t().dot(&residual) * (2.0 / 4.0);
        assert!((t.scalar(l) - expected_loss).abs() < 1e-15);
        let got = t.grad(wv).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        // hand values: XW = [[3.5, 3.75], [0.0, -2.75]], residual = [[2.5, 3.75], [2, -6.75]]
        assert_eq!(residual, array![[2.5, 3.75], [2.0, -6.75]]);
        assert_eq!(expected, array![[4.25, -8.25], [1.5, 7.125]]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut t = Tape::<f64>::new();
        let w = t.param(array![[1.0, 2.0]]);
        let c = t.constant(array![[4.0]]);
        let _unused = t.relu(w);
        t.backward(c).unwrap();
        assert!(t.grad(w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::<f64>::new();
        let w = t.param(array![[0.3, -1.2]]);
        let y = t.tanh(w);
        let l = t.sum(y);
        t.backward(l).unwrap();
        let once = t.grad(w).unwrap().clone();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &(&once * 2.0));
        t.zero_grad();
        assert!(t.grad(w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let w = t.param(array![[1.0, 2.0]]);
        assert_eq!(t.backward(w), Err(AutodiffError::NonScalarLoss((1, 2))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch { op: "matmul", left: (2, 3), right: (2, 3) }
        );
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
        let r = t.constant(Array2::zeros((1, 2)));
        assert!(t.add_row(a, r).is_err());
        assert!(t.concat(1, &[a, r]).is_err());
    }

    #[test]
    fn max_pool_routes_to_first_max() {
        let mut t = Tape::<f64>::new();
        let x = t.param(array![[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]]);
        let m = t.row_max_pool(x).unwrap();
        assert_eq!(t.value(m), &array![[3.0, 5.0]]);
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(
            t.grad(x).unwrap(),
            &array![[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]
        );
    }

    #[test]
    fn dropout_modes() {
        let mut rng = seeded_rng(3);
        let mut t = Tape::<f64>::new();
        let x = t.param(Array2::ones((20, 50)));
        assert_eq!(t.dropout(x, 0.2, &mut rng, false).unwrap(), x);
        let d = t.dropout(x, 0.2, &mut rng, true).unwrap();
        let v = t.value(d);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.25).abs() < 1e-15));
        let dropped = v.iter().filter(|&&e| e == 0.0).count() as f64 / 1000.0;
        assert!((dropped - 0.2).abs() < 0.05, "dropped fraction {dropped}");
        assert!(t.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut t = Tape::<f64>::new();
        let table = t.param(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let g = t.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g), &array![[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]]);
        let s = t.sum(g);
        t.backward(s).unwrap();
        assert_eq!(
            t.grad(table).unwrap(),
            &array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]
        );
        assert!(t.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn aggregate_matches_dense_product() {
        let adj = array![[0.5, 0.5, 0.0], [0.5, 0.25, 0.25], [0.0, 0.25, 0.75]];
        let h = array![[1.0, -2.0], [0.5, 4.0], [3.0, 1.0]];
        let mut t = Tape::<f64>::new();
        let hv = t.param(h.clone());
        let out = t.aggregate(Arc::new(adj.clone()), hv).unwrap();
        let dense = adj.dot(&h);
        for (a, b) in t.value(out).iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn numeric_check(
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
        inputs: Vec<Array2<f64>>,
    ) -> f64 {
        let mut params = inputs;
        let mut rng = seeded_rng(11);
        finite_difference_check(&mut params, build, 1e-5, 200, &mut rng)
            .unwrap()
            .max_relative_error
    }

    fn composed_lstm(t: &mut Tape<f64>, v: &[Var], steps: &[Vec<usize>], hd: usize) -> Var {
        let u = steps[0].len();
        let mut h = t.constant(Array2::zeros((u, hd)));
        let mut c = t.constant(Array2::zeros((u, hd)));
        for ids in steps {
            let x = t.gather_rows(v[0], ids).unwrap();
            let r = t.matmul(h, v[1]).unwrap();
            let z = t.add(x, r).unwrap();
            let z = t.add_row(z, v[2]).unwrap();
            let gate = |t: &mut Tape<f64>, k: usize| t.slice_cols(z, k * hd, hd).unwrap();
            let (i, f, g, o) = (gate(t, 0), gate(t, 1), gate(t, 2), gate(t, 3));
            let (i, f, g, o) = (t.sigmoid(i), t.sigmoid(f), t.tanh(g), t.sigmoid(o));
            let keep = t.mul(f, c).unwrap();
            let write = t.mul(i, g).unwrap();
            c = t.add(keep, write).unwrap();
            let squashed = t.tanh(c);
            h = t.mul(o, squashed).unwrap();
        }
        h
    }

    fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn op_gradients_match_finite_differences(
            m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000
        ) {
            let a = matrix(m, k, seed);
            let b = matrix(k, n, seed + 1);
            let c = matrix(m, n, seed + 2);
            let bias = matrix(1, n, seed + 3);
            let err = numeric_check(
                |t, v| {
                    let p = t.matmul(v[0], v[1])?;
                    let p = t.add_row(p, v[3])?;
                    let s = t.sigmoid(p);
                    let q = t.tanh(v[2]);
                    let r = t.mul(s, q)?;
                    let r = t.add(r, v[2])?;
                    let r = t.relu(r);
                    let joined = t.concat(1, &[r, q])?;
                    let stacked = t.concat(0, &[joined, joined])?;
                    let pooled = t.row_max_pool(stacked)?;
                    let sliced = t.slice_cols(pooled, 0, n)?;
                    let target = t.constant(Array2::from_elem((1, n), 0.3));
                    let loss = t.mse(sliced, target)?;
                    let extra = t.gather_rows(v[1], &[0, k - 1, 0])?;
                    let extra = t.sum(extra);
                    t.add(loss, extra)
                },
                vec![a, b, c, bias],
            );
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn lstm_matches_composed_cell(
            u in 1usize..=4, h in 1usize..=5, n in 1usize..=6, seed in 0u64..1000
        ) {
            let vocab = 5;
            let mut rng = seeded_rng(seed);
            let steps: Vec<Vec<usize>> =
                (0..n).map(|_| (0..u).map(|_| rng.gen_range(0..vocab)).collect()).collect();
            let inputs = vec![matrix(vocab, 4 * h, seed), matrix(h, 4 * h, seed + 1), matrix(1, 4 * h, seed + 2)];
            let probe = matrix(u, h, seed + 3);

            let run = |fused: bool| {
                let mut t = Tape::<f64>::new();
                let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
                let out = if fused {
                    t.lstm(v[0], v[1], v[2], &steps).unwrap()
                } else {
                    composed_lstm(&mut t, &v, &steps, h)
                };
                let w = t.constant(probe.clone());
                let y = t.mul(out, w).unwrap();
                let loss = t.sum(y);
                t.backward(loss).unwrap();
                let grads: Vec<Array2<f64>> = v.iter().map(|&x| t.grad(x).unwrap().clone()).collect();
                (t.value(out).clone(), grads)
            };
            let (a, ga) = run(true);
            let (b, gb) = run(false);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (gx, gy) in ga.iter().zip(&gb) {
                for (x, y) in gx.iter().zip(gy) {
                    prop_assert!((x - y).abs() < 1e-10, "{} vs {}", x, y);
                }
            }
            let err = numeric_check(
                |t, v| {
                    let out = t.lstm(v[0], v[1], v[2], &steps)?;
                    let w = t.constant(probe.clone());
                    let y = t.mul(out, w)?;
                    Ok(t.sum(y))
                },
                inputs.clone(),
            );
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn aggregate_commutes_with_relabelling(n in 1usize..=10, d in 1usize..=6, seed in 0u64..1000) {
            let mut rng = seeded_rng(seed);
            let adj = Array2::from_shape_fn((n, n), |(i, j)| {
                let k = (i.min(j) * 31 + i.max(j) * 17) % 5;
                [0.0f32, 0.25, 0.5, 0.5, 1.0 / 3.0][k]
            });
            let mut h = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0f32..1.0));
            if n > 2 {
                let dup = h.row(0).to_owned();
                h.row_mut(1).assign(&dup);
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let padj = Array2::from_shape_fn((n, n), |(i, j)| adj[[perm[i], perm[j]]]);
            let ph = Array2::from_shape_fn((n, d), |(i, c)| h[[perm[i], c]]);
            let mut t = Tape::<f32>::new();
            let x = t.constant(h);
            let px = t.constant(ph);
            let out = t.aggregate(Arc::new(adj), x).unwrap();
            let pout = t.aggregate(Arc::new(padj), px).unwrap();
            for i in 0..n {
                for c in 0..d {
                    prop_assert_eq!(t.value(pout)[[i, c]].to_bits(), t.value(out)[[perm[i], c]].to_bits());
                }
            }
        }

        #[test]
        fn aggregate_gradient(n in 1usize..=8, d in 1usize..=8, seed in 0u64..1000) {
            let mut adj = matrix(n, n, seed).mapv(f64::abs);
            adj = &adj + &adj.t();
            let adj = Arc::new(adj);
            let h = matrix(n, d, seed + 5);
            let err = numeric_check(
                move |t, v| {
                    let x = t.aggregate(adj.clone(), v[0])?;
                    let y = t.mul(x, x)?;
                    Ok(t.sum(y))
                },
                vec![h],
            );
            prop_assert!(err < 1e-4, "relative error {}", err);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = seeded_rng(5);
            let mut t = Tape::<f32>::new();
            let x = t.param(cast_array(&matrix(6, 7, 1)));
            let w = t.param(cast_array(&matrix(7, 3, 2)));
            let h = t.matmul(x, w).unwrap();
            let h = t.dropout(h, 0.2, &mut rng, true).unwrap();
            t.value(h).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
