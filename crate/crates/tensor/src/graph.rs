//! Tape of differentiable operations.
//!
//! Every forward op appends a node holding its output value and enough
//! information to route the output gradient back to its operands. Nodes are
//! only ever appended, so the tape order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Mask, Scalar, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::cross_entropy`] reduces per-position losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `Σ w·nll / Σ w` over non-ignored positions.
    WeightedMean,
    /// `Σ w·nll` over non-ignored positions.
    WeightedSum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        coef: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
///
/// Parameters can be registered by reference so the tape never copies model
/// weights.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `train` enables dropout; `seed` drives every dropout mask drawn on
    /// this graph.
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrowed leaf that receives gradients.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `requires_grad` decides whether backward reports its gradient.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Owned constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "{op} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// `a[n×k] · b[k×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[n×k] · b[m×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul_bt")?;
        let (m, k2) = self.matrix_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_same_shape(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same_shape(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same_shape(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tx.cols() != tb.len() {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|&v| v * s).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out as exact zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if tx.shape().len() != 2 || mask.rows() != r || mask.cols() != c {
            return Err(mismatch(
                "masked_softmax",
                tx.shape(),
                &[mask.rows(), mask.cols()],
            ));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = tx.row(i);
            let vis = mask.row(i);
            if !vis.iter().any(|&ok| ok) {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            // NaN inputs propagate instead of being skipped.
            let mut max = T::neg_infinity();
            for (&v, &ok) in row.iter().zip(vis) {
                if ok && (v > max || v.is_nan()) {
                    max = v;
                }
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = T::zero();
            for j in 0..c {
                if vis[j] {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        let t = Tensor::new(&[r, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::MaskedSoftmax(x), rg))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for i in 0..rows {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows `ids` of the `[V×d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (no node) outside training mode or when
    /// `rate` is zero. Every call draws a fresh mask from the graph's stream.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Dropout { x, keep }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_K));
        let half = T::from_f64_lossy(0.5);
        let tanh: Vec<T> = tx
            .data()
            .iter()
            .map(|&v| (c * (v + k * v * v * v)).tanh())
            .collect();
        let data = tx
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Gelu { x, tanh }, rg)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.matrix_dims(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start + width > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                extent: cols,
            });
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            out.extend_from_slice(&tx.row(i)[start..start + width]);
        }
        let t = Tensor::new(&[rows, width], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.matrix_dims(first, "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, cols], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_rows")?;
        if start + count > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + count,
                extent: rows,
            });
        }
        let data = self.value(x).data()[start * cols..(start + count) * cols].to_vec();
        let t = Tensor::new(&[count, cols], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Weighted cross-entropy of row-wise softmax(`logits`) against class
    /// `targets`. Rows whose target equals `ignore_id` contribute nothing to
    /// the value or the gradient. If every row is ignored (or the weights of
    /// the remaining rows sum to zero) the loss is zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
        weights: &[T],
        reduction: Reduction,
    ) -> Result<Var> {
        let (rows, classes) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        let mut coef = vec![T::zero(); rows];
        for i in 0..rows {
            let t = targets[i];
            if t == ignore_id {
                continue;
            }
            if t >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: classes,
                });
            }
            if weights[i] < T::zero() {
                return Err(TensorError::InvalidArgument(
                    "cross_entropy weights must be nonnegative".into(),
                ));
            }
            coef[i] = weights[i];
        }
        if reduction == Reduction::WeightedMean {
            let z: T = coef.iter().copied().sum();
            if z > T::zero() {
                for c in &mut coef {
                    *c = *c / z;
                }
            }
        }
        let tl = self.value(logits);
        let mut probs = vec![T::zero(); rows * classes];
        let mut loss = T::zero();
        for i in 0..rows {
            if coef[i] == T::zero() {
                continue;
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * classes..(i + 1) * classes];
            let mut total = T::zero();
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in p.iter_mut() {
                *o = *o / total;
            }
            let log_p = row[targets[i]] - max - total.ln();
            loss += -coef[i] * log_p;
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                coef,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], n * k);
                    gemm_nt(g, tb.data(), ga, n, m, k);
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], k * m);
                    gemm_tn(ta.data(), g, gb, n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], n * k);
                    gemm_nn(g, tb.data(), ga, n, m, k);
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], m * k);
                    gemm_tn(g, ta.data(), gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let od = val(other).data();
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for ((o, &x), &y) in gv.iter_mut().zip(g).zip(od) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if needs(*b) {
                    let d = val(*b).len();
                    let gb = accumulate(&mut grads[b.0], d);
                    for row in g.chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * *s;
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if needs(*x) {
                    let y = node.value.as_ref();
                    let c = y.cols();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let rows = rstd.len();
                if needs(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], d);
                    for i in 0..rows {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = accumulate(&mut grads[beta.0], d);
                    for row in g.chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if needs(*x) {
                    let gamma_v = val(*gamma).data();
                    let dn = T::from_usize(d).unwrap();
                    let gx = accumulate(&mut grads[x.0], rows * d);
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let v = g[i * d + j] * gamma_v[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[i * d + j];
                        }
                        let f = rstd[i] / dn;
                        for j in 0..d {
                            gx[i * d + j] += f * (dn * dxhat[j] - s1 - xhat[i * d + j] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let tt = val(*table);
                    let d = tt.cols();
                    let gt = accumulate(&mut grads[table.0], tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((o, &v), &k) in gx.iter_mut().zip(g).zip(keep) {
                        *o += v * k;
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                if needs(*x) {
                    let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_K));
                    let half = T::from_f64_lossy(0.5);
                    let three = T::from_f64_lossy(3.0);
                    let xd = val(*x).data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (((o, &v), &xv), &t) in gx.iter_mut().zip(g).zip(xd).zip(tanh) {
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * xv * xv);
                        *o += v * (half * (T::one() + t) + half * xv * dt);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if needs(*p) {
                        let gp = accumulate(&mut grads[p.0], rows * w);
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let tx = val(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let w = node.value.cols();
                    let gx = accumulate(&mut grads[x.0], rows * cols);
                    for i in 0..rows {
                        for j in 0..w {
                            gx[i * cols + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if needs(*p) {
                        let gp = accumulate(&mut grads[p.0], n);
                        for (o, &v) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let tx = val(*x);
                    let off = start * tx.cols();
                    let gx = accumulate(&mut grads[x.0], tx.len());
                    for (o, &v) in gx[off..off + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = val(*x).len();
                    let gx = accumulate(&mut grads[x.0], n);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                coef,
                probs,
            } => {
                if needs(*logits) {
                    let tl = val(*logits);
                    let c = tl.cols();
                    let gl = accumulate(&mut grads[logits.0], tl.len());
                    for (i, &w) in coef.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let f = w * g[0];
                        for j in 0..c {
                            gl[i * c + j] += f * probs[i * c + j];
                        }
                        gl[i * c + targets[i]] -= f;
                    }
                }
            }
        }
    }
}
