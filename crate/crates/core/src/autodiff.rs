//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value plus whatever it
//! needs for the adjoint. `backward` replays the nodes in reverse and returns
//! gradients for the leaves registered as parameters. Constants are leaves
//! with no gradient slot; anything computed only from constants is skipped.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{gemm, log_sum_exp, softmax_in_place, MatMut, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    Tanh(Var),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

/// Layout of packed multi-head attention inputs: `batch * seq` rows of
/// `heads * head_dim` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Parameters of a [`ParameterSet`] bound onto a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }
}

/// Gradient map keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn new(map: BTreeMap<String, Tensor>) -> Self {
        Gradients(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies every tensor of `params` onto the tape, as trainable leaves or
    /// as constants.
    pub fn bind(&mut self, params: &ParameterSet, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, p)| {
                let v = if trainable {
                    self.param(name, p.tensor.clone())
                } else {
                    self.constant(p.tensor.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`, for weights stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by transpose of {:?}: inner dimensions differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            1.0,
            MatRef::row_major(ta.data(), m, k),
            MatRef::row_major(tb.data(), n, k).t(),
            0.0,
            MatMut::row_major(out.data_mut(), m, n),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        out.axpy(-1.0, self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for matrix {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for i in 0..m {
            for (o, bj) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bj;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Inverted dropout with a precomputed keep mask (`0` or `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "dropout mask of {} entries for tensor {:?}",
                mask.len(),
                self.value(a).shape()
            )));
        }
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for table of {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(out, Op::Gather { table, ids }, ng))
    }

    pub fn select_rows(&mut self, input: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(input);
        let (m, d) = t.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Input(format!("row {bad} out of range for {m} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::SelectRows { input, rows }, ng))
    }

    /// Layer normalization over the last dimension of an `[m, n]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [n] {
                return Err(Error::Shape(format!(
                    "layer-norm parameter {:?} for input {:?}",
                    self.value(p).shape(),
                    self.value(x).shape()
                )));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product multi-head attention over packed `[batch*seq, dim]`
    /// projections. Keys whose `key_mask` entry is false get zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_mask: Vec<bool>,
    ) -> Result<Var> {
        let AttentionShape { batch, seq, heads } = shape;
        let (rows, dim) = self.value(q).dims2()?;
        for t in [k, v] {
            if self.value(t).shape() != [rows, dim] {
                return Err(Error::Shape(format!(
                    "attention inputs {:?} and {:?}",
                    self.value(q).shape(),
                    self.value(t).shape()
                )));
            }
        }
        if rows != batch * seq || heads == 0 || dim % heads != 0 || key_mask.len() != rows {
            return Err(Error::Shape(format!(
                "attention over {rows}x{dim} with batch {batch}, seq {seq}, heads {heads}, mask {}",
                key_mask.len()
            )));
        }
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = b * seq * dim + h * hd;
                let view = |data| MatRef {
                    data,
                    offset: off,
                    rows: seq,
                    cols: hd,
                    rs: dim,
                    cs: 1,
                };
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    scale,
                    view(qd),
                    view(kd).t(),
                    0.0,
                    MatMut::row_major(p, seq, seq),
                );
                for row in p.chunks_mut(seq) {
                    for (s, &keep) in row.iter_mut().zip(mask) {
                        if !keep {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    1.0,
                    MatRef::row_major(p, seq, seq),
                    view(vd),
                    0.0,
                    MatMut {
                        data: &mut out,
                        offset: off,
                        rows: seq,
                        cols: hd,
                        rs: dim,
                        cs: 1,
                    },
                );
            }
        }
        let out = Tensor::new(vec![rows, dim], out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).last_dim() == 0 {
            return Err(Error::Shape("softmax over an empty dimension".into()));
        }
        let out = self.value(a).softmax_rows();
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = t.dims2()?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "{} labels for {b} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {bad} outside [0, {c})")));
        }
        if b == 0 {
            return Err(Error::Input("cross-entropy of an empty batch".into()));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let probs = t.softmax_rows().into_data();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over every entry of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.is_empty() {
            return Err(Error::Input("mse of empty tensors".into()));
        }
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(total / ta.len() as f64);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mse(a, b), ng))
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients(out))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let slot = slot(grads, *a, ta.shape());
                    gemm(
                        1.0,
                        MatRef::row_major(g.data(), m, n),
                        MatRef::row_major(tb.data(), k, n).t(),
                        1.0,
                        MatMut::row_major(slot.data_mut(), m, k),
                    );
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, tb.shape());
                    gemm(
                        1.0,
                        MatRef::row_major(ta.data(), m, k).t(),
                        MatRef::row_major(g.data(), m, n),
                        1.0,
                        MatMut::row_major(slot.data_mut(), k, n),
                    );
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.needs(*a) {
                    let slot = slot(grads, *a, ta.shape());
                    gemm(
                        1.0,
                        MatRef::row_major(g.data(), m, n),
                        MatRef::row_major(tb.data(), n, k),
                        1.0,
                        MatMut::row_major(slot.data_mut(), m, k),
                    );
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, tb.shape());
                    gemm(
                        1.0,
                        MatRef::row_major(g.data(), m, n).t(),
                        MatRef::row_major(ta.data(), m, k),
                        1.0,
                        MatMut::row_major(slot.data_mut(), n, k),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.needs(*b) {
                    slot(grads, *b, g.shape()).axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let s = slot(grads, *a, ta.shape());
                    for ((o, gi), y) in s.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gi * y;
                    }
                }
                if self.needs(*b) {
                    let s = slot(grads, *b, tb.shape());
                    for ((o, gi), x) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                slot(grads, *a, g.shape()).axpy(*c, g);
            }
            Op::AddBias(x, bias) => {
                if self.needs(*x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if self.needs(*bias) {
                    let n = g.last_dim();
                    let s = slot(grads, *bias, &[n]);
                    for row in g.data().chunks(n) {
                        for (o, v) in s.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                let s = slot(grads, *a, self.value(*a).shape());
                for o in s.data_mut() {
                    *o += gv;
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let s = slot(grads, *a, y.shape());
                for ((o, gi), yi) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let s = slot(grads, *a, x.shape());
                for ((o, gi), &xi) in s.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    *o += gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                }
            }
            Op::Dropout(a, mask) => {
                let s = slot(grads, *a, g.shape());
                for ((o, gi), m) in s.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *o += gi * m;
                }
            }
            Op::Gather { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let d = shape[1];
                let s = slot(grads, *table, &shape);
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, v) in s.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            Op::SelectRows { input, rows } => {
                let shape = self.value(*input).shape().to_vec();
                let d = shape[1];
                let s = slot(grads, *input, &shape);
                for (r, &i) in rows.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, v) in s.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += v;
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
                let n = g.last_dim();
                let m = rstd.len();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let s = slot(grads, *gamma, &[n]);
                    for i in 0..m {
                        for j in 0..n {
                            s.data_mut()[j] += g.data()[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let s = slot(grads, *beta, &[n]);
                    for row in g.data().chunks(n) {
                        for (o, v) in s.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if self.needs(*x) {
                    let s = slot(grads, *x, g.shape());
                    let nf = n as f64;
                    for i in 0..m {
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..n {
                            let gj = gr[j] * gam[j];
                            sum_g += gj;
                            sum_gx += gj * xh[j];
                        }
                        let out = &mut s.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            let gj = gr[j] * gam[j];
                            out[j] += rstd[i] * (gj - sum_g / nf - xh[j] * sum_gx / nf);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
            Op::Softmax(a) => {
                let p = &node.value;
                let c = p.last_dim();
                let s = slot(grads, *a, p.shape());
                for ((o, gr), pr) in s
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(p.data().chunks(c))
                {
                    let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        o[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let c = shape[1];
                let b = labels.len();
                let coef = g.item() / b as f64;
                let s = slot(grads, *logits, &shape);
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        s.data_mut()[i * c + j] += coef * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let coef = 2.0 * g.item() / ta.len() as f64;
                if self.needs(*a) {
                    let s = slot(grads, *a, ta.shape());
                    for ((o, x), y) in s.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o += coef * (x - y);
                    }
                }
                if self.needs(*b) {
                    let s = slot(grads, *b, tb.shape());
                    for ((o, x), y) in s.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o -= coef * (x - y);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let AttentionShape { batch, seq, heads } = shape;
        let (rows, dim) = (g.shape()[0], g.shape()[1]);
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; rows * dim];
        let mut dk = vec![0.0; rows * dim];
        let mut dv = vec![0.0; rows * dim];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * hd;
                let view = |data| MatRef {
                    data,
                    offset: off,
                    rows: seq,
                    cols: hd,
                    rs: dim,
                    cs: 1,
                };
                let view_mut = |data| MatMut {
                    data,
                    offset: off,
                    rows: seq,
                    cols: hd,
                    rs: dim,
                    cs: 1,
                };
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let pm = MatRef::row_major(p, seq, seq);
                // dV = P^T dO
                gemm(1.0, pm.t(), view(g.data()), 0.0, view_mut(&mut dv));
                // dP = dO V^T
                gemm(
                    1.0,
                    view(g.data()),
                    view(vd).t(),
                    0.0,
                    MatMut::row_major(&mut dp, seq, seq),
                );
                // dS = P * (dP - rowdot(dP, P)) * scale
                for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(x, y)| x * y).sum();
                    for (x, y) in dr.iter_mut().zip(pr) {
                        *x = y * (*x - dot) * scale;
                    }
                }
                let ds = MatRef::row_major(&dp, seq, seq);
                gemm(1.0, ds, view(kd), 0.0, view_mut(&mut dq));
                gemm(1.0, ds.t(), view(qd), 0.0, view_mut(&mut dk));
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                let s = slot(grads, var, &[rows, dim]);
                for (o, x) in s.data_mut().iter_mut().zip(&d) {
                    *o += x;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Max relative error over coordinates whose gradient magnitude is at
    /// least [`RESOLVABLE_GRAD`]. Below that, central differences at
    /// eps ~1e-5 are dominated by rounding in the loss itself (~1e-10
    /// absolute), so the relative error there measures noise, not the
    /// gradient.
    pub resolvable_rel_error: f64,
}

pub const RESOLVABLE_GRAD: f64 = 1e-6;

/// Compares the tape's gradients of `f` at `params` against central
/// differences with step `eps`.
///
/// `f` must build a scalar on the given tape from the bound parameters and
/// be deterministic. The error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &ParameterSet, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = t.bind(p, false);
        let out = f(&mut t, &b)?;
        Ok(t.value(out).item())
    };

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, p)| (0..p.tensor.len()).map(move |i| (name.to_string(), i)))
        .collect();

    let results: Vec<Result<(f64, f64, f64)>> = coords
        .par_iter()
        .map_init(
            || params.clone(),
            |work, (name, i)| {
                let orig = work.tensor(name)?.data()[*i];
                work.tensor_mut(name)?.data_mut()[*i] = orig + eps;
                let plus = eval(work)?;
                work.tensor_mut(name)?.data_mut()[*i] = orig - eps;
                let minus = eval(work)?;
                work.tensor_mut(name)?.data_mut()[*i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads
                    .get(name)
                    .map(|g| g.data()[*i])
                    .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                Ok(((analytic - numeric).abs() / denom, analytic, numeric))
            },
        )
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        resolvable_rel_error: 0.0,
    };
    for ((name, i), r) in coords.iter().zip(results) {
        let (err, a, n) = r?;
        if a.abs().max(n.abs()) >= RESOLVABLE_GRAD {
            report.resolvable_rel_error = report.resolvable_rel_error.max(err);
        }
        if err > report.max_rel_error || report.worst_param.is_empty() {
            report = GradCheck {
                max_rel_error: err,
                worst_param: name.clone(),
                worst_index: *i,
                analytic: a,
                numeric: n,
                checked: report.checked,
                resolvable_rel_error: report.resolvable_rel_error,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut tape = Tape::new();
        let w = tape.param("w", t2(&[vec![1.0, 2.0]]));
        let c = tape.constant(t2(&[vec![0.5, -1.0]]));
        let loss = tape.mse(w, c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["w"]);
    }

    #[test]
    fn unreached_parameters_get_zeros() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::scalar(2.0));
        let _b = tape.param("b", Tensor::vector(vec![1.0, 1.0]));
        let loss = tape.scale(a, 3.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap(), &Tensor::zeros(&[2]));
        assert_eq!(g.get("a").unwrap().item(), 3.0);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![0.0, 0.0], vec![1f64.ln(), 3f64.ln()]]));
        let p = tape.softmax(a).unwrap();
        let d = tape.value(p).data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.25).abs() < 1e-12 && (d[3] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_saturated_is_finite() {
        let t = t2(&[vec![1000.0, -1000.0, 0.0]]).softmax_rows();
        assert!(t.is_finite());
        assert!((t.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let ce = tape.cross_entropy(uniform, &[0, 1, 3]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);

        let sat = tape.constant(t2(&[vec![20.0, -20.0]]));
        let ce = tape.cross_entropy(sat, &[0]).unwrap();
        assert!(tape.value(ce).item() < 1e-15);

        // -ln(e / (e + 1)), evaluated independently of log-sum-exp.
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((expected - 0.31326).abs() < 1e-5);
        let l = tape.constant(t2(&[vec![1.0, 0.0]]));
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(ce).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            tape.cross_entropy(l, &[2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let logits = t2(&[vec![0.3, -1.2, 2.0], vec![0.0, 0.5, -0.5]]);
        let labels = [2, 0];
        let mut tape = Tape::new();
        let l = tape.param("l", logits.clone());
        let ce = tape.cross_entropy(l, &labels).unwrap();
        let g = tape.backward(ce).unwrap();
        let p = logits.softmax_rows();
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..3 {
                let onehot = if j == y { 1.0 } else { 0.0 };
                let expected = (p.data()[i * 3 + j] - onehot) / 2.0;
                assert!((g.get("l").unwrap().data()[i * 3 + j] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 0.0]]));
        let b = tape.constant(t2(&[vec![0.0, 0.0]]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item(), 0.5);
        let m = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
        let c = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(tape.mse(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.gather(t, vec![0, 3]).is_err());
    }

    fn single(name: &str, t: Tensor) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name, t, Group::Encoder);
        p
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let x = t2(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.1]]);
        let y = t2(&[vec![1.0], vec![-2.0], vec![0.5]]);
        let params = single("w", t2(&[vec![0.3], vec![-0.7]]));
        let report = grad_check(
            |tape, b| {
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let pred = tape.matmul(xv, b.get("w")?)?;
                tape.mse(pred, yv)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn grad_check_constant_function_is_exact() {
        let params = single("w", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let report = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.2))),
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }
}
