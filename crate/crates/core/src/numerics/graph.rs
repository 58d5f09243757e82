//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op in creation order. Because a [`Var`] can
//! only refer to nodes that already exist, the tape is a topological order
//! by construction and backward is a single reverse sweep.

use std::collections::{HashMap, HashSet};

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleRows(Var, Vec<f64>),
    ScaleCols(Var, Vec<f64>),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters in `frozen` enter the graph as constants.
    pub fn with_frozen(frozen: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            frozen: frozen.into_iter().collect(),
            ..Self::default()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Leaf that receives a gradient (e.g. the state in a divergence pass).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Binds a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let trainable = !self.frozen.contains(&id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            invalid(format!("variable {} is not on this graph", v.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let xv = self.value(x);
        let bv = self.value(bias);
        let (r, c) = xv.dims2()?;
        if bv.len() != c {
            return shape_err(format!("bias of {} for {} columns", bv.len(), c));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        let rg = self.any_grad(&[x, bias]);
        self.push(value, Op::AddBias(x, bias), rg, "add_bias")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).zip_map(self.value(b), f).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
            other => other,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Affine(x, scale), rg, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rows() != factors.len() {
            return shape_err(format!("{} row factors for {} rows", factors.len(), xv.rows()));
        }
        let mut v = xv.clone();
        for (i, f) in factors.iter().enumerate() {
            for e in v.row_mut(i) {
                *e *= f;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(v, Op::ScaleRows(x, factors), rg, "scale_rows")
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let c = xv.cols();
        if c != factors.len() {
            return shape_err(format!("{} column factors for {} columns", factors.len(), c));
        }
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(c) {
            for (e, f) in row.iter_mut().zip(&factors) {
                *e *= f;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(v, Op::ScaleCols(x, factors), rg, "scale_cols")
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).zip_map(c, |a, b| a + b)?;
        let rg = self.any_grad(&[x]);
        self.push(v, Op::AddConst(x), rg, "add_const")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Tanh(x), rg, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(|e| e * e);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Square(x), rg, "square")
    }

    /// Standardizes each row (the last axis) to zero mean and unit biased
    /// variance. No learned affine.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (y, inv_std) = layer_norm_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        self.push(y, Op::LayerNorm(x, inv_std), rg, "layer_norm")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        for &p in parts {
            self.check(p)?;
            let r = self.value(p).dims2()?.0;
            if *rows.get_or_insert(r) != r {
                return shape_err("concat_cols: row counts differ");
            }
        }
        let rows = rows.ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::matrix(rows, total, out)?;
        let rg = self.any_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            self.check(p)?;
            let (r, c) = self.value(p).dims2()?;
            if *cols.get_or_insert(c) != c {
                return shape_err("concat_rows: column counts differ");
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let v = Tensor::matrix(rows, cols, out)?;
        let rg = self.any_grad(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Mean(x), rg, "mean")
    }

    /// Gradients of a scalar node with respect to every node that requires
    /// one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        self.backward_with_seed(loss, Tensor::full(lv.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `output`)
    /// back through the tape.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return shape_err(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            ));
        }
        seed.ensure_finite("backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.1;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(&mut da, g.data(), bv.data(), m, n, k, false, true, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(&mut db, av.data(), g.data(), k, m, n, true, false, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?)?;
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.clone())?;
                }
                if self.requires_grad(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, e) in db.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.map(|e| -e))?;
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Affine(x, s) => {
                self.accumulate(grads, *x, g.map(|e| e * s))?;
            }
            Op::ScaleRows(x, f) => {
                let mut d = g.clone();
                for (r, s) in f.iter().enumerate() {
                    for e in d.row_mut(r) {
                        *e *= s;
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::ScaleCols(x, f) => {
                let mut d = g.clone();
                let c = d.cols();
                for row in d.data_mut().chunks_mut(c) {
                    for (e, s) in row.iter_mut().zip(f) {
                        *e *= s;
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::AddConst(x) => {
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Square(x) => {
                let d = g.zip_map(self.value(*x), |gi, xi| 2.0 * gi * xi)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::LayerNorm(x, inv_std) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, s) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[r * c + j] = s * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, c, d)?)?;
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.requires_grad(p) {
                        let d = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(r, c, d)?)?;
                    }
                    offset += r;
                }
            }
            Op::Sum(x) => {
                let s = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.item()? / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), s))?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                if existing.shape() != d.shape() {
                    return shape_err("gradient accumulation");
                }
                for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
        Ok(())
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound, trainable parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Per-parameter gradients in the store's order; parameters not on the
    /// tape (or frozen) map to `None`.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store.ids().map(|id| self.param(id).cloned()).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise standardization with biased variance. Returns the normalized
/// tensor and the per-row inverse standard deviations.
pub fn layer_norm_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let c = x.cols();
    if c < 2 {
        return invalid("layer norm needs at least two entries along the axis");
    }
    let mut out = x.data().to_vec();
    let mut inv = Vec::with_capacity(x.rows());
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        if !(var > 0.0) {
            return Err(Error::Degenerate("zero variance along layer-norm axis".into()));
        }
        let s = 1.0 / var.sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv.push(s);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}
