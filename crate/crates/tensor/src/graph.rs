//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and backward is a single reverse
//! sweep. Parameters enter the graph through [`Graph::param`], which caches one
//! leaf per parameter; [`Graph::backward`] accumulates into [`ParamStore`]
//! gradients.

use std::collections::HashMap;

use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, transpose_raw};
use crate::{ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    MaxAxis0 { x: Var, argmax: Vec<usize> },
    MeanAxis0(Var),
    Sum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<(usize, usize)> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::gradients`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that tracks its gradient (read back with [`Gradients::wrt`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).as_matrix("matmul_t")?;
        let (n, k2) = self.value(b).as_matrix("matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.value(a), self.value(b)));
        }
        let data = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `bias: [m]` to every row of `x: [n, m]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, m) = tx.as_matrix("add_row")?;
        if tb.numel() != m {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.clone();
        let b = tb.data();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Multiplies row `i` of `x: [n, m]` by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var, TensorError> {
        let (tx, ts) = (self.value(x), self.value(scale));
        let (n, m) = tx.as_matrix("scale_rows")?;
        if ts.numel() != n {
            return Err(shape_err("scale_rows", tx, ts));
        }
        let mut out = tx.clone();
        for (row, &s) in out.data_mut().chunks_mut(m).zip(ts.data()) {
            for o in row {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, scale]);
        Ok(self.push(out, Op::ScaleRows(x, scale), rg))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", self.value(x), self.value(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulScalar(x, s), rg))
    }

    /// `x + s` for a one-element tensor `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("add_scalar", self.value(x), self.value(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v + sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::AddScalar(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(log_sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSigmoid(x), rg)
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (outer, len, inner) = axis_split(tx.shape(), axis, "softmax")?;
        let mut out = tx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * len * inner + t * inner + i;
                let max = (0..len).map(|t| d[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..len {
                    let e = (d[at(t)] - max).exp();
                    d[at(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    d[at(t)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let m = tx.cols();
        if m < 2 || tg.numel() != m || tb.numel() != m {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.numel() / m;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[r * m + j] = h;
                out[r * m + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (_, m) = tx.as_matrix("normalize_rows")?;
        let mut out = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in out.data_mut().chunks_mut(m) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                for v in row {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Column-wise maximum of `x: [n, m]`, giving `[m]`. Ties resolve to the
    /// lowest row index, which is also where the gradient goes.
    pub fn max_axis0(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, m) = tx.as_matrix("max_axis0")?;
        if n == 0 {
            return Err(TensorError::Invalid("max over an empty axis".into()));
        }
        let mut argmax = vec![0usize; m];
        let mut out = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            for j in 0..m {
                let v = tx.data()[i * m + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MaxAxis0 { x, argmax }, rg))
    }

    /// Column-wise mean of `x: [n, m]`, giving `[m]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, m) = tx.as_matrix("mean_axis0")?;
        if n == 0 {
            return Err(TensorError::Invalid("mean over an empty axis".into()));
        }
        let mut out = vec![0.0; m];
        for row in tx.data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanAxis0(x), rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of several tensors of one shape. Panics on an empty slice.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = xs.split_first().expect("add_all of nothing");
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, m) = tx.as_matrix("slice_cols")?;
        if start + len > m {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: m,
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for row in tx.data().chunks(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let n = self.value(xs[0]).as_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).as_matrix("concat_cols")?;
            if r != n {
                return Err(shape_err("concat_cols", self.value(xs[0]), self.value(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, m) = tt.as_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), m], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers `x[r][c]` for each `(r, c)` into a vector.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, m) = tx.as_matrix("pick")?;
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= n || c >= m {
                return Err(TensorError::Index {
                    op: "pick",
                    index: r.max(c),
                    bound: if r >= n { n } else { m },
                });
            }
            out.push(tx.data()[r * m + c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss` and returns every node's adjoint.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Backpropagates `loss` and adds the parameter gradients into `store`.
    /// Calling twice without [`ParamStore::zero_grad`] accumulates.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                let p = store.get_mut(id);
                for (acc, d) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(d) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    acc(a, matmul_bt_raw(g, val(b).data(), m, n, k));
                }
                if needs(b) {
                    acc(b, matmul_at_raw(val(a).data(), g, m, k, n));
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[0];
                if needs(a) {
                    acc(a, matmul_raw(g, val(b).data(), m, n, k));
                }
                if needs(b) {
                    acc(b, matmul_at_raw(g, val(a).data(), m, n, k));
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
                acc(x, transpose_raw(g, n, m));
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b).data()).map(|(d, y)| d * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a).data()).map(|(d, x)| d * x).collect());
                }
            }
            &Op::AddRow(x, bias) => {
                acc(x, g.to_vec());
                if needs(bias) {
                    let m = val(bias).numel();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (o, d) in db.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                    acc(bias, db);
                }
            }
            &Op::ScaleRows(x, s) => {
                let m = val(x).cols();
                let sv = val(s).data();
                if needs(x) {
                    let mut dx = g.to_vec();
                    for (row, &k) in dx.chunks_mut(m).zip(sv) {
                        for v in row {
                            *v *= k;
                        }
                    }
                    acc(x, dx);
                }
                if needs(s) {
                    let ds = g
                        .chunks(m)
                        .zip(val(x).data().chunks(m))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(s, ds);
                }
            }
            &Op::Scale(x, c) => acc(x, g.iter().map(|d| d * c).collect()),
            &Op::MulScalar(x, s) => {
                let sv = val(s).item();
                if needs(x) {
                    acc(x, g.iter().map(|d| d * sv).collect());
                }
                if needs(s) {
                    let ds = g.iter().zip(val(x).data()).map(|(d, v)| d * v).sum();
                    acc(s, vec![ds]);
                }
            }
            &Op::AddScalar(x, s) => {
                acc(x, g.to_vec());
                acc(s, vec![g.iter().sum()]);
            }
            &Op::Relu(x) => acc(
                x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect(),
            ),
            &Op::Sigmoid(x) => acc(
                x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect(),
            ),
            &Op::LogSigmoid(x) => acc(
                x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(d, &v)| d * sigmoid(-v))
                    .collect(),
            ),
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis, "softmax").expect("checked in forward");
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + i;
                        let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..len {
                            dx[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, &d), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = d - y.exp() * gs;
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let m = val(*gain).numel();
                let gv = val(*gain).data();
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * m..(r + 1) * m;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(d, w)| d * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / m as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx[r * m + j] = rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; m];
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; m];
                    for gr in g.chunks(m) {
                        for (o, d) in db.iter_mut().zip(gr) {
                            *o += d;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let m = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let span = r * m..(r + 1) * m;
                    let y = &node.value.data()[span.clone()];
                    let gr = &g[span];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[r * m + j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                acc(*x, dx);
            }
            &Op::Clamp { x, lo, hi } => acc(
                x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(d, &v)| if v >= lo && v <= hi { *d } else { 0.0 })
                    .collect(),
            ),
            Op::MaxAxis0 { x, argmax } => {
                let m = argmax.len();
                let mut dx = vec![0.0; val(*x).numel()];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * m + j] += g[j];
                }
                acc(*x, dx);
            }
            &Op::MeanAxis0(x) => {
                let (n, m) = (val(x).shape()[0], val(x).shape()[1]);
                let mut dx = Vec::with_capacity(n * m);
                for _ in 0..n {
                    dx.extend(g.iter().map(|d| d / n as f64));
                }
                acc(x, dx);
            }
            &Op::Sum(x) => acc(x, vec![g[0]; val(x).numel()]),
            &Op::SliceCols { x, start } => {
                let m = val(x).cols();
                let len = node.value.cols();
                let mut dx = vec![0.0; val(x).numel()];
                for (dr, gr) in dx.chunks_mut(m).zip(g.chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                acc(x, dx);
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if needs(x) {
                        let mut dx = Vec::with_capacity(val(x).numel());
                        for gr in g.chunks(total) {
                            dx.extend_from_slice(&gr[offset..offset + w]);
                        }
                        acc(x, dx);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let m = val(*table).cols();
                let mut dt = vec![0.0; val(*table).numel()];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..m {
                        dt[id * m + j] += g[t * m + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Pick { x, idx } => {
                let m = val(*x).cols();
                let mut dx = vec![0.0; val(*x).numel()];
                for (k, &(r, c)) in idx.iter().enumerate() {
                    dx[r * m + c] += g[k];
                }
                acc(*x, dx);
            }
        }
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

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::Index {
            op,
            index: axis,
            bound: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
