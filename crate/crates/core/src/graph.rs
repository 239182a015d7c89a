//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order. Because inputs
//! always precede outputs on the tape, [`Graph::backward`] is a single
//! reverse sweep with no topological sort.
//!
//! Binary elementwise ops broadcast matrix operands whose row or column count
//! is 1 (`m x n` with `1 x n`, `m x 1` or `1 x 1`, in either position).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    LayerNorm(Var, Rc<[f64]>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    ConcatCols(Rc<[Var]>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn axis_check(op: &str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::Shape(format!("{op}: axis {axis} out of range for a matrix")));
    }
    Ok(())
}

/// Output dims for a broadcasting binary op.
fn broadcast_dims(op: &str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape(format!(
            "{op}: cannot broadcast {}x{} with {}x{}",
            a.0, a.1, b.0, b.1
        ))),
    }
}

/// Sums a full-size gradient down to a broadcast operand's dims.
fn reduce_to(grad: &[f64], full: (usize, usize), target: (usize, usize)) -> Tensor {
    if full == target {
        return Tensor::from_matrix(full.0, full.1, grad.to_vec()).expect("dims");
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..full.0 {
        let ti = if target.0 == 1 { 0 } else { i };
        for j in 0..full.1 {
            let tj = if target.1 == 1 { 0 } else { j };
            out[ti * target.1 + tj] += grad[i * full.1 + j];
        }
    }
    Tensor::from_matrix(target.0, target.1, out).expect("dims")
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

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.matrix_dims(op)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul_nt", a)?;
        let (n, k2) = self.dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt: {m}x{k} @ ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_matrix(m, n, out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let da = self.dims(name, a)?;
        let db = self.dims(name, b)?;
        let (r, c) = broadcast_dims(name, da, db)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        if da == db {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                let ia = if da.0 == 1 { 0 } else { i };
                let ib = if db.0 == 1 { 0 } else { i };
                for j in 0..c {
                    let ja = if da.1 == 1 { 0 } else { j };
                    let jb = if db.1 == 1 { 0 } else { j };
                    out.push(f(av[ia * da.1 + ja], bv[ib * db.1 + jb]));
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_matrix(r, c, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division; the divisor must be nonzero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax along `axis` (0: each column sums to one, 1: each row does).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        axis_check("softmax", axis)?;
        let (r, c) = self.dims("softmax", a)?;
        let out = map_lanes(self.value(a).data(), r, c, axis, |lane| {
            crate::tensor::softmax_slice(lane)
        });
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_matrix(r, c, out)?, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        axis_check("log_softmax", axis)?;
        let (r, c) = self.dims("log_softmax", a)?;
        let out = map_lanes(self.value(a).data(), r, c, axis, |lane| {
            let lse = crate::tensor::logsumexp_slice(lane);
            lane.iter().map(|x| x - lse).collect()
        });
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_matrix(r, c, out)?, Op::LogSoftmax(a, axis), rg))
    }

    /// `ln(sum(exp(.)))` along `axis`, keeping that axis with size 1.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        axis_check("logsumexp", axis)?;
        let (r, c) = self.dims("logsumexp", a)?;
        let src = self.value(a).data();
        let value = if axis == 1 {
            let out = (0..r)
                .map(|i| crate::tensor::logsumexp_slice(&src[i * c..(i + 1) * c]))
                .collect();
            Tensor::from_matrix(r, 1, out)?
        } else {
            let out = (0..c)
                .map(|j| {
                    let col: Vec<f64> = (0..r).map(|i| src[i * c + j]).collect();
                    crate::tensor::logsumexp_slice(&col)
                })
                .collect();
            Tensor::from_matrix(1, c, out)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSumExp(a, axis), rg))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims("layer_norm", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_matrix(r, c, out)?,
            Op::LayerNorm(a, rstd.into()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        axis_check("sum_axis", axis)?;
        let (r, c) = self.dims("sum_axis", a)?;
        let src = self.value(a).data();
        let value = if axis == 1 {
            let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor::from_matrix(r, 1, out)?
        } else {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
            Tensor::from_matrix(1, c, out)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows: index {bad} out of {r} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_matrix(idx.len(), c, out)?,
            Op::GatherRows(a, idx),
            rg,
        ))
    }

    /// `out[idx[r]] += a[r]` into `out_rows` zero-initialized rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, out_rows: usize) -> Result<Var> {
        let (r, c) = self.dims("scatter_add_rows", a)?;
        if idx.len() != r {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {r} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Shape(format!(
                "scatter_add_rows: index {bad} out of {out_rows} rows"
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; out_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(&src[k * c..(k + 1) * c]) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_matrix(out_rows, c, out)?,
            Op::ScatterAddRows(a, idx),
            rg,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims("slice_cols", a)?;
        if start >= end || end > c {
            return Err(Error::Shape(format!("slice_cols: {start}..{end} of {c} columns")));
        }
        let src = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_matrix(r, w, out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let r = self.dims("concat_cols", first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims("concat_cols", p)?;
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_matrix(r, total, out)?,
            Op::ConcatCols(parts.into()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(&[rows, cols])?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshape(&shape).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims("matmul", a)?;
                let n = self.dims("matmul", b)?.1;
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::from_matrix(m, k, da)?);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, b, Tensor::from_matrix(k, n, db)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims("matmul_nt", a)?;
                let n = self.dims("matmul_nt", b)?.0;
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(gd, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::from_matrix(m, k, da)?);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(gd, self.value(a).data(), &mut db, m, n, k);
                    self.accumulate(grads, b, Tensor::from_matrix(n, k, db)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let full = out.matrix_dims("add")?;
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(a) {
                    let t = self.dims("add", a)?;
                    self.accumulate(grads, a, reduce_to(gd, full, t));
                }
                if self.requires_grad(b) {
                    let t = self.dims("add", b)?;
                    let mut gb = reduce_to(gd, full, t);
                    if sign < 0.0 {
                        gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let full = out.matrix_dims("mul")?;
                let da = self.dims("mul", a)?;
                let db = self.dims("mul", b)?;
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (r, c) = full;
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for i in 0..r {
                    let ia = if da.0 == 1 { 0 } else { i };
                    let ib = if db.0 == 1 { 0 } else { i };
                    for j in 0..c {
                        let ja = if da.1 == 1 { 0 } else { j };
                        let jb = if db.1 == 1 { 0 } else { j };
                        let x = av[ia * da.1 + ja];
                        let y = bv[ib * db.1 + jb];
                        let gij = gd[i * c + j];
                        if is_div {
                            ga[i * c + j] = gij / y;
                            gb[i * c + j] = -gij * x / (y * y);
                        } else {
                            ga[i * c + j] = gij * y;
                            gb[i * c + j] = gij * x;
                        }
                    }
                }
                if self.requires_grad(a) {
                    self.accumulate(grads, a, reduce_to(&ga, full, da));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, reduce_to(&gb, full, db));
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|x| x * s).collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, a, g.clone()),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Tanh(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Ln(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, x)| gi / x)
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Square(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, x)| 2.0 * gi * x)
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, &x)| if (lo..=hi).contains(&x) { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape(), d)?);
            }
            Op::Softmax(a, axis) => {
                let (r, c) = out.matrix_dims("softmax")?;
                let y = out.data();
                let d = zip_lanes(y, gd, r, c, axis, |yl, gl| {
                    let s: f64 = yl.iter().zip(gl).map(|(y, g)| y * g).sum();
                    yl.iter().zip(gl).map(|(y, g)| y * (g - s)).collect()
                });
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::LogSoftmax(a, axis) => {
                let (r, c) = out.matrix_dims("log_softmax")?;
                let y = out.data();
                let d = zip_lanes(y, gd, r, c, axis, |yl, gl| {
                    let s: f64 = gl.iter().sum();
                    yl.iter().zip(gl).map(|(y, g)| g - y.exp() * s).collect()
                });
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::LogSumExp(a, axis) => {
                let (r, c) = self.dims("logsumexp", a)?;
                let x = self.value(a).data();
                let lse = out.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let k = if axis == 1 { i } else { j };
                        d[i * c + j] = gd[k] * (x[i * c + j] - lse[k]).exp();
                    }
                }
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::LayerNorm(a, ref rstd) => {
                let (r, c) = out.matrix_dims("layer_norm")?;
                let xhat = out.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gl = &gd[i * c..(i + 1) * c];
                    let xl = &xhat[i * c..(i + 1) * c];
                    let mg = gl.iter().sum::<f64>() / c as f64;
                    let mgx = gl.iter().zip(xl).map(|(g, x)| g * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] = rstd[i] * (gl[j] - mg - xl[j] * mgx);
                    }
                }
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::Sum(a) | Op::Mean(a) => {
                let src = self.value(a);
                let scale = if matches!(node.op, Op::Mean(_)) {
                    1.0 / src.len().max(1) as f64
                } else {
                    1.0
                };
                self.accumulate(grads, a, Tensor::full(src.shape(), gd[0] * scale));
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.dims("sum_axis", a)?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if axis == 1 { gd[i] } else { gd[j] };
                    }
                }
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::GatherRows(a, ref idx) => {
                let (r, c) = self.dims("gather_rows", a)?;
                let mut d = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *o += x;
                    }
                }
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::ScatterAddRows(a, ref idx) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    d.extend_from_slice(&gd[i * c..(i + 1) * c]);
                }
                self.accumulate(grads, a, Tensor::from_matrix(idx.len(), c, d)?);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims("slice_cols", a)?;
                let w = out.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, a, Tensor::from_matrix(r, c, d)?);
            }
            Op::ConcatCols(ref parts) => {
                let (r, total) = out.matrix_dims("concat_cols")?;
                let mut offset = 0;
                for &p in parts.iter() {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_matrix(r, w, d)?);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `f` to each lane along `axis` of an `r x c` matrix.
fn map_lanes(
    src: &[f64],
    r: usize,
    c: usize,
    axis: usize,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    if axis == 1 {
        for i in 0..r {
            out[i * c..(i + 1) * c].copy_from_slice(&f(&src[i * c..(i + 1) * c]));
        }
    } else {
        for j in 0..c {
            let lane: Vec<f64> = (0..r).map(|i| src[i * c + j]).collect();
            for (i, v) in f(&lane).into_iter().enumerate() {
                out[i * c + j] = v;
            }
        }
    }
    out
}

fn zip_lanes(
    a: &[f64],
    b: &[f64],
    r: usize,
    c: usize,
    axis: usize,
    f: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    if axis == 1 {
        for i in 0..r {
            let s = i * c..(i + 1) * c;
            out[s.clone()].copy_from_slice(&f(&a[s.clone()], &b[s]));
        }
    } else {
        for j in 0..c {
            let la: Vec<f64> = (0..r).map(|i| a[i * c + j]).collect();
            let lb: Vec<f64> = (0..r).map(|i| b[i * c + j]).collect();
            for (i, v) in f(&la, &lb).into_iter().enumerate() {
                out[i * c + j] = v;
            }
        }
    }
    out
}
