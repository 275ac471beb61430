//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every primitive appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints into the leaves that
//! were registered with [`Tape::leaf`]. A tape is a single-threaded unit of
//! work; independent tapes can run on independent threads.

use std::f64::consts::PI;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mse(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves, indexed by the leaf's [`Var`].
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

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const GELU_C: f64 = 0.044715;

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forgets every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize), NumericsError> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul_nt inner dimensions differ: {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, c) = self.dims(x)?;
        let vr = self.value(row);
        if vr.len() != c {
            return Err(shape_err(format!("add_row: row of {} for {c} columns", vr.len())));
        }
        let bias = vr.data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Element-wise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.shape() != mask.shape() {
            return Err(shape_err(format!("mul_const: {:?} vs {:?}", vx.shape(), mask.shape())));
        }
        let data = vx.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MulConst(x, mask), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|a| a * s).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).transpose()?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.value(x).shape().to_vec();
        debug_assert_eq!(out.len(), r * c);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(x), ng))
    }

    /// Standardises each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let (r, d) = self.dims(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(format!("layer_norm: affine params must have length {d}")));
        }
        if !(eps > 0.0) {
            return Err(NumericsError::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = (2.0 / PI).sqrt();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (k * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > c {
            return Err(shape_err(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, ng))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > r {
            return Err(shape_err(format!("slice_rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }, ng))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols of nothing".into()))?;
        let (r, _) = self.dims(*first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = self.dims(*p)?;
            if pr != r {
                return Err(shape_err(format!("concat_cols: {pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Concatenation along the leading axis. Matrices stack vertically;
    /// scalars and vectors are joined into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let matrix = self.value(*first).shape().len() == 2;
        let mut data = Vec::new();
        let mut rows = 0;
        let cols = if matrix { self.value(*first).shape()[1] } else { 0 };
        for p in parts {
            let v = self.value(*p);
            match (matrix, v.shape()) {
                (true, [r, c]) if *c == cols => rows += r,
                (false, s) if s.len() <= 1 => rows += v.len(),
                (_, s) => return Err(shape_err(format!("concat: incompatible part {s:?}"))),
            }
            data.extend_from_slice(v.data());
        }
        let shape = if matrix { vec![rows, cols] } else { vec![rows] };
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean squared error against a fixed target of the same length.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, NumericsError> {
        let vp = self.value(pred);
        if vp.len() != target.len() || vp.is_empty() {
            return Err(shape_err(format!("mse: {} predictions vs {} targets", vp.len(), target.len())));
        }
        let n = vp.len() as f64;
        let loss = vp.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let ng = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target.clone()), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.shape().len() > 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads: leaves });
        }
        adj[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut adj)?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, g: Tensor, adj: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(adj, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (n, _) = self.dims(*b)?;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), false, &mut da, false);
                    self.accumulate(adj, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, self.value(*a).data(), false, &mut db, false);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, gd.to_vec());
                self.accumulate(adj, *b, gd.to_vec());
            }
            Op::AddRow(x, row) => {
                self.accumulate(adj, *x, gd.to_vec());
                if self.nodes[row.0].needs_grad {
                    let c = self.value(*row).len();
                    let mut dr = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(adj, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    self.accumulate(adj, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(adj, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::MulConst(x, mask) => {
                self.accumulate(adj, *x, gd.iter().zip(mask.data()).map(|(g, m)| g * m).collect());
            }
            Op::Scale(x, s) => {
                self.accumulate(adj, *x, gd.iter().map(|g| g * s).collect());
            }
            Op::Transpose(x) => {
                let t = g.transpose()?;
                self.accumulate(adj, *x, t.into_data());
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.dims2()?.1;
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; xhat.len()];
                    for (i, rs) in rstd.iter().enumerate() {
                        let gr = &gd[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[i * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(adj, *x, dx);
                }
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(adj, *gamma, dg);
                    self.accumulate(adj, *beta, db);
                }
            }
            Op::Gelu(x) => {
                let k = (2.0 / PI).sqrt();
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| {
                        let t = (k * (v + GELU_C * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                self.accumulate(adj, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&v, g)| if v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(adj, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x)?;
                let w = node.value.dims2()?.1;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(adj, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims(*x)?;
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let w = self.dims(*p)?.1;
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(adj, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(adj, *p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(adj, *x, vec![gd[0]; n]);
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let dx = p.iter().zip(target.data()).map(|(a, b)| gd[0] * 2.0 * (a - b) / n).collect();
                self.accumulate(adj, *pred, dx);
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape().to_vec(), delta).expect("adjoint shape matches value"));
            }
        }
    }
}
