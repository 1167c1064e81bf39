//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] replays
//! the tape from the root down to index 0 and adds the resulting leaf
//! adjoints into persistent gradient buffers; calling it twice without
//! [`Graph::zero_grad`] accumulates.

use super::tensor::{dot, gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    WindowSample {
        corr: Var,
        flow: Var,
        height: usize,
        width: usize,
        radius: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    checked: bool,
    fault: Option<String>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Bilinear read of `corr[p, ·]` at continuous grid position `(sx, sy)`,
/// zero outside the grid. Returns the value, its partials in x and y, and
/// the four taps `(column, weight)`.
fn bilinear(
    corr_row: &[f64],
    height: usize,
    width: usize,
    sx: f64,
    sy: f64,
) -> (f64, f64, f64, [(Option<usize>, f64); 4]) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let at = |x: f64, y: f64| -> Option<usize> {
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            None
        } else {
            Some(y as usize * width + x as usize)
        }
    };
    let c00 = at(x0, y0);
    let c10 = at(x0 + 1.0, y0);
    let c01 = at(x0, y0 + 1.0);
    let c11 = at(x0 + 1.0, y0 + 1.0);
    let v = |c: Option<usize>| c.map_or(0.0, |q| corr_row[q]);
    let (v00, v10, v01, v11) = (v(c00), v(c10), v(c01), v(c11));
    let value = (1.0 - fx) * (1.0 - fy) * v00
        + fx * (1.0 - fy) * v10
        + (1.0 - fx) * fy * v01
        + fx * fy * v11;
    let dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let dy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    let taps = [
        (c00, (1.0 - fx) * (1.0 - fy)),
        (c10, fx * (1.0 - fy)),
        (c01, (1.0 - fx) * fy),
        (c11, fx * fy),
    ];
    (value, dx, dy, taps)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that scans every op output for NaN/Inf and reports the first
    /// offender from [`Graph::check`] and [`Graph::backward`].
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        if self.checked && self.fault.is_none() && !value.is_finite() {
            self.fault = Some(format!("node {} ({op:?})", self.nodes.len()));
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(f) => Err(Error::NonFinite(f.clone())),
            None => Ok(()),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), tracked))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = va.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::from_parts(shape, data), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c), tracked)
    }

    /// `x[m×n] + bias[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(bias) != (1, n) {
            return Err(self.dim_err("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, bias), tracked))
    }

    /// `x · w + b`, the common affine layer.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax(x), tracked)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked
    /// entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let visible = (i + 1).min(n);
            softmax_row(&mut row[..visible]);
            for v in &mut row[visible..] {
                *v = 0.0;
            }
        }
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax(x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(shape, data), Op::Tanh(x), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044_715 * v * v * v)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(shape, data), Op::Gelu(x), tracked)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1×n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(self.dim_err("layer_norm", x, gamma));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(self.dim_err("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).1 != n {
                return Err(self.dim_err("concat_rows", parts[0], p));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n || len == 0 {
            return Err(Error::Index {
                what: "column slice",
                index: start + len,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start },
            tracked,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > m || len == 0 {
            return Err(Error::Index {
                what: "row slice",
                index: start + len,
                bound: m,
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows { x, start },
            tracked,
        ))
    }

    /// Column means: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), tracked)
    }

    /// Sum of all entries as a `[1×1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    what: "embedding row",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), n], out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// `-Σ_t weights[t] · log softmax(logits[t])[targets[t]]` as a scalar.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (t, m) = self.shape(logits);
        if targets.len() != t || weights.len() != t {
            return Err(Error::Dimension {
                op: "weighted_cross_entropy",
                left: vec![t, m],
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= m) {
            return Err(Error::Index {
                what: "target class",
                index: bad,
                bound: m,
            });
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::input("cross-entropy weights must be finite and non-negative"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(m).enumerate() {
            softmax_row(row);
            if weights[i] != 0.0 {
                // log p computed from the shifted logits keeps precision for tiny p.
                let src = &self.nodes[logits.0].value.data()[i * m..(i + 1) * m];
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss -= weights[i] * (src[targets[i]] - lse);
            }
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Samples a `(2r+1)²` correlation window per source cell.
    ///
    /// `corr` is `[P×P]` over a `height × width` grid (cells row-major),
    /// `flow` is `[P×2]` holding `(dx, dy)` per source cell. Output row `p`
    /// holds bilinear reads of `corr[p, ·]` at `cell(p) + flow[p] + (ox, oy)`
    /// for `oy, ox ∈ -r..=r` (oy major), zero outside the grid.
    pub fn window_sample(
        &mut self,
        corr: Var,
        flow: Var,
        height: usize,
        width: usize,
        radius: usize,
    ) -> Result<Var> {
        let p = height * width;
        if self.shape(corr) != (p, p) || self.shape(flow) != (p, 2) {
            return Err(self.dim_err("window_sample", corr, flow));
        }
        let side = 2 * radius + 1;
        let taps = side * side;
        let c = self.value(corr).data();
        let f = self.value(flow).data();
        let mut out = vec![0.0; p * taps];
        let r = radius as f64;
        for src in 0..p {
            let (px, py) = ((src % width) as f64, (src / width) as f64);
            let row = &c[src * p..(src + 1) * p];
            for oy in 0..side {
                for ox in 0..side {
                    let sx = px + f[src * 2] + ox as f64 - r;
                    let sy = py + f[src * 2 + 1] + oy as f64 - r;
                    out[src * taps + oy * side + ox] = bilinear(row, height, width, sx, sy).0;
                }
            }
        }
        let tracked = self.tracked(corr) || self.tracked(flow);
        Ok(self.push(
            Tensor::from_parts(vec![p, taps], out),
            Op::WindowSample {
                corr,
                flow,
                height,
                width,
                radius,
            },
            tracked,
        ))
    }

    /// Runs reverse-mode accumulation from the scalar `root` and adds leaf
    /// adjoints into the graph's gradient buffers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check()?;
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                match self.grads_slot(i) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(Tensor::from_parts(shape, g)),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn grads_slot(&mut self, i: usize) -> &mut Option<Tensor> {
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        &mut self.grads[i]
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| dims(&nodes[v.0].value);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = shp(a);
                let n = shp(b).1;
                acc(a, &mut |da| gemm_nt_acc(g, val(b), m, n, k, da));
                acc(b, &mut |db| gemm_tn_acc(val(a), g, m, k, n, db));
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = shp(a);
                let n = shp(b).0;
                acc(a, &mut |da| gemm_acc(g, val(b), m, n, k, da));
                acc(b, &mut |db| gemm_tn_acc(g, val(a), m, n, k, db));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            &Op::Scale(a, c) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            &Op::AddRow(x, b) => {
                let n = shp(b).1;
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Softmax(x) => {
                let n = shp(x).1;
                acc(x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            &Op::Tanh(x) => {
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = val(x);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        let v = xv[j];
                        let t = (GELU_C * (v + 0.044_715 * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * v * v);
                        d[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = shp(*x);
                let gm = val(*gamma);
                acc(*gamma, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |d| {
                    let nf = n as f64;
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gm[j];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gm[j];
                            d[i * n + j] +=
                                inv_std[i] / nf * (nf * dh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let (m, w) = shp(p);
                    acc(p, &mut |d| {
                        for r in 0..m {
                            for j in 0..w {
                                d[r * w + j] += g[r * n + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |d| {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(x, y)| *x += y)
                    });
                    off += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = shp(x);
                let w = nodes[i].value.cols();
                acc(x, &mut |d| {
                    for r in 0..m {
                        for j in 0..w {
                            d[r * n + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            &Op::SliceRows { x, start } => {
                let n = shp(x).1;
                acc(x, &mut |d| {
                    d[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y)
                });
            }
            &Op::MeanRows(x) => {
                let (m, n) = shp(x);
                acc(x, &mut |d| {
                    for row in d.chunks_mut(n) {
                        for j in 0..n {
                            row[j] += g[j] / m as f64;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::GatherRows { table, idx } => {
                let n = shp(*table).1;
                acc(*table, &mut |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[src * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::WeightedCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let m = shp(*logits).1;
                acc(*logits, &mut |d| {
                    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[t * m + j] += g[0] * w * (probs[t * m + j] - onehot);
                        }
                    }
                });
            }
            &Op::WindowSample {
                corr,
                flow,
                height,
                width,
                radius,
            } => {
                let p = height * width;
                let side = 2 * radius + 1;
                let taps = side * side;
                let c = val(corr);
                let f = val(flow);
                let r = radius as f64;
                let mut dcorr = vec![0.0; p * p];
                let mut dflow = vec![0.0; p * 2];
                for src in 0..p {
                    let (px, py) = ((src % width) as f64, (src / width) as f64);
                    let row = &c[src * p..(src + 1) * p];
                    for oy in 0..side {
                        for ox in 0..side {
                            let go = g[src * taps + oy * side + ox];
                            if go == 0.0 {
                                continue;
                            }
                            let sx = px + f[src * 2] + ox as f64 - r;
                            let sy = py + f[src * 2 + 1] + oy as f64 - r;
                            let (_, ddx, ddy, tp) = bilinear(row, height, width, sx, sy);
                            for (col, w) in tp {
                                if let Some(q) = col {
                                    dcorr[src * p + q] += go * w;
                                }
                            }
                            dflow[src * 2] += go * ddx;
                            dflow[src * 2 + 1] += go * ddy;
                        }
                    }
                }
                acc(corr, &mut |d| d.iter_mut().zip(&dcorr).for_each(|(x, y)| *x += y));
                acc(flow, &mut |d| d.iter_mut().zip(&dflow).for_each(|(x, y)| *x += y));
            }
        }
    }
}
