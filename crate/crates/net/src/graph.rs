//! Reverse-mode automatic differentiation over a tape of [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes that do
//! not depend on a differentiable leaf are never visited on the way back.

use num_complex::Complex64;
use rsfr_core::kspace::{fft2c, ifft2c};

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marks an out-of-bounds source in a gather map; the output is zero there.
pub const PAD: usize = usize::MAX;

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Silu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Softplus,
    Relu,
    Exp,
}

impl Act {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Act::Silu => x * sigmoid(x),
            Act::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Act::Sigmoid => sigmoid(x),
            Act::Softplus => softplus(x),
            Act::Relu => x.max(0.0),
            Act::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Act::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Act::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Act::Sigmoid => y * (1.0 - y),
            Act::Softplus => sigmoid(x),
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Exp => y,
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, b: Var },
    MulRow { x: Var, s: Var },
    Act(Var, Act),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    InstanceNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Gather { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    SumAll(Var),
    DwConv3 { x: Var, k: Var, b: Var, h: usize, w: usize },
    AvgPool { x: Var, h: usize, w: usize, f: usize },
    Scan(Box<ScanSaved>),
    Charbonnier { a: Var, b: Var },
    KCharbonnier { a: Var, b: Var, h: usize, w: usize },
    L1Mean { a: Var, b: Var },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct ScanSaved {
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d: Var,
    /// hidden states `(L, D, N)`
    states: Vec<f64>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// `(parameter index, gradient)` for every parameter leaf that received
    /// a gradient. A parameter used twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(node, pid)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Differentiable leaf tagged with a parameter index.
    pub fn param(&mut self, index: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = if ta { (av.cols, av.rows) } else { (av.rows, av.cols) };
        let (k2, n) = if tb { (bv.cols, bv.rows) } else { (bv.rows, bv.cols) };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &av.data, ta, &bv.data, tb, &mut out.data, 0.0);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `x w + b` with `x: (M, K)`, `w: (K, N)`, `b: (1, N)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (&self.values[x.0], &self.values[w.0]);
        assert_eq!(xv.cols, wv.rows, "linear: input has {} features, weight expects {}", xv.cols, wv.rows);
        let (m, k, n) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(m, n);
        if let Some(b) = b {
            let bv = &self.values[b.0];
            assert_eq!(bv.data.len(), n);
            for r in 0..m {
                out.data[r * n..(r + 1) * n].copy_from_slice(&bv.data);
            }
        }
        gemm(m, k, n, &xv.data, false, &wv.data, false, &mut out.data, 1.0);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::new(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Adds a `(1, N)` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.values[x.0], &self.values[b.0]);
        assert_eq!(bv.data.len(), xv.cols);
        let mut out = xv.clone();
        for row in out.data.chunks_mut(xv.cols) {
            for (o, bb) in row.iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddRow { x, b }, ng)
    }

    /// Multiplies every row of `x` by a `(1, N)` row.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (&self.values[x.0], &self.values[s.0]);
        assert_eq!(sv.data.len(), xv.cols);
        let mut out = xv.clone();
        for row in out.data.chunks_mut(xv.cols) {
            for (o, ss) in row.iter_mut().zip(&sv.data) {
                *o *= ss;
            }
        }
        let ng = self.ng(&[x, s]);
        self.push(out, Op::MulRow { x, s }, ng)
    }

    pub fn act(&mut self, x: Var, act: Act) -> Var {
        let out = self.values[x.0].map(|v| act.apply(v));
        let ng = self.ng(&[x]);
        self.push(out, Op::Act(x, act), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.act(x, Act::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.act(x, Act::Gelu)
    }

    /// Normalises each row over its columns, then applies `g` and `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let (rows, cols) = xv.shape();
        let (gv, bv) = (&self.values[g.0], &self.values[b.0]);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * gv.data[c] + bv.data[c];
            }
        }
        let ng = self.ng(&[x, g, b]);
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd }, ng)
    }

    /// Normalises each column over its rows (per-channel statistics over
    /// all spatial positions), without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let (rows, cols) = xv.shape();
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        for r in 0..rows {
            for c in 0..cols {
                var[c] += (xv.at(r, c) - mean[c]).powi(2);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / rows as f64 + NORM_EPS).sqrt()).collect();
        let xhat = Tensor::from_fn(rows, cols, |r, c| (xv.at(r, c) - mean[c]) * rstd[c]);
        let ng = self.ng(&[x]);
        let data = xhat.data.clone();
        self.push(xhat, Op::InstanceNorm { x, xhat: data, rstd }, ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let mut out = xv.clone();
        for row in out.data.chunks_mut(xv.cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// `out.data[i] = x.data[idx[i]]`, zero where `idx[i] == PAD`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols);
        let xv = &self.values[x.0];
        let data = idx.iter().map(|&i| if i == PAD { 0.0 } else { xv.data[i] }).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(rows, cols, data), Op::Gather { x, idx }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.values[parts[0].0].rows;
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = &self.values[p.0];
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.values[x.0];
        assert!(start + len <= xv.cols);
        let out = Tensor::from_fn(xv.rows, len, |r, c| xv.at(r, start + c));
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Column means as a `(1, C)` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let mut out = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / xv.rows as f64);
        let ng = self.ng(&[x]);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Depth-wise 3x3 convolution with zero padding on an `(h*w, C)` map;
    /// `k` is `(9, C)` in raster tap order, `b` is `(1, C)`.
    pub fn dwconv3(&mut self, x: Var, k: Var, b: Var, h: usize, w: usize) -> Var {
        let (xv, kv, bv) = (&self.values[x.0], &self.values[k.0], &self.values[b.0]);
        let c = xv.cols;
        assert_eq!(xv.rows, h * w);
        assert_eq!(kv.shape(), (9, c));
        let mut out = Tensor::zeros(h * w, c);
        for i in 0..h {
            for j in 0..w {
                let o = &mut out.data[(i * w + j) * c..(i * w + j + 1) * c];
                o.copy_from_slice(&bv.data);
                for (tap, (di, dj)) in TAPS.iter().enumerate() {
                    let (si, sj) = (i as isize + di, j as isize + dj);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    let src = xv.row(si as usize * w + sj as usize);
                    let kk = kv.row(tap);
                    for ch in 0..c {
                        o[ch] += kk[ch] * src[ch];
                    }
                }
            }
        }
        let ng = self.ng(&[x, k, b]);
        self.push(out, Op::DwConv3 { x, k, b, h, w }, ng)
    }

    /// Non-overlapping `f x f` average pooling on an `(h*w, C)` map.
    pub fn avg_pool(&mut self, x: Var, h: usize, w: usize, f: usize) -> Var {
        let xv = &self.values[x.0];
        assert!(h % f == 0 && w % f == 0, "pool factor {f} does not divide {h}x{w}");
        let (oh, ow, c) = (h / f, w / f, xv.cols);
        let mut out = Tensor::zeros(oh * ow, c);
        let inv = 1.0 / (f * f) as f64;
        for i in 0..h {
            for j in 0..w {
                let dst = (i / f) * ow + j / f;
                for ch in 0..c {
                    out.data[dst * c + ch] += xv.data[(i * w + j) * c + ch] * inv;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::AvgPool { x, h, w, f }, ng)
    }

    /// Selective scan along the row order of `u`.
    ///
    /// `u`, `delta`: `(L, D)` with `delta > 0`; `a_log`: `(D, N)`; `b`, `c`:
    /// `(L, N)`; `d`: `(1, D)`. With `A = -exp(a_log)` the recurrence is
    /// `h_t = exp(delta_t A) h_{t-1} + delta_t b_t u_t` and
    /// `y_t = c_t . h_t + d u_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Var {
        let (uv, dv, av, bv, cv, skip) = (
            &self.values[u.0],
            &self.values[delta.0],
            &self.values[a_log.0],
            &self.values[b.0],
            &self.values[c.0],
            &self.values[d.0],
        );
        let (l, dd) = uv.shape();
        let n = av.cols;
        assert_eq!(dv.shape(), (l, dd));
        assert_eq!(av.rows, dd);
        assert_eq!(bv.shape(), (l, n));
        assert_eq!(cv.shape(), (l, n));
        assert_eq!(skip.data.len(), dd);
        let a: Vec<f64> = av.data.iter().map(|v| -v.exp()).collect();
        let mut states = vec![0.0; l * dd * n];
        let mut out = Tensor::zeros(l, dd);
        let mut h = vec![0.0; dd * n];
        for t in 0..l {
            let (ut, dt, bt, ct) = (uv.row(t), dv.row(t), bv.row(t), cv.row(t));
            for ch in 0..dd {
                let du = dt[ch] * ut[ch];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let ar = &a[ch * n..(ch + 1) * n];
                let mut y = skip.data[ch] * ut[ch];
                for s in 0..n {
                    hs[s] = (dt[ch] * ar[s]).exp() * hs[s] + du * bt[s];
                    y += ct[s] * hs[s];
                }
                out.data[t * dd + ch] = y;
            }
            states[t * dd * n..(t + 1) * dd * n].copy_from_slice(&h);
        }
        let ng = self.ng(&[u, delta, a_log, b, c, d]);
        let saved = ScanSaved {
            u,
            delta,
            a_log,
            b,
            c,
            d,
            states,
        };
        self.push(out, Op::Scan(Box::new(saved)), ng)
    }

    /// `sqrt(||a - b||^2 + eps^2)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let s: f64 = self.zip_with(a, b, |x, y| (x - y) * (x - y)).sum();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar((s + eps * eps).sqrt()), Op::Charbonnier { a, b }, ng)
    }

    /// Charbonnier distance between the centred orthonormal 2D Fourier
    /// transforms of two `(h*w, 1)` images.
    pub fn kspace_charbonnier(&mut self, a: Var, b: Var, eps: f64, h: usize, w: usize) -> Var {
        let diff = self.zip_with(a, b, |x, y| x - y);
        assert_eq!(diff.len(), h * w);
        let k = fft2c(&to_complex_grid(&diff.data, h, w));
        let s: f64 = k.iter().map(|z| z.norm_sqr()).sum();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar((s + eps * eps).sqrt()), Op::KCharbonnier { a, b, h, w }, ng)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.zip_with(a, b, |x, y| (x - y).abs());
        let v = d.sum() / d.len() as f64;
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar(v), Op::L1Mean { a, b }, ng)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(t, w)| w * self.values[t.0].item()).sum();
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&deps);
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.values[out.0].len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for i in (0..=out.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let g = match &self.ops[i] {
                Op::Leaf => continue,
                Op::Param(pid) => {
                    params.push((i, *pid));
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_op(i, &g, &mut grads);
        }
        params.reverse();
        Gradients { grads, params }
    }

    fn want(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn backward_op(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let (m, n) = out.shape();
                let k = if *ta { av.rows } else { av.cols };
                if self.want(*a) {
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    if !ta {
                        // G B'^T
                        gemm(m, n, k, &g.data, false, &bv.data, !tb, &mut ga.data, 0.0);
                    } else {
                        // B' G^T
                        gemm(k, n, m, &bv.data, *tb, &g.data, true, &mut ga.data, 0.0);
                    }
                    accumulate(grads, *a, ga);
                }
                if self.want(*b) {
                    let mut gb = Tensor::zeros(bv.rows, bv.cols);
                    if !tb {
                        // A'^T G
                        gemm(k, m, n, &av.data, !ta, &g.data, false, &mut gb.data, 0.0);
                    } else {
                        // G^T A'
                        gemm(n, m, k, &g.data, true, &av.data, *ta, &mut gb.data, 0.0);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.values[x.0], &self.values[w.0]);
                let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                if self.want(*x) {
                    let mut gx = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &wv.data, true, &mut gx.data, 0.0);
                    accumulate(grads, *x, gx);
                }
                if self.want(*w) {
                    let mut gw = Tensor::zeros(k, n);
                    gemm(k, m, n, &xv.data, true, &g.data, false, &mut gw.data, 0.0);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.want(*b) {
                        accumulate(grads, *b, col_sums(g));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.want(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                if self.want(*a) {
                    accumulate(grads, *a, elementwise(g, bv, |x, y| x * y));
                }
                if self.want(*b) {
                    accumulate(grads, *b, elementwise(g, av, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddRow { x, b } => {
                if self.want(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.want(*b) {
                    accumulate(grads, *b, col_sums(g));
                }
            }
            Op::MulRow { x, s } => {
                let (xv, sv) = (&self.values[x.0], &self.values[s.0]);
                let cols = xv.cols;
                if self.want(*x) {
                    let mut gx = g.clone();
                    for row in gx.data.chunks_mut(cols) {
                        for (o, ss) in row.iter_mut().zip(&sv.data) {
                            *o *= ss;
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.want(*s) {
                    let mut gs = Tensor::zeros(sv.rows, sv.cols);
                    for (gr, xr) in g.data.chunks(cols).zip(xv.data.chunks(cols)) {
                        for c in 0..cols {
                            gs.data[c] += gr[c] * xr[c];
                        }
                    }
                    accumulate(grads, *s, gs);
                }
            }
            Op::Act(x, act) => {
                let xv = &self.values[x.0];
                let data = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .zip(&out.data)
                    .map(|((gg, xx), yy)| gg * act.derivative(*xx, *yy))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.rows, xv.cols, data));
            }
            Op::LayerNorm { x, g: gamma, b, xhat, rstd } => {
                let (rows, cols) = out.shape();
                let gv = &self.values[gamma.0];
                if self.want(*gamma) {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.data[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.want(*b) {
                    accumulate(grads, *b, col_sums(g));
                }
                if self.want(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut gh = vec![0.0; cols];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            gh[c] = g.data[r * cols + c] * gv.data[c];
                            m1 += gh[c];
                            m2 += gh[c] * xhat[r * cols + c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] = rstd[r] * (gh[c] - m1 - xhat[r * cols + c] * m2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                let (rows, cols) = out.shape();
                let mut m1 = vec![0.0; cols];
                let mut m2 = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gg = g.data[r * cols + c];
                        m1[c] += gg;
                        m2[c] += gg * xhat[r * cols + c];
                    }
                }
                let gx = Tensor::from_fn(rows, cols, |r, c| {
                    rstd[c] * (g.data[r * cols + c] - m1[c] / rows as f64 - xhat[r * cols + c] * m2[c] / rows as f64)
                });
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let cols = out.cols;
                let mut gx = Tensor::zeros(out.rows, cols);
                for r in 0..out.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx.data[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let xv = &self.values[x.0];
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for (o, &src) in idx.iter().enumerate() {
                    if src != PAD {
                        gx.data[src] += g.data[o];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = out.shape();
                let mut off = 0;
                for p in parts {
                    let pc = self.values[p.0].cols;
                    if self.want(*p) {
                        let gp = Tensor::from_fn(rows, pc, |r, c| g.data[r * cols + off + c]);
                        accumulate(grads, *p, gp);
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = &self.values[x.0];
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    for c in 0..out.cols {
                        gx.data[r * xv.cols + start + c] = g.data[r * out.cols + c];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let xv = &self.values[x.0];
                let inv = 1.0 / xv.rows as f64;
                let gx = Tensor::from_fn(xv.rows, xv.cols, |_, c| g.data[c] * inv);
                accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let xv = &self.values[x.0];
                accumulate(grads, *x, Tensor::full(xv.rows, xv.cols, g.item()));
            }
            Op::DwConv3 { x, k, b, h, w } => self.backward_dwconv(*x, *k, *b, *h, *w, g, grads),
            Op::AvgPool { x, h, w, f } => {
                let xv = &self.values[x.0];
                let (ow, c) = (w / f, xv.cols);
                let inv = 1.0 / (f * f) as f64;
                let mut gx = Tensor::zeros(xv.rows, c);
                for i in 0..*h {
                    for j in 0..*w {
                        let src = (i / f) * ow + j / f;
                        for ch in 0..c {
                            gx.data[(i * w + j) * c + ch] = g.data[src * c + ch] * inv;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Scan(saved) => self.backward_scan(saved, g, grads),
            Op::Charbonnier { a, b } => {
                let l = out.item();
                let s = g.item() / l;
                let diff = self.zip_with(*a, *b, |x, y| (x - y) * s);
                if self.want(*b) {
                    accumulate(grads, *b, diff.map(|v| -v));
                }
                if self.want(*a) {
                    accumulate(grads, *a, diff);
                }
            }
            Op::KCharbonnier { a, b, h, w } => {
                let l = out.item();
                let diff = self.zip_with(*a, *b, |x, y| x - y);
                // d/dd ||F d||^2 = 2 Re(F^H F d)
                let back = ifft2c(&fft2c(&to_complex_grid(&diff.data, *h, *w)));
                let s = g.item() / l;
                let ga = Tensor::new(diff.rows, diff.cols, back.iter().map(|z| z.re * s).collect());
                if self.want(*b) {
                    accumulate(grads, *b, ga.map(|v| -v));
                }
                if self.want(*a) {
                    accumulate(grads, *a, ga);
                }
            }
            Op::L1Mean { a, b } => {
                let len = self.values[a.0].len() as f64;
                let s = g.item() / len;
                let ga = self.zip_with(*a, *b, |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                if self.want(*b) {
                    accumulate(grads, *b, ga.map(|v| -v));
                }
                if self.want(*a) {
                    accumulate(grads, *a, ga);
                }
            }
            Op::WeightedSum(terms) => {
                for (t, wt) in terms {
                    if self.want(*t) {
                        accumulate(grads, *t, Tensor::scalar(g.item() * wt));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_dwconv(&self, x: Var, k: Var, b: Var, h: usize, w: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, kv) = (&self.values[x.0], &self.values[k.0]);
        let c = xv.cols;
        let mut gx = Tensor::zeros(h * w, c);
        let mut gk = Tensor::zeros(9, c);
        for i in 0..h {
            for j in 0..w {
                let go = g.row(i * w + j);
                for (tap, (di, dj)) in TAPS.iter().enumerate() {
                    let (si, sj) = (i as isize + di, j as isize + dj);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    let s = si as usize * w + sj as usize;
                    for ch in 0..c {
                        gx.data[s * c + ch] += go[ch] * kv.data[tap * c + ch];
                        gk.data[tap * c + ch] += go[ch] * xv.data[s * c + ch];
                    }
                }
            }
        }
        if self.want(x) {
            accumulate(grads, x, gx);
        }
        if self.want(k) {
            accumulate(grads, k, gk);
        }
        if self.want(b) {
            accumulate(grads, b, col_sums(g));
        }
    }

    fn backward_scan(&self, s: &ScanSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (uv, dv, av, bv, cv, skip) = (
            &self.values[s.u.0],
            &self.values[s.delta.0],
            &self.values[s.a_log.0],
            &self.values[s.b.0],
            &self.values[s.c.0],
            &self.values[s.d.0],
        );
        let (l, dd) = uv.shape();
        let n = av.cols;
        let a: Vec<f64> = av.data.iter().map(|v| -v.exp()).collect();
        let mut gu = Tensor::zeros(l, dd);
        let mut gdelta = Tensor::zeros(l, dd);
        let mut ga = vec![0.0; dd * n];
        let mut gb = Tensor::zeros(l, n);
        let mut gc = Tensor::zeros(l, n);
        let mut gskip = Tensor::zeros(1, dd);
        // gradient flowing into h_t from later steps
        let mut gh = vec![0.0; dd * n];
        for t in (0..l).rev() {
            let (ut, dt, bt, ct) = (uv.row(t), dv.row(t), bv.row(t), cv.row(t));
            let gy = g.row(t);
            let h_t = &s.states[t * dd * n..(t + 1) * dd * n];
            for ch in 0..dd {
                let gyc = gy[ch];
                gskip.data[ch] += gyc * ut[ch];
                let mut gu_c = gyc * skip.data[ch];
                let mut gd_c = 0.0;
                for st in 0..n {
                    let idx = ch * n + st;
                    gc.data[t * n + st] += gyc * h_t[idx];
                    let ght = gh[idx] + gyc * ct[st];
                    let h_prev = if t > 0 { s.states[(t - 1) * dd * n + idx] } else { 0.0 };
                    let decay = (dt[ch] * a[idx]).exp();
                    let g_decay = ght * h_prev * decay;
                    gd_c += g_decay * a[idx] + ght * bt[st] * ut[ch];
                    ga[idx] += g_decay * dt[ch];
                    gb.data[t * n + st] += ght * dt[ch] * ut[ch];
                    gu_c += ght * dt[ch] * bt[st];
                    gh[idx] = ght * decay;
                }
                gu.data[t * dd + ch] += gu_c;
                gdelta.data[t * dd + ch] += gd_c;
            }
        }
        if self.want(s.u) {
            accumulate(grads, s.u, gu);
        }
        if self.want(s.delta) {
            accumulate(grads, s.delta, gdelta);
        }
        if self.want(s.a_log) {
            // dA/da_log = A
            let g_alog = Tensor::new(dd, n, ga.iter().zip(&a).map(|(x, y)| x * y).collect());
            accumulate(grads, s.a_log, g_alog);
        }
        if self.want(s.b) {
            accumulate(grads, s.b, gb);
        }
        if self.want(s.c) {
            accumulate(grads, s.c, gc);
        }
        if self.want(s.d) {
            accumulate(grads, s.d, gskip);
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for row in g.data.chunks(g.cols) {
        for (o, v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
}

fn to_complex_grid(data: &[f64], h: usize, w: usize) -> ndarray::Array2<Complex64> {
    ndarray::Array2::from_shape_fn((h, w), |(r, c)| Complex64::new(data[r * w + c], 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn assert_ok(report: GradCheck) {
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn matmul_all_transposes() {
        let mut r = rng();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = Tensor::uniform(if ta { 4 } else { 3 }, if ta { 3 } else { 4 }, 1.0, &mut r);
            let b = Tensor::uniform(if tb { 5 } else { 4 }, if tb { 4 } else { 5 }, 1.0, &mut r);
            let proj = Tensor::uniform(3, 5, 1.0, &mut r);
            assert_ok(check_gradients(&[a, b], 1e-6, |g, v| {
                let m = g.matmul(v[0], v[1], ta, tb);
                let p = g.constant(proj.clone());
                let prod = g.mul(m, p);
                g.sum_all(prod)
            }));
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut r = rng();
        let x = Tensor::uniform(6, 5, 1.5, &mut r);
        let w = Tensor::uniform(5, 4, 1.0, &mut r);
        let b = Tensor::uniform(1, 4, 1.0, &mut r);
        let gamma = Tensor::uniform(1, 4, 1.0, &mut r);
        let beta = Tensor::uniform(1, 4, 1.0, &mut r);
        let proj = Tensor::uniform(6, 4, 1.0, &mut r);
        for act in [Act::Silu, Act::Gelu, Act::Sigmoid, Act::Softplus, Act::Exp] {
            assert_ok(check_gradients(
                &[x.clone(), w.clone(), b.clone(), gamma.clone(), beta.clone()],
                1e-6,
                |g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2]));
                    let y = g.layer_norm(y, v[3], v[4]);
                    let y = g.act(y, act);
                    let z = g.instance_norm(y);
                    let s = g.softmax(z);
                    let m = g.mean_rows(s);
                    let y = g.mul_row(y, m);
                    let y = g.add_row(y, v[2]);
                    let p = g.constant(proj.clone());
                    let prod = g.mul(y, p);
                    g.sum_all(prod)
                },
            ));
        }
    }

    #[test]
    fn spatial_ops() {
        let mut r = rng();
        let (h, w, c) = (4, 6, 3);
        let x = Tensor::uniform(h * w, c, 1.0, &mut r);
        let k = Tensor::uniform(9, c, 1.0, &mut r);
        let b = Tensor::uniform(1, c, 1.0, &mut r);
        let proj = Tensor::uniform(h * w / 4, 2 * c + 1, 1.0, &mut r);
        assert_ok(check_gradients(&[x, k, b], 1e-6, |g, v| {
            let y = g.dwconv3(v[0], v[1], v[2], h, w);
            let p = g.avg_pool(y, h, w, 2);
            let q = g.slice_cols(p, 1, 1);
            let cat = g.concat_cols(&[p, q, p]);
            let proj = g.constant(proj.clone());
            let prod = g.mul(cat, proj);
            g.sum_all(prod)
        }));
    }

    #[test]
    fn gather_with_padding() {
        let mut r = rng();
        let x = Tensor::uniform(3, 2, 1.0, &mut r);
        let proj = Tensor::uniform(2, 4, 1.0, &mut r);
        assert_ok(check_gradients(&[x], 1e-6, |g, v| {
            let y = g.gather(v[0], vec![5, PAD, 0, 0, 3, 1, PAD, 2], 2, 4);
            let p = g.constant(proj.clone());
            let prod = g.mul(y, p);
            g.sum_all(prod)
        }));
    }

    #[test]
    fn losses() {
        let mut r = rng();
        let (h, w) = (4, 6);
        let a = Tensor::uniform(h * w, 1, 1.0, &mut r);
        let b = Tensor::uniform(h * w, 1, 1.0, &mut r);
        assert_ok(check_gradients(&[a, b], 1e-6, |g, v| {
            let li = g.charbonnier(v[0], v[1], 1e-9);
            let lk = g.kspace_charbonnier(v[0], v[1], 1e-9, h, w);
            let lp = g.l1_mean(v[0], v[1]);
            g.weighted_sum(&[(li, 1.0), (lk, 0.5), (lp, 0.25)])
        }));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let m = g.mul(a, b);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }
}
