//! Selective state-space branch, visual state-space block, and the residual
//! block built from two of them.

use crate::graph::{Act, Graph, Var};
use crate::layers::{DwConv, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::scan::{expand_var, merge_vars, N_SCANS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VssDims {
    /// model channels
    pub dim: usize,
    /// inner channels of the state-space path
    pub inner: usize,
    pub state: usize,
    pub dt_rank: usize,
}

impl VssDims {
    pub fn new(dim: usize, expand: usize, state: usize) -> Self {
        Self {
            dim,
            inner: dim * expand,
            state,
            dt_rank: dim.div_ceil(16),
        }
    }
}

/// One scan direction: input-dependent step size, input and output
/// matrices, diagonal state matrix and skip term.
#[derive(Debug, Clone)]
pub struct S6Branch {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub dims: VssDims,
}

impl S6Branch {
    pub fn new(init: &mut Init<'_>, name: &str, dims: VssDims) -> Self {
        init.scope(name, |i| {
            let x_proj = Linear::new(i, "x_proj", dims.inner, dims.dt_rank + 2 * dims.state, false);
            let dt_proj = Linear::with_bound(i, "dt_proj", dims.dt_rank, dims.inner, false, (dims.dt_rank as f64).powf(-0.5));
            // step sizes log-uniform in [1e-3, 1e-1], stored through the
            // inverse softplus
            let mut bias = Tensor::zeros(1, dims.inner);
            for v in &mut bias.data {
                let dt = i.gen_range(1e-3f64.ln(), 1e-1f64.ln()).exp().max(1e-4);
                *v = dt + (-(-dt).exp_m1()).ln();
            }
            let dt_bias = i.add("dt_proj.bias", bias);
            let dt_proj = Linear {
                b: Some(dt_bias),
                ..dt_proj
            };
            let a_log = i.add(
                "a_log",
                Tensor::from_fn(dims.inner, dims.state, |_, n| ((n + 1) as f64).ln()),
            );
            let d = i.constant("d", 1, dims.inner, 1.0);
            Self {
                x_proj,
                dt_proj,
                a_log,
                d,
                dims,
            }
        })
    }

    /// `u`: `(L, inner)` in scan order.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, u: Var) -> Var {
        let VssDims { state, dt_rank, .. } = self.dims;
        let proj = self.x_proj.forward(g, s, u);
        let dt = g.slice_cols(proj, 0, dt_rank);
        let b = g.slice_cols(proj, dt_rank, state);
        let c = g.slice_cols(proj, dt_rank + state, state);
        let dt = self.dt_proj.forward(g, s, dt);
        let delta = g.act(dt, Act::Softplus);
        let a_log = s.var(g, self.a_log);
        let d = s.var(g, self.d);
        g.selective_scan(u, delta, a_log, b, c, d)
    }
}

/// Visual state-space block with an outer residual connection.
#[derive(Debug, Clone)]
pub struct VssBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub conv: DwConv,
    pub branches: Vec<S6Branch>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub dims: VssDims,
}

impl VssBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dims: VssDims) -> Self {
        init.scope(name, |i| Self {
            norm: LayerNorm::new(i, "norm", dims.dim),
            in_proj: Linear::new(i, "in_proj", dims.dim, 2 * dims.inner, false),
            conv: DwConv::new(i, "conv", dims.inner),
            branches: (0..N_SCANS).map(|k| S6Branch::new(i, &format!("scan{k}"), dims)).collect(),
            out_norm: LayerNorm::new(i, "out_norm", dims.inner),
            out_proj: Linear::new(i, "out_proj", dims.inner, dims.dim, false),
            dims,
        })
    }

    /// `x`: `(h*w, dim)`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let inner = self.dims.inner;
        let xn = self.norm.forward(g, s, x);
        let xz = self.in_proj.forward(g, s, xn);
        let x1 = g.slice_cols(xz, 0, inner);
        let z = g.slice_cols(xz, inner, inner);
        let x1 = self.conv.forward(g, s, x1, h, w);
        let x1 = g.silu(x1);
        let (seqs, orders) = expand_var(g, x1, h, w);
        let ys = [0, 1, 2, 3].map(|k| self.branches[k].forward(g, s, seqs[k]));
        let y = merge_vars(g, &ys, &orders);
        let y = self.out_norm.forward(g, s, y);
        let gate = g.silu(z);
        let y = g.mul(y, gate);
        let y = self.out_proj.forward(g, s, y);
        g.add(x, y)
    }
}

/// Two VSS blocks followed by a linear projection, wrapped in a residual.
#[derive(Debug, Clone)]
pub struct ResidualMambaBlock {
    pub vss: [VssBlock; 2],
    pub proj: Linear,
}

impl ResidualMambaBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dims: VssDims) -> Self {
        init.scope(name, |i| Self {
            vss: [VssBlock::new(i, "vss0", dims), VssBlock::new(i, "vss1", dims)],
            proj: Linear::new(i, "proj", dims.dim, dims.dim, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let y = self.vss[0].forward(g, s, x, h, w);
        let y = self.vss[1].forward(g, s, y, h, w);
        let y = self.proj.forward(g, s, y);
        g.add(x, y)
    }
}
