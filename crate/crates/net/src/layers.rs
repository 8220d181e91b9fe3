//! Basic parameterised layers and spatial index maps.

use crate::graph::{Act, Graph, Var, PAD};
use crate::params::{Init, ParamId, ParamStore};

/// `y = x W + b` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform initialisation in `±1/sqrt(in_dim)`.
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_bound(init, name, in_dim, out_dim, bias, bound)
    }

    pub fn zeros(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_bound(init, name, in_dim, out_dim, bias, 0.0)
    }

    pub fn with_bound(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool, bound: f64) -> Self {
        init.scope(name, |i| {
            let w = i.uniform("weight", in_dim, out_dim, bound);
            let b = bias.then(|| i.uniform("bias", 1, out_dim, bound));
            Self { w, b, in_dim, out_dim }
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let w = s.var(g, self.w);
        let b = self.b.map(|b| s.var(g, b));
        g.linear(x, w, b)
    }
}

/// Layer normalisation over the channel (last) axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self {
            g: i.constant("weight", 1, dim, 1.0),
            b: i.constant("bias", 1, dim, 0.0),
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let gamma = s.var(g, self.g);
        let beta = s.var(g, self.b);
        g.layer_norm(x, gamma, beta)
    }
}

/// Depth-wise 3x3 convolution.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub k: ParamId,
    pub b: ParamId,
}

impl DwConv {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        // fan-in of a depth-wise 3x3 kernel is 9
        init.scope(name, |i| Self {
            k: i.uniform("weight", 9, channels, 1.0 / 3.0),
            b: i.uniform("bias", 1, channels, 1.0 / 3.0),
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let k = s.var(g, self.k);
        let b = s.var(g, self.b);
        g.dwconv3(x, k, b, h, w)
    }
}

/// Dense 3x3 convolution with zero padding, computed as im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub lin: Linear,
}

impl Conv3 {
    pub fn new(init: &mut Init<'_>, name: &str, in_ch: usize, out_ch: usize, bias: bool) -> Self {
        Self {
            lin: Linear::new(init, name, 9 * in_ch, out_ch, bias),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let cols = im2col(g, x, h, w);
        self.lin.forward(g, s, cols)
    }
}

/// `(h*w, C)` to `(h*w, 9C)` neighbourhood columns in raster tap order.
pub fn im2col(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let c = g.value(x).cols;
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (si, sj) = (i + di, j + dj);
                    let inside = si >= 0 && sj >= 0 && si < h as isize && sj < w as isize;
                    for ch in 0..c {
                        idx.push(if inside {
                            (si as usize * w + sj as usize) * c + ch
                        } else {
                            PAD
                        });
                    }
                }
            }
        }
    }
    g.gather(x, idx, h * w, 9 * c)
}

/// Image `(h*w, c)` to patch tokens `((h/p)*(w/p), p*p*c)`.
pub fn patchify_index(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (th, tw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for ti in 0..th {
        for tj in 0..tw {
            for a in 0..p {
                for b in 0..p {
                    for ch in 0..c {
                        idx.push(((ti * p + a) * w + tj * p + b) * c + ch);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`].
pub fn unpatchify_index(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let fwd = patchify_index(h, w, c, p);
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// 2x2 patch merging: `(h*w, C)` to `((h/2)*(w/2), 4C)`.
pub fn merge2(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let c = g.value(x).cols;
    let idx = patchify_index(h, w, c, 2);
    g.gather(x, idx, (h / 2) * (w / 2), 4 * c)
}

/// Sub-pixel expansion: `(h*w, 4C)` to `((2h)*(2w), C)`.
pub fn pixel_shuffle2(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let c = g.value(x).cols / 4;
    let idx = unpatchify_index(2 * h, 2 * w, c, 2);
    g.gather(x, idx, 4 * h * w, c)
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        init.scope(name, |i| Self {
            fc1: Linear::new(i, "fc1", dim, hidden, true),
            fc2: Linear::new(i, "fc2", hidden, dim, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, s, x);
        let h = g.act(h, Act::Gelu);
        self.fc2.forward(g, s, h)
    }
}
