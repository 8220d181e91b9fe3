//! U-shaped state-space reconstruction network.
//!
//! Patch embedding, encoder stages of residual Mamba blocks joined by 2x2
//! patch merging, a single multi-head self-attention bottleneck, a mirrored
//! decoder with sub-pixel upsampling and skip connections, patch unembedding
//! and a global residual to the input image. The same network optionally
//! carries a semantic feature integration module at the start of selected
//! encoder stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{Sfi, SfiConfig};
use crate::graph::{Graph, Var};
use crate::layers::{merge2, patchify_index, pixel_shuffle2, unpatchify_index, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::vss::{ResidualMambaBlock, VssDims};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("input size {input} is not divisible by patch size {patch} times total downsampling {down}")]
    Indivisible { input: usize, patch: usize, down: usize },
    #[error("n_res_blocks must be even, got {0}")]
    OddBlocks(usize),
    #[error("scale factors must start with 1 and contain only 1 or 2, got {0:?}")]
    ScaleFactors(Vec<usize>),
    #[error("{heads} attention heads do not divide {channels} bottleneck channels")]
    Heads { heads: usize, channels: usize },
    #[error("attention reduction {ratio} does not divide {channels} channels at stage {stage}")]
    Reduction { ratio: usize, channels: usize, stage: usize },
    #[error("injection point {0} is not an encoder stage")]
    InjectionPoint(usize),
    #[error("only 3x3 convolutions are supported, got {0}")]
    Kernel(usize),
    #[error("{0} must be positive")]
    Zero(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_res_blocks: usize,
    pub embed_dim: usize,
    /// Downsampling factor entering each stage; channels grow by the same
    /// factor.
    pub scale_factors: Vec<usize>,
    pub patch_size: usize,
    pub state_dim: usize,
    pub input_size: usize,
    pub expand: usize,
    pub attn_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            n_res_blocks: 4,
            embed_dim: 32,
            scale_factors: vec![1, 2],
            patch_size: 4,
            state_dim: 8,
            input_size: 96,
            expand: 2,
            attn_heads: 4,
            mlp_ratio: 2,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_res_blocks: 8,
            embed_dim: 180,
            scale_factors: vec![1, 2, 2, 2],
            patch_size: 2,
            state_dim: 16,
            input_size: 96,
            expand: 2,
            attn_heads: 4,
            mlp_ratio: 2,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.scale_factors.len()
    }

    pub fn total_downsampling(&self) -> usize {
        self.scale_factors.iter().product()
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.embed_dim * self.scale_factors[..=s].iter().product::<usize>()
    }

    /// Token grid side length at stage `s`.
    pub fn stage_size(&self, s: usize) -> usize {
        self.input_size / self.patch_size / self.scale_factors[..=s].iter().product::<usize>()
    }

    /// Residual blocks per stage on one side of the U.
    pub fn blocks_in_stage(&self, s: usize) -> usize {
        let per_side = self.n_res_blocks / 2;
        let n = self.n_stages();
        per_side / n + usize::from(s < per_side % n)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.embed_dim, "embed_dim"),
            (self.patch_size, "patch_size"),
            (self.state_dim, "state_dim"),
            (self.input_size, "input_size"),
            (self.expand, "expand"),
            (self.attn_heads, "attn_heads"),
            (self.mlp_ratio, "mlp_ratio"),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.n_res_blocks % 2 != 0 {
            return Err(ConfigError::OddBlocks(self.n_res_blocks));
        }
        if self.scale_factors.first() != Some(&1) || self.scale_factors.iter().any(|&f| f != 1 && f != 2) {
            return Err(ConfigError::ScaleFactors(self.scale_factors.clone()));
        }
        let down = self.total_downsampling();
        if self.input_size % (self.patch_size * down) != 0 {
            return Err(ConfigError::Indivisible {
                input: self.input_size,
                patch: self.patch_size,
                down,
            });
        }
        let last = self.stage_channels(self.n_stages() - 1);
        if last % self.attn_heads != 0 {
            return Err(ConfigError::Heads {
                heads: self.attn_heads,
                channels: last,
            });
        }
        Ok(())
    }
}

/// Single pre-norm transformer block over all tokens.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        init.scope(name, |i| Self {
            norm1: LayerNorm::new(i, "norm1", dim),
            qkv: Linear::new(i, "qkv", dim, 3 * dim, true),
            proj: Linear::new(i, "proj", dim, dim, true),
            norm2: LayerNorm::new(i, "norm2", dim),
            mlp: Mlp::new(i, "mlp", dim, mlp_ratio * dim),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let dh = self.dim / self.heads;
        let xn = self.norm1.forward(g, s, x);
        let qkv = self.qkv.forward(g, s, xn);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, self.dim + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * self.dim + h * dh, dh);
            let scores = g.matmul(q, k, false, true);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let p = g.softmax(scores);
            outs.push(g.matmul(p, v, false, false));
        }
        let o = g.concat_cols(&outs);
        let o = self.proj.forward(g, s, o);
        let x = g.add(x, o);
        let xn = self.norm2.forward(g, s, x);
        let m = self.mlp.forward(g, s, xn);
        g.add(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub down: Option<(LayerNorm, Linear)>,
    pub sfi: Option<Sfi>,
    pub blocks: Vec<ResidualMambaBlock>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Option<Linear>,
    pub fuse: Linear,
    pub blocks: Vec<ResidualMambaBlock>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the bottleneck output by zeros (architecture probe).
    pub zero_bottleneck: bool,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub sfi_cfg: Option<SfiConfig>,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: AttentionBlock,
    pub decoder: Vec<DecoderStage>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

impl Backbone {
    /// Builds the network under `name`; with `sfi` the configured encoder
    /// stages receive a semantic prior.
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &BackboneConfig, sfi: Option<&SfiConfig>) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if let Some(sc) = sfi {
            sc.validate(cfg)?;
        }
        let p2 = cfg.patch_size * cfg.patch_size;
        let n = cfg.n_stages();
        let dims = |s: usize| VssDims::new(cfg.stage_channels(s), cfg.expand, cfg.state_dim);
        Ok(init.scope(name, |i| {
            let c0 = cfg.embed_dim;
            let embed = Linear::new(i, "embed", p2, c0, true);
            let embed_norm = LayerNorm::new(i, "embed_norm", c0);
            let encoder = (0..n)
                .map(|s| {
                    i.scope(format!("enc{s}"), |i| {
                        let c = cfg.stage_channels(s);
                        let down = (s > 0 && cfg.scale_factors[s] == 2).then(|| {
                            let cp = cfg.stage_channels(s - 1);
                            (LayerNorm::new(i, "down_norm", 4 * cp), Linear::new(i, "down", 4 * cp, c, false))
                        });
                        let sfi = sfi
                            .filter(|sc| sc.injection_points.contains(&s))
                            .map(|sc| Sfi::new(i, "sfi", c, sc));
                        let blocks = (0..cfg.blocks_in_stage(s))
                            .map(|b| ResidualMambaBlock::new(i, &format!("block{b}"), dims(s)))
                            .collect();
                        EncoderStage { down, sfi, blocks }
                    })
                })
                .collect();
            let last = cfg.stage_channels(n - 1);
            let bottleneck = AttentionBlock::new(i, "bottleneck", last, cfg.attn_heads, cfg.mlp_ratio);
            let decoder = (0..n)
                .map(|s| {
                    i.scope(format!("dec{s}"), |i| {
                        let c = cfg.stage_channels(s);
                        let up = (s + 1 < n && cfg.scale_factors[s + 1] == 2)
                            .then(|| Linear::new(i, "up", cfg.stage_channels(s + 1), 4 * c, true));
                        let fuse = Linear::new(i, "fuse", 2 * c, c, true);
                        let blocks = (0..cfg.blocks_in_stage(s))
                            .map(|b| ResidualMambaBlock::new(i, &format!("block{b}"), dims(s)))
                            .collect();
                        DecoderStage { up, fuse, blocks }
                    })
                })
                .collect();
            let head_norm = LayerNorm::new(i, "head_norm", c0);
            // zero head: the untrained network is the identity map
            let head = Linear::zeros(i, "head", c0, p2, true);
            Self {
                cfg: cfg.clone(),
                sfi_cfg: sfi.cloned(),
                embed,
                embed_norm,
                encoder,
                bottleneck,
                decoder,
                head_norm,
                head,
            }
        }))
    }

    /// `x`: image `(input_size^2, 1)`; `prior`: `(input_size^2, 3)` when the
    /// network carries SFI modules.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, prior: Option<Var>, opts: ForwardOptions) -> Var {
        let cfg = &self.cfg;
        let (size, p) = (cfg.input_size, cfg.patch_size);
        assert_eq!(g.value(x).shape(), (size * size, 1), "backbone input must be {size}x{size}");
        let t0 = size / p;
        let tokens = g.gather(x, patchify_index(size, size, 1, p), t0 * t0, p * p);
        let f = self.embed.forward(g, s, tokens);
        let mut f = self.embed_norm.forward(g, s, f);

        let mut prior_s = prior.map(|pr| {
            assert_eq!(g.value(pr).shape(), (size * size, 3), "prior must be {size}x{size}x3");
            g.avg_pool(pr, size, size, p)
        });
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (st, stage) in self.encoder.iter().enumerate() {
            let side = cfg.stage_size(st);
            if cfg.scale_factors[st] == 2 && st > 0 {
                let prev = cfg.stage_size(st - 1);
                if let Some((norm, lin)) = &stage.down {
                    let m = merge2(g, f, prev, prev);
                    let m = norm.forward(g, s, m);
                    f = lin.forward(g, s, m);
                }
                prior_s = prior_s.map(|pr| g.avg_pool(pr, prev, prev, 2));
            }
            if let Some(sfi) = &stage.sfi {
                let pr = prior_s.expect("SFI stage needs a semantic prior");
                f = sfi.forward(g, s, f, pr, side, side).0;
            }
            for b in &stage.blocks {
                f = b.forward(g, s, f, side, side);
            }
            skips.push(f);
        }

        let mut d = self.bottleneck.forward(g, s, f);
        if opts.zero_bottleneck {
            let shape = g.value(d).shape();
            d = g.constant(Tensor::zeros(shape.0, shape.1));
        }
        for st in (0..self.decoder.len()).rev() {
            let stage = &self.decoder[st];
            let side = cfg.stage_size(st);
            if st + 1 < self.decoder.len() {
                if let Some(up) = &self.decoder[st].up {
                    let next = cfg.stage_size(st + 1);
                    let e = up.forward(g, s, d);
                    d = pixel_shuffle2(g, e, next, next);
                }
            }
            let cat = g.concat_cols(&[d, skips[st]]);
            d = stage.fuse.forward(g, s, cat);
            for b in &stage.blocks {
                d = b.forward(g, s, d, side, side);
            }
        }
        let d = self.head_norm.forward(g, s, d);
        let patches = self.head.forward(g, s, d);
        let img = g.gather(patches, unpatchify_index(size, size, 1, p), size * size, 1);
        g.add(x, img)
    }
}

/// Parameter count of a freshly built network.
pub fn parameter_count(cfg: &BackboneConfig, sfi: Option<&SfiConfig>) -> Result<usize, ConfigError> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Backbone::new(&mut Init::new(&mut store, &mut rng), "net", cfg, sfi)?;
    Ok(store.num_scalars())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            n_res_blocks: 2,
            embed_dim: 8,
            scale_factors: vec![1, 2],
            patch_size: 2,
            state_dim: 2,
            input_size: 8,
            expand: 1,
            attn_heads: 2,
            mlp_ratio: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::toy().validate().is_ok());
        assert!(BackboneConfig::paper().validate().is_ok());
        let mut c = BackboneConfig::toy();
        c.n_res_blocks = 3;
        assert_eq!(c.validate(), Err(ConfigError::OddBlocks(3)));
        let mut c = BackboneConfig::toy();
        c.patch_size = 5;
        assert!(matches!(c.validate(), Err(ConfigError::Indivisible { .. })));
        let mut c = BackboneConfig::toy();
        c.scale_factors = vec![2, 2];
        assert!(matches!(c.validate(), Err(ConfigError::ScaleFactors(_))));
    }

    #[test]
    fn stage_arithmetic() {
        let t = BackboneConfig::toy();
        assert_eq!((t.stage_size(0), t.stage_size(1)), (24, 12));
        assert_eq!((t.stage_channels(0), t.stage_channels(1)), (32, 64));
        assert_eq!((t.blocks_in_stage(0), t.blocks_in_stage(1)), (1, 1));
        let p = BackboneConfig::paper();
        assert_eq!(p.stage_size(3), 6);
        assert_eq!(p.stage_channels(3), 1440);
        assert!((0..4).all(|s| p.blocks_in_stage(s) == 1));
    }

    #[test]
    fn untrained_network_is_identity_and_shape_preserving() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = Backbone::new(&mut Init::new(&mut store, &mut rng), "hr", &cfg, None).unwrap();
        let x = Tensor::uniform(64, 1, 1.0, &mut rng).map(|v| v.abs());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &store, xv, None, ForwardOptions::default());
        assert_eq!(g.value(y), &x);
        let y0 = net.forward(&mut g, &store, xv, None, ForwardOptions { zero_bottleneck: true });
        assert!(g.value(y0).is_finite());
        assert_eq!(g.value(y0).shape(), (64, 1));
    }
}
