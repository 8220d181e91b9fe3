//! Semantic feature integration and the fusion & refinement network.
//!
//! SFI concatenates image features with the (pooled) three-channel prior,
//! applies a 3x3 convolution, instance normalisation and GELU, then scales
//! each channel by a squeeze-excite style attention weight in `(0, 1)`.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ConfigError};
use crate::graph::{Act, Graph, Var};
use crate::layers::{Conv3, Linear};
use crate::params::{Init, ParamStore};
use rsfr_core::semantics::PRIOR_CHANNELS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfiConfig {
    pub conv_kernel: usize,
    pub attention_reduction: usize,
    /// Encoder stages that receive the prior.
    pub injection_points: Vec<usize>,
}

impl Default for SfiConfig {
    fn default() -> Self {
        Self {
            conv_kernel: 3,
            attention_reduction: 4,
            injection_points: vec![0, 1],
        }
    }
}

impl SfiConfig {
    /// Injection at every encoder stage of `cfg`.
    pub fn all_stages(cfg: &BackboneConfig) -> Self {
        Self {
            injection_points: (0..cfg.n_stages()).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<(), ConfigError> {
        if self.conv_kernel != 3 {
            return Err(ConfigError::Kernel(self.conv_kernel));
        }
        if self.attention_reduction == 0 {
            return Err(ConfigError::Zero("attention_reduction"));
        }
        for &s in &self.injection_points {
            if s >= cfg.n_stages() {
                return Err(ConfigError::InjectionPoint(s));
            }
            let c = cfg.stage_channels(s);
            if c % self.attention_reduction != 0 {
                return Err(ConfigError::Reduction {
                    ratio: self.attention_reduction,
                    channels: c,
                    stage: s,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sfi {
    pub conv: Conv3,
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl Sfi {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, cfg: &SfiConfig) -> Self {
        let hidden = channels / cfg.attention_reduction;
        init.scope(name, |i| Self {
            // no bias: instance normalisation removes per-channel offsets
            conv: Conv3::new(i, "conv", channels + PRIOR_CHANNELS, channels, false),
            fc1: Linear::new(i, "fc1", channels, hidden, true),
            fc2: Linear::new(i, "fc2", hidden, channels, true),
            channels,
        })
    }

    /// Returns the fused features `(h*w, C)` and the channel-attention
    /// weights `(1, C)`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, f: Var, prior: Var, h: usize, w: usize) -> (Var, Var) {
        assert_eq!(
            g.value(f).rows,
            g.value(prior).rows,
            "prior must be resampled to the feature resolution"
        );
        let cat = g.concat_cols(&[f, prior]);
        let y = self.conv.forward(g, s, cat, h, w);
        let y = g.instance_norm(y);
        let y = g.act(y, Act::Gelu);
        let squeeze = g.mean_rows(y);
        let a = self.fc1.forward(g, s, squeeze);
        let a = g.act(a, Act::Relu);
        let a = self.fc2.forward(g, s, a);
        let weights = g.act(a, Act::Sigmoid);
        (g.mul_row(y, weights), weights)
    }
}
