//! The two-pass reconstruction model: a reconstruction backbone producing
//! the coarse image and a fusion & refinement backbone that takes the coarse
//! image and a semantic prior. Both live in one parameter store under the
//! `hr.` and `fr.` namespaces.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rsfr_core::semantics::{SemanticPrior, Segmenter, SemanticsError, PRIOR_CHANNELS};
use rsfr_core::ImageSlice;

use crate::backbone::{Backbone, BackboneConfig, ConfigError, ForwardOptions};
use crate::fusion::SfiConfig;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamError, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input slice is not normalised")]
    Unnormalized,
    #[error("expected a {expected}x{expected} slice, got {got:?}")]
    Shape { expected: usize, got: (usize, usize) },
    #[error("invalid semantic prior")]
    InvalidPrior,
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("model config: {0}")]
    ConfigFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub sfi: SfiConfig,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate()?;
        self.sfi.validate(&self.backbone)
    }
}

pub fn image_to_tensor(x: &Array2<f64>) -> Tensor {
    let (h, w) = x.dim();
    Tensor::new(h * w, 1, x.iter().copied().collect())
}

pub fn tensor_to_image(t: &Tensor, shape: (usize, usize)) -> Array2<f64> {
    assert_eq!(t.len(), shape.0 * shape.1, "tensor does not match image shape");
    Array2::from_shape_vec(shape, t.data.clone()).expect("consistent shape")
}

/// Channel-last `(h*w, 3)` layout of a prior.
pub fn prior_to_tensor(p: &SemanticPrior) -> Tensor {
    let (h, w) = p.spatial_dim();
    Tensor::from_fn(h * w, PRIOR_CHANNELS, |i, k| p.masks[[k, i / w, i % w]])
}

/// Network outputs are clamped to the normalised range before they are
/// handed to the segmenter or returned.
pub fn clamp_unit(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub coarse: ImageSlice,
    pub prior: SemanticPrior,
    pub refined: ImageSlice,
}

#[derive(Debug, Clone)]
pub struct Rsfr {
    pub cfg: ModelConfig,
    pub hr: Backbone,
    pub fr: Backbone,
    pub store: ParamStore,
}

impl Rsfr {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(&mut store, &mut rng);
        let hr = Backbone::new(&mut init, "hr", &cfg.backbone, None)?;
        let fr = Backbone::new(&mut init, "fr", &cfg.backbone, Some(&cfg.sfi))?;
        Ok(Self {
            cfg: cfg.clone(),
            hr,
            fr,
            store,
        })
    }

    pub fn size(&self) -> usize {
        self.cfg.backbone.input_size
    }

    fn check(&self, x: &ImageSlice) -> Result<(), ModelError> {
        let n = self.size();
        if x.dim() != (n, n) {
            return Err(ModelError::Shape {
                expected: n,
                got: x.dim(),
            });
        }
        if !x.is_normalized() {
            return Err(ModelError::Unnormalized);
        }
        Ok(())
    }

    /// Coarse pass inside `g`.
    pub fn coarse_var(&self, g: &mut Graph, x: Var) -> Var {
        self.hr.forward(g, &self.store, x, None, ForwardOptions::default())
    }

    /// Refinement pass inside `g`; `prior` is `(h*w, 3)`.
    pub fn refine_var(&self, g: &mut Graph, coarse: Var, prior: Var) -> Var {
        self.fr.forward(g, &self.store, coarse, Some(prior), ForwardOptions::default())
    }

    /// Clamped coarse value of a graph node as a slice carrying `like`'s
    /// metadata.
    pub fn coarse_slice(&self, g: &Graph, coarse: Var, like: &ImageSlice) -> ImageSlice {
        like.with_pixels(clamp_unit(&tensor_to_image(g.value(coarse), like.dim())))
    }

    pub fn coarse(&self, zf: &ImageSlice) -> Result<ImageSlice, ModelError> {
        self.check(zf)?;
        let mut g = Graph::new();
        let x = g.constant(image_to_tensor(&zf.pixels));
        let c = self.coarse_var(&mut g, x);
        Ok(self.coarse_slice(&g, c, zf))
    }

    pub fn refine(&self, coarse: &ImageSlice, prior: &SemanticPrior) -> Result<ImageSlice, ModelError> {
        self.check(coarse)?;
        if !prior.is_valid() || prior.spatial_dim() != coarse.dim() {
            return Err(ModelError::InvalidPrior);
        }
        let mut g = Graph::new();
        let x = g.constant(image_to_tensor(&coarse.pixels));
        let p = g.constant(prior_to_tensor(prior));
        let r = self.refine_var(&mut g, x, p);
        Ok(coarse.with_pixels(clamp_unit(&tensor_to_image(g.value(r), coarse.dim()))))
    }

    /// Coarse pass, segmentation of the coarse image, refinement.
    pub fn reconstruct(&self, zf: &ImageSlice, segmenter: &Segmenter) -> Result<Reconstruction, ModelError> {
        let coarse = self.coarse(zf)?;
        let prior = segmenter.segment(&coarse)?;
        let refined = self.refine(&coarse, &prior)?;
        Ok(Reconstruction { coarse, prior, refined })
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        self.store.save(dir)?;
        let text = serde_json::to_string_pretty(&self.cfg).map_err(|e| ModelError::ConfigFile(e.to_string()))?;
        std::fs::write(dir.join("config.json"), text + "\n").map_err(|e| ModelError::ConfigFile(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(dir.join("config.json")).map_err(|e| ModelError::ConfigFile(e.to_string()))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| ModelError::ConfigFile(e.to_string()))?;
        let mut model = Self::new(&cfg)?;
        model.store.load_into(dir)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rsfr_core::kspace::normalize_minmax;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                n_res_blocks: 2,
                embed_dim: 8,
                scale_factors: vec![1, 2],
                patch_size: 2,
                state_dim: 2,
                input_size: 8,
                expand: 1,
                attn_heads: 2,
                mlp_ratio: 1,
            },
            sfi: SfiConfig {
                attention_reduction: 2,
                ..SfiConfig::default()
            },
            seed: 3,
        }
    }

    fn slice() -> ImageSlice {
        normalize_minmax(&ImageSlice::new(Array2::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) as f64))).unwrap()
    }

    #[test]
    fn untrained_refine_is_finite_and_shape_preserving() {
        let m = Rsfr::new(&tiny()).unwrap();
        let x = slice();
        let rec = m.reconstruct(&x, &Segmenter::Fallback).unwrap();
        assert_eq!(rec.coarse.pixels, x.pixels);
        assert_eq!(rec.refined.dim(), (8, 8));
        assert!(rec.refined.is_finite());
    }

    #[test]
    fn rejects_unnormalised_and_misshapen_input() {
        let m = Rsfr::new(&tiny()).unwrap();
        assert!(matches!(m.coarse(&ImageSlice::zeros((8, 8))), Err(ModelError::Unnormalized)));
        let big = normalize_minmax(&ImageSlice::new(Array2::from_shape_fn((4, 4), |(r, _)| r as f64))).unwrap();
        assert!(matches!(m.coarse(&big), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = Rsfr::new(&tiny()).unwrap();
        let id = m.store.id("fr.head.weight").unwrap();
        m.store.get_mut(id).data[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Rsfr::load(dir.path()).unwrap();
        assert_eq!(back.store.fingerprint(), m.store.fingerprint());
        assert_eq!(back.cfg, m.cfg);
    }

    #[test]
    fn prior_layout_is_channel_last() {
        let mut p = SemanticPrior::zeros((2, 3));
        p.masks[[2, 1, 0]] = 0.5;
        let t = prior_to_tensor(&p);
        assert_eq!(t.shape(), (6, 3));
        assert_eq!(t.at(3, 2), 0.5);
        assert_eq!(t.sum(), 0.5);
    }
}
