//! Hybrid reconstruction loss: Charbonnier terms in image space and in
//! k-space plus a feature-space term, `alpha L_i + beta L_k + gamma L_p`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::perceptual::RandomConvExtractor;
use crate::tensor::Tensor;

pub const CHARBONNIER_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("loss weights must be non-negative with at least one positive")]
    Weights,
    #[error("perceptual weight is {0} but no feature extractor is configured")]
    NoExtractor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
            epsilon: CHARBONNIER_EPS,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            epsilon: CHARBONNIER_EPS,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.epsilon > 0.0) {
            return Err(LossError::Epsilon(self.epsilon));
        }
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(LossError::Weights);
        }
        Ok(())
    }
}

/// A fixed feature-space distance usable inside a graph.
pub trait PerceptualDistance {
    fn distance_var(&self, g: &mut Graph, a: Var, b: Var, h: usize, w: usize) -> Var;
}

impl PerceptualDistance for RandomConvExtractor {
    fn distance_var(&self, g: &mut Graph, a: Var, b: Var, h: usize, w: usize) -> Var {
        self.l1_distance_var(g, a, b, h, w)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub image: Var,
    pub kspace: Var,
    pub perceptual: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub image: f64,
    pub kspace: f64,
    pub perceptual: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            image: g.value(self.image).item(),
            kspace: g.value(self.kspace).item(),
            perceptual: self.perceptual.map_or(0.0, |p| g.value(p).item()),
        }
    }
}

/// `xhat`, `x`: `(h*w, 1)` images. The extractor is only touched when
/// `gamma > 0`.
pub fn hybrid_loss(
    g: &mut Graph,
    xhat: Var,
    x: Var,
    weights: &LossWeights,
    extractor: Option<&dyn PerceptualDistance>,
    h: usize,
    w: usize,
) -> Result<LossTerms, LossError> {
    weights.validate()?;
    let image = g.charbonnier(x, xhat, weights.epsilon);
    let kspace = g.kspace_charbonnier(x, xhat, weights.epsilon, h, w);
    let mut terms = vec![(image, weights.alpha), (kspace, weights.beta)];
    let perceptual = if weights.gamma > 0.0 {
        let ex = extractor.ok_or(LossError::NoExtractor(weights.gamma))?;
        let p = ex.distance_var(g, x, xhat, h, w);
        terms.push((p, weights.gamma));
        Some(p)
    } else {
        None
    };
    let total = g.weighted_sum(&terms);
    Ok(LossTerms {
        total,
        image,
        kspace,
        perceptual,
    })
}

fn pair(x: &Tensor, xhat: &Tensor) -> (Graph, Var, Var) {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(xhat.clone());
    (g, a, b)
}

/// `sqrt(||x - xhat||^2 + eps^2)`.
pub fn charbonnier_image_loss(x: &Tensor, xhat: &Tensor, eps: f64) -> f64 {
    let (mut g, a, b) = pair(x, xhat);
    let l = g.charbonnier(a, b, eps);
    g.value(l).item()
}

/// Charbonnier distance of the centred orthonormal Fourier transforms.
pub fn charbonnier_kspace_loss(x: &Tensor, xhat: &Tensor, eps: f64, h: usize, w: usize) -> f64 {
    let (mut g, a, b) = pair(x, xhat);
    let l = g.kspace_charbonnier(a, b, eps, h, w);
    g.value(l).item()
}

pub fn perceptual_loss(x: &Tensor, xhat: &Tensor, extractor: &dyn PerceptualDistance, h: usize, w: usize) -> f64 {
    let (mut g, a, b) = pair(x, xhat);
    let l = extractor.distance_var(&mut g, a, b, h, w);
    g.value(l).item()
}
