//! End-to-end training of both backbones under the hybrid loss.
//!
//! Each step runs the coarse pass, segments the clamped coarse image with a
//! frozen provider, runs the refinement pass on the coarse node (so the
//! reconstruction backbone receives gradients through it), and applies the
//! hybrid loss to the refined image. Batches are processed one sample at a
//! time with gradients accumulated and averaged.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rsfr_core::dataset::Case;
use rsfr_core::semantics::{Segmenter, SegmenterKind, SemanticsError};
use rsfr_core::ImageSlice;

use crate::graph::Graph;
use crate::loss::{hybrid_loss, LossError, LossValues, LossWeights, PerceptualDistance};
use crate::model::{image_to_tensor, prior_to_tensor, ModelError, Rsfr};
use crate::params::{Adam, ParamError};
use crate::perceptual::{RandomConvExtractor, DEFAULT_EXTRACTOR_SEED};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("no training pairs for acceleration factors {0:?}")]
    NoData(Vec<u32>),
    #[error("non-finite loss at step {step}; state dumped to {dump:?}")]
    Diverged { step: usize, dump: Option<PathBuf> },
    #[error("segmenter changed during training")]
    SegmenterModified,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Halving period after the warm phase.
    pub decay_every: usize,
    /// Step at which halving starts.
    pub warm_steps: usize,
    pub seed: u64,
    /// Acceleration factors whose pairs are used.
    pub af_schedule: Vec<u32>,
    /// Also apply the loss to the coarse image.
    pub deep_supervision: bool,
    pub prior_kind: SegmenterKind,
    pub weights: LossWeights,
    pub extractor_seed: u64,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 1,
            base_lr: 2e-4,
            decay_every: 400,
            warm_steps: 1200,
            seed: 0,
            af_schedule: vec![4],
            deep_supervision: false,
            prior_kind: SegmenterKind::Fallback,
            weights: LossWeights::default(),
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.warm_steps >= self.total_steps {
            return bad("warm_steps must be below total_steps");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if matches!(
            self.prior_kind,
            SegmenterKind::FoundationModel | SegmenterKind::Trained
        ) {
            return bad("training uses a local prior provider (fallback, reference or none)");
        }
        self.weights.validate()?;
        Ok(())
    }

    /// `base_lr` until `warm_steps`, then halved every `decay_every` steps:
    /// `base_lr / 2` at `W + D`, `base_lr / 4` at `W + 2D`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warm_steps {
            return self.base_lr;
        }
        let halvings = (step - self.warm_steps) / self.decay_every;
        self.base_lr * 0.5f64.powi(halvings.min(1000) as i32)
    }
}

/// One supervised pair.
#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub gt: &'a ImageSlice,
    pub zf: &'a ImageSlice,
    pub myo: &'a Array2<bool>,
    pub af: u32,
}

pub fn pairs_from_cases(cases: &[Case]) -> Vec<TrainPair<'_>> {
    cases
        .iter()
        .flat_map(|c| {
            c.samples.iter().map(move |s| TrainPair {
                gt: &s.gt,
                zf: &s.zf,
                myo: c.myo_mask(),
                af: s.mask.acceleration(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_i: f64,
    pub loss_k: f64,
    pub loss_p: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub steps_done: usize,
    pub log: Vec<LogRecord>,
    pub param_fingerprint: String,
}

impl TrainState {
    /// Mean loss over the first `n` logged steps.
    pub fn initial_loss(&self, n: usize) -> f64 {
        mean(self.log.iter().take(n).map(|r| r.loss))
    }

    /// Mean loss over the last `n` logged steps.
    pub fn final_loss(&self, n: usize) -> f64 {
        mean(self.log.iter().rev().take(n).map(|r| r.loss))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Output locations; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Line-delimited JSON metric log.
    pub log_path: Option<PathBuf>,
    /// Directory receiving `step_<n>` checkpoints and the final `final`.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Provider used for a pair during training.
pub fn training_segmenter(kind: SegmenterKind, pair: &TrainPair<'_>) -> Segmenter {
    match kind {
        SegmenterKind::None => Segmenter::None,
        SegmenterKind::Reference => Segmenter::Reference(std::sync::Arc::new(pair.myo.clone())),
        _ => Segmenter::Fallback,
    }
}

struct StepResult {
    values: LossValues,
}

fn sample_step(
    model: &mut Rsfr,
    pair: &TrainPair<'_>,
    cfg: &TrainConfig,
    extractor: Option<&dyn PerceptualDistance>,
    scale: f64,
) -> Result<StepResult, TrainError> {
    let (h, w) = pair.gt.dim();
    let mut g = Graph::new();
    let x = g.constant(image_to_tensor(&pair.zf.pixels));
    let target = g.constant(image_to_tensor(&pair.gt.pixels));
    let coarse = model.coarse_var(&mut g, x);
    let coarse_img = model.coarse_slice(&g, coarse, pair.zf);
    let prior = training_segmenter(cfg.prior_kind, pair).segment(&coarse_img)?;
    let pv = g.constant(prior_to_tensor(&prior));
    let refined = model.refine_var(&mut g, coarse, pv);
    let terms = hybrid_loss(&mut g, refined, target, &cfg.weights, extractor, h, w)?;
    let mut values = terms.values(&g);
    let mut total = terms.total;
    if cfg.deep_supervision {
        let ct = hybrid_loss(&mut g, coarse, target, &cfg.weights, extractor, h, w)?;
        let cv = ct.values(&g);
        values.total += cv.total;
        values.image += cv.image;
        values.kspace += cv.kspace;
        values.perceptual += cv.perceptual;
        total = g.weighted_sum(&[(terms.total, 1.0), (ct.total, 1.0)]);
    }
    if values.total.is_finite() {
        let grads = g.backward(total);
        model.store.accumulate(&grads, scale);
    }
    Ok(StepResult { values })
}

fn write_record(out: &mut Option<std::io::BufWriter<std::fs::File>>, rec: &LogRecord) -> Result<(), TrainError> {
    if let Some(f) = out {
        let line = serde_json::to_string(rec).map_err(|e| TrainError::Config(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn dump_state(model: &Rsfr, dir: Option<&Path>, step: usize) -> Option<PathBuf> {
    let dir = dir?.join(format!("diverged_step_{step}"));
    model.save(&dir).ok().map(|_| dir)
}

/// Trains `model` in place. Fully deterministic for a given model, data and
/// config.
pub fn train_end_to_end(
    model: &mut Rsfr,
    data: &[TrainPair<'_>],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let pairs: Vec<&TrainPair<'_>> = data.iter().filter(|p| cfg.af_schedule.contains(&p.af)).collect();
    if pairs.is_empty() {
        return Err(TrainError::NoData(cfg.af_schedule.clone()));
    }
    let extractor = (cfg.weights.gamma > 0.0).then(|| RandomConvExtractor::new(cfg.extractor_seed));
    let extractor_dyn = extractor.as_ref().map(|e| e as &dyn PerceptualDistance);
    let segmenter_fingerprint = Segmenter::Fallback.fingerprint();

    let mut log_file = match &outputs.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };
    let mut adam = Adam::new(&model.store);
    let mut state = TrainState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let scale = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.total_steps {
        let lr = cfg.lr_at(step);
        model.store.zero_grad();
        let mut sum = LossValues {
            total: 0.0,
            image: 0.0,
            kspace: 0.0,
            perceptual: 0.0,
        };
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            let pair = pairs[order[cursor]];
            cursor += 1;
            let r = sample_step(model, pair, cfg, extractor_dyn, scale)?;
            sum.total += r.values.total * scale;
            sum.image += r.values.image * scale;
            sum.kspace += r.values.kspace * scale;
            sum.perceptual += r.values.perceptual * scale;
        }
        let rec = LogRecord {
            step,
            loss: sum.total,
            loss_i: sum.image,
            loss_k: sum.kspace,
            loss_p: sum.perceptual,
            lr,
        };
        write_record(&mut log_file, &rec)?;
        state.log.push(rec);
        if !sum.total.is_finite() || !model.store.grad_norm().is_finite() {
            if let Some(f) = log_file.as_mut() {
                f.flush()?;
            }
            let dump = dump_state(model, outputs.checkpoint_dir.as_deref(), step);
            return Err(TrainError::Diverged { step, dump });
        }
        adam.update(&mut model.store, lr);
        state.steps_done = step + 1;
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.join(format!("step_{}", step + 1)))?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if Segmenter::Fallback.fingerprint() != segmenter_fingerprint {
        return Err(TrainError::SegmenterModified);
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        model.save(&dir.join("final"))?;
    }
    state.param_fingerprint = model.store.fingerprint();
    Ok(state)
}
