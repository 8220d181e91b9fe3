//! Pipeline configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rsfr_core::dataset::DatasetSpec;
use rsfr_core::phantom::PhantomSpec;
use rsfr_core::semantics::SegmenterKind;
use rsfr_net::model::ModelConfig;
use rsfr_net::perceptual::DEFAULT_EXTRACTOR_SEED;
use rsfr_net::train::TrainConfig;

use crate::error::{CliError, Result};

/// Index of the first held-out case; training cases count up from 0.
pub const TEST_CASE_OFFSET: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_cases: usize,
    pub test_cases: usize,
    pub af: u32,
    /// Rician sigma of the training phantoms as a fraction of `s0`.
    pub noise_sigma: f64,
    /// Rician sigma of the held-out phantoms.
    pub test_noise_sigma: f64,
    pub jitter: bool,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_cases: 16,
            test_cases: 2,
            af: 4,
            noise_sigma: 0.01,
            test_noise_sigma: 0.01,
            jitter: true,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Phantom ground-truth myocardium.
    Reference,
    /// Annulus fitted to the largest fallback component of the b0 image.
    Fallback,
}

impl std::str::FromStr for MaskMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "fallback" => Ok(Self::Fallback),
            other => Err(CliError::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mask_mode: MaskMode,
    pub n_spokes: usize,
    pub samples_per_spoke: usize,
    pub extractor_seed: u64,
    /// Slice shown in the reconstruction figure.
    pub figure_slice: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::Reference,
            n_spokes: rsfr_core::dtfit::DEFAULT_SPOKES,
            samples_per_spoke: rsfr_core::dtfit::DEFAULT_SAMPLES_PER_SPOKE,
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
            figure_slice: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Provider of the semantic prior, used for training and inference.
    pub segmenter: SegmenterKind,
    /// Mask-service endpoint for the foundation-model provider; falls back to
    /// the `RSFR_MASK_SERVICE` environment variable.
    pub mask_service: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("rsfr-out"),
            segmenter: SegmenterKind::Fallback,
            mask_service: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                base_lr: 1e-3,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Copies the global seed into every stochastic component and the
    /// segmenter kind into the training config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = self.seed;
        c.train.seed = self.seed;
        c.train.prior_kind = match self.segmenter {
            SegmenterKind::None | SegmenterKind::Reference | SegmenterKind::Fallback => self.segmenter,
            SegmenterKind::FoundationModel | SegmenterKind::Trained => SegmenterKind::Fallback,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.train_cases == 0 || self.data.test_cases == 0 {
            return bad("train_cases and test_cases must be positive".into());
        }
        if self.data.train_cases > TEST_CASE_OFFSET {
            return bad(format!("at most {TEST_CASE_OFFSET} training cases"));
        }
        self.data.phantom.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.phantom.grid_size != self.model.backbone.input_size {
            return bad(format!(
                "phantom grid {} does not match network input {}",
                self.data.phantom.grid_size, self.model.backbone.input_size
            ));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !self.train.af_schedule.contains(&self.data.af) {
            return bad(format!("af {} is not in the training schedule {:?}", self.data.af, self.train.af_schedule));
        }
        if self.segmenter == SegmenterKind::Trained {
            return bad("the trained-segmenter adapter is library-only; choose another segmenter".into());
        }
        Ok(())
    }

    fn dataset(&self, n_cases: usize, sigma: f64) -> DatasetSpec {
        DatasetSpec {
            n_cases,
            af: self.data.af,
            seed: self.seed,
            jitter: self.data.jitter,
            base: PhantomSpec {
                noise_sigma: sigma,
                ..self.data.phantom.clone()
            },
        }
    }

    pub fn train_dataset(&self) -> DatasetSpec {
        self.dataset(self.data.train_cases, self.data.noise_sigma)
    }

    pub fn test_dataset(&self) -> DatasetSpec {
        self.dataset(self.data.test_cases, self.data.test_noise_sigma)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of any serialisable value via its JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serialisable").as_bytes())
}
