//! Stage orchestration: simulate, train, reconstruct, postprocess,
//! evaluate, report.
//!
//! Each stage writes into its own directory under the output root together
//! with a `stage.json` holding its cache key and output hash. A stage whose
//! key and outputs both match is skipped.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use rsfr_core::array_io::{read_mask, read_npy, write_mask, write_npy};
use rsfr_core::dataset::build_cases;
use rsfr_core::dtfit::{compute_dt_params, fit_tensor_lls, mask_centroid, DtParams, LineProfile};
use rsfr_core::image::ImageSlice;
use rsfr_core::metrics::{
    mae_global, mann_whitney_u, masked_mae, perceptual_distance, psnr, ssim, summarize, CaseMetrics, FeatureExtractor,
    SliceMetrics,
};
use rsfr_core::semantics::{fallback_segment, MaskServiceClient, MaskServiceConfig, Segmenter, SegmenterKind};
use rsfr_net::model::Rsfr;
use rsfr_net::perceptual::RandomConvExtractor;
use rsfr_net::train::{train_end_to_end, TrainOutputs};

use crate::config::{hash_json, MaskMode, PipelineConfig, TEST_CASE_OFFSET};
use crate::error::{CliError, IoContext, Result};
use crate::manifest::{now, RunLock, RunManifest, StageRecord, StageStatus};
use crate::store::{
    hash_dir, list_cases, read_case, read_json, read_prior, read_slices, slice_file, slice_meta,
    write_case, write_json, write_prior, write_slice, StoredCase,
};

pub const STAGE_FILE: &str = "stage.json";

/// Reconstruction methods compared against the ground truth.
pub const METHODS: [&str; 3] = ["zf", "coarse", "refined"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Train,
    Reconstruct,
    Postprocess,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Train,
        Stage::Reconstruct,
        Stage::Postprocess,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Reconstruct => "reconstruct",
            Stage::Postprocess => "postprocess",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Simulate => &[],
            Stage::Train => &[Stage::Simulate],
            Stage::Reconstruct => &[Stage::Simulate, Stage::Train],
            Stage::Postprocess => &[Stage::Simulate, Stage::Reconstruct],
            Stage::Evaluate => &[Stage::Simulate, Stage::Reconstruct, Stage::Postprocess],
            Stage::Report => &[Stage::Simulate, Stage::Reconstruct, Stage::Postprocess, Stage::Evaluate],
        }
    }

    /// Config section that determines the stage's outputs.
    fn section(self, cfg: &PipelineConfig) -> serde_json::Value {
        match self {
            Stage::Simulate => serde_json::json!({ "seed": cfg.seed, "data": cfg.data }),
            Stage::Train => serde_json::json!({ "model": cfg.model, "train": cfg.train }),
            Stage::Reconstruct => serde_json::json!({ "segmenter": cfg.segmenter, "mask_service": cfg.mask_service }),
            Stage::Postprocess => serde_json::json!({
                "mask_mode": cfg.eval.mask_mode,
                "n_spokes": cfg.eval.n_spokes,
                "samples_per_spoke": cfg.eval.samples_per_spoke,
            }),
            Stage::Evaluate => serde_json::json!({ "extractor_seed": cfg.eval.extractor_seed, "segmenter": cfg.segmenter }),
            Stage::Report => serde_json::json!({ "figure_slice": cfg.eval.figure_slice }),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageCache {
    key: String,
    output_hash: String,
}

/// Summary written next to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub n_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub param_fingerprint: String,
}

/// Per-method DT summary of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtSummary {
    pub method: String,
    pub lv_center: (f64, f64),
    pub global_md: f64,
    pub global_fa: f64,
    pub ha_gradient: f64,
    pub n_profiles: usize,
    pub skipped_spokes: usize,
}

/// Mann-Whitney comparison of the best method against another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub metric: String,
    pub best: String,
    pub other: String,
    pub u: f64,
    pub p: f64,
    pub exact: bool,
    pub significant: bool,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
    /// Receives one line per stage event.
    pub log: Box<dyn FnMut(&str)>,
}

impl Pipeline {
    /// Resolves and validates `cfg` and writes it to the output root.
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root).at(&root)?;
        let config_hash = hash_json(&PipelineConfig {
            out_dir: PathBuf::new(),
            ..cfg.clone()
        });
        let path = root.join("config.toml");
        std::fs::write(&path, cfg.to_toml()?).at(&path)?;
        Ok(Self {
            manifest: RunManifest::new(config_hash, cfg.seed),
            cfg,
            root,
            log: Box::new(|line| eprintln!("{line}")),
        })
    }

    pub fn quiet(mut self) -> Self {
        self.log = Box::new(|_| {});
        self
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    /// Runs every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<RunManifest> {
        let _lock = RunLock::acquire(&self.root)?;
        self.manifest.stages.clear();
        self.manifest.checkpoint = None;
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            self.run_stage(stage)?;
        }
        self.manifest.check_acyclic()?;
        self.manifest.write(&self.root)?;
        Ok(self.manifest.clone())
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let inputs = stage
            .inputs()
            .iter()
            .map(|s| {
                self.manifest
                    .stage(s.name())
                    .map(|r| (s.name(), r.output_hash.clone()))
                    .ok_or_else(|| CliError::MissingInput {
                        stage: stage.name().into(),
                        what: s.name().into(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(hash_json(&(stage.name(), stage.section(&self.cfg), inputs)))
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let key = self.stage_key(stage)?;
        let dir = self.stage_dir(stage);
        let started = now();
        let mut status = StageStatus::Ran;
        let cache_path = dir.join(STAGE_FILE);
        if cache_path.exists() {
            let cache: StageCache = read_json(&cache_path)?;
            if cache.key == key {
                let current = hash_dir(&dir, &[STAGE_FILE])?;
                if current == cache.output_hash {
                    (self.log)(&format!("[{}] cached", stage.name()));
                    self.record(stage, key, current, StageStatus::Cached, started, None)?;
                    return Ok(());
                }
                (self.log)(&format!(
                    "[{}] stale: outputs hash {} but cache recorded {}; re-running",
                    stage.name(),
                    &current[..12],
                    &cache.output_hash[..12]
                ));
                status = StageStatus::Stale;
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).at(&dir)?;
        }
        std::fs::create_dir_all(&dir).at(&dir)?;
        (self.log)(&format!("[{}] running", stage.name()));
        let result = match stage {
            Stage::Simulate => self.simulate(&dir),
            Stage::Train => self.train(&dir),
            Stage::Reconstruct => self.reconstruct(&dir),
            Stage::Postprocess => self.postprocess(&dir),
            Stage::Evaluate => self.evaluate(&dir),
            Stage::Report => crate::report::render(self, &dir).map(|_| ()),
        };
        if let Err(e) = result {
            self.record(stage, key, String::new(), StageStatus::Failed, started, Some(e.to_string()))?;
            self.manifest.write(&self.root)?;
            return Err(CliError::StageFailed {
                stage: stage.name().into(),
                message: e.to_string(),
            });
        }
        let output_hash = hash_dir(&dir, &[STAGE_FILE])?;
        write_json(
            &cache_path,
            &StageCache {
                key: key.clone(),
                output_hash: output_hash.clone(),
            },
        )?;
        self.record(stage, key, output_hash, status, started, None)?;
        self.manifest.write(&self.root)?;
        Ok(())
    }

    fn record(
        &mut self,
        stage: Stage,
        key: String,
        output_hash: String,
        status: StageStatus,
        started: f64,
        message: Option<String>,
    ) -> Result<()> {
        if stage == Stage::Train && status != StageStatus::Failed {
            self.manifest.checkpoint = Some(hash_dir(&self.stage_dir(stage).join("checkpoints").join("final"), &[])?);
        }
        self.manifest.stages.push(StageRecord {
            name: stage.name().into(),
            inputs: stage.inputs().iter().map(|s| s.name().to_string()).collect(),
            key,
            output_hash,
            status,
            started,
            finished: now(),
            message,
        });
        Ok(())
    }

    // ------------------------------------------------------------------
    // Stage bodies
    // ------------------------------------------------------------------

    fn simulate(&self, dir: &Path) -> Result<()> {
        let af = self.cfg.data.af;
        for (sub, spec, first) in [
            ("train", self.cfg.train_dataset(), 0),
            ("test", self.cfg.test_dataset(), TEST_CASE_OFFSET),
        ] {
            let root = dir.join(sub);
            for case in build_cases(&spec, first)? {
                write_case(&root, &case, af)?;
            }
        }
        Ok(())
    }

    pub fn train_cases(&self) -> Result<Vec<StoredCase>> {
        list_cases(&self.stage_dir(Stage::Simulate).join("train"))?.iter().map(|d| read_case(d)).collect()
    }

    pub fn test_cases(&self) -> Result<Vec<StoredCase>> {
        list_cases(&self.stage_dir(Stage::Simulate).join("test"))?.iter().map(|d| read_case(d)).collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.stage_dir(Stage::Train).join("checkpoints").join("final")
    }

    fn train(&mut self, dir: &Path) -> Result<()> {
        let cases = self.train_cases()?;
        let pairs: Vec<_> = cases.iter().flat_map(|c| c.pairs()).collect();
        let mut model = Rsfr::new(&self.cfg.model)?;
        let outputs = TrainOutputs {
            log_path: Some(dir.join("train_log.jsonl")),
            checkpoint_dir: Some(dir.join("checkpoints")),
        };
        let state = train_end_to_end(&mut model, &pairs, &self.cfg.train, &outputs)?;
        let window = (state.log.len() / 10).max(1);
        let (initial, last) = (state.initial_loss(window), state.final_loss(window));
        write_json(
            &dir.join("summary.json"),
            &TrainSummary {
                steps: state.steps_done,
                n_pairs: pairs.len(),
                initial_loss: initial,
                final_loss: last,
                param_fingerprint: state.param_fingerprint,
            },
        )?;
        (self.log)(&format!(
            "[train] {} steps on {} pairs; loss {initial:.4} -> {last:.4}",
            state.steps_done,
            pairs.len(),
        ));
        Ok(())
    }

    fn segmenter_for(&self, case: &StoredCase) -> Result<Segmenter> {
        Ok(match self.cfg.segmenter {
            SegmenterKind::None => Segmenter::None,
            SegmenterKind::Fallback => Segmenter::Fallback,
            SegmenterKind::Reference => Segmenter::Reference(std::sync::Arc::new(case.myo.clone())),
            SegmenterKind::FoundationModel => {
                let config = match &self.cfg.mask_service {
                    Some(endpoint) => MaskServiceConfig::new(endpoint.clone()),
                    None => MaskServiceConfig::from_env()?,
                };
                Segmenter::FoundationModel(MaskServiceClient::new(config))
            }
            SegmenterKind::Trained => {
                return Err(CliError::Config("the trained segmenter is not available from the pipeline".into()))
            }
        })
    }

    fn reconstruct(&self, dir: &Path) -> Result<()> {
        let model = Rsfr::load(&self.checkpoint_dir())?;
        for case in self.test_cases()? {
            let segmenter = self.segmenter_for(&case)?;
            let out = dir.join(case.record.name());
            std::fs::create_dir_all(&out).at(&out)?;
            for (i, zf) in case.zf.iter().enumerate() {
                let rec = model.reconstruct(zf, &segmenter)?;
                let meta = slice_meta(&case.record, i, "normalized");
                write_slice(&out.join(slice_file("coarse", i)), &rec.coarse, &meta)?;
                write_slice(&out.join(slice_file("refined", i)), &rec.refined, &meta)?;
                write_prior(&out.join(slice_file("prior", i)), &rec.prior)?;
            }
        }
        Ok(())
    }

    /// Slices of `method` for a test case: `gt` and `zf` from the simulate
    /// stage, `coarse` and `refined` from the reconstruct stage.
    pub fn method_slices(&self, case: &StoredCase, method: &str) -> Result<Vec<ImageSlice>> {
        match method {
            "gt" => Ok(case.gt.clone()),
            "zf" => Ok(case.zf.clone()),
            "coarse" | "refined" => read_slices(
                &self.stage_dir(Stage::Reconstruct).join(case.record.name()),
                method,
                case.record.n_slices(),
            ),
            other => Err(CliError::Config(format!("unknown method {other:?}"))),
        }
    }

    /// Mask and LV centre used for tensor fitting.
    fn dt_mask(&self, case: &StoredCase) -> Result<(Array2<bool>, (f64, f64))> {
        match self.cfg.eval.mask_mode {
            MaskMode::Reference => Ok((case.myo.clone(), case.lv_center())),
            MaskMode::Fallback => {
                let b0 = case
                    .record
                    .b_values
                    .iter()
                    .position(|&b| b < rsfr_core::dtfit::B0_THRESHOLD)
                    .unwrap_or(0);
                fallback_annulus(&case.gt[b0]).ok_or_else(|| CliError::StageFailed {
                    stage: "postprocess".into(),
                    message: format!("no myocardium found in {}", case.record.name()),
                })
            }
        }
    }

    fn postprocess(&self, dir: &Path) -> Result<()> {
        let eval = &self.cfg.eval;
        for case in self.test_cases()? {
            let out = dir.join(case.record.name());
            std::fs::create_dir_all(&out).at(&out)?;
            let (mask, center) = self.dt_mask(&case)?;
            write_mask(&out.join("dt_mask.npy"), &mask)?;
            for method in std::iter::once("gt").chain(METHODS) {
                let series = case.series_from(&self.method_slices(&case, method)?);
                let map = fit_tensor_lls(&series, &mask)?;
                let (params, profiles) = compute_dt_params(&map, center, eval.n_spokes, eval.samples_per_spoke);
                let mdir = out.join(method);
                std::fs::create_dir_all(&mdir).at(&mdir)?;
                write_npy(&mdir.join("md.npy"), &params.md)?;
                write_npy(&mdir.join("fa.npy"), &params.fa)?;
                write_npy(&mdir.join("ha.npy"), &params.ha)?;
                write_profiles_csv(&mdir.join("profiles.csv"), &profiles.profiles)?;
                write_json(
                    &mdir.join("params.json"),
                    &DtSummary {
                        method: method.into(),
                        lv_center: center,
                        global_md: masked_mean(&params.md, &params.mask),
                        global_fa: masked_mean(&params.fa, &params.mask),
                        ha_gradient: params.ha_gradient,
                        n_profiles: profiles.profiles.len(),
                        skipped_spokes: profiles.skipped,
                    },
                )?;
            }
        }
        Ok(())
    }

    /// DT parameters of `method` for a case as written by postprocess.
    pub fn load_dt_params(&self, case: &str, method: &str) -> Result<(DtParams, DtSummary)> {
        let cdir = self.stage_dir(Stage::Postprocess).join(case);
        let mdir = cdir.join(method);
        let summary: DtSummary = read_json(&mdir.join("params.json"))?;
        let params = DtParams {
            md: read_npy(&mdir.join("md.npy"))?,
            fa: read_npy(&mdir.join("fa.npy"))?,
            ha: read_npy(&mdir.join("ha.npy"))?,
            mask: read_mask(&cdir.join("dt_mask.npy"))?,
            ha_gradient: summary.ha_gradient,
        };
        Ok((params, summary))
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let extractor = RandomConvExtractor::new(self.cfg.eval.extractor_seed);
        let mut rows = Vec::new();
        let mut dt_rows = Vec::new();
        for case in self.test_cases()? {
            let name = case.record.name();
            for method in METHODS {
                let slices = self.method_slices(&case, method)?;
                for (i, (gt, x)) in case.gt.iter().zip(&slices).enumerate() {
                    rows.push(slice_metrics(&name, i, method, gt, x, &case.myo, &extractor)?);
                }
            }
            let (gt_params, _) = self.load_dt_params(&name, "gt")?;
            for method in METHODS {
                let (params, _) = self.load_dt_params(&name, method)?;
                let mae = mae_global(&gt_params, &params, &gt_params.mask)?;
                dt_rows.push(CaseMetrics {
                    case: name.clone(),
                    method: method.into(),
                    mae_md: mae.md,
                    mae_fa: mae.fa,
                    mae_ha_gradient: mae.ha_gradient,
                });
            }
        }
        write_json(
            &dir.join("arm.json"),
            &serde_json::json!({ "segmenter": self.cfg.segmenter, "label": arm_label(self.cfg.segmenter) }),
        )?;
        write_metric_reports(dir, &rows)?;
        write_csv(&dir.join("dt_mae.csv"), &dt_rows)?;
        write_csv(&dir.join("significance.csv"), &significance(&rows)?)?;
        Ok(())
    }
}

/// Runs the whole pipeline.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    Pipeline::new(cfg)?.run_until(Stage::Report)
}

/// Ablation-arm label of a segmenter kind; `N.A.` for the run without a
/// segmentation model.
pub fn arm_label(kind: SegmenterKind) -> &'static str {
    match kind {
        SegmenterKind::None => "N.A.",
        other => other.as_str(),
    }
}

pub fn masked_mean(x: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    let (s, n) = x
        .iter()
        .zip(mask)
        .filter(|(v, &m)| m && v.is_finite())
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    s / n as f64
}

/// Annulus around the largest fallback component: radii between the 5th and
/// 95th percentile of the component's distances to its own centroid.
pub fn fallback_annulus(b0: &ImageSlice) -> Option<(Array2<bool>, (f64, f64))> {
    let prior = fallback_segment(b0);
    let comp = prior.channel(0).mapv(|v| v > 0.5);
    let center = mask_centroid(&comp)?;
    let mut radii: Vec<f64> = comp
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((r, c), _)| ((r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2)).sqrt())
        .collect();
    radii.sort_by(f64::total_cmp);
    let pick = |q: f64| radii[((radii.len() - 1) as f64 * q).round() as usize];
    let (r_in, r_out) = (pick(0.05), pick(0.95));
    let mask = Array2::from_shape_fn(comp.dim(), |(r, c)| {
        let d = ((r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2)).sqrt();
        d >= r_in && d <= r_out
    });
    mask.iter().any(|&m| m).then_some((mask, center))
}

pub fn slice_metrics(
    case: &str,
    index: usize,
    method: &str,
    reference: &ImageSlice,
    test: &ImageSlice,
    myo: &Array2<bool>,
    extractor: &dyn FeatureExtractor,
) -> Result<SliceMetrics> {
    Ok(SliceMetrics {
        case: case.to_string(),
        slice: index,
        method: method.to_string(),
        psnr: psnr(&reference.pixels, &test.pixels)?,
        ssim: ssim(&reference.pixels, &test.pixels)?,
        perceptual: perceptual_distance(&reference.pixels, &test.pixels, Some(extractor))?,
        myo_mae: masked_mae(&reference.pixels, &test.pixels, myo)?,
    })
}

#[derive(Serialize)]
struct ProfileRow {
    spoke_id: usize,
    depth: f64,
    ha: f64,
    slope: f64,
    intercept: f64,
    r_squared: f64,
    rmse: f64,
}

fn write_profiles_csv(path: &Path, profiles: &[LineProfile]) -> Result<()> {
    let rows: Vec<ProfileRow> = profiles
        .iter()
        .flat_map(|p| {
            p.depths.iter().zip(&p.ha).map(move |(&depth, &ha)| ProfileRow {
                spoke_id: p.spoke_id,
                depth,
                ha,
                slope: p.slope,
                intercept: p.intercept,
                r_squared: p.r_squared,
                rmse: p.rmse,
            })
        })
        .collect();
    if rows.is_empty() {
        return crate::store::write_text(path, "spoke_id,depth,ha,slope,intercept,r_squared,rmse\n");
    }
    write_csv(path, &rows)
}

/// Regression summaries of one `profiles.csv`, keyed by spoke.
pub fn read_profiles_csv(path: &Path) -> Result<Vec<LineProfile>> {
    #[derive(Deserialize)]
    struct Row {
        spoke_id: usize,
        depth: f64,
        ha: f64,
        slope: f64,
        intercept: f64,
        r_squared: f64,
        rmse: f64,
    }
    let mut out: Vec<LineProfile> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize::<Row>() {
        let row = row?;
        match out.last_mut() {
            Some(p) if p.spoke_id == row.spoke_id => {
                p.depths.push(row.depth);
                p.ha.push(row.ha);
            }
            _ => out.push(LineProfile {
                spoke_id: row.spoke_id,
                depths: vec![row.depth],
                ha: vec![row.ha],
                slope: row.slope,
                intercept: row.intercept,
                r_squared: row.r_squared,
                rmse: row.rmse,
            }),
        }
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    csv::Reader::from_path(path)?.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

/// `metrics.csv`, `metrics.jsonl` and `summary.csv`.
pub fn write_metric_reports(dir: &Path, rows: &[SliceMetrics]) -> Result<()> {
    write_csv(&dir.join("metrics.csv"), rows)?;
    let mut jsonl = String::new();
    for r in rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    crate::store::write_text(&dir.join("metrics.jsonl"), &jsonl)?;
    write_csv(&dir.join("summary.csv"), &summarize(rows))
}

/// Per metric, the best method by mean against every other method.
pub fn significance(rows: &[SliceMetrics]) -> Result<Vec<Significance>> {
    type Getter = fn(&SliceMetrics) -> f64;
    let metrics: [(&str, Getter, bool); 4] = [
        ("psnr", |r| r.psnr, true),
        ("ssim", |r| r.ssim, true),
        ("perceptual", |r| r.perceptual, false),
        ("myo_mae", |r| r.myo_mae, false),
    ];
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = Vec::new();
    for (name, get, higher) in metrics {
        let values = |m: &str| -> Vec<f64> {
            rows.iter().filter(|r| r.method == m).map(get).filter(|v| v.is_finite()).collect()
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let Some(best) = methods
            .iter()
            .copied()
            .filter(|m| !values(m).is_empty())
            .max_by(|a, b| {
                let (ma, mb) = (mean(&values(a)), mean(&values(b)));
                if higher {
                    ma.total_cmp(&mb)
                } else {
                    mb.total_cmp(&ma)
                }
            })
        else {
            continue;
        };
        for other in methods.iter().copied().filter(|m| *m != best) {
            let (a, b) = (values(best), values(other));
            if b.is_empty() {
                continue;
            }
            let t = mann_whitney_u(&a, &b)?;
            out.push(Significance {
                metric: name.into(),
                best: best.into(),
                other: other.into(),
                u: t.u,
                p: t.p,
                exact: t.exact,
                significant: t.p < 0.05,
            });
        }
    }
    Ok(out)
}

/// Compares every 2-D float `*.npy` slice present in both directories.
pub fn evaluate_dirs(
    reference: &Path,
    test: &Path,
    mask: Option<&Array2<bool>>,
    extractor_seed: u64,
) -> Result<Vec<SliceMetrics>> {
    let extractor = RandomConvExtractor::new(extractor_seed);
    let mut rows = Vec::new();
    for rel in crate::store::walk_files(reference)? {
        if rel.extension().and_then(|e| e.to_str()) != Some("npy") || !test.join(&rel).exists() {
            continue;
        }
        // masks and priors share the directories; only 2-D float images compare
        let (Ok(a), Ok(b)) = (
            read_npy::<f64, ndarray::Ix2>(&reference.join(&rel)),
            read_npy::<f64, ndarray::Ix2>(&test.join(&rel)),
        ) else {
            continue;
        };
        let full = Array2::from_elem(a.dim(), true);
        let m = mask.unwrap_or(&full);
        let name = rel.with_extension("").to_string_lossy().into_owned();
        rows.push(slice_metrics(
            &name,
            rows.len(),
            "test",
            &ImageSlice::new(a),
            &ImageSlice::new(b),
            m,
            &extractor,
        )?);
    }
    Ok(rows)
}

/// Prior written for slice `index` of a case by the reconstruct stage.
pub fn load_prior(p: &Pipeline, case: &str, index: usize) -> Result<rsfr_core::semantics::SemanticPrior> {
    read_prior(&p.stage_dir(Stage::Reconstruct).join(case).join(slice_file("prior", index)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rsfr_core::dataset::{build_case, DatasetSpec};
    use rsfr_core::phantom::PhantomSpec;

    #[test]
    fn fallback_annulus_overlaps_the_myocardium() {
        let spec = DatasetSpec {
            n_cases: 1,
            jitter: false,
            base: PhantomSpec::default(),
            ..DatasetSpec::default()
        };
        let case = build_case(&spec, 0).unwrap();
        let (mask, center) = fallback_annulus(&case.samples[0].gt).unwrap();
        let myo = case.myo_mask();
        let inter = mask.iter().zip(myo).filter(|(a, b)| **a && **b).count() as f64;
        let union = mask.iter().zip(myo).filter(|(a, b)| **a || **b).count() as f64;
        assert!(inter / union > 0.6, "IoU {}", inter / union);
        let truth = case.lv_center();
        assert!((center.0 - truth.0).abs() < 1.5 && (center.1 - truth.1).abs() < 1.5);
    }

    #[test]
    fn stage_order_is_acyclic() {
        for s in Stage::ALL {
            assert!(s.inputs().iter().all(|i| *i < s));
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }

    #[test]
    fn significance_prefers_the_better_method() {
        let row = |m: &str, i: usize, v: f64| SliceMetrics {
            case: "c".into(),
            slice: i,
            method: m.into(),
            psnr: 20.0 + v,
            ssim: v / 10.0,
            perceptual: 1.0 - v / 10.0,
            myo_mae: 1.0 - v / 10.0,
        };
        let rows: Vec<_> = (0..5).map(|i| row("a", i, i as f64)).chain((0..5).map(|i| row("b", i, 5.0 + i as f64))).collect();
        let sig = significance(&rows).unwrap();
        assert_eq!(sig.len(), 4);
        assert!(sig.iter().all(|s| s.best == "b" && s.other == "a" && s.exact && s.significant));
        assert_eq!(sig[0].u, 25.0);
        assert_eq!(sig[2].u, 0.0);
    }
}
