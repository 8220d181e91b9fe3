//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use rsfr_core::array_io::{read_mask, read_npy};
use rsfr_core::image::ImageSlice;
use rsfr_core::kspace::{default_center_fraction, generate_mask, ACQUIRED_PE_LINES};
use rsfr_core::semantics::{MaskServiceClient, MaskServiceConfig, Segmenter, SegmenterKind};

use crate::config::{MaskMode, PipelineConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{evaluate_dirs, write_csv, Pipeline, Stage};
use crate::store::{read_slice, write_prior};

#[derive(Debug, Parser)]
#[command(name = "rsfr", version, about = "Coarse-to-fine cardiac DWI reconstruction pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML pipeline configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory. For `mask`, `segment` and
    /// `evaluate --ref/--test` it names the output file instead.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppresses progress lines on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulates training and held-out phantom cases.
    Simulate,
    /// Writes one undersampling mask as text, one 0/1 line per phase-encode line.
    Mask(MaskArgs),
    /// Trains both networks end to end (runs earlier stages as needed).
    Train,
    /// Coarse pass, segmentation and refinement of the held-out cases.
    Reconstruct,
    /// Computes a semantic prior for one stored image.
    Segment(SegmentArgs),
    /// Tensor fits, MD/FA/HA maps and HA line profiles.
    Postprocess(PostprocessArgs),
    /// Image-quality and DT metrics. With --ref and --test, compares two
    /// directories of `.npy` slices instead of running the pipeline.
    Evaluate(EvaluateArgs),
    /// Writes the figures of a completed run.
    Report,
    /// Runs every stage.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, default_value_t = 4)]
    pub af: u32,
    #[arg(long, default_value_t = ACQUIRED_PE_LINES)]
    pub n_pe: usize,
    /// Defaults to 0.08, or 0.04 at af 8.
    #[arg(long)]
    pub center_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Normalised image as `.npy`; the prior `(3, h, w)` goes to `--out`.
    #[arg(long, visible_alias = "in")]
    pub input: PathBuf,
    /// none, fallback, reference or foundation_model.
    #[arg(long, default_value = "fallback")]
    pub kind: SegmenterKind,
    /// Boolean `.npy` mask for kind=reference.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Mask-service endpoint; defaults to the RSFR_MASK_SERVICE variable.
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// reference or fallback.
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "ref", requires = "test")]
    pub reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    pub test: Option<PathBuf>,
    /// Boolean `.npy` mask for the masked MAE; the whole image otherwise.
    /// The report CSV goes to `--out` (default `report.csv`).
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Prints the resolved configuration as TOML and exits.
    #[arg(long)]
    pub dump_config: bool,
    /// Overrides the configured segmenter kind.
    #[arg(long)]
    pub segmenter: Option<SegmenterKind>,
}

/// Loads the config file, if any, and applies the global overrides.
pub fn load_config(global: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run_stages(cfg: &PipelineConfig, last: Stage, quiet: bool) -> Result<()> {
    let mut p = Pipeline::new(cfg)?;
    if quiet {
        p = p.quiet();
    }
    let manifest = p.run_until(last)?;
    if !quiet {
        eprintln!("manifest {} ({})", p.root.join(crate::manifest::MANIFEST_FILE).display(), &manifest.digest()[..16]);
    }
    Ok(())
}

fn load_image(path: &Path) -> Result<ImageSlice> {
    if let Ok((slice, _)) = read_slice(path) {
        return Ok(slice);
    }
    let pixels: Array2<f64> = read_npy(path)?;
    if !pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(CliError::Config(format!("{}: image is not normalised to [0, 1]", path.display())));
    }
    Ok(ImageSlice::new(pixels))
}

fn output_file(global: &GlobalArgs, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn segment(args: &SegmentArgs, out: &Path) -> Result<()> {
    let image = load_image(&args.input)?;
    let segmenter = match args.kind {
        SegmenterKind::None => Segmenter::None,
        SegmenterKind::Fallback => Segmenter::Fallback,
        SegmenterKind::Reference => {
            let path = args
                .mask
                .as_ref()
                .ok_or_else(|| CliError::Config("kind=reference needs --mask".into()))?;
            Segmenter::Reference(std::sync::Arc::new(read_mask(path)?))
        }
        SegmenterKind::FoundationModel => {
            let config = match &args.endpoint {
                Some(e) => MaskServiceConfig::new(e.clone()),
                None => MaskServiceConfig::from_env()?,
            };
            Segmenter::FoundationModel(MaskServiceClient::new(config))
        }
        SegmenterKind::Trained => return Err(CliError::Config("the trained segmenter is library-only".into())),
    };
    let prior = segmenter.segment_unchecked(&image)?;
    write_prior(out, &prior)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let quiet = cli.global.quiet;
    match cli.command {
        Command::Simulate => run_stages(&cfg, Stage::Simulate, quiet),
        Command::Train => run_stages(&cfg, Stage::Train, quiet),
        Command::Reconstruct => run_stages(&cfg, Stage::Reconstruct, quiet),
        Command::Postprocess(a) => {
            if let Some(m) = a.mask_mode {
                cfg.eval.mask_mode = m;
            }
            run_stages(&cfg, Stage::Postprocess, quiet)
        }
        Command::Report => run_stages(&cfg, Stage::Report, quiet),
        Command::Run(a) => {
            if let Some(k) = a.segmenter {
                cfg.segmenter = k;
            }
            if a.dump_config {
                print!("{}", cfg.resolved().to_toml()?);
                return Ok(());
            }
            run_stages(&cfg, Stage::Report, quiet)
        }
        Command::Mask(a) => {
            let cf = a.center_fraction.unwrap_or_else(|| default_center_fraction(a.af));
            let mask = generate_mask(a.n_pe, a.af, cf, cfg.seed)?;
            mask.write(&output_file(&cli.global, "mask.txt"))?;
            Ok(())
        }
        Command::Segment(a) => segment(&a, &output_file(&cli.global, "prior.npy")),
        Command::Evaluate(a) => match (&a.reference, &a.test) {
            (Some(r), Some(t)) => {
                let mask = a.mask.as_deref().map(read_mask).transpose()?;
                let rows = evaluate_dirs(r, t, mask.as_ref(), cfg.eval.extractor_seed)?;
                if rows.is_empty() {
                    return Err(CliError::MissingInput {
                        stage: "evaluate".into(),
                        what: "matching .npy files".into(),
                    });
                }
                write_csv(&output_file(&cli.global, "report.csv"), &rows)
            }
            _ => run_stages(&cfg, Stage::Evaluate, quiet),
        },
    }
}
