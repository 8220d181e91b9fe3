//! Static SVG figures of a completed run plus `figures.json` holding the
//! values drawn in them.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use plotters::coord::Shift;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use rsfr_core::dtfit::LineProfile;
use rsfr_core::metrics::{mean_std, CaseMetrics};

use crate::error::{CliError, Result};
use crate::pipeline::{load_prior, read_csv, read_profiles_csv, Pipeline, Stage, METHODS};
use crate::store::write_json;

pub const RECONSTRUCTION_SVG: &str = "reconstruction.svg";
pub const DT_MAPS_SVG: &str = "dt_maps.svg";
pub const HA_PROFILE_SVG: &str = "ha_profile.svg";
pub const MAE_BARS_SVG: &str = "mae_bars.svg";
pub const FIGURES_JSON: &str = "figures.json";

const PANEL: u32 = 220;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionFigure {
    pub file: String,
    pub case: String,
    pub slice: usize,
    /// Colour-scale maximum of each error panel: `max |gt - method|`.
    pub error_max: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtMapsFigure {
    pub file: String,
    pub case: String,
    pub md_range: (f64, f64),
    pub fa_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaProfileFigure {
    pub file: String,
    pub case: String,
    pub method: String,
    pub spoke_id: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub rmse: f64,
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeBarsFigure {
    pub file: String,
    /// Per method: mean over cases of the MD, FA and HA-gradient MAE.
    pub values: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figures {
    pub reconstruction: ReconstructionFigure,
    pub dt_maps: DtMapsFigure,
    pub ha_profile: HaProfileFigure,
    pub mae_bars: MaeBarsFigure,
}

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Plot(e.to_string())
}

fn gray(v: f64) -> RGBColor {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RGBColor(g, g, g)
}

/// Black, red, yellow, white.
fn heat(v: f64) -> RGBColor {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    RGBColor(ch(v), ch(v - 1.0), ch(v - 2.0))
}

/// Blue, white, red over `[-1, 1]`.
fn diverging(v: f64) -> RGBColor {
    let v = v.clamp(-1.0, 1.0);
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    if v < 0.0 {
        RGBColor(ch(1.0 + v), ch(1.0 + v), 255)
    } else {
        RGBColor(255, ch(1.0 - v), ch(1.0 - v))
    }
}

const UNDEFINED: RGBColor = RGBColor(200, 200, 200);

fn finite_range(x: &Array2<f64>, mask: &Array2<bool>) -> (f64, f64) {
    x.iter()
        .zip(mask)
        .filter(|(v, &m)| m && v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)))
}

/// One image panel; `color` maps a pixel value, `None` marks it undefined.
fn draw_image(
    area: &DrawingArea<SVGBackend<'_>, Shift>,
    title: &str,
    x: &Array2<f64>,
    color: impl Fn(f64) -> Option<RGBColor>,
) -> Result<()> {
    let (h, w) = x.dim();
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 14))
        .margin(4)
        .build_cartesian_2d(0.0..w as f64, 0.0..h as f64)
        .map_err(plot_err)?;
    chart
        .draw_series(x.indexed_iter().map(|((r, c), &v)| {
            let y = (h - 1 - r) as f64;
            let fill = color(v).unwrap_or(UNDEFINED);
            Rectangle::new([(c as f64, y), (c as f64 + 1.0, y + 1.0)], fill.filled())
        }))
        .map_err(plot_err)?;
    Ok(())
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn reconstruction_figure(p: &Pipeline, dir: &Path) -> Result<ReconstructionFigure> {
    let cases = p.test_cases()?;
    let case = cases.first().ok_or_else(|| CliError::MissingInput {
        stage: "report".into(),
        what: "test cases".into(),
    })?;
    let slice = p.cfg.eval.figure_slice.min(case.record.n_slices() - 1);
    let gt = &case.gt[slice].pixels;
    let path = dir.join(RECONSTRUCTION_SVG);
    let root = SVGBackend::new(&path, (PANEL * 4, PANEL * 2)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 4));
    draw_image(&panels[0], "reference", gt, |v| Some(gray(v)))?;
    let prior = load_prior(p, &case.record.name(), slice)?;
    draw_image(&panels[4], "semantic prior", &prior.channel(0), |v| Some(gray(v)))?;
    let mut error_max = BTreeMap::new();
    for (k, method) in METHODS.iter().enumerate() {
        let x = &p.method_slices(case, method)?[slice].pixels;
        draw_image(&panels[k + 1], method, x, |v| Some(gray(v)))?;
        let err = (gt - x).mapv(f64::abs);
        let emax = max_abs_diff(gt, x);
        let scale = if emax > 0.0 { emax } else { 1.0 };
        draw_image(&panels[k + 5], &format!("|error| {method} (max {emax:.3})"), &err, |v| Some(heat(v / scale)))?;
        error_max.insert(method.to_string(), emax);
    }
    root.present().map_err(plot_err)?;
    Ok(ReconstructionFigure {
        file: RECONSTRUCTION_SVG.into(),
        case: case.record.name(),
        slice,
        error_max,
    })
}

fn dt_maps_figure(p: &Pipeline, dir: &Path, case: &str) -> Result<DtMapsFigure> {
    let methods = ["gt", "zf", "refined"];
    let params = methods
        .iter()
        .map(|m| p.load_dt_params(case, m).map(|(params, _)| params))
        .collect::<Result<Vec<_>>>()?;
    let mask = &params[0].mask;
    let (md_lo, md_hi) = finite_range(&params[0].md, mask);
    let (fa_lo, fa_hi) = finite_range(&params[0].fa, mask);
    let norm = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let path = dir.join(DT_MAPS_SVG);
    let root = SVGBackend::new(&path, (PANEL * 3, PANEL * 2)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 3));
    for (k, (m, dp)) in methods.iter().zip(&params).enumerate() {
        let md = Array2::from_shape_fn(dp.md.dim(), |i| if mask[i] { dp.md[i] } else { f64::NAN });
        let fa = Array2::from_shape_fn(dp.fa.dim(), |i| if mask[i] { dp.fa[i] } else { f64::NAN });
        draw_image(&panels[k], &format!("MD {m}"), &md, |v| {
            v.is_finite().then(|| heat(norm(v, md_lo, md_hi)))
        })?;
        draw_image(&panels[k + 3], &format!("FA {m}"), &fa, |v| {
            v.is_finite().then(|| heat(norm(v, fa_lo, fa_hi)))
        })?;
    }
    root.present().map_err(plot_err)?;
    Ok(DtMapsFigure {
        file: DT_MAPS_SVG.into(),
        case: case.into(),
        md_range: (md_lo, md_hi),
        fa_range: (fa_lo, fa_hi),
    })
}

/// Spoke with the median R² among those of `profiles`.
pub fn representative_profile(profiles: &[LineProfile]) -> Option<&LineProfile> {
    let mut sorted: Vec<&LineProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.r_squared.total_cmp(&b.r_squared).then(a.spoke_id.cmp(&b.spoke_id)));
    sorted.get(sorted.len() / 2).copied()
}

pub fn profile_annotation(p: &LineProfile) -> String {
    format!("R² = {:.4}, RMSE = {:.3}°", p.r_squared, p.rmse)
}

fn ha_profile_figure(p: &Pipeline, dir: &Path, case: &str) -> Result<HaProfileFigure> {
    let method = "refined";
    let (params, _) = p.load_dt_params(case, method)?;
    let csv = p.stage_dir(Stage::Postprocess).join(case).join(method).join("profiles.csv");
    let profiles = read_profiles_csv(&csv)?;
    let prof = representative_profile(&profiles).ok_or_else(|| CliError::MissingInput {
        stage: "report".into(),
        what: format!("HA line profiles for {case}/{method}"),
    })?;
    let path = dir.join(HA_PROFILE_SVG);
    let root = SVGBackend::new(&path, (PANEL * 3, PANEL + 80)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(PANEL + 40);
    let ha = Array2::from_shape_fn(params.ha.dim(), |i| if params.mask[i] { params.ha[i] } else { f64::NAN });
    draw_image(&left, &format!("HA {method} (deg)"), &ha, |v| v.is_finite().then(|| diverging(v / 90.0)))?;
    let annotation = profile_annotation(prof);
    let mut chart = ChartBuilder::on(&right)
        .caption(format!("HA line profile, spoke {}", prof.spoke_id), ("sans-serif", 14))
        .margin(8)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..1.0, -90.0..90.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("normalised wall depth")
        .y_desc("HA (deg)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(prof.depths.iter().zip(&prof.ha).map(|(&d, &h)| Circle::new((d, h), 3, BLUE.filled())))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            [0.0, 1.0].map(|d| (d, prof.intercept + prof.slope * d)),
            RED.stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(Text::new(annotation.clone(), (0.05, 80.0), ("sans-serif", 13))))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(HaProfileFigure {
        file: HA_PROFILE_SVG.into(),
        case: case.into(),
        method: method.into(),
        spoke_id: prof.spoke_id,
        slope: prof.slope,
        intercept: prof.intercept,
        r_squared: prof.r_squared,
        rmse: prof.rmse,
        annotation,
    })
}

fn mae_bars_figure(p: &Pipeline, dir: &Path) -> Result<MaeBarsFigure> {
    let rows: Vec<CaseMetrics> = read_csv(&p.stage_dir(Stage::Evaluate).join("dt_mae.csv"))?;
    let mut values = BTreeMap::new();
    for m in METHODS {
        let sel: Vec<&CaseMetrics> = rows.iter().filter(|r| r.method == m).collect();
        let mean = |f: fn(&CaseMetrics) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>()).0;
        values.insert(m.to_string(), [mean(|r| r.mae_md), mean(|r| r.mae_fa), mean(|r| r.mae_ha_gradient)]);
    }
    let path = dir.join(MAE_BARS_SVG);
    let root = SVGBackend::new(&path, (PANEL * 4, PANEL + 40)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, 3));
    let colors = [RGBColor(120, 120, 120), RGBColor(70, 130, 180), RGBColor(200, 60, 60)];
    for (k, title) in ["MAE MD (mm²/s)", "MAE FA", "MAE HA gradient (deg)"].iter().enumerate() {
        let top = values.values().map(|v| v[k]).filter(|v| v.is_finite()).fold(0.0, f64::max);
        let top = if top > 0.0 { top * 1.15 } else { 1.0 };
        let mut chart = ChartBuilder::on(&panels[k])
            .caption(*title, ("sans-serif", 14))
            .margin(8)
            .x_label_area_size(24)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..METHODS.len() as f64, 0.0..top)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(0)
            .y_label_formatter(&|v| format!("{v:.2e}"))
            .draw()
            .map_err(plot_err)?;
        for (i, m) in METHODS.iter().enumerate() {
            let v = values[*m][k];
            let v = if v.is_finite() { v } else { 0.0 };
            let x0 = i as f64 + 0.15;
            chart
                .draw_series(std::iter::once(Rectangle::new([(x0, 0.0), (x0 + 0.7, v)], colors[i].filled())))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Text::new(m.to_string(), (x0 + 0.1, top * 0.95), ("sans-serif", 12))))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(MaeBarsFigure {
        file: MAE_BARS_SVG.into(),
        values,
    })
}

/// Draws all four figures into `dir`.
pub fn render(p: &Pipeline, dir: &Path) -> Result<Figures> {
    let reconstruction = reconstruction_figure(p, dir)?;
    let case = reconstruction.case.clone();
    let figures = Figures {
        dt_maps: dt_maps_figure(p, dir, &case)?,
        ha_profile: ha_profile_figure(p, dir, &case)?,
        mae_bars: mae_bars_figure(p, dir)?,
        reconstruction,
    };
    write_json(&dir.join(FIGURES_JSON), &figures)?;
    Ok(figures)
}
