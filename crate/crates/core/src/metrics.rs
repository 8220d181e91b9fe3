//! Image-quality and diffusion-parameter accuracy metrics, plus the
//! Mann-Whitney U test used to compare methods.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::dtfit::DtParams;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty mask")]
    EmptyMask,
    #[error("empty sample")]
    EmptySample,
    #[error("no feature extractor configured")]
    NoExtractor,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Peak used for PSNR and the SSIM stabilisers on normalised slices.
pub const PEAK: f64 = 1.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

pub fn mse(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    check_shape(reference, test)?;
    let mut acc = 0.0;
    Zip::from(reference).and(test).for_each(|a, b| acc += (a - b).powi(2));
    Ok(acc / reference.len() as f64)
}

/// `10 log10(PEAK² / MSE)` in dB. Identical images give `+inf`.
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter keeping only fully-covered ("valid") windows.
fn filter_valid(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = x.dim();
    let k = w.len();
    let (oh, ow) = (h + 1 - k, wd + 1 - k);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            tmp[[r, c]] = (0..k).map(|j| w[j] * x[[r, c + j]]).sum();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..k).map(|i| w[i] * tmp[[r + i, c]]).sum();
        }
    }
    out
}

/// Per-window SSIM map (7×7 Gaussian, σ = 1.5, K1 = 0.01, K2 = 0.03, peak 1).
pub fn ssim_map(reference: &Array2<f64>, test: &Array2<f64>) -> Result<Array2<f64>> {
    check_shape(reference, test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::ShapeMismatch(reference.dim(), (SSIM_WINDOW, SSIM_WINDOW)));
    }
    let win = gaussian_window();
    let mu_x = filter_valid(reference, &win);
    let mu_y = filter_valid(test, &win);
    let xx = filter_valid(&(reference * reference), &win);
    let yy = filter_valid(&(test * test), &win);
    let xy = filter_valid(&(reference * test), &win);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let mut map = Array2::zeros(mu_x.dim());
    Zip::from(&mut map)
        .and(&mu_x)
        .and(&mu_y)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|m, &mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            *m = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(map)
}

/// Mean SSIM over valid windows.
pub fn ssim(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    let map = ssim_map(reference, test)?;
    Ok(map.mean().expect("non-empty"))
}

/// Frozen, deterministic feature stack used by the perceptual metrics.
pub trait FeatureExtractor {
    /// Activations per stage, each `(height, width, channels)`.
    fn features(&self, image: &Array2<f64>) -> Vec<Array3<f64>>;
}

fn unit_normalize(f: &Array3<f64>) -> Array3<f64> {
    let mut out = f.clone();
    for mut lane in out.lanes_mut(ndarray::Axis(2)) {
        let n = lane.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
        lane.mapv_inplace(|v| v / n);
    }
    out
}

/// Feature-space distance: per stage, channel-normalised activations are
/// compared by squared L2 and averaged over positions; stages are summed.
/// Not numerically comparable to published LPIPS values.
pub fn perceptual_distance(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<f64> {
    check_shape(reference, test)?;
    let ex = extractor.ok_or(MetricsError::NoExtractor)?;
    let fa = ex.features(reference);
    let fb = ex.features(test);
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(&fb) {
        let (na, nb) = (unit_normalize(a), unit_normalize(b));
        let positions = (a.dim().0 * a.dim().1) as f64;
        let sq: f64 = na.iter().zip(nb.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        total += sq / positions;
    }
    Ok(total)
}

/// Absolute errors of global (in-mask mean) MD and FA, and of the HA gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtMae {
    pub md: f64,
    pub fa: f64,
    pub ha_gradient: f64,
}

fn masked_mean(x: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    Zip::from(x).and(mask).for_each(|&v, &m| {
        if m && v.is_finite() {
            s += v;
            n += 1;
        }
    });
    s / n as f64
}

/// `|mean_mask(ref) - mean_mask(test)|` per parameter.
pub fn mae_global(reference: &DtParams, test: &DtParams, mask: &Array2<bool>) -> Result<DtMae> {
    if !mask.iter().any(|&m| m) {
        return Err(MetricsError::EmptyMask);
    }
    Ok(DtMae {
        md: (masked_mean(&reference.md, mask) - masked_mean(&test.md, mask)).abs(),
        fa: (masked_mean(&reference.fa, mask) - masked_mean(&test.fa, mask)).abs(),
        ha_gradient: (reference.ha_gradient - test.ha_gradient).abs(),
    })
}

/// Mean absolute pixel error inside `mask`.
pub fn masked_mae(reference: &Array2<f64>, test: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_shape(reference, test)?;
    if mask.dim() != reference.dim() {
        return Err(MetricsError::ShapeMismatch(reference.dim(), mask.dim()));
    }
    let (mut s, mut n) = (0.0, 0usize);
    Zip::from(reference).and(test).and(mask).for_each(|&a, &b, &m| {
        if m {
            s += (a - b).abs();
            n += 1;
        }
    });
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(s / n as f64)
}

/// Largest sample size (per group) handled by the exact permutation test.
pub const MWU_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U statistic of `sample_a`.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of the pooled sample; returns ranks and tie sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Mann-Whitney U test.
///
/// For both samples of size at most [`MWU_EXACT_MAX`] the p-value is exact
/// under the permutation distribution of the observed mid-ranks, as
/// `min(1, 2 min(P(U <= u), P(U >= u)))`. Larger samples use the normal
/// approximation with tie and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    if ties.len() == 1 {
        return Ok(MannWhitney {
            u,
            p: 1.0,
            exact: na <= MWU_EXACT_MAX && nb <= MWU_EXACT_MAX,
        });
    }
    if na <= MWU_EXACT_MAX && nb <= MWU_EXACT_MAX {
        return Ok(MannWhitney {
            u,
            p: exact_p(&ranks, na, rank_sum_a),
            exact: true,
        });
    }
    let n = (na + nb) as f64;
    let mean = (na * nb) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0, exact: false });
    }
    let dev = ((u - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(MannWhitney { u, p, exact: false })
}

/// Counts subsets of size `na` by doubled rank sum (mid-ranks are multiples
/// of one half).
fn exact_p(ranks: &[f64], na: usize, observed_sum: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled sum s
    let mut counts = vec![vec![0f64; max_sum + 1]; na + 1];
    counts[0][0] = 1.0;
    for &d in &doubled {
        for k in (1..=na).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (d..=max_sum).rev() {
                cur[s] += prev[s - d];
            }
        }
    }
    let obs = (2.0 * observed_sum).round() as usize;
    let total: f64 = counts[na].iter().sum();
    let le: f64 = counts[na][..=obs].iter().sum();
    let ge: f64 = counts[na][obs..].iter().sum();
    (2.0 * le.min(ge) / total).min(1.0)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean (std)` with a fixed number of decimals, e.g. `0.871 (0.038)`.
pub fn format_mean_std(values: &[f64], decimals: usize) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.decimals$} ({s:.decimals$})")
}

/// Finite values only, plus how many `+inf` PSNR sentinels were dropped.
pub fn finite_values(values: &[f64]) -> (Vec<f64>, usize) {
    let kept: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let dropped = values.len() - kept.len();
    (kept, dropped)
}

/// One row of the per-slice image-quality log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub case: String,
    pub slice: usize,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Mean absolute error inside the myocardium mask.
    pub myo_mae: f64,
}

/// One row of the per-case DT accuracy log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub method: String,
    pub mae_md: f64,
    pub mae_fa: f64,
    pub mae_ha_gradient: f64,
}

/// Aggregated `mean (std)` strings for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_slices: usize,
    pub psnr: String,
    pub ssim: String,
    pub perceptual: String,
    pub myo_mae: String,
    /// Slices excluded from the PSNR mean as identical (+inf).
    pub psnr_infinite: usize,
}

/// Table-style summary per method, in first-appearance order.
pub fn summarize(rows: &[SliceMetrics]) -> Vec<MethodSummary> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let sel: Vec<&SliceMetrics> = rows.iter().filter(|r| r.method == m).collect();
            let (psnr, inf) = finite_values(&sel.iter().map(|r| r.psnr).collect::<Vec<_>>());
            MethodSummary {
                method: m.to_string(),
                n_slices: sel.len(),
                psnr: format_mean_std(&psnr, 2),
                ssim: format_mean_std(&sel.iter().map(|r| r.ssim).collect::<Vec<_>>(), 3),
                perceptual: format_mean_std(&sel.iter().map(|r| r.perceptual).collect::<Vec<_>>(), 4),
                myo_mae: format_mean_std(&sel.iter().map(|r| r.myo_mae).collect::<Vec<_>>(), 4),
                psnr_infinite: inf,
            }
        })
        .collect()
}
