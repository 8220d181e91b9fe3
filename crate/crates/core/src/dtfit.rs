//! Diffusion-tensor post-processing: log-linear least-squares tensor
//! estimation, eigen-decomposition, MD/FA/HA maps and transmural helix-angle
//! line profiles.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageSlice;
use crate::phantom::WallFrame;

/// b-values at or below this are treated as non-weighted reference images.
pub const B0_THRESHOLD: f64 = 1.0;
pub const DEFAULT_SPOKES: usize = 36;
pub const DEFAULT_SAMPLES_PER_SPOKE: usize = 20;

#[derive(Debug, Error)]
pub enum DtFitError {
    #[error("series is empty")]
    EmptySeries,
    #[error("series metadata lengths disagree: {slices} slices, {bvals} b-values, {dirs} directions")]
    MetadataLength { slices: usize, bvals: usize, dirs: usize },
    #[error("slice {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("series has no b0 image")]
    NoReference,
    #[error("weighted directions do not span the six tensor coefficients (rank {0})")]
    RankDeficient(usize),
    #[error("mask shape {got:?} does not match image shape {expected:?}")]
    MaskShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("no valid line profiles")]
    NoValidProfiles,
}

pub type Result<T> = std::result::Result<T, DtFitError>;

/// Symmetric 3x3 tensor stored as `[xx, yy, zz, xy, xz, yz]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymTensor(pub [f64; 6]);

impl SymTensor {
    pub fn zero() -> Self {
        Self([0.0; 6])
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self([
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            0.5 * (m[(1, 2)] + m[(2, 1)]),
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// `g^T D g`
    pub fn quadratic_form(&self, g: &[f64; 3]) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        let [x, y, z] = *g;
        xx * x * x + yy * y * y + zz * z * z + 2.0 * (xy * x * y + xz * x * z + yz * y * z)
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }
}

/// A set of diffusion-weighted images with their encoding.
#[derive(Debug, Clone)]
pub struct DwiSeries {
    pub slices: Vec<ImageSlice>,
    /// s/mm², one per slice
    pub b_values: Vec<f64>,
    /// Unit gradient directions, zero vector for b0 images.
    pub directions: Vec<[f64; 3]>,
}

/// Row of the log-linear design matrix: `b [gx², gy², gz², 2gxgy, 2gxgz, 2gygz]`.
pub fn design_row(b: f64, g: &[f64; 3]) -> [f64; 6] {
    let [x, y, z] = *g;
    [
        b * x * x,
        b * y * y,
        b * z * z,
        2.0 * b * x * y,
        2.0 * b * x * z,
        2.0 * b * y * z,
    ]
}

fn design_matrix(rows: &[[f64; 6]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j])
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > max * 1e-10).count()
}

impl DwiSeries {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.slices.first().map(|s| s.dim())
    }

    pub fn reference_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.b_values[i] <= B0_THRESHOLD).collect()
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.b_values[i] > B0_THRESHOLD).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape().ok_or(DtFitError::EmptySeries)?;
        if self.b_values.len() != self.len() || self.directions.len() != self.len() {
            return Err(DtFitError::MetadataLength {
                slices: self.len(),
                bvals: self.b_values.len(),
                dirs: self.directions.len(),
            });
        }
        for (index, s) in self.slices.iter().enumerate() {
            if s.dim() != shape {
                return Err(DtFitError::ShapeMismatch {
                    index,
                    got: s.dim(),
                    expected: shape,
                });
            }
        }
        if self.reference_indices().is_empty() {
            return Err(DtFitError::NoReference);
        }
        let rows: Vec<[f64; 6]> = self
            .weighted_indices()
            .iter()
            .map(|&i| design_row(self.b_values[i], &self.directions[i]))
            .collect();
        let rank = numerical_rank(&design_matrix(&rows));
        if rank < 6 {
            return Err(DtFitError::RankDeficient(rank));
        }
        Ok(())
    }

    /// Every slice mapped through `f`, encoding unchanged.
    pub fn map_slices(&self, f: impl FnMut(&ImageSlice) -> ImageSlice) -> Self {
        Self {
            slices: self.slices.iter().map(f).collect(),
            b_values: self.b_values.clone(),
            directions: self.directions.clone(),
        }
    }
}

/// Fitted tensor field.
#[derive(Debug, Clone)]
pub struct DiffusionTensorMap {
    pub shape: (usize, usize),
    /// Row-major; zero where not fitted.
    pub tensors: Vec<SymTensor>,
    /// RMS log-signal misfit; NaN where not fitted.
    pub residual: Array2<f64>,
    pub myo_mask: Array2<bool>,
    /// In-mask pixels where the fit was well posed.
    pub valid: Array2<bool>,
}

impl DiffusionTensorMap {
    pub fn tensor(&self, row: usize, col: usize) -> &SymTensor {
        &self.tensors[row * self.shape.1 + col]
    }
}

fn solve_pixel(rows: &[[f64; 6]], y: &[f64]) -> Option<([f64; 6], f64)> {
    let a = design_matrix(rows);
    if numerical_rank(&a) < 6 {
        return None;
    }
    let svd = a.clone().svd(true, true);
    let sol = svd.solve(&DVector::from_column_slice(y), 1e-14).ok()?;
    let mut d = [0.0; 6];
    d.copy_from_slice(sol.as_slice());
    Some((d, rms_misfit(rows, y, &d)))
}

fn rms_misfit(rows: &[[f64; 6]], y: &[f64], d: &[f64; 6]) -> f64 {
    let ss: f64 = rows
        .iter()
        .zip(y)
        .map(|(r, &yi)| {
            let pred: f64 = r.iter().zip(d).map(|(a, b)| a * b).sum();
            (pred - yi).powi(2)
        })
        .sum();
    (ss / rows.len() as f64).sqrt()
}

/// Per-pixel ordinary least squares on `-ln(S/S0) = b g^T D g`.
///
/// `S0` is the mean of the b0 images. Measurements with `S <= 0` are dropped
/// for that pixel only; pixels left without six independent measurements are
/// marked invalid.
pub fn fit_tensor_lls(series: &DwiSeries, mask: &Array2<bool>) -> Result<DiffusionTensorMap> {
    series.validate()?;
    let shape = series.shape().expect("validated");
    if mask.dim() != shape {
        return Err(DtFitError::MaskShape {
            got: mask.dim(),
            expected: shape,
        });
    }
    let refs = series.reference_indices();
    let weighted = series.weighted_indices();
    let rows: Vec<[f64; 6]> = weighted
        .iter()
        .map(|&i| design_row(series.b_values[i], &series.directions[i]))
        .collect();
    // Full-design pseudo-inverse, reused by every pixel with all measurements.
    let full = design_matrix(&rows);
    let pinv = full.clone().pseudo_inverse(1e-14).expect("non-negative epsilon");

    let mut tensors = vec![SymTensor::zero(); shape.0 * shape.1];
    let mut residual = Array2::from_elem(shape, f64::NAN);
    let mut valid = Array2::from_elem(shape, false);
    let mut y = Vec::with_capacity(weighted.len());
    for ((r, c), &inside) in mask.indexed_iter() {
        if !inside {
            continue;
        }
        let s0 = refs.iter().map(|&i| series.slices[i].pixels[[r, c]]).sum::<f64>() / refs.len() as f64;
        if !(s0 > 0.0) {
            continue;
        }
        y.clear();
        let mut all = true;
        for &i in &weighted {
            let s = series.slices[i].pixels[[r, c]];
            if s > 0.0 {
                y.push(-(s / s0).ln());
            } else {
                all = false;
                y.push(f64::NAN);
            }
        }
        let fitted = if all {
            let sol = &pinv * DVector::from_column_slice(&y);
            let mut d = [0.0; 6];
            d.copy_from_slice(sol.as_slice());
            Some((d, rms_misfit(&rows, &y, &d)))
        } else {
            let (kept_rows, kept_y): (Vec<[f64; 6]>, Vec<f64>) = rows
                .iter()
                .zip(&y)
                .filter(|(_, v)| v.is_finite())
                .map(|(r, v)| (*r, *v))
                .unzip();
            solve_pixel(&kept_rows, &kept_y)
        };
        if let Some((d, res)) = fitted {
            tensors[r * shape.1 + c] = SymTensor(d);
            residual[[r, c]] = res;
            valid[[r, c]] = true;
        }
    }
    Ok(DiffusionTensorMap {
        shape,
        tensors,
        residual,
        myo_mask: mask.clone(),
        valid,
    })
}

/// Eigen-decomposition with descending eigenvalues.
#[derive(Debug, Clone, Copy)]
pub struct Eigen {
    pub values: [f64; 3],
    /// Orthonormal; `vectors[k]` belongs to `values[k]`.
    pub vectors: [Vector3<f64>; 3],
}

/// Symmetric eigen-decomposition, eigenvalues sorted descending. Each
/// eigenvector is signed so its largest-magnitude component is positive;
/// helix-angle computation re-orients the primary vector in the wall frame.
pub fn eig_sorted(d: &SymTensor) -> Eigen {
    let eig = SymmetricEigen::new(d.to_matrix());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = [0.0; 3];
    let mut vectors = [Vector3::zeros(); 3];
    for (k, &i) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[i];
        let mut v: Vector3<f64> = eig.eigenvectors.column(i).into_owned();
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v = -v;
        }
        vectors[k] = v;
    }
    Eigen { values, vectors }
}

/// Eigenvalues with negatives clamped to zero.
pub fn psd_project(values: &[f64; 3]) -> [f64; 3] {
    values.map(|v| v.max(0.0))
}

/// Mean diffusivity, `tr(D) / 3`, on PSD-projected eigenvalues.
pub fn compute_md(values: &[f64; 3]) -> f64 {
    psd_project(values).iter().sum::<f64>() / 3.0
}

/// Fractional anisotropy on PSD-projected eigenvalues; 0 for the zero tensor.
pub fn compute_fa(values: &[f64; 3]) -> f64 {
    let l = psd_project(values);
    let md = l.iter().sum::<f64>() / 3.0;
    let norm = l.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    let dev = l.iter().map(|v| (v - md).powi(2)).sum::<f64>().sqrt();
    ((1.5f64).sqrt() * dev / norm).clamp(0.0, 1.0)
}

/// Below this in-plane projection length the helix angle is undefined.
const HA_PROJECTION_TOL: f64 = 1e-6;

/// Helix angle in degrees of the primary eigenvector `e1` at `pixel`.
///
/// `e1` is projected onto the wall-tangent plane; the angle is measured from
/// circumferential towards longitudinal in `[-90, 90]`. The eigenvector's
/// sign is irrelevant. Returns `None` where the projection vanishes (fibre
/// along the radial axis) or at the LV centre.
pub fn compute_ha(e1: &Vector3<f64>, pixel: (usize, usize), lv_center: (f64, f64)) -> Option<f64> {
    let frame = WallFrame::at((pixel.0 as f64, pixel.1 as f64), lv_center)?;
    let mut c = e1.dot(&frame.circumferential);
    let mut l = e1.dot(&frame.longitudinal);
    if c.hypot(l) < HA_PROJECTION_TOL * e1.norm() {
        return None;
    }
    if c < 0.0 {
        c = -c;
        l = -l;
    }
    if c == 0.0 {
        l = l.abs();
    }
    Some(l.atan2(c).to_degrees())
}

/// Parameter maps for one slice.
#[derive(Debug, Clone)]
pub struct DtParams {
    /// mm²/s
    pub md: Array2<f64>,
    pub fa: Array2<f64>,
    /// Degrees; NaN where undefined or outside the mask.
    pub ha: Array2<f64>,
    pub mask: Array2<bool>,
    /// Degrees per unit normalised wall depth; NaN if no spoke was usable.
    pub ha_gradient: f64,
}

/// Transmural HA samples along one radial spoke with its regression line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineProfile {
    pub spoke_id: usize,
    /// Normalised wall depths in `[0, 1]`, ascending.
    pub depths: Vec<f64>,
    pub ha: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ProfileSet {
    pub profiles: Vec<LineProfile>,
    /// Spokes dropped for intersecting fewer than three valid pixels.
    pub skipped: usize,
}

/// Ordinary least-squares line fit. A zero-variance response gives slope 0
/// and R² 0.
pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (intercept + slope * a)).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (slope, intercept, r_squared, (ss_res / n).sqrt())
}

fn nearest_pixel(p: (f64, f64), shape: (usize, usize)) -> Option<(usize, usize)> {
    let r = p.0.round();
    let c = p.1.round();
    if r < 0.0 || c < 0.0 || r >= shape.0 as f64 || c >= shape.1 as f64 {
        None
    } else {
        Some((r as usize, c as usize))
    }
}

/// First contiguous in-mask run along a ray, as (entry radius, exit radius).
fn wall_extent(mask: &Array2<bool>, center: (f64, f64), dir: (f64, f64)) -> Option<(f64, f64)> {
    const STEP: f64 = 0.01;
    let mut entry = None;
    let mut exit = None;
    let mut r = 0.0;
    loop {
        let Some(px) = nearest_pixel((center.0 + r * dir.0, center.1 + r * dir.1), mask.dim()) else {
            break;
        };
        if mask[px] {
            entry.get_or_insert(r);
            exit = Some(r);
        } else if entry.is_some() {
            break;
        }
        r += STEP;
    }
    Some((entry?, exit?))
}

/// HA sampled at uniform wall depths along `n_spokes` radial spokes, one
/// least-squares line per spoke.
///
/// Wall depth along each spoke is measured between the first and last
/// in-mask positions of the ray; HA is read from the nearest pixel.
pub fn ha_line_profile(
    ha_map: &Array2<f64>,
    myo_mask: &Array2<bool>,
    lv_center: (f64, f64),
    n_spokes: usize,
    samples_per_spoke: usize,
) -> ProfileSet {
    let mut set = ProfileSet::default();
    for spoke_id in 0..n_spokes {
        let theta = std::f64::consts::TAU * spoke_id as f64 / n_spokes as f64;
        // (row, col) direction
        let dir = (theta.sin(), theta.cos());
        let Some((r_in, r_out)) = wall_extent(myo_mask, lv_center, dir) else {
            set.skipped += 1;
            continue;
        };
        let mut depths = Vec::with_capacity(samples_per_spoke);
        let mut ha = Vec::with_capacity(samples_per_spoke);
        for s in 0..samples_per_spoke {
            let depth = if samples_per_spoke > 1 {
                s as f64 / (samples_per_spoke - 1) as f64
            } else {
                0.5
            };
            let r = r_in + depth * (r_out - r_in);
            let Some(px) = nearest_pixel((lv_center.0 + r * dir.0, lv_center.1 + r * dir.1), myo_mask.dim()) else {
                continue;
            };
            let v = ha_map[px];
            if myo_mask[px] && v.is_finite() {
                depths.push(depth);
                ha.push(v);
            }
        }
        if depths.len() < 3 {
            set.skipped += 1;
            continue;
        }
        let (slope, intercept, r_squared, rmse) = linear_regression(&depths, &ha);
        set.profiles.push(LineProfile {
            spoke_id,
            depths,
            ha,
            slope,
            intercept,
            r_squared,
            rmse,
        });
    }
    set
}

/// Median of the per-spoke slopes.
pub fn ha_gradient(profiles: &[LineProfile]) -> Result<f64> {
    if profiles.is_empty() {
        return Err(DtFitError::NoValidProfiles);
    }
    let mut slopes: Vec<f64> = profiles.iter().map(|p| p.slope).collect();
    slopes.sort_by(f64::total_cmp);
    let n = slopes.len();
    Ok(if n % 2 == 1 {
        slopes[n / 2]
    } else {
        0.5 * (slopes[n / 2 - 1] + slopes[n / 2])
    })
}

/// MD, FA and HA maps plus the HA gradient for a fitted tensor map.
pub fn compute_dt_params(
    map: &DiffusionTensorMap,
    lv_center: (f64, f64),
    n_spokes: usize,
    samples_per_spoke: usize,
) -> (DtParams, ProfileSet) {
    let shape = map.shape;
    let mut md = Array2::zeros(shape);
    let mut fa = Array2::zeros(shape);
    let mut ha = Array2::from_elem(shape, f64::NAN);
    for ((r, c), &ok) in map.valid.indexed_iter() {
        if !ok {
            continue;
        }
        let e = eig_sorted(map.tensor(r, c));
        md[[r, c]] = compute_md(&e.values);
        fa[[r, c]] = compute_fa(&e.values);
        if let Some(h) = compute_ha(&e.vectors[0], (r, c), lv_center) {
            ha[[r, c]] = h;
        }
    }
    let profiles = ha_line_profile(&ha, &map.valid, lv_center, n_spokes, samples_per_spoke);
    let ha_gradient = ha_gradient(&profiles.profiles).unwrap_or(f64::NAN);
    (
        DtParams {
            md,
            fa,
            ha,
            mask: map.valid.clone(),
            ha_gradient,
        },
        profiles,
    )
}

/// Centroid of a binary mask as (row, col).
pub fn mask_centroid(mask: &Array2<bool>) -> Option<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            sr += r as f64;
            sc += c as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sr / n as f64, sc / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_tensor_field, simulate_dwis, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phantom_series(spec: &PhantomSpec) -> (crate::phantom::TensorField, DwiSeries) {
        let field = generate_tensor_field(spec).unwrap();
        let series = simulate_dwis(&field, spec).unwrap();
        (field, series)
    }

    #[test]
    fn noiseless_fit_recovers_phantom() {
        let spec = PhantomSpec::default();
        let (field, series) = phantom_series(&spec);
        let map = fit_tensor_lls(&series, &field.myo_mask).unwrap();
        let mut worst: f64 = 0.0;
        for ((r, c), &m) in field.myo_mask.indexed_iter() {
            if m {
                assert!(map.valid[[r, c]]);
                for k in 0..6 {
                    worst = worst.max((map.tensor(r, c).0[k] - field.tensor(r, c).0[k]).abs());
                }
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn isotropic_fit_has_no_off_diagonals() {
        let spec = PhantomSpec {
            eigenvalues: [1.2e-3; 3],
            ..Default::default()
        };
        let (field, series) = phantom_series(&spec);
        let map = fit_tensor_lls(&series, &field.myo_mask).unwrap();
        for ((r, c), &m) in field.myo_mask.indexed_iter() {
            if m {
                let t = map.tensor(r, c).0;
                assert!(t[3].abs() < 1e-12 && t[4].abs() < 1e-12 && t[5].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replicated_measurements_give_identical_fit() {
        let spec = PhantomSpec {
            noise_sigma: 0.02,
            seed: 4,
            ..Default::default()
        };
        let (field, series) = crate::phantom::simulate_noisy_series(&spec).unwrap();
        let doubled = DwiSeries {
            slices: series.slices.iter().chain(series.slices.iter()).cloned().collect(),
            b_values: series.b_values.iter().chain(series.b_values.iter()).copied().collect(),
            directions: series.directions.iter().chain(series.directions.iter()).copied().collect(),
        };
        let a = fit_tensor_lls(&series, &field.myo_mask).unwrap();
        let b = fit_tensor_lls(&doubled, &field.myo_mask).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            for k in 0..6 {
                assert!((x.0[k] - y.0[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scaling_signals_leaves_fit_unchanged() {
        let spec = PhantomSpec {
            noise_sigma: 0.02,
            seed: 5,
            ..Default::default()
        };
        let (field, series) = crate::phantom::simulate_noisy_series(&spec).unwrap();
        let scaled = series.map_slices(|s| s.with_pixels(s.pixels.mapv(|v| v * 37.5)));
        let a = fit_tensor_lls(&series, &field.myo_mask).unwrap();
        let b = fit_tensor_lls(&scaled, &field.myo_mask).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            for k in 0..6 {
                assert!((x.0[k] - y.0[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_directions_rejected() {
        let spec = PhantomSpec::default();
        let (field, mut series) = phantom_series(&spec);
        for d in series.directions.iter_mut().skip(1) {
            *d = [1.0, 0.0, 0.0];
        }
        assert!(matches!(
            fit_tensor_lls(&series, &field.myo_mask),
            Err(DtFitError::RankDeficient(_))
        ));
    }

    #[test]
    fn non_positive_measurements_are_dropped_per_pixel() {
        let spec = PhantomSpec {
            b_values: vec![0.0, 150.0, 600.0],
            ..Default::default()
        };
        let (field, mut series) = phantom_series(&spec);
        let px = (48, 48 + 20);
        // knock out one b600 measurement at one pixel; 11 remain
        series.slices[12].pixels[px] = 0.0;
        let map = fit_tensor_lls(&series, &field.myo_mask).unwrap();
        assert!(map.valid[px]);
        for k in 0..6 {
            assert!((map.tensor(px.0, px.1).0[k] - field.tensor(px.0, px.1).0[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn eig_sorted_orders_and_reconstructs() {
        let e = eig_sorted(&SymTensor([3.0, 1.0, 2.0, 0.0, 0.0, 0.0]));
        assert_eq!(e.values, [3.0, 2.0, 1.0]);
        assert!((e.vectors[0] - Vector3::x()).norm() < 1e-15);
        assert!((e.vectors[1] - Vector3::z()).norm() < 1e-15);
        assert!((e.vectors[2] - Vector3::y()).norm() < 1e-15);

        let iso = eig_sorted(&SymTensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
        assert_eq!(compute_fa(&iso.values), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = SymTensor(std::array::from_fn(|_| rng.gen::<f64>() - 0.5));
            let e = eig_sorted(&t);
            assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
            let mut m = Matrix3::zeros();
            for k in 0..3 {
                m += e.vectors[k] * e.vectors[k].transpose() * e.values[k];
                for j in 0..3 {
                    let expect = if j == k { 1.0 } else { 0.0 };
                    assert!((e.vectors[k].dot(&e.vectors[j]) - expect).abs() < 1e-12);
                }
            }
            assert!((m - t.to_matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn md_and_fa_formulas() {
        assert!((compute_md(&[1e-3, 1e-3, 1e-3]) - 1e-3).abs() < 1e-18);
        assert_eq!(compute_fa(&[1e-3, 1e-3, 1e-3]), 0.0);
        assert!((compute_fa(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(compute_fa(&[0.0, 0.0, 0.0]), 0.0);
        // explicit scalar form
        let (l1, l2, l3): (f64, f64, f64) = (1.7e-3, 0.3e-3, 0.1e-3);
        let oracle = (0.5f64).sqrt() * ((l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2)).sqrt()
            / (l1 * l1 + l2 * l2 + l3 * l3).sqrt();
        assert!((compute_fa(&[l1, l2, l3]) - oracle).abs() < 1e-12);
        // negative eigenvalues are clamped before FA
        let fa = compute_fa(&[1e-3, 2e-4, -3e-4]);
        assert!((0.0..=1.0).contains(&fa));
    }

    #[test]
    fn ha_conventions() {
        let center = (48.0, 48.0);
        let px = (48, 60); // radial = +x, circumferential = +y
        let frame = WallFrame::at((48.0, 60.0), center).unwrap();
        assert_eq!(compute_ha(&frame.circumferential, px, center), Some(0.0));
        assert_eq!(compute_ha(&frame.longitudinal, px, center), Some(90.0));
        assert_eq!(compute_ha(&-frame.longitudinal, px, center), Some(90.0));
        assert_eq!(compute_ha(&frame.radial, px, center), None);
        let v = frame.fibre(-35.0);
        let a = compute_ha(&v, px, center).unwrap();
        let b = compute_ha(&-v, px, center).unwrap();
        assert!((a + 35.0).abs() < 1e-12);
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_midwall_ha_is_zero() {
        let spec = PhantomSpec {
            r_endo: 14.0,
            r_epi: 30.0,
            ..Default::default()
        };
        let field = generate_tensor_field(&spec).unwrap();
        // radius 22 is mid-wall
        let px = (48, 70);
        let e = eig_sorted(field.tensor(px.0, px.1));
        assert!(compute_ha(&e.vectors[0], px, spec.center()).unwrap().abs() < 1e-6);
    }

    fn phantom_ha_map(spec: &PhantomSpec) -> (Array2<f64>, Array2<bool>) {
        let field = generate_tensor_field(spec).unwrap();
        let mut ha = Array2::from_elem(field.myo_mask.dim(), f64::NAN);
        for ((r, c), &m) in field.myo_mask.indexed_iter() {
            if m {
                let e = eig_sorted(field.tensor(r, c));
                ha[[r, c]] = compute_ha(&e.vectors[0], (r, c), spec.center()).unwrap();
            }
        }
        (ha, field.myo_mask)
    }

    #[test]
    fn phantom_line_profiles_are_linear() {
        let spec = PhantomSpec::default();
        let (ha, mask) = phantom_ha_map(&spec);
        let set = ha_line_profile(&ha, &mask, spec.center(), DEFAULT_SPOKES, DEFAULT_SAMPLES_PER_SPOKE);
        assert_eq!(set.skipped, 0);
        assert_eq!(set.profiles.len(), DEFAULT_SPOKES);
        for p in &set.profiles {
            assert!(p.r_squared >= 0.99, "spoke {} r2 {}", p.spoke_id, p.r_squared);
            assert!(p.depths.windows(2).all(|w| w[0] <= w[1]));
        }
        let g = ha_gradient(&set.profiles).unwrap();
        assert!((g + 120.0).abs() < 1.0, "gradient {g}");
    }

    #[test]
    fn constant_ha_map_regression_convention() {
        let spec = PhantomSpec::default();
        let (_, mask) = phantom_ha_map(&spec);
        let ha = Array2::from_elem(mask.dim(), 12.0);
        let set = ha_line_profile(&ha, &mask, spec.center(), 12, 20);
        for p in &set.profiles {
            assert_eq!((p.slope, p.rmse, p.r_squared), (0.0, 0.0, 0.0));
        }
        assert_eq!(ha_gradient(&set.profiles).unwrap(), 0.0);
        assert!(matches!(ha_gradient(&[]), Err(DtFitError::NoValidProfiles)));
    }

    #[test]
    fn shuffled_profile_has_larger_rmse() {
        let spec = PhantomSpec::default();
        let (ha, mask) = phantom_ha_map(&spec);
        let set = ha_line_profile(&ha, &mask, spec.center(), 8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in &set.profiles {
            let mut shuffled = p.ha.clone();
            // Fisher-Yates
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.gen_range(0..=i));
            }
            let (_, _, _, rmse) = linear_regression(&p.depths, &shuffled);
            assert!(rmse > p.rmse);
        }
    }

    #[test]
    fn spokes_missing_the_wall_are_counted() {
        let mut mask = Array2::from_elem((32, 32), false);
        mask[[16, 20]] = true;
        let ha = Array2::from_elem((32, 32), 1.0);
        // only the spoke along +col crosses the single wall pixel
        let set = ha_line_profile(&ha, &mask, (16.0, 16.0), 4, 10);
        assert_eq!(set.profiles.len(), 1);
        assert_eq!(set.profiles[0].spoke_id, 0);
        assert_eq!(set.skipped, 3);
    }
}
