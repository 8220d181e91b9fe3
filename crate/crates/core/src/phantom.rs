//! Analytic short-axis cardiac DTI phantom.
//!
//! The myocardium is an annulus around the LV centre. Every in-wall pixel
//! carries a tensor whose primary eigenvector lies in the local wall-tangent
//! plane at a helix angle that varies linearly with transmural depth.
//!
//! Local frame, in (column, row, through-plane) coordinates: radial points
//! away from the LV centre, circumferential is radial rotated by +90° in
//! that plane, longitudinal is the through-plane axis.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtfit::{DwiSeries, SymTensor};
use crate::image::ImageSlice;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("degenerate annulus: r_endo = {r_endo}, r_epi = {r_epi}")]
    DegenerateAnnulus { r_endo: f64, r_epi: f64 },
    #[error("annulus radius {r_epi} does not fit in a grid of {grid}")]
    AnnulusTooLarge { r_epi: f64, grid: usize },
    #[error("eigenvalues must satisfy l1 >= l2 >= l3 > 0, got {0:?}")]
    BadEigenvalues([f64; 3]),
    #[error("direction {index} is not unit length (norm {norm})")]
    NonUnitDirection { index: usize, norm: f64 },
    #[error("need at least 6 directions, got {0}")]
    TooFewDirections(usize),
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("field grid {field} does not match spec grid {spec}")]
    GridMismatch { field: usize, spec: usize },
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// Six non-collinear unit directions (normalised `(±1, 0, 1)`-style set).
pub fn default_directions() -> Vec<[f64; 3]> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        [h, 0.0, h],
        [-h, 0.0, h],
        [0.0, h, h],
        [0.0, h, -h],
        [h, h, 0.0],
        [-h, h, 0.0],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_size: usize,
    /// (row, column) of the LV centre in pixel coordinates.
    pub lv_center: [f64; 2],
    pub r_endo: f64,
    pub r_epi: f64,
    /// Helix angle at the endocardium, degrees.
    pub ha_endo: f64,
    /// Helix angle at the epicardium, degrees.
    pub ha_epi: f64,
    /// Tensor eigenvalues in mm²/s, descending.
    pub eigenvalues: [f64; 3],
    /// s/mm²
    pub b_values: Vec<f64>,
    pub directions: Vec<[f64; 3]>,
    /// Noise standard deviation as a fraction of `s0`.
    pub noise_sigma: f64,
    pub seed: u64,
    pub s0: f64,
    /// Out-of-wall signal as a fraction of `s0`.
    pub background: f64,
    /// Number of b0 images per acquisition series.
    pub b0_repetitions: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_size: 96,
            lv_center: [48.0, 48.0],
            r_endo: 14.0,
            r_epi: 30.0,
            ha_endo: 60.0,
            ha_epi: -60.0,
            eigenvalues: [1.9e-3, 1.3e-3, 0.9e-3],
            b_values: vec![0.0, 150.0, 600.0],
            directions: default_directions(),
            noise_sigma: 0.0,
            seed: 0,
            s0: 1.0,
            background: 0.05,
            b0_repetitions: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_endo < self.r_epi) || self.r_endo < 0.0 {
            return Err(PhantomError::DegenerateAnnulus {
                r_endo: self.r_endo,
                r_epi: self.r_epi,
            });
        }
        if !(self.r_epi < self.grid_size as f64 / 2.0) {
            return Err(PhantomError::AnnulusTooLarge {
                r_epi: self.r_epi,
                grid: self.grid_size,
            });
        }
        let [l1, l2, l3] = self.eigenvalues;
        if !(l1 >= l2 && l2 >= l3 && l3 > 0.0) {
            return Err(PhantomError::BadEigenvalues(self.eigenvalues));
        }
        if self.directions.len() < 6 {
            return Err(PhantomError::TooFewDirections(self.directions.len()));
        }
        for (index, d) in self.directions.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(PhantomError::NonUnitDirection { index, norm });
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(PhantomError::NegativeSigma(self.noise_sigma));
        }
        Ok(())
    }

    /// Normalised wall depth of a radius: 0 at the endocardium, 1 at the
    /// epicardium.
    pub fn wall_depth(&self, radius: f64) -> f64 {
        (radius - self.r_endo) / (self.r_epi - self.r_endo)
    }

    /// Helix angle (degrees) prescribed at a wall depth.
    pub fn helix_angle_at_depth(&self, depth: f64) -> f64 {
        self.ha_endo + depth * (self.ha_epi - self.ha_endo)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.lv_center[0], self.lv_center[1])
    }
}

/// Orthonormal local cardiac frame at a pixel.
#[derive(Debug, Clone, Copy)]
pub struct WallFrame {
    pub radial: Vector3<f64>,
    pub circumferential: Vector3<f64>,
    pub longitudinal: Vector3<f64>,
}

impl WallFrame {
    /// Frame at `pixel = (row, col)` around `center = (row, col)`; `None` at
    /// the centre itself.
    pub fn at(pixel: (f64, f64), center: (f64, f64)) -> Option<Self> {
        let x = pixel.1 - center.1;
        let y = pixel.0 - center.0;
        let r = x.hypot(y);
        if r == 0.0 {
            return None;
        }
        let radial = Vector3::new(x / r, y / r, 0.0);
        let circumferential = Vector3::new(-radial.y, radial.x, 0.0);
        Some(Self {
            radial,
            circumferential,
            longitudinal: Vector3::new(0.0, 0.0, 1.0),
        })
    }

    /// Unit vector in the wall-tangent plane at `ha_deg` from circumferential
    /// towards longitudinal.
    pub fn fibre(&self, ha_deg: f64) -> Vector3<f64> {
        let a = ha_deg.to_radians();
        self.circumferential * a.cos() + self.longitudinal * a.sin()
    }
}

/// Ground-truth tensor field with myocardium mask.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub grid_size: usize,
    /// Row-major, one per pixel; zero outside the mask.
    pub tensors: Vec<SymTensor>,
    pub myo_mask: Array2<bool>,
}

impl TensorField {
    pub fn tensor(&self, row: usize, col: usize) -> &SymTensor {
        &self.tensors[row * self.grid_size + col]
    }
}

pub fn radius_of(pixel: (usize, usize), center: (f64, f64)) -> f64 {
    (pixel.0 as f64 - center.0).hypot(pixel.1 as f64 - center.1)
}

pub fn generate_tensor_field(spec: &PhantomSpec) -> Result<TensorField> {
    spec.validate()?;
    let n = spec.grid_size;
    let center = spec.center();
    let [l1, l2, l3] = spec.eigenvalues;
    let mut tensors = vec![SymTensor::zero(); n * n];
    let mut myo_mask = Array2::from_elem((n, n), false);
    for row in 0..n {
        for col in 0..n {
            let r = radius_of((row, col), center);
            if r < spec.r_endo || r > spec.r_epi {
                continue;
            }
            let Some(frame) = WallFrame::at((row as f64, col as f64), center) else {
                continue;
            };
            let e1 = frame.fibre(spec.helix_angle_at_depth(spec.wall_depth(r)));
            let e2 = frame.radial;
            let e3 = e1.cross(&e2);
            let d: Matrix3<f64> = e1 * e1.transpose() * l1 + e2 * e2.transpose() * l2 + e3 * e3.transpose() * l3;
            tensors[row * n + col] = SymTensor::from_matrix(&d);
            myo_mask[[row, col]] = true;
        }
    }
    Ok(TensorField {
        grid_size: n,
        tensors,
        myo_mask,
    })
}

/// Noiseless signal `s0 * exp(-b g^T D g)`.
pub fn signal(s0: f64, b: f64, g: &[f64; 3], d: &SymTensor) -> f64 {
    s0 * (-b * d.quadratic_form(g)).exp()
}

/// Acquisition order: `b0_repetitions` b0 images, then every direction for
/// each non-zero b-value.
pub fn acquisition_scheme(spec: &PhantomSpec) -> Vec<(f64, [f64; 3])> {
    let mut scheme = Vec::new();
    for &b in &spec.b_values {
        if b == 0.0 {
            for _ in 0..spec.b0_repetitions {
                scheme.push((0.0, [0.0; 3]));
            }
        } else {
            for g in &spec.directions {
                scheme.push((b, *g));
            }
        }
    }
    scheme
}

/// Noiseless DWIs for every (b-value, direction) pair.
pub fn simulate_dwis(field: &TensorField, spec: &PhantomSpec) -> Result<DwiSeries> {
    spec.validate()?;
    if field.grid_size != spec.grid_size {
        return Err(PhantomError::GridMismatch {
            field: field.grid_size,
            spec: spec.grid_size,
        });
    }
    let n = spec.grid_size;
    let background = spec.background * spec.s0;
    let scheme = acquisition_scheme(spec);
    let mut slices = Vec::with_capacity(scheme.len());
    for (b, g) in &scheme {
        let pixels = Array2::from_shape_fn((n, n), |(r, c)| {
            if field.myo_mask[[r, c]] {
                signal(spec.s0, *b, g, field.tensor(r, c))
            } else {
                background
            }
        });
        slices.push(ImageSlice::new(pixels));
    }
    Ok(DwiSeries {
        slices,
        b_values: scheme.iter().map(|s| s.0).collect(),
        directions: scheme.iter().map(|s| s.1).collect(),
    })
}

/// Magnitude of signal plus complex Gaussian noise of standard deviation
/// `sigma * reference`.
pub fn add_rician_noise(slice: &ImageSlice, sigma: f64, reference: f64, seed: u64) -> Result<ImageSlice> {
    if sigma < 0.0 {
        return Err(PhantomError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(slice.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma * reference).expect("finite std");
    let pixels = slice.pixels.mapv(|s| {
        let n1 = normal.sample(&mut rng);
        let n2 = normal.sample(&mut rng);
        (s + n1).hypot(n2)
    });
    Ok(slice.with_pixels(pixels))
}

/// Simulates the series and applies per-slice Rician noise seeded from
/// `spec.seed`.
pub fn simulate_noisy_series(spec: &PhantomSpec) -> Result<(TensorField, DwiSeries)> {
    let field = generate_tensor_field(spec)?;
    let mut series = simulate_dwis(&field, spec)?;
    if spec.noise_sigma > 0.0 {
        for (i, s) in series.slices.iter_mut().enumerate() {
            let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            *s = add_rician_noise(s, spec.noise_sigma, spec.s0, seed)?;
        }
    }
    Ok((field, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtfit::{compute_fa, compute_ha, eig_sorted};

    #[test]
    fn degenerate_annulus_rejected() {
        let spec = PhantomSpec {
            r_endo: 20.0,
            r_epi: 20.0,
            ..Default::default()
        };
        assert!(matches!(generate_tensor_field(&spec), Err(PhantomError::DegenerateAnnulus { .. })));
        let spec = PhantomSpec {
            r_epi: 48.0,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(PhantomError::AnnulusTooLarge { .. })));
    }

    #[test]
    fn non_unit_direction_rejected() {
        let mut spec = PhantomSpec::default();
        spec.directions[2] = [0.0, 1.0, 1.0];
        assert!(matches!(spec.validate(), Err(PhantomError::NonUnitDirection { index: 2, .. })));
    }

    #[test]
    fn midwall_helix_angle_is_zero() {
        let spec = PhantomSpec::default();
        assert_eq!(spec.helix_angle_at_depth(0.5), 0.0);
    }

    #[test]
    fn isotropic_phantom_has_zero_fa() {
        let spec = PhantomSpec {
            eigenvalues: [1.5e-3; 3],
            ..Default::default()
        };
        let field = generate_tensor_field(&spec).unwrap();
        for (t, &m) in field.tensors.iter().zip(field.myo_mask.iter()) {
            if m {
                assert!(compute_fa(&eig_sorted(t).values) < 1e-12);
            }
        }
    }

    #[test]
    fn generated_tensors_are_symmetric_psd_with_prescribed_eigenvalues() {
        let spec = PhantomSpec::default();
        let field = generate_tensor_field(&spec).unwrap();
        let mut count = 0;
        for (t, &m) in field.tensors.iter().zip(field.myo_mask.iter()) {
            if !m {
                continue;
            }
            count += 1;
            let e = eig_sorted(t);
            for k in 0..3 {
                assert!((e.values[k] - spec.eigenvalues[k]).abs() < 1e-15);
            }
        }
        assert!(count > 1000);
    }

    #[test]
    fn helix_angle_closed_loop() {
        let spec = PhantomSpec::default();
        let field = generate_tensor_field(&spec).unwrap();
        let mut worst: f64 = 0.0;
        for ((r, c), &m) in field.myo_mask.indexed_iter() {
            if !m {
                continue;
            }
            let e = eig_sorted(field.tensor(r, c));
            let ha = compute_ha(&e.vectors[0], (r, c), spec.center()).unwrap();
            let expect = spec.helix_angle_at_depth(spec.wall_depth(radius_of((r, c), spec.center())));
            worst = worst.max((ha - expect).abs());
        }
        assert!(worst < 1e-9, "worst HA error {worst}");
    }

    #[test]
    fn simulated_signals_follow_the_forward_model() {
        let spec = PhantomSpec::default();
        let field = generate_tensor_field(&spec).unwrap();
        let series = simulate_dwis(&field, &spec).unwrap();
        assert_eq!(series.slices.len(), 1 + 12);
        for (k, s) in series.slices.iter().enumerate() {
            let b = series.b_values[k];
            let g = series.directions[k];
            for ((r, c), &v) in s.pixels.indexed_iter() {
                assert!(v > 0.0 && v <= spec.s0);
                if !field.myo_mask[[r, c]] {
                    assert_eq!(v, 0.05);
                    continue;
                }
                if b == 0.0 {
                    assert_eq!(v, spec.s0);
                }
                // scalar oracle
                let t = field.tensor(r, c).to_matrix();
                let gv = nalgebra::Vector3::from(g);
                let q = (gv.transpose() * t * gv)[(0, 0)];
                assert!((v - spec.s0 * (-b * q).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isotropic_signal_is_direction_independent() {
        let spec = PhantomSpec {
            eigenvalues: [1e-3; 3],
            ..Default::default()
        };
        let field = generate_tensor_field(&spec).unwrap();
        let series = simulate_dwis(&field, &spec).unwrap();
        let (r, c) = (48, 48 + 20);
        let expect = (-600.0f64 * 1e-3).exp();
        for (k, s) in series.slices.iter().enumerate() {
            if series.b_values[k] == 600.0 {
                assert!((s.pixels[[r, c]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rician_noise_contracts() {
        let img = ImageSlice::new(Array2::from_elem((100, 100), 0.0));
        assert_eq!(add_rician_noise(&img, 0.0, 1.0, 1).unwrap(), img);
        assert!(add_rician_noise(&img, -0.1, 1.0, 1).is_err());
        let a = add_rician_noise(&img, 0.05, 1.0, 7).unwrap();
        let b = add_rician_noise(&img, 0.05, 1.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|&v| v >= 0.0));
        // zero signal gives a Rayleigh distribution: mean sigma*sqrt(pi/2),
        // variance (2 - pi/2) sigma^2
        let sigma = 0.05;
        let n = a.pixels.len() as f64;
        let mean = a.pixels.sum() / n;
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        let se = ((2.0 - std::f64::consts::PI / 2.0) * sigma * sigma / n).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} expect {expect}");
    }
}
