//! Cartesian k-space degradation model and the slice pre-processing chain.
//!
//! The forward operator is `A = M ∘ F` where `F` is the centred, orthonormal
//! 2D DFT and `M` zeroes every phase-encode column that the sampling mask
//! does not acquire. Phase encoding runs along the column axis of an
//! [`ImageSlice`].

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::image::{ImageSlice, NormalizationRecord};

/// Phase-encode lines acquired before the scanner's zero-padding by two.
pub const ACQUIRED_PE_LINES: usize = 48;
/// Shape the masks are zero-padded to.
pub const PADDED_SHAPE: (usize, usize) = (256, 96);
/// Network operating resolution.
pub const CROP_SHAPE: (usize, usize) = (96, 96);

#[derive(Debug, Error)]
pub enum KSpaceError {
    #[error("unsupported acceleration factor {0} (expected 1, 2, 4 or 8)")]
    UnsupportedAcceleration(u32),
    #[error("centre block of {center} lines exceeds the budget of {budget} lines")]
    InfeasibleBudget { center: usize, budget: usize },
    #[error("centre fraction {0} outside [0, 1]")]
    BadCenterFraction(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate input: constant image (vmin = vmax = {0})")]
    ConstantImage(f64),
    #[error("image has no normalisation record")]
    MissingNormalization,
    #[error("malformed mask file: {0}")]
    MaskFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KSpaceError>;

/// Complex k-space coefficients, same shape as the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    pub coeffs: Array2<Complex64>,
}

// --------------------------------------------------------------------------
// Centred orthonormal FFT
// --------------------------------------------------------------------------

fn shift_axis(x: &Array2<Complex64>, axis: usize, inverse: bool) -> Array2<Complex64> {
    let n = x.len_of(Axis(axis));
    // fftshift moves index i to (i + n/2) mod n; ifftshift undoes it.
    let k = if inverse { n - n / 2 } else { n / 2 };
    let mut out = Array2::zeros(x.dim());
    for (i, lane) in x.axis_iter(Axis(axis)).enumerate() {
        out.index_axis_mut(Axis(axis), (i + k) % n).assign(&lane);
    }
    out
}

fn fftshift(x: &Array2<Complex64>) -> Array2<Complex64> {
    shift_axis(&shift_axis(x, 0, false), 1, false)
}

fn ifftshift(x: &Array2<Complex64>) -> Array2<Complex64> {
    shift_axis(&shift_axis(x, 0, true), 1, true)
}

fn fft2_inplace(x: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = x.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); rows.max(cols)];
    for mut row in x.rows_mut() {
        let b = &mut buf[..cols];
        for (d, v) in b.iter_mut().zip(row.iter()) {
            *d = *v;
        }
        row_fft.process(b);
        for (v, d) in row.iter_mut().zip(b.iter()) {
            *v = *d;
        }
    }
    for mut col in x.columns_mut() {
        let b = &mut buf[..rows];
        for (d, v) in b.iter_mut().zip(col.iter()) {
            *d = *v;
        }
        col_fft.process(b);
        for (v, d) in col.iter_mut().zip(b.iter()) {
            *v = *d;
        }
    }
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    x.mapv_inplace(|v| v * scale);
}

/// Centred orthonormal 2D DFT: `fftshift(fft2(ifftshift(x))) / sqrt(N)`.
pub fn fft2c(x: &Array2<Complex64>) -> Array2<Complex64> {
    let mut y = ifftshift(x);
    fft2_inplace(&mut y, false);
    fftshift(&y)
}

/// Inverse of [`fft2c`]; also its adjoint.
pub fn ifft2c(y: &Array2<Complex64>) -> Array2<Complex64> {
    let mut x = ifftshift(y);
    fft2_inplace(&mut x, true);
    fftshift(&x)
}

pub fn to_complex(x: &Array2<f64>) -> Array2<Complex64> {
    x.mapv(|v| Complex64::new(v, 0.0))
}

// --------------------------------------------------------------------------
// Sampling masks
// --------------------------------------------------------------------------

/// Binary Cartesian line mask over the phase-encode axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    lines: Vec<bool>,
    af: u32,
    center_fraction: f64,
    padded_shape: (usize, usize),
}

/// Centre fraction used for each acceleration factor.
pub fn default_center_fraction(af: u32) -> f64 {
    if af >= 8 {
        0.04
    } else {
        0.08
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

/// Equispaced Cartesian mask in the fastMRI style: a fully sampled centre
/// block plus the remaining line budget spread at a uniform stride over the
/// other lines, starting from a seeded offset.
pub fn generate_mask(n_pe: usize, af: u32, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if !matches!(af, 1 | 2 | 4 | 8) {
        return Err(KSpaceError::UnsupportedAcceleration(af));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(KSpaceError::BadCenterFraction(center_fraction));
    }
    let budget = round_half_up(n_pe as f64 / af as f64);
    let n_center = round_half_up(center_fraction * n_pe as f64);
    if n_center > budget {
        return Err(KSpaceError::InfeasibleBudget { center: n_center, budget });
    }
    let mut lines = vec![false; n_pe];
    let start = (n_pe - n_center + 1) / 2;
    for l in &mut lines[start..start + n_center] {
        *l = true;
    }
    let candidates: Vec<usize> = (0..n_pe).filter(|&i| !lines[i]).collect();
    let remaining = budget - n_center;
    if remaining > 0 {
        let stride = candidates.len() as f64 / remaining as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset: f64 = rng.gen_range(0.0..stride);
        for k in 0..remaining {
            let pos = ((offset + k as f64 * stride).floor() as usize).min(candidates.len() - 1);
            lines[candidates[pos]] = true;
        }
    }
    Ok(SamplingMask {
        lines,
        af,
        center_fraction,
        padded_shape: PADDED_SHAPE,
    })
}

impl SamplingMask {
    pub fn fully_sampled(n_pe: usize) -> Self {
        Self {
            lines: vec![true; n_pe],
            af: 1,
            center_fraction: 1.0,
            padded_shape: PADDED_SHAPE,
        }
    }

    /// Builds a mask from explicit lines; the acceleration is inferred.
    pub fn from_lines(lines: Vec<bool>) -> Self {
        let n = lines.len();
        let sampled = lines.iter().filter(|&&b| b).count().max(1);
        Self {
            lines,
            af: ((n as f64 / sampled as f64).round() as u32).max(1),
            center_fraction: 0.0,
            padded_shape: PADDED_SHAPE,
        }
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn n_pe(&self) -> usize {
        self.lines.len()
    }

    pub fn acceleration(&self) -> u32 {
        self.af
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        self.padded_shape
    }

    pub fn sampled_count(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    /// Index range of the fully sampled centre block.
    pub fn center_range(&self) -> std::ops::Range<usize> {
        let n = self.n_pe();
        let c = round_half_up(self.center_fraction * n as f64);
        let start = (n - c + 1) / 2;
        start..start + c
    }

    /// Lines zero-padded to `width`, live lines placed centrally.
    pub fn padded_lines(&self, width: usize) -> Result<Vec<bool>> {
        let n = self.n_pe();
        if width < n {
            return Err(KSpaceError::ShapeMismatch(format!(
                "cannot pad {n} phase-encode lines to {width}"
            )));
        }
        let before = (width - n) / 2;
        let mut out = vec![false; width];
        out[before..before + n].copy_from_slice(&self.lines);
        Ok(out)
    }

    /// The mask expanded to a full 2D grid of `shape`.
    pub fn to_grid(&self, shape: (usize, usize)) -> Result<Array2<bool>> {
        let cols = self.padded_lines(shape.1)?;
        Ok(Array2::from_shape_fn(shape, |(_, c)| cols[c]))
    }

    /// One `0`/`1` character per line, newline terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.lines.len() * 2);
        for &b in &self.lines {
            let _ = writeln!(s, "{}", if b { 1 } else { 0 });
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            match raw.trim_end_matches('\r') {
                "0" => lines.push(false),
                "1" => lines.push(true),
                other => {
                    return Err(KSpaceError::MaskFormat(format!("line {}: {other:?}", i + 1)));
                }
            }
        }
        if lines.is_empty() {
            return Err(KSpaceError::MaskFormat("empty mask".into()));
        }
        Ok(Self::from_lines(lines))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

// --------------------------------------------------------------------------
// Forward / adjoint operators
// --------------------------------------------------------------------------

fn column_weights(mask: &SamplingMask, cols: usize) -> Result<Vec<bool>> {
    if cols == mask.n_pe() {
        Ok(mask.lines.clone())
    } else {
        mask.padded_lines(cols)
    }
}

/// `A x` for a complex image.
pub fn forward_complex(x: &Array2<Complex64>, mask: &SamplingMask) -> Result<Array2<Complex64>> {
    let keep = column_weights(mask, x.ncols())?;
    let mut y = fft2c(x);
    for (c, mut col) in y.columns_mut().into_iter().enumerate() {
        if !keep[c] {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(y)
}

/// `A^H y`, complex-valued.
pub fn adjoint_complex(y: &Array2<Complex64>, mask: &SamplingMask) -> Result<Array2<Complex64>> {
    let keep = column_weights(mask, y.ncols())?;
    let mut masked = y.clone();
    for (c, mut col) in masked.columns_mut().into_iter().enumerate() {
        if !keep[c] {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(ifft2c(&masked))
}

/// Masked centred 2D DFT of a real image.
pub fn forward_operator(x: &ImageSlice, mask: &SamplingMask) -> Result<KSpaceData> {
    Ok(KSpaceData {
        coeffs: forward_complex(&to_complex(&x.pixels), mask)?,
    })
}

/// Zero-filled reconstruction `|A^H y|`.
pub fn zero_fill(y: &KSpaceData, mask: &SamplingMask) -> Result<ImageSlice> {
    let x = adjoint_complex(&y.coeffs, mask)?;
    Ok(ImageSlice::new(x.mapv(|v| v.norm())))
}

/// Retrospective undersampling of a slice: forward, zero-fill, keep the
/// slice's metadata.
pub fn undersample(x: &ImageSlice, mask: &SamplingMask) -> Result<ImageSlice> {
    let zf = zero_fill(&forward_operator(x, mask)?, mask)?;
    Ok(x.with_pixels(zf.pixels))
}

// --------------------------------------------------------------------------
// Normalisation and pad/crop
// --------------------------------------------------------------------------

/// Max-min normalisation to `[0, 1]`.
pub fn normalize_minmax(x: &ImageSlice) -> Result<ImageSlice> {
    let vmin = x.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = x.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(vmax > vmin) {
        return Err(KSpaceError::ConstantImage(vmin));
    }
    let range = vmax - vmin;
    Ok(ImageSlice {
        pixels: x.pixels.mapv(|v| ((v - vmin) / range).clamp(0.0, 1.0)),
        norm: Some(NormalizationRecord { vmin, vmax }),
        shape_info: x.shape_info,
    })
}

/// Maps a normalised slice back to its recorded intensity range.
pub fn denormalize(x: &ImageSlice) -> Result<ImageSlice> {
    let rec = x.norm.ok_or(KSpaceError::MissingNormalization)?;
    Ok(denormalize_with(x, &rec))
}

pub fn denormalize_with(x: &ImageSlice, rec: &NormalizationRecord) -> ImageSlice {
    let range = rec.range();
    ImageSlice {
        pixels: x.pixels.mapv(|v| v * range + rec.vmin),
        norm: None,
        shape_info: x.shape_info,
    }
}

/// Leading pad for growing `from` to `to`; the odd pixel goes to the end.
fn lead(from: usize, to: usize) -> usize {
    (to - from) / 2
}

/// Centre-aligned zero padding.
pub fn zero_pad(x: &ImageSlice, target: (usize, usize)) -> Result<ImageSlice> {
    let (h, w) = x.dim();
    if target.0 < h || target.1 < w {
        return Err(KSpaceError::ShapeMismatch(format!(
            "cannot pad {h}x{w} to {}x{}",
            target.0, target.1
        )));
    }
    let (r0, c0) = (lead(h, target.0), lead(w, target.1));
    let mut out = Array2::zeros(target);
    out.slice_mut(s![r0..r0 + h, c0..c0 + w]).assign(&x.pixels);
    let mut shape_info = x.shape_info;
    shape_info.padded = Some(target);
    Ok(ImageSlice {
        pixels: out,
        norm: x.norm,
        shape_info,
    })
}

/// Centre crop, using the same split convention as [`zero_pad`].
pub fn center_crop(x: &ImageSlice, target: (usize, usize)) -> Result<ImageSlice> {
    let (h, w) = x.dim();
    if target.0 > h || target.1 > w {
        return Err(KSpaceError::ShapeMismatch(format!(
            "cannot crop {h}x{w} to {}x{}",
            target.0, target.1
        )));
    }
    let (r0, c0) = (lead(target.0, h), lead(target.1, w));
    let mut shape_info = x.shape_info;
    shape_info.cropped = Some(target);
    Ok(ImageSlice {
        pixels: x.pixels.slice(s![r0..r0 + target.0, c0..c0 + target.1]).to_owned(),
        norm: x.norm,
        shape_info,
    })
}

/// The full retrospective-undersampling chain for an already normalised
/// slice: pad to the mask's padded shape, apply the mask, zero-fill, crop
/// back to the source shape.
pub fn simulate_undersampled(x: &ImageSlice, mask: &SamplingMask) -> Result<ImageSlice> {
    let src = x.dim();
    let padded_shape = (mask.padded_shape.0.max(src.0), mask.padded_shape.1.max(src.1));
    let padded = zero_pad(x, padded_shape)?;
    let zf = undersample(&padded, mask)?;
    let mut out = center_crop(&zf, src)?;
    out.shape_info = x.shape_info;
    Ok(out)
}
