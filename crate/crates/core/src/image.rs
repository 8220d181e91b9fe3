//! Real-valued magnitude image slices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Original intensity range of a slice, kept so a normalised slice can be
/// mapped back to scanner units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub vmin: f64,
    pub vmax: f64,
}

impl NormalizationRecord {
    pub fn range(&self) -> f64 {
        self.vmax - self.vmin
    }
}

/// Shape history of a slice through the pad/crop chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeInfo {
    pub original: (usize, usize),
    pub padded: Option<(usize, usize)>,
    pub cropped: Option<(usize, usize)>,
}

impl ShapeInfo {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            original: shape,
            padded: None,
            cropped: None,
        }
    }
}

/// A 2D magnitude image. Rows run along the readout direction and columns
/// along the phase-encode direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    pub pixels: Array2<f64>,
    pub norm: Option<NormalizationRecord>,
    pub shape_info: ShapeInfo,
}

impl ImageSlice {
    pub fn new(pixels: Array2<f64>) -> Self {
        let shape_info = ShapeInfo::new(pixels.dim());
        Self {
            pixels,
            norm: None,
            shape_info,
        }
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self::new(Array2::zeros(shape))
    }

    /// Same metadata, different pixels.
    pub fn with_pixels(&self, pixels: Array2<f64>) -> Self {
        Self {
            pixels,
            norm: self.norm,
            shape_info: self.shape_info,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }
}
