//! Array persistence: `.npy` containers (little-endian, row-major, header
//! described) with a JSON sidecar written next to them as `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Array2, Array3, Axis, Dimension};
use ndarray_npy::{ReadNpyExt, ReadableElement, WritableElement, WriteNpyExt};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArrayIoError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("npy write failed at {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("npy read failed at {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unexpected layout in {path}: {message}")]
    Layout { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ArrayIoError>;

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArrayIoError + '_ {
    move |source| ArrayIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

pub fn write_npy<A, D>(path: &Path, array: &Array<A, D>) -> Result<()>
where
    A: WritableElement,
    D: Dimension,
{
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let writer = std::io::BufWriter::new(file);
    array.write_npy(writer).map_err(|e| ArrayIoError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_npy<A, D>(path: &Path) -> Result<Array<A, D>>
where
    A: ReadableElement,
    D: Dimension,
{
    let file = fs::File::open(path).map_err(io_err(path))?;
    Array::<A, D>::read_npy(std::io::BufReader::new(file)).map_err(|e| ArrayIoError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let side = sidecar_path(path);
    ensure_parent(&side)?;
    let text = serde_json::to_string_pretty(meta).map_err(|source| ArrayIoError::Sidecar {
        path: side.clone(),
        source,
    })?;
    fs::write(&side, text + "\n").map_err(io_err(&side))
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|source| ArrayIoError::Sidecar { path: side, source })
}

/// Array plus sidecar in one call.
pub fn save<A, D, T>(path: &Path, array: &Array<A, D>, meta: &T) -> Result<()>
where
    A: WritableElement,
    D: Dimension,
    T: Serialize,
{
    write_npy(path, array)?;
    write_sidecar(path, meta)
}

pub fn load<A, D, T>(path: &Path) -> Result<(Array<A, D>, T)>
where
    A: ReadableElement,
    D: Dimension,
    T: DeserializeOwned,
{
    Ok((read_npy(path)?, read_sidecar(path)?))
}

/// Complex arrays are stored as a `(2, rows, cols)` float64 stack of real
/// and imaginary parts.
pub fn write_complex(path: &Path, z: &Array2<Complex64>) -> Result<()> {
    let (h, w) = z.dim();
    let stacked = Array3::from_shape_fn((2, h, w), |(k, r, c)| if k == 0 { z[[r, c]].re } else { z[[r, c]].im });
    write_npy(path, &stacked)
}

pub fn read_complex(path: &Path) -> Result<Array2<Complex64>> {
    let stacked: Array3<f64> = read_npy(path)?;
    if stacked.len_of(Axis(0)) != 2 {
        return Err(ArrayIoError::Layout {
            path: path.to_path_buf(),
            message: format!("expected leading axis of 2, got shape {:?}", stacked.dim()),
        });
    }
    let re = stacked.index_axis(Axis(0), 0);
    let im = stacked.index_axis(Axis(0), 1);
    Ok(Array2::from_shape_fn(re.dim(), |(r, c)| Complex64::new(re[[r, c]], im[[r, c]])))
}

/// Boolean masks are stored as `u8` 0/1.
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    write_npy(path, &mask.mapv(|b| b as u8))
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let raw: Array2<u8> = read_npy(path)?;
    Ok(raw.mapv(|v| v != 0))
}
