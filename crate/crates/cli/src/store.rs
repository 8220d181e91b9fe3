//! On-disk layout of cases, slices and priors.
//!
//! A case directory `case_XXXX/` holds `case.json`, `myo_mask.npy`, and per
//! slice `gt_XX.npy`, `zf_XX.npy` (each with a JSON sidecar) and
//! `mask_XX.txt`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use rsfr_core::array_io::{load, read_mask, save, write_mask};
use rsfr_core::dataset::{denormalized_series, Case};
use rsfr_core::dtfit::DwiSeries;
use rsfr_core::image::{ImageSlice, NormalizationRecord, ShapeInfo};
use rsfr_core::kspace::SamplingMask;
use rsfr_core::phantom::PhantomSpec;
use rsfr_core::semantics::{SemanticPrior, PRIOR_CHANNELS};
use rsfr_net::train::TrainPair;

use crate::config::sha256_hex;
use crate::error::{CliError, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: usize,
    pub spec: PhantomSpec,
    pub af: u32,
    pub b_values: Vec<f64>,
    pub directions: Vec<[f64; 3]>,
}

impl CaseRecord {
    pub fn name(&self) -> String {
        case_dir_name(self.id)
    }

    pub fn n_slices(&self) -> usize {
        self.b_values.len()
    }
}

/// Sidecar of every stored slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub case: usize,
    pub index: usize,
    pub norm: Option<NormalizationRecord>,
    pub shape_info: ShapeInfo,
    pub units: String,
    pub b_value: f64,
    pub direction: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PriorMeta {
    scores: [f64; PRIOR_CHANNELS],
}

#[derive(Debug, Clone)]
pub struct StoredCase {
    pub record: CaseRecord,
    pub myo: Array2<bool>,
    pub gt: Vec<ImageSlice>,
    pub zf: Vec<ImageSlice>,
    pub masks: Vec<SamplingMask>,
}

impl StoredCase {
    pub fn lv_center(&self) -> (f64, f64) {
        self.record.spec.center()
    }

    /// Series in scanner units; every slice is mapped back with the
    /// normalisation record of the matching ground-truth slice.
    pub fn series_from(&self, slices: &[ImageSlice]) -> DwiSeries {
        let refs: Vec<&ImageSlice> = self.gt.iter().collect();
        denormalized_series(&refs, slices, &self.record.b_values, &self.record.directions)
    }

    pub fn pairs(&self) -> Vec<TrainPair<'_>> {
        self.gt
            .iter()
            .zip(&self.zf)
            .map(|(gt, zf)| TrainPair {
                gt,
                zf,
                myo: &self.myo,
                af: self.record.af,
            })
            .collect()
    }
}

pub fn case_dir_name(id: usize) -> String {
    format!("case_{id:04}")
}

pub fn slice_file(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:02}.npy")
}

pub fn write_slice(path: &Path, slice: &ImageSlice, meta: &SliceMeta) -> Result<()> {
    let meta = SliceMeta {
        norm: slice.norm,
        shape_info: slice.shape_info,
        ..meta.clone()
    };
    save(path, &slice.pixels, &meta)?;
    Ok(())
}

pub fn read_slice(path: &Path) -> Result<(ImageSlice, SliceMeta)> {
    let (pixels, meta): (Array2<f64>, SliceMeta) = load(path)?;
    let slice = ImageSlice {
        pixels,
        norm: meta.norm,
        shape_info: meta.shape_info,
    };
    Ok((slice, meta))
}

/// Reads `<dir>/<prefix>_XX.npy` for `n` slices.
pub fn read_slices(dir: &Path, prefix: &str, n: usize) -> Result<Vec<ImageSlice>> {
    (0..n).map(|i| Ok(read_slice(&dir.join(slice_file(prefix, i)))?.0)).collect()
}

pub fn slice_meta(record: &CaseRecord, index: usize, units: &str) -> SliceMeta {
    SliceMeta {
        case: record.id,
        index,
        norm: None,
        shape_info: ShapeInfo::new((0, 0)),
        units: units.to_string(),
        b_value: record.b_values[index],
        direction: record.directions[index],
    }
}

pub fn write_case(root: &Path, case: &Case, af: u32) -> Result<PathBuf> {
    let dir = root.join(case_dir_name(case.id));
    std::fs::create_dir_all(&dir).at(&dir)?;
    let record = CaseRecord {
        id: case.id,
        spec: case.spec.clone(),
        af,
        b_values: case.b_values.clone(),
        directions: case.directions.clone(),
    };
    let text = serde_json::to_string_pretty(&record)?;
    let path = dir.join("case.json");
    std::fs::write(&path, text + "\n").at(&path)?;
    write_mask(&dir.join("myo_mask.npy"), case.myo_mask())?;
    for s in &case.samples {
        let meta = slice_meta(&record, s.index, "normalized");
        write_slice(&dir.join(slice_file("gt", s.index)), &s.gt, &meta)?;
        write_slice(&dir.join(slice_file("zf", s.index)), &s.zf, &meta)?;
        s.mask.write(&dir.join(format!("mask_{:02}.txt", s.index)))?;
    }
    Ok(dir)
}

pub fn read_case_record(dir: &Path) -> Result<CaseRecord> {
    let path = dir.join("case.json");
    let text = std::fs::read_to_string(&path).at(&path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_case(dir: &Path) -> Result<StoredCase> {
    let record = read_case_record(dir)?;
    let n = record.n_slices();
    let myo = read_mask(&dir.join("myo_mask.npy"))?;
    let gt = read_slices(dir, "gt", n)?;
    let zf = read_slices(dir, "zf", n)?;
    let masks = (0..n)
        .map(|i| SamplingMask::read(&dir.join(format!("mask_{i:02}.txt"))).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredCase {
        record,
        myo,
        gt,
        zf,
        masks,
    })
}

/// Case directories under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .at(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("case_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn write_prior(path: &Path, prior: &SemanticPrior) -> Result<()> {
    save(path, &prior.masks, &PriorMeta { scores: prior.scores })?;
    Ok(())
}

pub fn read_prior(path: &Path) -> Result<SemanticPrior> {
    let (masks, meta): (Array3<f64>, PriorMeta) = load(path)?;
    Ok(SemanticPrior {
        masks,
        scores: meta.scores,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").at(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).at(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).at(path)
}

/// Every regular file below `dir`, as sorted paths relative to `dir`.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).at(dir)? {
            let path = entry.at(dir)?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("below base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut out)?;
    }
    out.sort();
    Ok(out)
}

/// Content hash of a directory tree: relative paths and bytes of every file
/// not named in `exclude`.
pub fn hash_dir(dir: &Path, exclude: &[&str]) -> Result<String> {
    let mut buf = Vec::new();
    for rel in walk_files(dir)? {
        let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if exclude.contains(&name) {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = std::fs::read(&path).at(&path)?;
        buf.extend_from_slice(rel.to_string_lossy().as_bytes());
        buf.push(0);
        buf.extend_from_slice(sha256_hex(&bytes).as_bytes());
        buf.push(b'\n');
    }
    Ok(sha256_hex(&buf))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).at(path)?))
}
