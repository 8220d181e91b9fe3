//! Semantic prior providers.
//!
//! A prior is a stack of three soft masks with descending confidence scores.
//! Providers: no prior (ablation), an Otsu/connected-component fallback, a
//! reference-mask passthrough, an HTTP client for an out-of-process
//! automatic-mask-generation service, and an adapter for any trained
//! segmenter that produces scored mask proposals.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageSlice;

pub const PRIOR_CHANNELS: usize = 3;
/// Environment variable holding the mask-service endpoint URL.
pub const MASK_SERVICE_ENV: &str = "RSFR_MASK_SERVICE";

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("mask service at {endpoint} unavailable: {reason}; retry with the fallback segmenter")]
    Unavailable { endpoint: String, reason: String },
    #[error("malformed mask-service response: {0}")]
    MalformedResponse(String),
    #[error("reference mask missing: {0}")]
    MissingReference(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("input image is not normalised")]
    Unnormalized,
    #[error("no mask-service endpoint configured (set {MASK_SERVICE_ENV})")]
    NoEndpoint,
}

pub type Result<T> = std::result::Result<T, SemanticsError>;

/// Three soft masks in `[0, 1]` with descending scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrior {
    /// `(channel, row, col)`
    pub masks: Array3<f64>,
    pub scores: [f64; PRIOR_CHANNELS],
}

impl SemanticPrior {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            masks: Array3::zeros((PRIOR_CHANNELS, shape.0, shape.1)),
            scores: [0.0; PRIOR_CHANNELS],
        }
    }

    pub fn spatial_dim(&self) -> (usize, usize) {
        let (_, h, w) = self.masks.dim();
        (h, w)
    }

    pub fn channel(&self, k: usize) -> Array2<f64> {
        self.masks.index_axis(ndarray::Axis(0), k).to_owned()
    }

    /// Shape, range and ordering invariants.
    pub fn is_valid(&self) -> bool {
        self.masks.dim().0 == PRIOR_CHANNELS
            && self.masks.iter().all(|v| (0.0..=1.0).contains(v))
            && self.scores.windows(2).all(|w| w[0] >= w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    FoundationModel,
    Fallback,
    Trained,
    Reference,
    None,
}

impl SegmenterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FoundationModel => "foundation_model",
            Self::Fallback => "fallback",
            Self::Trained => "trained",
            Self::Reference => "reference",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for SegmenterKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "foundation_model" | "sam" => Ok(Self::FoundationModel),
            "fallback" => Ok(Self::Fallback),
            "trained" => Ok(Self::Trained),
            "reference" => Ok(Self::Reference),
            "none" => Ok(Self::None),
            other => Err(format!("unknown segmenter kind {other:?}")),
        }
    }
}

impl std::fmt::Display for SegmenterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// --------------------------------------------------------------------------
// Proposals
// --------------------------------------------------------------------------

/// A scored candidate mask at any resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub mask: Array2<f64>,
    pub score: f64,
}

/// Anything producing scored mask proposals for an image.
pub trait MaskProposer: Send + Sync {
    fn propose(&self, image: &Array2<f64>) -> Result<Vec<MaskProposal>>;
}

/// Bilinear resampling with half-pixel centres.
pub fn resample_bilinear(x: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if x.dim() == shape {
        return x.clone();
    }
    let (h, w) = x.dim();
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    Array2::from_shape_fn(shape, |(r, c)| {
        let (r0, r1, fr) = coord(r, h, shape.0);
        let (c0, c1, fc) = coord(c, w, shape.1);
        let top = x[[r0, c0]] * (1.0 - fc) + x[[r0, c1]] * fc;
        let bottom = x[[r1, c0]] * (1.0 - fc) + x[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Top three proposals by score, resampled to `shape` and clamped to
/// `[0, 1]`. Missing channels stay zero with score 0.
pub fn prior_from_proposals(mut proposals: Vec<MaskProposal>, shape: (usize, usize)) -> SemanticPrior {
    proposals.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut prior = SemanticPrior::zeros(shape);
    for (k, p) in proposals.into_iter().take(PRIOR_CHANNELS).enumerate() {
        let m = resample_bilinear(&p.mask, shape).mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        prior.masks.index_axis_mut(ndarray::Axis(0), k).assign(&m);
        prior.scores[k] = p.score;
    }
    prior
}

// --------------------------------------------------------------------------
// Fallback: Otsu threshold + connected components
// --------------------------------------------------------------------------

const OTSU_BINS: usize = 256;

/// Otsu threshold over a 256-bin histogram; `None` for a constant image.
pub fn otsu_threshold(x: &Array2<f64>) -> Option<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0f64; OTSU_BINS];
    for &v in x {
        let b = (((v - lo) / width) as usize).min(OTSU_BINS - 1);
        hist[b] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * h).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h;
        sum0 += i as f64 * h;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some(lo + (best_bin + 1) as f64 * width)
}

/// 8-connected components of a binary image, largest first. Ties are broken
/// by raster position of the first pixel.
pub fn connected_components(fg: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = fg.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !fg[[r, c]] || seen[[r, c]] {
                continue;
            }
            seen[[r, c]] = true;
            queue.push_back((r, c));
            let mut comp = Vec::new();
            while let Some((pr, pc)) = queue.pop_front() {
                comp.push((pr, pc));
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (nr, nc) = (pr as isize + dr, pc as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if fg[[nr, nc]] && !seen[[nr, nc]] {
                            seen[[nr, nc]] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            comps.push(comp);
        }
    }
    // stable sort keeps raster order among equal areas
    comps.sort_by(|a, b| b.len().cmp(&a.len()));
    comps
}

/// Otsu foreground, 8-connected labelling, the three largest components as
/// binary masks scored by their share of the foreground area.
pub fn fallback_segment(x: &ImageSlice) -> SemanticPrior {
    let shape = x.dim();
    let mut prior = SemanticPrior::zeros(shape);
    let Some(t) = otsu_threshold(&x.pixels) else {
        return prior;
    };
    let fg = x.pixels.mapv(|v| v > t);
    let comps = connected_components(&fg);
    let fg_area: usize = comps.iter().map(|c| c.len()).sum();
    for (k, comp) in comps.iter().take(PRIOR_CHANNELS).enumerate() {
        for &(r, c) in comp {
            prior.masks[[k, r, c]] = 1.0;
        }
        prior.scores[k] = comp.len() as f64 / fg_area as f64;
    }
    prior
}

/// Reference mask in channel 0, score 1.
pub fn reference_prior(mask: &Array2<bool>) -> SemanticPrior {
    let mut prior = SemanticPrior::zeros(mask.dim());
    prior
        .masks
        .index_axis_mut(ndarray::Axis(0), 0)
        .assign(&mask.mapv(|b| if b { 1.0 } else { 0.0 }));
    prior.scores[0] = 1.0;
    prior
}

// --------------------------------------------------------------------------
// Mask-service client
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskServiceConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl MaskServiceConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
        }
    }

    pub fn from_env() -> Result<Self> {
        std::env::var(MASK_SERVICE_ENV)
            .map(Self::new)
            .map_err(|_| SemanticsError::NoEndpoint)
    }
}

/// Request body: the image as base64 little-endian `f32`, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRequest {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
}

impl MaskRequest {
    pub fn encode(image: &Array2<f64>) -> Self {
        let (height, width) = image.dim();
        let mut bytes = Vec::with_capacity(height * width * 4);
        for &v in image.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self {
            image: B64.encode(bytes),
            height,
            width,
            dtype: "float32".into(),
        }
    }

    pub fn decode(&self) -> Result<Array2<f64>> {
        decode_f32(&self.image, self.height, self.width)
    }
}

/// Uncompressed COCO run-length encoding: column-major runs, starting with
/// a run of zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn encode(mask: &Array2<bool>) -> Self {
        let (h, w) = mask.dim();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for c in 0..w {
            for r in 0..h {
                if mask[[r, c]] != current {
                    counts.push(run);
                    run = 0;
                    current = !current;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Array2<f64>> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(SemanticsError::MalformedResponse(format!(
                "RLE covers {total} pixels, expected {}",
                h * w
            )));
        }
        let mut out = Array2::zeros((h, w));
        let mut pos = 0;
        for (i, &n) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + n {
                    out[[p % h, p / h]] = 1.0;
                }
            }
            pos += n;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMask {
    pub height: usize,
    pub width: usize,
    /// base64 little-endian `f32`, row-major
    pub data: String,
}

impl DenseMask {
    pub fn encode(mask: &Array2<f64>) -> Self {
        let r = MaskRequest::encode(mask);
        Self {
            height: r.height,
            width: r.width,
            data: r.image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<RleMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<DenseMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub masks: Vec<WireMask>,
}

fn decode_f32(data: &str, height: usize, width: usize) -> Result<Array2<f64>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| SemanticsError::MalformedResponse(format!("base64: {e}")))?;
    if bytes.len() != height * width * 4 {
        return Err(SemanticsError::MalformedResponse(format!(
            "{} bytes for a {height}x{width} float32 array",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array2::from_shape_vec((height, width), values).map_err(|e| SemanticsError::MalformedResponse(e.to_string()))
}

impl MaskResponse {
    pub fn into_proposals(self) -> Result<Vec<MaskProposal>> {
        self.masks
            .into_iter()
            .map(|m| {
                let mask = match (&m.rle, &m.dense) {
                    (Some(rle), _) => rle.decode()?,
                    (None, Some(d)) => decode_f32(&d.data, d.height, d.width)?,
                    (None, None) => {
                        return Err(SemanticsError::MalformedResponse("mask entry without rle or dense".into()));
                    }
                };
                if !m.score.is_finite() {
                    return Err(SemanticsError::MalformedResponse("non-finite score".into()));
                }
                Ok(MaskProposal { mask, score: m.score })
            })
            .collect()
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().expect("poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Blocking JSON client for an automatic-mask-generation service.
#[derive(Clone)]
pub struct MaskServiceClient {
    config: MaskServiceConfig,
    agent: ureq::Agent,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for MaskServiceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskServiceClient").field("config", &self.config).finish()
    }
}

impl MaskServiceClient {
    pub fn new(config: MaskServiceConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        let in_flight = Arc::new(InFlight {
            limit: config.max_in_flight.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        });
        Self {
            config,
            agent,
            in_flight,
        }
    }

    pub fn config(&self) -> &MaskServiceConfig {
        &self.config
    }

    fn unavailable(&self, reason: impl ToString) -> SemanticsError {
        SemanticsError::Unavailable {
            endpoint: self.config.endpoint.clone(),
            reason: reason.to_string(),
        }
    }

    /// Top three proposals for a normalised image.
    pub fn segment(&self, x: &ImageSlice) -> Result<SemanticPrior> {
        let proposals = self.propose(&x.pixels)?;
        Ok(prior_from_proposals(proposals, x.dim()))
    }

    /// Segments a batch with at most `max_in_flight` concurrent requests.
    pub fn segment_batch(&self, xs: &[ImageSlice]) -> Vec<Result<SemanticPrior>> {
        let mut out: Vec<Option<Result<SemanticPrior>>> = (0..xs.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<SemanticPrior>>>> = (0..xs.len()).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.in_flight.limit.min(xs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= xs.len() {
                        break;
                    }
                    *slots[i].lock().expect("poisoned") = Some(self.segment(&xs[i]));
                });
            }
        });
        for (o, s) in out.iter_mut().zip(slots) {
            *o = s.into_inner().expect("poisoned");
        }
        out.into_iter().map(|o| o.expect("every slot filled")).collect()
    }
}

impl MaskProposer for MaskServiceClient {
    fn propose(&self, image: &Array2<f64>) -> Result<Vec<MaskProposal>> {
        let _permit = self.in_flight.acquire();
        let request = MaskRequest::encode(image);
        let response = self
            .agent
            .post(&self.config.endpoint)
            .send_json(&request)
            .map_err(|e| self.unavailable(e))?;
        let body: MaskResponse = response
            .into_body()
            .read_json()
            .map_err(|e| SemanticsError::MalformedResponse(e.to_string()))?;
        body.into_proposals()
    }
}

/// Adapter turning any trained mask proposer into a prior provider.
pub struct TrainedAdapter {
    pub name: String,
    pub proposer: Box<dyn MaskProposer>,
}

impl std::fmt::Debug for TrainedAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedAdapter").field("name", &self.name).finish()
    }
}

/// Proposals read from a precomputed probability stack `(k, h, w)`; each
/// channel is scored by its mean confidence over pixels above 0.5.
pub struct ProbabilityStack(pub Array3<f64>);

impl MaskProposer for ProbabilityStack {
    fn propose(&self, _image: &Array2<f64>) -> Result<Vec<MaskProposal>> {
        Ok(self
            .0
            .outer_iter()
            .map(|m| {
                let confident: Vec<f64> = m.iter().copied().filter(|&v| v > 0.5).collect();
                let score = if confident.is_empty() {
                    0.0
                } else {
                    confident.iter().sum::<f64>() / confident.len() as f64
                };
                MaskProposal {
                    mask: m.to_owned(),
                    score,
                }
            })
            .collect())
    }
}

// --------------------------------------------------------------------------
// Provider dispatch
// --------------------------------------------------------------------------

/// A configured semantic-prior provider.
#[derive(Debug)]
pub enum Segmenter {
    None,
    Fallback,
    Reference(Arc<Array2<bool>>),
    FoundationModel(MaskServiceClient),
    Trained(TrainedAdapter),
}

impl Segmenter {
    pub fn kind(&self) -> SegmenterKind {
        match self {
            Self::None => SegmenterKind::None,
            Self::Fallback => SegmenterKind::Fallback,
            Self::Reference(_) => SegmenterKind::Reference,
            Self::FoundationModel(_) => SegmenterKind::FoundationModel,
            Self::Trained(_) => SegmenterKind::Trained,
        }
    }

    /// Identity of the provider and its frozen state.
    pub fn fingerprint(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Fallback => format!("fallback:otsu{OTSU_BINS}:cc8:top{PRIOR_CHANNELS}"),
            Self::Reference(m) => format!("reference:{}x{}:{}", m.nrows(), m.ncols(), m.iter().filter(|&&b| b).count()),
            Self::FoundationModel(c) => format!("foundation_model:{}", c.config.endpoint),
            Self::Trained(a) => format!("trained:{}", a.name),
        }
    }

    /// `F_seg = H_S(coarse)`; the input must be a normalised slice.
    pub fn segment(&self, coarse: &ImageSlice) -> Result<SemanticPrior> {
        if !coarse.is_normalized() {
            return Err(SemanticsError::Unnormalized);
        }
        self.segment_unchecked(coarse)
    }

    /// As [`Segmenter::segment`] without the normalisation check.
    pub fn segment_unchecked(&self, coarse: &ImageSlice) -> Result<SemanticPrior> {
        let shape = coarse.dim();
        match self {
            Self::None => Ok(SemanticPrior::zeros(shape)),
            Self::Fallback => Ok(fallback_segment(coarse)),
            Self::Reference(mask) => {
                if mask.dim() != shape {
                    return Err(SemanticsError::ShapeMismatch {
                        expected: shape,
                        got: mask.dim(),
                    });
                }
                Ok(reference_prior(mask))
            }
            Self::FoundationModel(client) => client.segment(coarse),
            Self::Trained(adapter) => Ok(prior_from_proposals(adapter.proposer.propose(&coarse.pixels)?, shape)),
        }
    }
}
