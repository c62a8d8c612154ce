//! Initial pseudo-mask: multi-head facet correlation, MAD normalization and a
//! skewness-adaptive threshold.
//!
//! The similarity of two facet stacks is the per-location cosine of each
//! head's feature vectors, averaged over heads and bilinearly upsampled to the
//! image size. The sample skewness of that map selects the threshold branch:
//!
//! * right-skewed (`γ > band`): `F = clip(b_right + c·s_right·|γ|, 0, 1)`
//! * left-skewed (`γ < -band`): `F = clip(b_left + c·s_left·|γ|, 0, 1)`
//! * moderate: the raw map is thresholded at `μ + z·σ`.
//!
//! In the skewed branches a pixel is a change candidate iff its normalized
//! similarity is below `F`. Normalization maps the window
//! `[μ - 3·MAD, μ + 3·MAD]`, clamped to the observed value range, onto [0, 1].

use serde::{Deserialize, Serialize};

use crate::backbone::{AnalysisRequest, Backend, FacetKind, FacetStack};
use crate::image::{BinaryMask, Image};
use crate::{Error, Result};

/// Variance/MAD floor under which a map counts as uniform.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Real-valued map at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    min: f64,
    max: f64,
}

impl SimilarityMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} map with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("similarity map has non-finite values".into()));
        }
        let (min, max) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Self {
            width,
            height,
            data,
            min,
            max,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Recorded `(min, max)` of the values.
    pub fn value_range(&self) -> (f64, f64) {
        (self.min, self.max)
    }
}

/// Adaptive threshold constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdParams {
    pub b_right: f64,
    pub s_right: f64,
    pub b_left: f64,
    pub s_left: f64,
    pub c: f64,
    pub skew_band: f64,
    pub z_value: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            b_right: 0.05,
            s_right: 0.1,
            b_left: 0.7,
            s_left: 1.0,
            c: 1.0,
            skew_band: 0.2,
            z_value: -0.52,
        }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.b_right,
            self.s_right,
            self.b_left,
            self.s_left,
            self.c,
            self.skew_band,
            self.z_value,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("threshold parameters must be finite".into()));
        }
        if self.skew_band < 0.0 {
            return Err(Error::Config(format!(
                "threshold.skew_band must be >= 0, got {}",
                self.skew_band
            )));
        }
        Ok(())
    }
}

/// Outcome of the adaptive threshold function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "branch")]
pub enum Threshold {
    /// Right-skewed: threshold on the normalized map.
    Right { value: f64 },
    /// Left-skewed: threshold on the normalized map.
    Left { value: f64 },
    /// Moderate skew: threshold the raw map at `μ + z·σ`.
    ZScore { z: f64 },
}

/// Binary change candidates at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub mask: BinaryMask,
    /// The cut applied: `F(γ)` on the normalized map, or `μ + z·σ` on the
    /// raw map for the moderate branch.
    pub threshold_used: f64,
    pub skew: f64,
    pub branch: Threshold,
}

#[inline]
fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    // sqrt(na*nb) keeps the expression symmetric and gives exactly 1 for
    // identical vectors.
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

fn check_pair(f0: &FacetStack, f1: &FacetStack) -> Result<()> {
    if f0.kind != f1.kind
        || f0.layer != f1.layer
        || f0.heads() != f1.heads()
        || f0.grid() != f1.grid()
        || f0.channels() != f1.channels()
    {
        return Err(Error::ShapeMismatch(format!(
            "facet stacks differ: {:?}/{} {}x{:?}x{} vs {:?}/{} {}x{:?}x{}",
            f0.kind,
            f0.layer,
            f0.heads(),
            f0.grid(),
            f0.channels(),
            f1.kind,
            f1.layer,
            f1.heads(),
            f1.grid(),
            f1.channels()
        )));
    }
    Ok(())
}

/// Head-averaged per-token cosine similarity on the token grid, row-major.
pub fn token_similarity(f0: &FacetStack, f1: &FacetStack) -> Result<Vec<f64>> {
    check_pair(f0, f1)?;
    let (gh, gw) = f0.grid();
    let heads = f0.heads();
    let mut out = vec![0.0f64; gh * gw];
    for (i, o) in out.iter_mut().enumerate() {
        let (r, c) = (i / gw, i % gw);
        let mut acc = 0.0;
        for n in 0..heads {
            acc += cosine(f0.vector(n, r, c), f1.vector(n, r, c));
        }
        *o = acc / heads as f64;
    }
    Ok(out)
}

/// `a + (b - a)·t`; exact when `a == b`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear resize of a row-major `src_h x src_w` grid (half-pixel centers,
/// edge clamped).
pub fn bilinear_resize(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let axis = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
                    .clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(dst_h, src_h);
    let xs = axis(dst_w, src_w);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(src[y0 * src_w + x0], src[y0 * src_w + x1], fx);
            let bot = lerp(src[y1 * src_w + x0], src[y1 * src_w + x1], fx);
            out.push(lerp(top, bot, fy));
        }
    }
    out
}

/// Multi-head correlation of two facet stacks, upsampled to `width x height`.
/// Symmetric in its arguments bit-for-bit.
pub fn correlate_heads(
    f0: &FacetStack,
    f1: &FacetStack,
    width: usize,
    height: usize,
) -> Result<SimilarityMap> {
    let tokens = token_similarity(f0, f1)?;
    let (gh, gw) = f0.grid();
    SimilarityMap::new(width, height, bilinear_resize(&tokens, gh, gw, height, width))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population central moments `(mean, m2, m3)`.
fn moments(values: &[f64]) -> (f64, f64, f64) {
    let mu = mean(values);
    let n = values.len() as f64;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &v in values {
        let d = v - mu;
        m2 += d * d;
        m3 += d * d * d;
    }
    (mu, m2 / n, m3 / n)
}

/// Fisher–Pearson moment coefficient of skewness `m3 / m2^{3/2}`.
/// Zero-variance samples have skewness 0.
pub fn skewness(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::SampleTooSmall {
            needed: 2,
            got: values.len(),
        });
    }
    let (_, m2, m3) = moments(values);
    if m2 < UNIFORM_EPS {
        return Ok(0.0);
    }
    Ok(m3 / m2.powf(1.5))
}

/// Mean absolute deviation about the mean.
pub fn mad(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::SampleTooSmall { needed: 1, got: 0 });
    }
    let mu = mean(values);
    Ok(values.iter().map(|v| (v - mu).abs()).sum::<f64>() / values.len() as f64)
}

/// Population standard deviation.
fn std_dev(values: &[f64]) -> f64 {
    moments(values).1.sqrt()
}

/// Robust min-max normalization onto [0, 1].
///
/// The window is `[μ - 3·MAD, μ + 3·MAD]` intersected with the observed
/// `[min, max]`; values are mapped linearly and clipped. A map whose MAD is
/// below [`UNIFORM_EPS`] is uniform and maps to 1.0 everywhere.
pub fn normalize_map(s: &SimilarityMap) -> Result<SimilarityMap> {
    let values = s.data();
    let mu = mean(values);
    let d = mad(values)?;
    let out = if d < UNIFORM_EPS {
        vec![1.0; values.len()]
    } else {
        let (lo_obs, hi_obs) = s.value_range();
        let lo = (mu - 3.0 * d).max(lo_obs);
        let hi = (mu + 3.0 * d).min(hi_obs);
        let span = hi - lo;
        values
            .iter()
            .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect()
    };
    SimilarityMap::new(s.width(), s.height(), out)
}

/// Skewness-dependent threshold. Branch boundaries are strict: `|γ| == band`
/// falls into the z-score branch.
pub fn adaptive_threshold(gamma: f64, p: &ThresholdParams) -> Threshold {
    if gamma > p.skew_band {
        Threshold::Right {
            value: (p.b_right + p.c * p.s_right * gamma.abs()).clamp(0.0, 1.0),
        }
    } else if gamma < -p.skew_band {
        Threshold::Left {
            value: (p.b_left + p.c * p.s_left * gamma.abs()).clamp(0.0, 1.0),
        }
    } else {
        Threshold::ZScore { z: p.z_value }
    }
}

/// Applies the adaptive threshold. `norm` must come from
/// [`normalize_map`]`(raw)` and `gamma` from [`skewness`] of `raw`.
pub fn binarize(
    norm: &SimilarityMap,
    raw: &SimilarityMap,
    gamma: f64,
    p: &ThresholdParams,
) -> Result<PseudoMask> {
    if norm.width() != raw.width() || norm.height() != raw.height() {
        return Err(Error::ShapeMismatch(
            "normalized and raw maps differ in size".into(),
        ));
    }
    let (w, h) = (raw.width(), raw.height());
    let branch = adaptive_threshold(gamma, p);
    let (cut, source) = match branch {
        Threshold::Right { value } | Threshold::Left { value } => (value, norm.data()),
        Threshold::ZScore { z } => {
            let values = raw.data();
            (mean(values) + z * std_dev(values), values)
        }
    };
    // A uniform map carries no change evidence.
    let uniform = mad(raw.data())? < UNIFORM_EPS;
    let data = if uniform {
        vec![false; w * h]
    } else {
        source.iter().map(|&v| v < cut).collect()
    };
    Ok(PseudoMask {
        mask: BinaryMask::from_vec(w, h, data)?,
        threshold_used: cut,
        skew: gamma,
        branch,
    })
}

/// Similarity map plus the pseudo-mask derived from it.
#[derive(Debug, Clone)]
pub struct PseudoMaskOutput {
    pub similarity: SimilarityMap,
    pub pseudo: PseudoMask,
}

/// Statistics → normalization → threshold on an existing similarity map.
pub fn pseudomask_from_similarity(
    raw: SimilarityMap,
    p: &ThresholdParams,
) -> Result<PseudoMaskOutput> {
    let gamma = skewness(raw.data())?;
    let norm = normalize_map(&raw)?;
    let pseudo = binarize(&norm, &raw, gamma, p)?;
    Ok(PseudoMaskOutput {
        similarity: raw,
        pseudo,
    })
}

/// Pseudo-mask from two facet stacks of images of size `width x height`.
pub fn pseudomask_from_facets(
    f0: &FacetStack,
    f1: &FacetStack,
    width: usize,
    height: usize,
    p: &ThresholdParams,
) -> Result<PseudoMaskOutput> {
    pseudomask_from_similarity(correlate_heads(f0, f1, width, height)?, p)
}

/// Full pseudo-mask generation for a registered image pair. Symmetric in
/// `(img0, img1)`.
pub fn generate_pseudomask(
    backend: &dyn Backend,
    img0: &Image,
    img1: &Image,
    layer: usize,
    kind: FacetKind,
    p: &ThresholdParams,
) -> Result<PseudoMaskOutput> {
    if !img0.same_size(img1) {
        return Err(Error::ShapeMismatch(format!(
            "image sizes differ: {}x{} vs {}x{}",
            img0.width(),
            img0.height(),
            img1.width(),
            img1.height()
        )));
    }
    p.validate()?;
    let f0 = backend.extract_facets(img0, layer, kind)?;
    let f1 = backend.extract_facets(img1, layer, kind)?;
    pseudomask_from_facets(&f0, &f1, img0.width(), img0.height(), p)
}

/// Analysis request for the shared single-pass backend call.
pub(crate) fn request<'a>(
    layer: usize,
    kind: FacetKind,
    embedding_layer: usize,
    proposer: &'a crate::backbone::ProposerConfig,
) -> AnalysisRequest<'a> {
    AnalysisRequest {
        facet_layer: layer,
        facet_kind: kind,
        embedding_layer,
        proposer,
    }
}
