//! Feature extraction and class-agnostic mask proposal behind one contract.
//!
//! A [`Backend`] exposes three things per image: per-head attention facets at
//! a chosen encoder layer, the token embedding map at a chosen layer, and a
//! list of class-agnostic mask proposals at input resolution. Layer and head
//! counts are part of the contract so layer defaults live in config.

mod synthetic;

use serde::{Deserialize, Serialize};

use crate::image::{nearest_index, BinaryMask, Image};
use crate::{Error, Result};

pub use synthetic::{SyntheticBackend, SyntheticConfig};

/// Which projection of the self-attention input a facet comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacetKind {
    Query,
    Key,
    Value,
}

impl FacetKind {
    pub fn index(self) -> usize {
        match self {
            FacetKind::Query => 0,
            FacetKind::Key => 1,
            FacetKind::Value => 2,
        }
    }
}

impl std::str::FromStr for FacetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(FacetKind::Query),
            "key" | "k" => Ok(FacetKind::Key),
            "value" | "v" => Ok(FacetKind::Value),
            other => Err(Error::Config(format!("unknown facet kind `{other}`"))),
        }
    }
}

/// Per-head facet tensor of one image at one layer, laid out
/// `[head][row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetStack {
    pub kind: FacetKind,
    pub layer: usize,
    heads: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FacetStack {
    pub fn new(
        kind: FacetKind,
        layer: usize,
        heads: usize,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if heads == 0 || grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "facet stack dims must be positive, got {heads}x{grid_h}x{grid_w}x{channels}"
            )));
        }
        if data.len() != heads * grid_h * grid_w * channels {
            return Err(Error::ShapeMismatch(format!(
                "facet stack {heads}x{grid_h}x{grid_w}x{channels} needs {} values, got {}",
                heads * grid_h * grid_w * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("facet stack has non-finite entries".into()));
        }
        Ok(Self {
            kind,
            layer,
            heads,
            grid_h,
            grid_w,
            channels,
            data,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of `head` at token `(row, col)`.
    #[inline]
    pub fn vector(&self, head: usize, row: usize, col: usize) -> &[f32] {
        let start = ((head * self.grid_h + row) * self.grid_w + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Token embedding map `[row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub layer: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    data: Vec<f32>,
}

impl EmbeddingMap {
    pub fn new(
        layer: usize,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "embedding dims must be positive, got {grid_h}x{grid_w}x{channels}"
            )));
        }
        if data.len() != grid_h * grid_w * channels {
            return Err(Error::ShapeMismatch(format!(
                "embedding {grid_h}x{grid_w}x{channels} needs {} values, got {}",
                grid_h * grid_w * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite entries".into()));
        }
        Ok(Self {
            layer,
            grid_h,
            grid_w,
            channels,
            data,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_w + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// One class-agnostic segment at input-image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    mask: BinaryMask,
    area: usize,
    pub predicted_iou: f64,
    pub stability: f64,
}

impl MaskProposal {
    pub fn new(mask: BinaryMask, predicted_iou: f64, stability: f64) -> Result<Self> {
        let area = mask.count();
        if area == 0 {
            return Err(Error::InvalidInput("mask proposal has zero area".into()));
        }
        Ok(Self {
            mask,
            area,
            predicted_iou,
            stability,
        })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn area(&self) -> usize {
        self.area
    }
}

/// Automatic mask generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposerConfig {
    pub points_per_side: usize,
    pub nms_threshold: f64,
    pub predicted_iou_threshold: f64,
    pub stability_threshold: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            points_per_side: 32,
            nms_threshold: 0.7,
            predicted_iou_threshold: 0.7,
            stability_threshold: 0.7,
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_side == 0 {
            return Err(Error::Config("proposer.points_per_side must be >= 1".into()));
        }
        for (name, v) in [
            ("nms_threshold", self.nms_threshold),
            ("predicted_iou_threshold", self.predicted_iou_threshold),
            ("stability_threshold", self.stability_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("proposer.{name} must be in [0,1], got {v}")));
            }
        }
        Ok(())
    }

    /// Whether a proposal passes the score thresholds.
    pub fn accepts(&self, predicted_iou: f64, stability: f64) -> bool {
        predicted_iou >= self.predicted_iou_threshold && stability >= self.stability_threshold
    }
}

/// Mean embedding over the cells covered by a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEmbedding {
    pub vector: Vec<f64>,
    /// Number of embedding-grid cells the mask covers.
    pub source_mask_area: usize,
}

/// Everything the pipeline needs from one image, produced in one call so
/// adapters can share a single encoder pass.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub facets: FacetStack,
    pub embedding: EmbeddingMap,
    pub proposals: Vec<MaskProposal>,
}

/// What [`Backend::analyze`] should compute.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisRequest<'a> {
    pub facet_layer: usize,
    pub facet_kind: FacetKind,
    pub embedding_layer: usize,
    pub proposer: &'a ProposerConfig,
}

/// Feature extractor and mask proposer.
///
/// Implementations are read-only after construction and must return
/// bit-identical results for identical inputs.
pub trait Backend: Send + Sync {
    /// Stable identifier recorded in reports.
    fn id(&self) -> &str;

    fn layer_count(&self) -> usize;

    fn head_count(&self) -> usize;

    /// Layer whose facets feed the similarity map by default.
    fn default_facet_layer(&self) -> usize;

    fn extract_facets(&self, image: &Image, layer: usize, kind: FacetKind) -> Result<FacetStack>;

    fn extract_embedding(&self, image: &Image, layer: usize) -> Result<EmbeddingMap>;

    fn propose_masks(&self, image: &Image, cfg: &ProposerConfig) -> Result<Vec<MaskProposal>>;

    /// Layer used for mask embeddings by default (the last one).
    fn last_layer(&self) -> usize {
        self.layer_count() - 1
    }

    fn analyze(&self, image: &Image, req: &AnalysisRequest<'_>) -> Result<ImageAnalysis> {
        Ok(ImageAnalysis {
            facets: self.extract_facets(image, req.facet_layer, req.facet_kind)?,
            embedding: self.extract_embedding(image, req.embedding_layer)?,
            proposals: self.propose_masks(image, req.proposer)?,
        })
    }
}

pub(crate) fn check_layer(layer: usize, count: usize) -> Result<()> {
    if layer < count {
        Ok(())
    } else {
        Err(Error::LayerOutOfRange { layer, count })
    }
}

/// Nearest-neighbour downscale of an image-resolution mask onto an
/// `grid_h x grid_w` token grid; each cell samples the pixel at its center.
pub fn mask_to_grid(mask: &BinaryMask, grid_h: usize, grid_w: usize) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        let y = nearest_index(gy, grid_h, h);
        for gx in 0..grid_w {
            let x = nearest_index(gx, grid_w, w);
            out.push(mask.get(x, y));
        }
    }
    out
}

/// Averages `emb` over the grid cells selected by `grid_mask`
/// (row-major, `grid_h * grid_w` long).
pub fn mask_embedding_on_grid(emb: &EmbeddingMap, grid_mask: &[bool]) -> Result<MaskEmbedding> {
    let (gh, gw) = emb.grid();
    if grid_mask.len() != gh * gw {
        return Err(Error::ShapeMismatch(format!(
            "grid mask has {} cells, embedding grid is {gh}x{gw}",
            grid_mask.len()
        )));
    }
    let c = emb.channels();
    let mut acc = vec![0.0f64; c];
    let mut n = 0usize;
    for (cell, _) in grid_mask.iter().enumerate().filter(|(_, &m)| m) {
        let v = &emb.data()[cell * c..(cell + 1) * c];
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask {
            height: gh,
            width: gw,
        });
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(MaskEmbedding {
        vector: acc,
        source_mask_area: n,
    })
}

/// Mask embedding of an image-resolution mask: nearest-neighbour downscale to
/// the embedding grid, then the mean over covered cells.
pub fn mask_embedding(emb: &EmbeddingMap, mask: &BinaryMask) -> Result<MaskEmbedding> {
    let (gh, gw) = emb.grid();
    mask_embedding_on_grid(emb, &mask_to_grid(mask, gh, gw))
}

/// Greedy mask-IoU non-maximum suppression. `proposals` are visited in
/// descending predicted-IoU order (ties keep input order); the survivors are
/// returned in their original order.
pub fn mask_nms(proposals: Vec<MaskProposal>, iou_threshold: f64) -> Vec<MaskProposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .predicted_iou
            .total_cmp(&proposals[a].predicted_iou)
            .then(a.cmp(&b))
    });
    let boxes: Vec<_> = proposals.iter().map(|p| p.mask().bbox()).collect();
    let disjoint = |i: usize, j: usize| match (boxes[i], boxes[j]) {
        (Some((ax0, ay0, ax1, ay1)), Some((bx0, by0, bx1, by1))) => {
            ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0
        }
        _ => true,
    };
    let mut keep = vec![false; proposals.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&j| {
            if disjoint(i, j) {
                return false;
            }
            let inter = proposals[i]
                .mask()
                .intersection_count(proposals[j].mask())
                .unwrap_or(0);
            let union = proposals[i].area() + proposals[j].area() - inter;
            union > 0 && inter as f64 / union as f64 > iou_threshold
        });
        if !suppressed {
            keep[i] = true;
            kept.push(i);
        }
    }
    proposals
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect()
}
