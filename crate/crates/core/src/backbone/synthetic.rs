//! Deterministic, weight-free backend built from local image statistics.
//!
//! Each token of a `patch x patch` grid carries the patch's mean centered
//! color, mean gradient magnitude and a constant bias. Deeper layers average
//! these statistics over a growing token neighbourhood (radius = layer index).
//! Facets append a small coordinate encoding, go through a fixed orthogonal
//! projection per (kind, layer) and are split into heads. Embeddings skip the
//! coordinates, so a constant image yields a spatially constant map.
//!
//! Proposals are the connected components (4-connectivity) of an 8-level
//! per-channel color quantization, with predicted IoU and stability of 1.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_layer, mask_nms, Backend, EmbeddingMap, FacetKind, FacetStack, MaskProposal,
    ProposerConfig,
};
use crate::image::{BinaryMask, Image};
use crate::Result;

/// Statistics per token before projection: r, g, b, gradient, bias.
const STAT_DIM: usize = 5;
const COORD_DIM: usize = 3;
const FACET_IN_DIM: usize = STAT_DIM + COORD_DIM;
const BIAS: f64 = 0.25;
const COORD_SCALE: f64 = 0.1;
const PROJECTION_SEED: u64 = 0x5eed_fac7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Token size in pixels.
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    /// Components smaller than this fraction of the image are not proposed
    /// (the floor is one pixel).
    pub min_region_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            layers: 3,
            heads: 2,
            head_dim: 4,
            embed_dim: 8,
            min_region_fraction: 0.001,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    cfg: SyntheticConfig,
    /// `[kind][layer]`, each `(heads*head_dim) x FACET_IN_DIM`.
    facet_proj: Vec<Vec<DMatrix<f64>>>,
    /// Per layer, `embed_dim x STAT_DIM`.
    embed_proj: Vec<DMatrix<f64>>,
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self::new(SyntheticConfig::default()).expect("default synthetic config is valid")
    }
}

impl SyntheticBackend {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.layers == 0 || cfg.heads == 0 || cfg.head_dim == 0 {
            return Err(crate::Error::Config(
                "synthetic backend dims must be positive".into(),
            ));
        }
        let facet_dim = cfg.heads * cfg.head_dim;
        if facet_dim < FACET_IN_DIM || cfg.embed_dim < STAT_DIM {
            return Err(crate::Error::Config(format!(
                "synthetic backend needs heads*head_dim >= {FACET_IN_DIM} and embed_dim >= {STAT_DIM}"
            )));
        }
        let kinds = [FacetKind::Query, FacetKind::Key, FacetKind::Value];
        let facet_proj = kinds
            .iter()
            .map(|k| {
                (0..cfg.layers)
                    .map(|l| {
                        orthonormal_columns(facet_dim, FACET_IN_DIM, seed_for(k.index() as u64, l))
                    })
                    .collect()
            })
            .collect();
        let embed_proj = (0..cfg.layers)
            .map(|l| orthonormal_columns(cfg.embed_dim, STAT_DIM, seed_for(7, l)))
            .collect();
        Ok(Self {
            cfg,
            facet_proj,
            embed_proj,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    fn grid(&self, image: &Image) -> (usize, usize) {
        let p = self.cfg.patch;
        (image.height().div_ceil(p), image.width().div_ceil(p))
    }

    /// Per-token statistics averaged over a `(2r+1)^2` token window.
    fn token_stats(&self, image: &Image, layer: usize) -> (usize, usize, Vec<[f64; STAT_DIM]>) {
        let (gh, gw) = self.grid(image);
        let base = patch_stats(image, self.cfg.patch, gh, gw);
        (gh, gw, box_average(&base, gh, gw, layer))
    }
}

fn seed_for(kind: u64, layer: usize) -> u64 {
    PROJECTION_SEED ^ (kind << 32) ^ layer as u64
}

/// `rows x cols` matrix with orthonormal columns from the QR factorization of
/// a seeded uniform random matrix.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q()
}

fn patch_stats(image: &Image, patch: usize, gh: usize, gw: usize) -> Vec<[f64; STAT_DIM]> {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![[0.0; STAT_DIM]; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let (y0, y1) = (gy * patch, ((gy + 1) * patch).min(h));
            let (x0, x1) = (gx * patch, ((gx + 1) * patch).min(w));
            let mut acc = [0.0f64; 4];
            for y in y0..y1 {
                for x in x0..x1 {
                    let [r, g, b] = image.pixel(x, y);
                    acc[0] += r as f64 / 255.0 - 0.5;
                    acc[1] += g as f64 / 255.0 - 0.5;
                    acc[2] += b as f64 / 255.0 - 0.5;
                    acc[3] += gradient_magnitude(image, x, y) / 255.0;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            out[gy * gw + gx] = [acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n, BIAS];
        }
    }
    out
}

/// Central-difference luminance gradient magnitude with clamped borders.
fn gradient_magnitude(image: &Image, x: usize, y: usize) -> f64 {
    let (w, h) = (image.width(), image.height());
    let xl = x.saturating_sub(1);
    let xr = (x + 1).min(w - 1);
    let yu = y.saturating_sub(1);
    let yd = (y + 1).min(h - 1);
    let gx = (image.luma(xr, y) - image.luma(xl, y)) * 0.5;
    let gy = (image.luma(x, yd) - image.luma(x, yu)) * 0.5;
    (gx * gx + gy * gy).sqrt()
}

fn box_average(
    base: &[[f64; STAT_DIM]],
    gh: usize,
    gw: usize,
    radius: usize,
) -> Vec<[f64; STAT_DIM]> {
    if radius == 0 {
        return base.to_vec();
    }
    let mut out = vec![[0.0; STAT_DIM]; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = [0.0; STAT_DIM];
            let mut n = 0.0;
            for y in gy.saturating_sub(radius)..(gy + radius + 1).min(gh) {
                for x in gx.saturating_sub(radius)..(gx + radius + 1).min(gw) {
                    for (a, v) in acc.iter_mut().zip(&base[y * gw + x]) {
                        *a += v;
                    }
                    n += 1.0;
                }
            }
            for a in &mut acc {
                *a /= n;
            }
            out[gy * gw + gx] = acc;
        }
    }
    out
}

fn coord_encoding(gy: usize, gx: usize, gh: usize, gw: usize) -> [f64; COORD_DIM] {
    use std::f64::consts::PI;
    let u = (gx as f64 + 0.5) / gw as f64;
    let v = (gy as f64 + 0.5) / gh as f64;
    [
        COORD_SCALE * (PI * u).sin(),
        COORD_SCALE * (PI * v).sin(),
        COORD_SCALE * (PI * u).cos() * (PI * v).cos(),
    ]
}

fn project(m: &DMatrix<f64>, x: &[f64], out: &mut Vec<f32>) {
    for r in 0..m.nrows() {
        let mut s = 0.0;
        for (c, &xv) in x.iter().enumerate() {
            s += m[(r, c)] * xv;
        }
        out.push(s as f32);
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn layer_count(&self) -> usize {
        self.cfg.layers
    }

    fn head_count(&self) -> usize {
        self.cfg.heads
    }

    fn default_facet_layer(&self) -> usize {
        self.cfg.layers / 2
    }

    fn extract_facets(&self, image: &Image, layer: usize, kind: FacetKind) -> Result<FacetStack> {
        check_layer(layer, self.cfg.layers)?;
        let (gh, gw, stats) = self.token_stats(image, layer);
        let proj = &self.facet_proj[kind.index()][layer];
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim);

        // Token-major projection, then regroup per head.
        let mut tokens = Vec::with_capacity(gh * gw * heads * hd);
        let mut input = [0.0f64; FACET_IN_DIM];
        for gy in 0..gh {
            for gx in 0..gw {
                input[..STAT_DIM].copy_from_slice(&stats[gy * gw + gx]);
                input[STAT_DIM..].copy_from_slice(&coord_encoding(gy, gx, gh, gw));
                project(proj, &input, &mut tokens);
            }
        }
        let mut data = Vec::with_capacity(tokens.len());
        for n in 0..heads {
            for t in 0..gh * gw {
                let start = t * heads * hd + n * hd;
                data.extend_from_slice(&tokens[start..start + hd]);
            }
        }
        FacetStack::new(kind, layer, heads, gh, gw, hd, data)
    }

    fn extract_embedding(&self, image: &Image, layer: usize) -> Result<EmbeddingMap> {
        check_layer(layer, self.cfg.layers)?;
        let (gh, gw, stats) = self.token_stats(image, layer);
        let proj = &self.embed_proj[layer];
        let mut data = Vec::with_capacity(gh * gw * self.cfg.embed_dim);
        for s in &stats {
            project(proj, s, &mut data);
        }
        EmbeddingMap::new(layer, gh, gw, self.cfg.embed_dim, data)
    }

    fn propose_masks(&self, image: &Image, cfg: &ProposerConfig) -> Result<Vec<MaskProposal>> {
        cfg.validate()?;
        let min_area = ((self.cfg.min_region_fraction * (image.width() * image.height()) as f64)
            .ceil() as usize)
            .max(1);
        let mut proposals = Vec::new();
        if !cfg.accepts(1.0, 1.0) {
            return Ok(Vec::new());
        }
        for mask in quantized_components(image, min_area) {
            proposals.push(MaskProposal::new(mask, 1.0, 1.0)?);
        }
        Ok(mask_nms(proposals, cfg.nms_threshold))
    }
}

#[inline]
fn quantize(rgb: [u8; 3]) -> [u8; 3] {
    [rgb[0] >> 5, rgb[1] >> 5, rgb[2] >> 5]
}

/// Connected components of equal quantized color with at least `min_area`
/// pixels, ordered by their first pixel in raster order.
fn quantized_components(image: &Image, min_area: usize) -> Vec<BinaryMask> {
    let (w, h) = (image.width(), image.height());
    let quant: Vec<[u8; 3]> = (0..w * h).map(|i| quantize(image.pixel(i % w, i / w))).collect();
    let mut label = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let color = quant[start];
        let mut size = 0usize;
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if label[j] == usize::MAX && quant[j] == color {
                    label[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    let mut slot = vec![usize::MAX; sizes.len()];
    let mut masks = Vec::new();
    for (id, &n) in sizes.iter().enumerate() {
        if n >= min_area {
            slot[id] = masks.len();
            masks.push(BinaryMask::new(w, h));
        }
    }
    for (i, &id) in label.iter().enumerate() {
        if slot[id] != usize::MAX {
            masks[slot[id]].set(i % w, i / w, true);
        }
    }
    masks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn test_image_8() -> Image {
        Image::from_fn(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, 100]).unwrap()
    }

    #[test]
    fn facets_on_small_image() {
        let b = SyntheticBackend::default();
        let img = test_image_8();
        let f = b.extract_facets(&img, 0, FacetKind::Key).unwrap();
        assert_eq!(f.heads(), 2);
        assert_eq!(f.grid(), (2, 2));
        assert_eq!(f.kind, FacetKind::Key);
        assert_eq!(f.layer, 0);
        assert!(f.data().iter().all(|v| v.is_finite()));
        let again = b.extract_facets(&img, 0, FacetKind::Key).unwrap();
        assert_eq!(
            f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn invalid_layer_is_range_error() {
        let b = SyntheticBackend::default();
        let img = test_image_8();
        assert!(matches!(
            b.extract_facets(&img, 999, FacetKind::Key),
            Err(Error::LayerOutOfRange { layer: 999, .. })
        ));
        assert!(matches!(
            b.extract_embedding(&img, 999),
            Err(Error::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn kinds_differ() {
        let b = SyntheticBackend::default();
        let img = test_image_8();
        let q = b.extract_facets(&img, 1, FacetKind::Query).unwrap();
        let k = b.extract_facets(&img, 1, FacetKind::Key).unwrap();
        assert_ne!(q.data(), k.data());
    }

    #[test]
    fn constant_image_has_constant_embedding() {
        let b = SyntheticBackend::default();
        let img = Image::filled(16, 12, [40, 200, 90]).unwrap();
        for layer in 0..b.layer_count() {
            let e = b.extract_embedding(&img, layer).unwrap();
            let first = e.vector(0, 0).to_vec();
            let (gh, gw) = e.grid();
            for y in 0..gh {
                for x in 0..gw {
                    assert_eq!(e.vector(y, x), &first[..]);
                }
            }
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let b = SyntheticBackend::default();
        let img = test_image_8();
        let a = b.extract_embedding(&img, 2).unwrap();
        let c = b.extract_embedding(&img, 2).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn two_region_image_gives_two_disjoint_proposals() {
        let b = SyntheticBackend::default();
        let img =
            Image::from_fn(16, 16, |x, _| if x < 6 { [10, 10, 10] } else { [240, 240, 240] })
                .unwrap();
        // Oracle: flood-fill independently by column split.
        let left = BinaryMask::from_fn(16, 16, |x, _| x < 6);
        let right = BinaryMask::from_fn(16, 16, |x, _| x >= 6);
        let props = b.propose_masks(&img, &ProposerConfig::default()).unwrap();
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].mask(), &left);
        assert_eq!(props[1].mask(), &right);
        assert_eq!(props[0].mask().intersection_count(props[1].mask()).unwrap(), 0);
    }

    #[test]
    fn blank_image_gives_one_full_proposal() {
        let b = SyntheticBackend::default();
        let img = Image::filled(8, 8, [0, 0, 0]).unwrap();
        let props = b.propose_masks(&img, &ProposerConfig::default()).unwrap();
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].area(), 64);
        assert_eq!(props[0].predicted_iou, 1.0);
        assert_eq!(props[0].stability, 1.0);
    }

    #[test]
    fn identical_images_identical_facets() {
        let b = SyntheticBackend::default();
        let img = test_image_8();
        let copy = img.clone();
        for kind in [FacetKind::Query, FacetKind::Key, FacetKind::Value] {
            assert_eq!(
                b.extract_facets(&img, 1, kind).unwrap(),
                b.extract_facets(&copy, 1, kind).unwrap()
            );
        }
    }
}
