//! Automatic mask generation from a regular grid of single-point prompts.

use candle_core::{Device, Result, Tensor};
use candle_transformers::models::segment_anything::mask_decoder::MaskDecoder;
use candle_transformers::models::segment_anything::prompt_encoder::PromptEncoder;
use gescf::{BinaryMask, MaskProposal, ProposerConfig};

pub const POINTS_PER_BATCH: usize = 64;
/// Logit offset used for the stability score.
pub const STABILITY_OFFSET: f32 = 1.0;

/// Geometry linking the original image, the resized content and the padded
/// encoder input.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Content size after the longest-side resize.
    pub resized_w: usize,
    pub resized_h: usize,
    /// Side of the square padded encoder input.
    pub input: usize,
}

/// Point prompts at cell centers of an `n x n` grid, in resized-frame pixels.
pub fn point_grid(n: usize, frame: &Frame) -> Vec<[f32; 2]> {
    let sx = frame.resized_w as f64 / frame.width as f64;
    let sy = frame.resized_h as f64 / frame.height as f64;
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64 * frame.width as f64;
            let y = (j as f64 + 0.5) / n as f64 * frame.height as f64;
            pts.push([(x * sx) as f32, (y * sy) as f32]);
        }
    }
    pts
}

/// Bilinear resample of `side x side` low-resolution logits onto the original
/// image, cropping away the padding in one step.
pub fn upsample_logits(low: &[f32], side: usize, frame: &Frame) -> Vec<f32> {
    let to_low = side as f64 / frame.input as f64;
    let axis = |len: usize, resized: usize| -> Vec<(usize, usize, f32)> {
        let scale = resized as f64 / len as f64 * to_low;
        (0..len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(side - 1), (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(frame.height, frame.resized_h);
    let xs = axis(frame.width, frame.resized_w);
    let mut out = Vec::with_capacity(frame.width * frame.height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = low[y0 * side + x0] + (low[y0 * side + x1] - low[y0 * side + x0]) * fx;
            let bot = low[y1 * side + x0] + (low[y1 * side + x1] - low[y1 * side + x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// `|logits > offset| / |logits > -offset|`; 0 when both are empty.
pub fn stability_score(logits: &[f32], offset: f32) -> f64 {
    let hi = logits.iter().filter(|&&v| v > offset).count();
    let lo = logits.iter().filter(|&&v| v > -offset).count();
    if lo == 0 {
        0.0
    } else {
        hi as f64 / lo as f64
    }
}

fn box_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let area = |(x0, y0, x1, y1): (usize, usize, usize, usize)| ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let (ix0, iy0) = (a.0.max(b.0), a.1.max(b.1));
    let (ix1, iy1) = (a.2.min(b.2), a.3.min(b.3));
    if ix0 > ix1 || iy0 > iy1 {
        return 0.0;
    }
    let inter = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
    inter / (area(a) + area(b) - inter)
}

/// Greedy bounding-box NMS in descending predicted-IoU order (ties keep input
/// order). Survivors keep their input order.
pub fn box_nms(proposals: Vec<MaskProposal>, threshold: f64) -> Vec<MaskProposal> {
    let boxes: Vec<_> = proposals
        .iter()
        .map(|p| p.mask().bbox().expect("proposals are non-empty"))
        .collect();
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .predicted_iou
            .total_cmp(&proposals[a].predicted_iou)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; proposals.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&j| box_iou(boxes[i], boxes[j]) <= threshold) {
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

/// Prompts the decoder with every grid point and keeps the multimask outputs
/// that pass the score thresholds, then applies box NMS.
pub fn generate(
    prompt: &PromptEncoder,
    decoder: &MaskDecoder,
    image_embedding: &Tensor,
    frame: &Frame,
    cfg: &ProposerConfig,
    device: &Device,
) -> Result<Vec<MaskProposal>> {
    let dense_pe = prompt.get_dense_pe()?;
    let points = point_grid(cfg.points_per_side, frame);
    let mut candidates = Vec::new();
    for batch in points.chunks(POINTS_PER_BATCH) {
        let b = batch.len();
        let coords = Tensor::from_vec(batch.concat(), (b, 1, 2), device)?;
        let labels = Tensor::ones((b, 1), candle_core::DType::F32, device)?;
        let (sparse, dense) = prompt.forward(Some((&coords, &labels)), None, None)?;
        let (masks, iou) = decoder.forward(image_embedding, &dense_pe, &sparse, &dense, true)?;
        let (_, m, side, _) = masks.dims4()?;
        let masks: Vec<f32> = masks.flatten_all()?.to_vec1()?;
        let iou: Vec<f32> = iou.flatten_all()?.to_vec1()?;
        for (k, chunk) in masks.chunks(side * side).enumerate() {
            let predicted_iou = (iou[k] as f64).clamp(0.0, 1.0);
            if predicted_iou < cfg.predicted_iou_threshold {
                continue;
            }
            let logits = upsample_logits(chunk, side, frame);
            let stability = stability_score(&logits, STABILITY_OFFSET);
            if !cfg.accepts(predicted_iou, stability) {
                continue;
            }
            let mask = BinaryMask::from_vec(
                frame.width,
                frame.height,
                logits.iter().map(|&v| v > 0.0).collect(),
            )
            .expect("size matches frame");
            if let Ok(p) = MaskProposal::new(mask, predicted_iou, stability) {
                candidates.push(p);
            }
        }
        debug_assert_eq!(masks.len(), b * m * side * side);
    }
    Ok(box_nms(candidates, cfg.nms_threshold))
}
