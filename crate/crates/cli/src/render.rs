//! Diagnostic images.

use gescf::pseudomask::SimilarityMap;
use gescf::{BinaryMask, Image};
use image::{Rgb, RgbImage};

/// Blue (low) to red (high) ramp over the map's own value range.
pub fn heatmap(s: &SimilarityMap) -> RgbImage {
    let (lo, hi) = s.value_range();
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(s.width() as u32, s.height() as u32, |x, y| {
        let t = ((s.get(x as usize, y as usize) - lo) / span).clamp(0.0, 1.0);
        ramp(t)
    })
}

fn ramp(t: f64) -> Rgb<u8> {
    // blue -> cyan -> yellow -> red
    let stops = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let seg = (t * 3.0).min(2.999_999);
    let i = seg.floor() as usize;
    let f = seg - i as f64;
    let c: [f64; 3] = std::array::from_fn(|k| stops[i][k] + (stops[i + 1][k] - stops[i][k]) * f);
    Rgb(c.map(|v| (v * 255.0).round() as u8))
}

const OVERLAY_COLORS: [[u8; 3]; 6] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 128, 255],
    [255, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
];

/// Retained proposals blended at 50% over the first image.
pub fn overlay(base: &Image, masks: &[&BinaryMask]) -> RgbImage {
    let mut out = base.to_rgb_image();
    for (i, m) in masks.iter().enumerate() {
        let col = OVERLAY_COLORS[i % OVERLAY_COLORS.len()];
        for (x, y, px) in out.enumerate_pixels_mut() {
            if m.get(x as usize, y as usize) {
                for c in 0..3 {
                    px.0[c] = ((px.0[c] as u16 + col[c] as u16) / 2) as u8;
                }
            }
        }
    }
    out
}
