//! Harris corners with normalized patch descriptors and mutual
//! nearest-neighbour matching.

use super::homography::Correspondence;
use crate::image::Image;

const HARRIS_K: f64 = 0.04;
const NMS_RADIUS: usize = 3;
/// Responses below this fraction of the strongest one are discarded.
const RELATIVE_RESPONSE: f64 = 0.01;
/// Absolute response floor (luma in [0, 1]); rejects textureless images.
const MIN_RESPONSE: f64 = 1e-8;
const MAX_KEYPOINTS: usize = 800;
const PATCH_RADIUS: usize = 5;
const RATIO: f64 = 0.8;
const MIN_NCC: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub response: f64,
    /// Zero-mean, unit-norm patch.
    pub descriptor: Vec<f64>,
}

fn gray(image: &Image) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(image.luma(x, y) / 255.0);
        }
    }
    out
}

/// Separable [1 4 6 4 1]/16 smoothing with clamped borders.
fn binomial_blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kv) in K.iter().enumerate() {
                s += kv * src[y * w + clamp(x as isize + k as isize - 2, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kv) in K.iter().enumerate() {
                s += kv * tmp[clamp(y as isize + k as isize - 2, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn harris_response(g: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = |dx: isize, dy: isize| {
                g[(y as isize + dy) as usize * w + (x as isize + dx) as usize]
            };
            // Sobel
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = binomial_blur(&ixx, w, h);
    let syy = binomial_blur(&iyy, w, h);
    let sxy = binomial_blur(&ixy, w, h);
    (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - HARRIS_K * tr * tr
        })
        .collect()
}

fn descriptor(g: &[f64], w: usize, x: usize, y: usize) -> Option<Vec<f64>> {
    let r = PATCH_RADIUS;
    let mut patch = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for py in y - r..=y + r {
        for px in x - r..=x + r {
            patch.push(g[py * w + px]);
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    for v in &mut patch {
        *v -= mean;
    }
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    for v in &mut patch {
        *v /= norm;
    }
    Some(patch)
}

/// Detects up to `MAX_KEYPOINTS` Harris corners, strongest first (ties in
/// raster order).
pub fn detect(image: &Image) -> Vec<Keypoint> {
    let (w, h) = (image.width(), image.height());
    let margin = PATCH_RADIUS.max(NMS_RADIUS) + 2;
    if w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let g = binomial_blur(&gray(image), w, h);
    let resp = harris_response(&g, w, h);
    let max_resp = resp.iter().copied().fold(0.0f64, f64::max);
    if max_resp < MIN_RESPONSE {
        return Vec::new();
    }
    let floor = (RELATIVE_RESPONSE * max_resp).max(MIN_RESPONSE);
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for y in margin..h - margin {
        'px: for x in margin..w - margin {
            let v = resp[y * w + x];
            if v < floor {
                continue;
            }
            for ny in y - NMS_RADIUS..=y + NMS_RADIUS {
                for nx in x - NMS_RADIUS..=x + NMS_RADIUS {
                    let n = resp[ny * w + nx];
                    // strict maximum, ties broken toward the earlier raster position
                    if n > v || (n == v && (ny, nx) < (y, x)) {
                        continue 'px;
                    }
                }
            }
            cands.push((x, y, v));
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    cands
        .into_iter()
        .filter_map(|(x, y, response)| {
            descriptor(&g, w, x, y).map(|descriptor| Keypoint {
                x,
                y,
                response,
                descriptor,
            })
        })
        .take(MAX_KEYPOINTS)
        .collect()
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Best and second-best NCC of `d` against `set`.
fn best_two(d: &[f64], set: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    for (j, k) in set.iter().enumerate() {
        let s = ncc(d, &k.descriptor);
        match best {
            Some((_, b)) if s <= b => second = second.max(s),
            Some((_, b)) => {
                second = b;
                best = Some((j, s));
            }
            None => best = Some((j, s)),
        }
    }
    best.map(|(j, s)| (j, s, second))
}

/// Descriptor distance for unit vectors: `sqrt(2 - 2·ncc)`.
fn dist(ncc: f64) -> f64 {
    (2.0 - 2.0 * ncc).max(0.0).sqrt()
}

/// Mutual nearest-neighbour matches passing the ratio test. Each
/// correspondence maps a keypoint of `moving` (src) to one of `reference` (dst).
pub fn match_keypoints(reference: &[Keypoint], moving: &[Keypoint]) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (i, kr) in reference.iter().enumerate() {
        let Some((j, s, s2)) = best_two(&kr.descriptor, moving) else {
            continue;
        };
        if s < MIN_NCC {
            continue;
        }
        if s2.is_finite() && dist(s) >= RATIO * dist(s2) {
            continue;
        }
        let back = best_two(&moving[j].descriptor, reference).map(|(b, _, _)| b);
        if back != Some(i) {
            continue;
        }
        let km = &moving[j];
        out.push(Correspondence::new(
            [km.x as f64, km.y as f64],
            [kr.x as f64, kr.y as f64],
        ));
    }
    out
}
