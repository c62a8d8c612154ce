//! Homography fitting: normalized direct linear transform and seeded RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RansacConfig, Transform};
use crate::{Error, Result};

/// A point correspondence: `src` is in the moving image, `dst` in the
/// reference frame. The fitted homography maps `src` onto `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: [f64; 2],
    pub dst: [f64; 2],
}

impl Correspondence {
    pub fn new(src: [f64; 2], dst: [f64; 2]) -> Self {
        Self { src, dst }
    }
}

/// Applies `h` to a point; `None` when the point maps to infinity.
#[inline]
pub fn apply(h: &Matrix3<f64>, p: [f64; 2]) -> Option<[f64; 2]> {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    if v.z.abs() < 1e-12 {
        return None;
    }
    Some([v.x / v.z, v.y / v.z])
}

/// Forward reprojection error `|H·src - dst|`.
#[inline]
pub fn reprojection_error(h: &Matrix3<f64>, c: &Correspondence) -> f64 {
    match apply(h, c.src) {
        Some(p) => ((p[0] - c.dst[0]).powi(2) + (p[1] - c.dst[1]).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn normalizer(points: impl Iterator<Item = [f64; 2]> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// True when the points lie (nearly) on one line: the smaller eigenvalue of
/// their normalized scatter matrix vanishes.
fn collinear(points: impl Iterator<Item = [f64; 2]>, t: &Matrix3<f64>) -> bool {
    let (mut sxx, mut syy, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0);
    for p in points {
        let v = t * Vector3::new(p[0], p[1], 1.0);
        sxx += v.x * v.x;
        syy += v.y * v.y;
        sxy += v.x * v.y;
        n += 1.0;
    }
    let (a, b, c) = (sxx / n, syy / n, sxy / n);
    let min_eig = (a + b) / 2.0 - (((a - b) / 2.0).powi(2) + c * c).sqrt();
    min_eig < 1e-9
}

/// Least-squares homography through normalized DLT. Needs at least four
/// correspondences in general position; returns `None` for degenerate input.
pub fn fit_homography(matches: &[Correspondence]) -> Option<Matrix3<f64>> {
    if matches.len() < 4 {
        return None;
    }
    let t_src = normalizer(matches.iter().map(|c| c.src))?;
    let t_dst = normalizer(matches.iter().map(|c| c.dst))?;
    if collinear(matches.iter().map(|c| c.src), &t_src)
        || collinear(matches.iter().map(|c| c.dst), &t_dst)
    {
        return None;
    }
    // At least 9 rows so the SVD yields the full right null space.
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in matches.iter().enumerate() {
        let s = t_src * Vector3::new(c.src[0], c.src[1], 1.0);
        let d = t_dst * Vector3::new(c.dst[0], c.dst[1], 1.0);
        let (x, y) = (s.x / s.z, s.y / s.z);
        let (u, v) = (d.x / d.z, d.y / d.z);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = t_dst.try_inverse()? * hn * t_src;
    if !h.iter().all(|v| v.is_finite()) || h[(2, 2)].abs() < 1e-12 {
        return None;
    }
    let h = h / h[(2, 2)];
    (h.determinant().abs() > 1e-8).then_some(h)
}

fn inliers(h: &Matrix3<f64>, matches: &[Correspondence], threshold: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, c)| reprojection_error(h, c) <= threshold)
        .map(|(i, _)| i)
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True if any three of the four points are (nearly) collinear.
fn degenerate_sample(pts: &[[f64; 2]; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| cross(pts[t[0]], pts[t[1]], pts[t[2]]).abs() < 1e-6)
}

/// Result of a RANSAC fit with the indices of its inliers.
#[derive(Debug, Clone)]
pub struct RansacFit {
    pub transform: Transform,
    pub inliers: Vec<usize>,
}

/// Seeded RANSAC over 4-point samples, followed by a least-squares refit on
/// the consensus set. Reported inliers are those of the returned model.
pub fn ransac_homography(matches: &[Correspondence], cfg: &RansacConfig) -> Result<RansacFit> {
    cfg.validate()?;
    if matches.len() < 4 {
        return Err(Error::TooFewMatches(matches.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    let mut best: Option<(Matrix3<f64>, Vec<usize>)> = None;

    for _ in 0..cfg.max_iterations {
        let idx = sample(&mut rng, matches.len(), 4);
        let sample4 = [
            matches[idx.index(0)],
            matches[idx.index(1)],
            matches[idx.index(2)],
            matches[idx.index(3)],
        ];
        if degenerate_sample(&sample4.map(|c| c.src)) || degenerate_sample(&sample4.map(|c| c.dst))
        {
            continue;
        }
        let Some(h) = fit_homography(&sample4) else {
            continue;
        };
        let inl = inliers(&h, matches, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let all = inl.len() == matches.len();
            best = Some((h, inl));
            if all {
                break;
            }
        }
    }

    let Some((mut h, mut inl)) = best else {
        return Err(Error::RegistrationFailed {
            inliers: 0,
            required: cfg.min_inliers.max(4),
        });
    };

    // Refit on the consensus set while it keeps growing (or holds).
    for _ in 0..3 {
        let consensus: Vec<Correspondence> = inl.iter().map(|&i| matches[i]).collect();
        let Some(refit) = fit_homography(&consensus) else {
            break;
        };
        let refit_inl = inliers(&refit, matches, cfg.inlier_threshold);
        if refit_inl.len() < inl.len() {
            break;
        }
        let done = refit_inl == inl;
        h = refit;
        inl = refit_inl;
        if done {
            break;
        }
    }

    if inl.len() < cfg.min_inliers.max(4) {
        return Err(Error::RegistrationFailed {
            inliers: inl.len(),
            required: cfg.min_inliers.max(4),
        });
    }
    let transform = Transform::from_matrix(h, inl.len(), inl.len() as f64 / matches.len() as f64)?;
    Ok(RansacFit {
        transform,
        inliers: inl,
    })
}
