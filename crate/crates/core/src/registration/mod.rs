//! Coarse geometric alignment of a bi-temporal pair.
//!
//! Registration is opt-in: the default [`RegistrationMode::None`] assumes the
//! pair is already coarsely aligned. With [`RegistrationMode::Homography`] the
//! second image is warped into the first image's frame using a homography fit
//! by RANSAC on Harris-corner matches.

mod homography;
mod keypoints;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, Image};
use crate::{Error, Result};

pub use homography::{
    apply, fit_homography, ransac_homography, reprojection_error, Correspondence, RansacFit,
};
pub use keypoints::{detect as detect_keypoints, match_keypoints, Keypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    #[default]
    None,
    Homography,
}

impl std::str::FromStr for RegistrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "homography" => Ok(Self::Homography),
            other => Err(Error::Config(format!("unknown registration mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Reprojection error bound in pixels.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub random_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold: 3.0,
            min_inliers: 8,
            random_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("ransac max_iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::Config(format!(
                "ransac inlier_threshold must be > 0, got {}",
                self.inlier_threshold
            )));
        }
        Ok(())
    }
}

/// Homography with `m[2][2] == 1` and `|det| > 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    #[serde(with = "matrix_rows")]
    matrix: Matrix3<f64>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

mod matrix_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
            inlier_count: 0,
            inlier_ratio: 1.0,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            matrix: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
            inlier_count: 0,
            inlier_ratio: 1.0,
        }
    }

    /// Normalizes `m[2][2]` to 1 and checks invertibility.
    pub fn from_matrix(m: Matrix3<f64>, inlier_count: usize, inlier_ratio: f64) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || m[(2, 2)].abs() < 1e-12 {
            return Err(Error::NotInvertible(0.0));
        }
        let m = m / m[(2, 2)];
        let det = m.determinant();
        if det.abs() <= 1e-8 {
            return Err(Error::NotInvertible(det));
        }
        Ok(Self {
            matrix: m,
            inlier_count,
            inlier_ratio,
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.matrix[(r, c)]))
    }

    pub fn inverse(&self) -> Result<Transform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or(Error::NotInvertible(self.matrix.determinant()))?;
        Transform::from_matrix(inv, self.inlier_count, self.inlier_ratio)
    }

    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        apply(&self.matrix, p)
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Matrix3::identity()
    }
}

/// Estimates the homography mapping `img_b` coordinates into `img_a`'s frame.
pub fn estimate_transform(img_a: &Image, img_b: &Image, cfg: &RansacConfig) -> Result<Transform> {
    if !img_a.same_size(img_b) {
        return Err(Error::ShapeMismatch("registration needs equal-size images".into()));
    }
    cfg.validate()?;
    let ka = detect_keypoints(img_a);
    let kb = detect_keypoints(img_b);
    let matches = match_keypoints(&ka, &kb);
    if matches.len() < cfg.min_inliers.max(4) {
        return Err(Error::RegistrationFailed {
            inliers: matches.len(),
            required: cfg.min_inliers.max(4),
        });
    }
    Ok(ransac_homography(&matches, cfg)?.transform)
}

/// Inverse-maps each output pixel through `t` and returns the source
/// coordinates, or `None` outside the source frame.
fn source_coords(inv: &Matrix3<f64>, x: usize, y: usize, w: usize, h: usize) -> Option<[f64; 2]> {
    const EPS: f64 = 1e-9;
    let [sx, sy] = apply(inv, [x as f64, y as f64])?;
    if sx < -EPS || sy < -EPS || sx > (w - 1) as f64 + EPS || sy > (h - 1) as f64 + EPS {
        return None;
    }
    Some([sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64)])
}

/// Resamples `image` into the target frame of `t`: `out(p) = image(t⁻¹·p)`,
/// bilinear, zero outside the source frame.
pub fn warp(image: &Image, t: &Transform) -> Result<Image> {
    let inv = *t.inverse()?.matrix();
    let (w, h) = (image.width(), image.height());
    Image::from_fn(w, h, |x, y| {
        let Some([sx, sy]) = source_coords(&inv, x, y, w, h) else {
            return [0, 0, 0];
        };
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let (p00, p10, p01, p11) = (
            image.pixel(x0, y0),
            image.pixel(x1, y0),
            image.pixel(x0, y1),
            image.pixel(x1, y1),
        );
        std::array::from_fn(|c| {
            let top = p00[c] as f64 + (p10[c] as f64 - p00[c] as f64) * fx;
            let bot = p01[c] as f64 + (p11[c] as f64 - p01[c] as f64) * fx;
            (top + (bot - top) * fy).round().clamp(0.0, 255.0) as u8
        })
    })
}

/// Nearest-neighbour warp of a mask; pixels outside the source frame are unset.
pub fn warp_mask(mask: &BinaryMask, t: &Transform) -> Result<BinaryMask> {
    let inv = *t.inverse()?.matrix();
    let (w, h) = (mask.width(), mask.height());
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        source_coords(&inv, x, y, w, h)
            .map(|[sx, sy]| mask.get(sx.round() as usize, sy.round() as usize))
            .unwrap_or(false)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_matrix_normalizes() {
        let m = Matrix3::new(2.0, 0.0, 4.0, 0.0, 2.0, 6.0, 0.0, 0.0, 2.0);
        let t = Transform::from_matrix(m, 5, 0.5).unwrap();
        assert_eq!(t.rows(), [[1.0, 0.0, 2.0], [0.0, 1.0, 3.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Transform::from_matrix(m, 0, 0.0),
            Err(Error::NotInvertible(_))
        ));
    }

    #[test]
    fn warp_identity_is_noop() {
        let img = Image::from_fn(17, 11, |x, y| [(x * 13) as u8, (y * 19) as u8, 7]).unwrap();
        assert_eq!(warp(&img, &Transform::identity()).unwrap(), img);
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let img = Image::from_fn(20, 16, |x, y| [(x * 11) as u8, (y * 9) as u8, (x ^ y) as u8])
            .unwrap();
        let out = warp(&img, &Transform::translation(3.0, -2.0)).unwrap();
        for y in 0..16 {
            for x in 0..20 {
                let (sx, sy) = (x as isize - 3, y as isize + 2);
                if (0..20).contains(&sx) && (0..16).contains(&sy) {
                    assert_eq!(out.pixel(x, y), img.pixel(sx as usize, sy as usize));
                } else {
                    assert_eq!(out.pixel(x, y), [0, 0, 0]);
                }
            }
        }
    }

    #[test]
    fn transform_serializes_as_rows() {
        let t = Transform::translation(1.5, -2.0);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with(r#"{"matrix":[[1.0,0.0,1.5],[0.0,1.0,-2.0],[0.0,0.0,1.0]]"#));
        let back: Transform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
