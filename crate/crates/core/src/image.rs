//! Owned RGB images and binary masks.

use ::image::{imageops::FilterType, RgbImage};

use crate::{Error, Result};

/// Side length the reference pipeline resizes every input to.
pub const REFERENCE_SIZE: usize = 512;

/// An 8-bit RGB image stored row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn from_rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Image filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::from_rgb(width, height, data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_rgb(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luminance in [0, 255] (Rec. 601 weights).
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear resize. Returns a clone when the size already matches.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let src = self.to_rgb_image();
        let dst = ::image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
        Image::from(dst)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }
}

impl From<RgbImage> for Image {
    fn from(img: RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Image {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        }
    }
}

/// A binary mask stored row-major; `true` marks change / foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} mask needs {} cells, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_size(&self, other: &BinaryMask) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_size(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_size(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count())
    }

    /// In-place pixelwise OR.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_size(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    /// Nearest-neighbour resize, sampling each target cell at its center.
    pub fn resized_nearest(&self, width: usize, height: usize) -> BinaryMask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        BinaryMask::from_fn(width, height, |x, y| {
            let sx = nearest_index(x, width, self.width);
            let sy = nearest_index(y, height, self.height);
            self.get(sx, sy)
        })
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)` inclusive, if any pixel is set.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }
}

/// Source index sampled by nearest-neighbour resampling from `src_len` to
/// `dst_len` cells (cell-center convention).
#[inline]
pub(crate) fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(Image::from_rgb(0, 4, vec![]).is_err());
        assert!(Image::from_rgb(2, 2, vec![0; 11]).is_err());
        assert!(BinaryMask::from_vec(2, 2, vec![false; 3]).is_err());
    }

    #[test]
    fn nearest_downscale_samples_centers() {
        // 8 -> 2 samples source cells 2 and 6.
        assert_eq!(nearest_index(0, 2, 8), 2);
        assert_eq!(nearest_index(1, 2, 8), 6);
        // Upscale 2 -> 8 replicates.
        let idx: Vec<_> = (0..8).map(|i| nearest_index(i, 8, 2)).collect();
        assert_eq!(idx, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn union_and_intersection() {
        let a = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let b = BinaryMask::from_fn(4, 4, |_, y| y < 2);
        assert_eq!(a.intersection_count(&b).unwrap(), 4);
        assert_eq!(a.union_count(&b).unwrap(), 12);
        let mut c = a.clone();
        c.union_with(&b).unwrap();
        assert_eq!(c.count(), 12);
        assert!(a.intersection_count(&BinaryMask::new(3, 4)).is_err());
    }

    #[test]
    fn bbox_of_mask() {
        let mut m = BinaryMask::new(5, 5);
        assert_eq!(m.bbox(), None);
        m.set(1, 3, true);
        m.set(4, 2, true);
        assert_eq!(m.bbox(), Some((1, 2, 4, 3)));
    }
}
