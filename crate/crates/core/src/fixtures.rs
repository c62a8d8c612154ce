//! Seeded synthetic scenes and on-disk fixture datasets.
//!
//! A scene is a set of flat-colored vertical bands; a change is a flat
//! ellipse inserted into the second image. Palette colors are far apart in
//! every channel so each region is one connected component for the
//! synthetic backend.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_image, write_mask};
use crate::image::{BinaryMask, Image};
use crate::{Error, Result};

pub const PALETTE: [[u8; 3]; 8] = [
    [40, 60, 120],
    [200, 40, 40],
    [40, 170, 60],
    [230, 200, 40],
    [120, 40, 160],
    [30, 190, 200],
    [240, 240, 240],
    [110, 90, 40],
];

/// A bi-temporal pair with the ground-truth change region.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub t0: Image,
    pub t1: Image,
    pub change: BinaryMask,
}

/// Vertical bands of 2 to 4 distinct palette colors.
pub fn random_scene(width: usize, height: usize, rng: &mut impl Rng) -> Result<Image> {
    let bands = rng.gen_range(2..=4usize);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..bands {
        let j = rng.gen_range(i..colors.len());
        colors.swap(i, j);
    }
    Image::from_fn(width, height, |x, _| {
        PALETTE[colors[(x * bands / width).min(bands - 1)]]
    })
}

/// Flat ellipse spanning a quarter to two fifths of each side, in a color not
/// present in `base`.
pub fn insert_object(base: &Image, rng: &mut impl Rng) -> Result<(Image, BinaryMask)> {
    let (w, h) = (base.width(), base.height());
    if w < 16 || h < 16 {
        return Err(Error::InvalidInput("scene must be at least 16x16".into()));
    }
    let used: Vec<[u8; 3]> = (0..w).map(|x| base.pixel(x, h / 2)).collect();
    let free: Vec<[u8; 3]> = PALETTE
        .iter()
        .copied()
        .filter(|c| !used.contains(c))
        .collect();
    let color = free[rng.gen_range(0..free.len())];
    let rx = rng.gen_range(w / 8..=w / 5) as f64;
    let ry = rng.gen_range(h / 8..=h / 5) as f64;
    let cx = rng.gen_range(rx..w as f64 - rx);
    let cy = rng.gen_range(ry..h as f64 - ry);
    let mask = BinaryMask::from_fn(w, h, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    });
    let mut out = base.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out.set_pixel(x, y, color);
            }
        }
    }
    Ok((out, mask))
}

/// Scene with one inserted object, determined by `seed`.
pub fn inserted_object_pair(width: usize, height: usize, seed: u64) -> Result<ScenePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = random_scene(width, height, &mut rng)?;
    let (t1, change) = insert_object(&t0, &mut rng)?;
    Ok(ScenePair { t0, t1, change })
}

/// Pair `i` of a fixture dataset: every third pair is unchanged.
fn fixture_pair(size: usize, seed: u64, i: usize) -> Result<ScenePair> {
    let pair = inserted_object_pair(size, size, seed.wrapping_add(i as u64))?;
    if i % 3 == 2 {
        return Ok(ScenePair {
            t1: pair.t0.clone(),
            change: BinaryMask::new(size, size),
            ..pair
        });
    }
    Ok(pair)
}

fn create_dirs(root: &Path, names: &[&str]) -> Result<()> {
    for n in names {
        let d = root.join(n);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

pub fn fixture_id(i: usize) -> String {
    format!("pair_{i:03}")
}

/// Writes `count` pairs in the `t0/ t1/ gt/` layout.
pub fn write_scd_fixture(root: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    create_dirs(root, &["t0", "t1", "gt"])?;
    for i in 0..count {
        let p = fixture_pair(size, seed, i)?;
        let name = format!("{}.png", fixture_id(i));
        write_image(&p.t0, &root.join("t0").join(&name))?;
        write_image(&p.t1, &root.join("t1").join(&name))?;
        write_mask(&p.change, &root.join("gt").join(&name))?;
    }
    Ok(())
}

/// Writes `count` pairs in the ChangeVPR layout. The t0 mask is the bounding
/// box of the change, the t1 mask its exact outline, and the intersection
/// mask their overlap.
pub fn write_changevpr_fixture(root: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    create_dirs(root, &["query", "reference", "gt_t0", "gt_t1", "gt_inter"])?;
    for i in 0..count {
        let p = fixture_pair(size, seed, i)?;
        let name = format!("{}.png", fixture_id(i));
        let boxed = match p.change.bbox() {
            Some((x0, y0, x1, y1)) => {
                BinaryMask::from_fn(size, size, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
            }
            None => BinaryMask::new(size, size),
        };
        let inter = BinaryMask::from_fn(size, size, |x, y| boxed.get(x, y) && p.change.get(x, y));
        write_image(&p.t0, &root.join("query").join(&name))?;
        write_image(&p.t1, &root.join("reference").join(&name))?;
        write_mask(&boxed, &root.join("gt_t0").join(&name))?;
        write_mask(&p.change, &root.join("gt_t1").join(&name))?;
        write_mask(&inter, &root.join("gt_inter").join(&name))?;
    }
    Ok(())
}
