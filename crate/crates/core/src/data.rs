//! Dataset layouts and image/mask I/O.
//!
//! Two directory layouts are recognized. Files are paired by filename stem;
//! extensions may differ between directories.
//!
//! ```text
//! scd/                     changevpr/
//!   t0/    <id>.png          query/      <id>.png   (t0)
//!   t1/    <id>.png          reference/  <id>.png   (t1)
//!   gt/    <id>.png          gt_t0/      <id>.png   (forward mask)
//!   gt_bwd/   (optional)     gt_t1/      <id>.png   (backward mask)
//!   gt_inter/ (optional)     gt_inter/   <id>.png   (intersection mask)
//! ```
//!
//! Images are resized to 512×512 (bilinear) and masks to 512×512 (nearest)
//! when read through a manifest. Mask pixels above 127 are change.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ::image::{GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, Image, REFERENCE_SIZE};
use crate::{Error, Result};

/// Mask pixels strictly above this value are change.
pub const MASK_THRESHOLD: u8 = 127;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Scd,
    Changevpr,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scd" => Ok(Self::Scd),
            "changevpr" => Ok(Self::Changevpr),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}

/// Which ground-truth mask a pair is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtKind {
    #[default]
    Fwd,
    Bwd,
    Inter,
}

impl std::str::FromStr for GtKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd" => Ok(Self::Fwd),
            "bwd" => Ok(Self::Bwd),
            "inter" => Ok(Self::Inter),
            other => Err(Error::Config(format!("unknown gt kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub path_t0: PathBuf,
    pub path_t1: PathBuf,
    pub gt_fwd: PathBuf,
    pub gt_bwd: Option<PathBuf>,
    pub gt_intersection: Option<PathBuf>,
}

impl PairRecord {
    pub fn gt_path(&self, kind: GtKind) -> Result<&Path> {
        let p = match kind {
            GtKind::Fwd => Some(&self.gt_fwd),
            GtKind::Bwd => self.gt_bwd.as_ref(),
            GtKind::Inter => self.gt_intersection.as_ref(),
        };
        p.map(PathBuf::as_path).ok_or_else(|| {
            Error::Layout(format!("pair `{}` has no {kind:?} ground truth", self.id))
        })
    }

    /// Both images at the manifest resolution.
    pub fn load_images(&self, resolution: (usize, usize)) -> Result<(Image, Image)> {
        let (h, w) = resolution;
        Ok((
            read_image(&self.path_t0)?.resized(w, h),
            read_image(&self.path_t1)?.resized(w, h),
        ))
    }

    pub fn load_gt(&self, kind: GtKind, resolution: (usize, usize)) -> Result<BinaryMask> {
        let (h, w) = resolution;
        Ok(read_mask(self.gt_path(kind)?)?.resized_nearest(w, h))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: String,
    pub layout: Layout,
    /// Sorted by id.
    pub records: Vec<PairRecord>,
    /// `(height, width)` every image and mask is resized to.
    pub resolution: (usize, usize),
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is always serializable")
    }
}

struct Dirs {
    t0: &'static str,
    t1: &'static str,
    fwd: &'static str,
    bwd: &'static str,
    inter: &'static str,
    optional_extra: bool,
}

fn dirs(layout: Layout) -> Dirs {
    match layout {
        Layout::Scd => Dirs {
            t0: "t0",
            t1: "t1",
            fwd: "gt",
            bwd: "gt_bwd",
            inter: "gt_inter",
            optional_extra: true,
        },
        Layout::Changevpr => Dirs {
            t0: "query",
            t1: "reference",
            fwd: "gt_t0",
            bwd: "gt_t1",
            inter: "gt_inter",
            optional_extra: false,
        },
    }
}

/// Stem → path for every image file directly inside `dir`.
fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Layout(format!(
                "duplicate id `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Scans `root` and pairs files across the layout's directories.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Layout(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let d = dirs(layout);
    let mut required = vec![d.t0, d.t1, d.fwd];
    let mut optional = Vec::new();
    if d.optional_extra {
        optional.extend([d.bwd, d.inter]);
    } else {
        required.extend([d.bwd, d.inter]);
    }
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|name| !root.join(name).is_dir())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Layout(format!(
            "{} is missing {}",
            root.display(),
            missing
                .iter()
                .map(|m| format!("{m}/"))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let present: Vec<&str> = required
        .iter()
        .chain(&optional)
        .copied()
        .filter(|name| root.join(name).is_dir())
        .collect();

    let mut listings = BTreeMap::new();
    for name in &present {
        listings.insert(*name, list_stems(&root.join(name))?);
    }
    let all_ids: BTreeSet<&String> = listings.values().flat_map(|m| m.keys()).collect();
    let orphans: Vec<String> = all_ids
        .iter()
        .filter(|id| !listings.values().all(|m| m.contains_key(**id)))
        .map(|id| {
            let lacking: Vec<&str> = present
                .iter()
                .copied()
                .filter(|n| !listings[n].contains_key(*id))
                .collect();
            format!("{id} (missing in {})", lacking.join("/"))
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Pairing(orphans));
    }
    if all_ids.is_empty() {
        return Err(Error::Layout(format!("{} contains no image pairs", root.display())));
    }

    let get = |dir: &str, id: &str| listings.get(dir).map(|m| m[id].clone());
    let records = all_ids
        .iter()
        .map(|id| PairRecord {
            id: (*id).clone(),
            path_t0: listings[d.t0][*id].clone(),
            path_t1: listings[d.t1][*id].clone(),
            gt_fwd: listings[d.fwd][*id].clone(),
            gt_bwd: get(d.bwd, id),
            gt_intersection: get(d.inter, id),
        })
        .collect();

    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_owned();
    Ok(DatasetManifest {
        name,
        split: "test".into(),
        layout,
        records,
        resolution: (REFERENCE_SIZE, REFERENCE_SIZE),
    })
}

fn open(path: &Path) -> Result<::image::DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::ImageIo {
        path: path.to_owned(),
        source,
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    Ok(Image::from(open(path)?.to_rgb8()))
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    image
        .to_rgb_image()
        .save(path)
        .map_err(|source| Error::ImageIo {
            path: path.to_owned(),
            source,
        })
}

/// Reads an 8-bit mask; pixels above 127 (after grayscale conversion) are set.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.pixels().map(|p| p.0[0] > MASK_THRESHOLD).collect();
    BinaryMask::from_vec(w as usize, h as usize, data)
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    })
}

/// Writes a single-channel PNG with values {0, 255}.
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    mask_to_gray(mask)
        .save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|source| Error::ImageIo {
            path: path.to_owned(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x + y) % 2 == 0)
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = checker(13, 7);
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn zero_mask_writes_zero_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        write_mask(&BinaryMask::new(9, 9), &p).unwrap();
        let raw = ::image::open(&p).unwrap().to_luma8();
        assert!(raw.pixels().all(|px| px.0[0] == 0));
    }

    #[test]
    fn forty_pixels_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let m = BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < 40);
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap().count(), 40);
    }

    #[test]
    fn threshold_is_strict() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        GrayImage::from_raw(3, 1, vec![127, 128, 255]).unwrap().save(&p).unwrap();
        let m = read_mask(&p).unwrap();
        assert_eq!(m.data(), &[false, true, true]);
    }

    #[test]
    fn garbled_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(read_mask(&p).is_err());
        assert!(matches!(
            read_mask(&dir.path().join("absent.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn parse_enums() {
        assert_eq!("changevpr".parse::<Layout>().unwrap(), Layout::Changevpr);
        assert!("kitti".parse::<Layout>().is_err());
        assert_eq!("inter".parse::<GtKind>().unwrap(), GtKind::Inter);
    }
}
