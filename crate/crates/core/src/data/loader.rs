use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use super::Sample;
use crate::error::{Error, Result};

pub const IMAGE_EXTS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// Image/mask file pairs under `root/Imgs` and `root/GT`, sorted by stem.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

/// Published split sizes of the standard benchmarks.
#[derive(Clone, Copy, Debug)]
pub struct SplitCheck {
    pub name: &'static str,
    pub train: Option<usize>,
    pub test: usize,
}

pub const KNOWN_SPLITS: [SplitCheck; 3] = [
    SplitCheck { name: "CAMO", train: Some(1000), test: 250 },
    SplitCheck { name: "COD10K", train: Some(3040), test: 2026 },
    SplitCheck { name: "NC4K", train: None, test: 4121 },
];

fn stem(p: &Path) -> Option<String> {
    p.file_stem().map(|s| s.to_string_lossy().into_owned())
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).is_some_and(|e| exts.contains(&e.as_str()))
}

/// Files in `dir` with one of `exts`, sorted by path.
pub fn list(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry?.path();
        if p.is_file() && has_ext(&p, exts) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    /// Pairs every image with its same-stem mask. With `strict`, a missing
    /// mask is an error; otherwise the image is skipped with a warning.
    pub fn open(root: impl AsRef<Path>, strict: bool) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let images = list(&root.join("Imgs"), &IMAGE_EXTS)?;
        let masks = list(&root.join("GT"), &["png", "bmp", "jpg"])?;
        let by_stem: std::collections::HashMap<String, PathBuf> =
            masks.into_iter().filter_map(|m| stem(&m).map(|s| (s, m))).collect();
        let mut pairs = Vec::with_capacity(images.len());
        for img in images {
            let s = stem(&img).unwrap_or_default();
            match by_stem.get(&s) {
                Some(m) => pairs.push((img, m.clone())),
                None if strict => return Err(Error::data(&img, "no mask with the same stem in GT/")),
                None => log::warn!("skipping {}: no matching mask", img.display()),
            }
        }
        if pairs.is_empty() {
            return Err(Error::data(&root, "no image/mask pairs found under Imgs/ and GT/"));
        }
        Ok(Self { root, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn name(&self) -> String {
        self.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
    }

    pub fn load(&self, index: usize, size: usize) -> Result<Sample> {
        let (img, mask) = &self.pairs[index];
        load_sample(img, mask, size)
    }

    /// Compares the pair count with the published split size when the root
    /// name identifies a known benchmark.
    pub fn check_split(&self, train: bool) -> Result<()> {
        let name = self.name().to_ascii_uppercase();
        let Some(known) = KNOWN_SPLITS.iter().find(|k| name.contains(k.name)) else { return Ok(()) };
        let expected = if train { known.train } else { Some(known.test) };
        match expected {
            Some(e) if e != self.len() => Err(Error::data(
                &self.root,
                format!(
                    "{} {} split should contain {e} pairs, found {}",
                    known.name,
                    if train { "train" } else { "test" },
                    self.len()
                ),
            )),
            _ => Ok(()),
        }
    }
}

/// Reads an image/mask pair and resizes both to `size x size` (bilinear for
/// the image, nearest for the mask). Masks are binarised at 127.
pub fn load_sample(image_path: &Path, mask_path: &Path, size: usize) -> Result<Sample> {
    let img = read_rgb(image_path)?;
    let mask = read_mask(mask_path)?;
    if img.dimensions() != mask.dimensions() {
        return Err(Error::data(
            mask_path,
            format!("mask is {:?} but the image is {:?}", mask.dimensions(), img.dimensions()),
        ));
    }
    let s = size as u32;
    let mask = imageops::resize(&mask, s, s, FilterType::Nearest);
    let m = mask.pixels().map(|p| u8::from(p[0] > 127)).collect();
    Ok(Sample::new(size, planar_resized(&img, size), m))
}

/// Planar RGB in `[0, 1]`, bilinearly resized to `size x size`.
pub fn planar_resized(img: &image::RgbImage, size: usize) -> Vec<f32> {
    let s = size as u32;
    let img = imageops::resize(img, s, s, FilterType::Triangle);
    let plane = size * size;
    let mut planar = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    planar
}

pub fn read_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path).map_err(|e| Error::data(path, e.to_string()))?.to_rgb8())
}

/// Mask at its stored resolution.
pub fn read_mask(path: &Path) -> Result<image::GrayImage> {
    Ok(image::open(path).map_err(|e| Error::data(path, e.to_string()))?.to_luma8())
}
