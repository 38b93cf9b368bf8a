//! Image/mask ingestion and training-tile sampling.
//!
//! Inputs are 8-bit PNG pairs. RGB values are scaled by 1/255 into [0, 1]
//! (no mean centering; checkpoints record this). Masks are binarized at the
//! midpoint: a sample >= 128 becomes road (1.0), anything below becomes
//! background (0.0).

pub mod sample;
pub mod synthetic;

use std::io::BufRead;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use sample::{sample_tiles, TileSample, TileSampler};
pub use synthetic::{generate_synthetic_scene, SceneSpec};

/// Side length of the square training tiles.
pub const TILE_SIZE: usize = 224;

/// One aerial image with its binary road mask.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Shape `(1, 3, H, W)`, values in [0, 1].
    pub image: Tensor<f32>,
    /// Shape `(1, 1, H, W)`, values exactly 0.0 or 1.0.
    pub mask: Tensor<f32>,
    pub source_id: String,
}

fn open_8bit(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img),
        other => Err(Error::ImageBitDepth {
            path: path.to_path_buf(),
            format: format!("{other:?}"),
        }),
    }
}

/// Loads an image/mask PNG pair into tensors.
pub fn load_labeled_image(
    image_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
) -> Result<LabeledImage> {
    let image_path = image_path.as_ref();
    let mask_path = mask_path.as_ref();
    let img = open_8bit(image_path)?;
    let msk = open_8bit(mask_path)?;
    if img.width() != msk.width() || img.height() != msk.height() {
        return Err(Error::ImageMaskDims {
            image: image_path.to_path_buf(),
            mask: mask_path.to_path_buf(),
            image_dims: format!("{}x{}", img.width(), img.height()),
            mask_dims: format!("{}x{}", msk.width(), msk.height()),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);

    let rgb = img.to_rgb8();
    let mut image = Tensor::zeros([1, 3, h, w]);
    for (y, x, px) in rgb
        .enumerate_pixels()
        .map(|(x, y, p)| (y as usize, x as usize, p))
    {
        for c in 0..3 {
            image.set(0, c, y, x, f32::from(px.0[c]) / 255.0);
        }
    }

    let gray = msk.to_luma8();
    let mut mask = Tensor::zeros([1, 1, h, w]);
    for (x, y, p) in gray.enumerate_pixels() {
        let v = if p.0[0] >= 128 { 1.0 } else { 0.0 };
        mask.set(0, 0, y as usize, x as usize, v);
    }

    let source_id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_path.display().to_string());
    Ok(LabeledImage {
        image,
        mask,
        source_id,
    })
}

/// Loads a standalone RGB image as a `(1, 3, H, W)` tensor scaled to [0, 1].
pub fn load_rgb_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = open_8bit(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.to_rgb8();
    let mut out = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(0, c, y as usize, x as usize, f32::from(px.0[c]) / 255.0);
        }
    }
    Ok(out)
}

/// Loads a grayscale image as a `(1, 1, H, W)` tensor scaled to [0, 1]
/// (the inverse of the probability-map PNG export).
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = open_8bit(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = img.to_luma8();
    let mut out = Tensor::zeros([1, 1, h, w]);
    for (x, y, px) in gray.enumerate_pixels() {
        out.set(0, 0, y as usize, x as usize, f32::from(px.0[0]) / 255.0);
    }
    Ok(out)
}

/// Writes a labeled image back out as the same 8-bit PNG pair format the
/// loader reads (mask as 0/255).
pub fn save_labeled_image(
    scene: &LabeledImage,
    image_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (scene.image.at(0, 0, y, x) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8,
                (scene.image.at(0, 1, y, x) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8,
                (scene.image.at(0, 2, y, x) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(image_path.as_ref())
        .map_err(|e| Error::ImageDecode {
            path: image_path.as_ref().to_path_buf(),
            detail: e.to_string(),
        })?;

    let mut gray = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if scene.mask.at(0, 0, y, x) >= 0.5 {
                255
            } else {
                0
            };
            gray.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    gray.save(mask_path.as_ref())
        .map_err(|e| Error::ImageDecode {
            path: mask_path.as_ref().to_path_buf(),
            detail: e.to_string(),
        })
}

/// A set of labeled images, all large enough to sample training tiles from.
#[derive(Debug)]
pub struct Dataset {
    images: Vec<LabeledImage>,
}

impl Dataset {
    /// Rejects empty sets and any image smaller than the tile size in
    /// either dimension.
    pub fn new(images: Vec<LabeledImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for img in &images {
            let (h, w) = (img.image.height(), img.image.width());
            if h < TILE_SIZE || w < TILE_SIZE {
                return Err(Error::ImageTooSmall {
                    source_id: img.source_id.clone(),
                    width: w,
                    height: h,
                    tile: TILE_SIZE,
                });
            }
        }
        Ok(Dataset { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, idx: usize) -> &LabeledImage {
        &self.images[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter()
    }
}

/// Parses a manifest file: one `image_path<TAB>mask_path` pair per line,
/// paths resolved relative to the manifest's directory. Blank lines and
/// lines starting with `#` are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(img), Some(mask), None) => {
                pairs.push((base.join(img), base.join(mask)));
            }
            _ => {
                return Err(Error::BadManifestLine {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    content: trimmed.to_string(),
                });
            }
        }
    }
    Ok(pairs)
}

/// Loads every pair named by a manifest into a dataset.
pub fn dataset_from_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let pairs = load_manifest(path)?;
    let mut images = Vec::with_capacity(pairs.len());
    for (img, mask) in pairs {
        images.push(load_labeled_image(img, mask)?);
    }
    Dataset::new(images)
}
