//! On-disk dataset layout: `DIR/images/{id}.png`, `DIR/masks/{id}.png` and
//! `DIR/meta.json` with `domain`, `seed` and `count`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use promise_core::data::{generate_sample, Domain, SegmentationSample};

use crate::error::{AppError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain: Domain,
    pub seed: u64,
    pub count: usize,
}

pub fn encode_rgb_png(size: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let img = RgbImage::from_raw(size as u32, size as u32, pixels.to_vec())
        .ok_or_else(|| AppError::Image("pixel buffer does not match size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AppError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Single-channel PNG with values {0, 255}.
pub fn encode_mask_png(width: usize, height: usize, mask: &[u8]) -> Result<Vec<u8>> {
    let px = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, px)
        .ok_or_else(|| AppError::Image("mask buffer does not match size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AppError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decode any PNG to RGB8; grayscale is replicated to three channels and
/// alpha is dropped. Returns `(width, height, pixels)`.
pub fn decode_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| AppError::Image(e.to_string()))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        other => other.to_rgb8(),
    };
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

/// Decode a mask PNG and binarize at 128.
pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| AppError::Image(e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

/// Render `count` samples of `domain` and write them under `dir`.
pub fn gen_synthetic(dir: &Path, domain: Domain, count: usize, seed: u64, size: usize) -> Result<DatasetMeta> {
    if count == 0 {
        return Err(AppError::Dataset("count must be at least 1".into()));
    }
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| AppError::io(d, e))?;
    }
    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let s = generate_sample(domain, size, seed, i);
        write(&images.join(format!("{}.png", s.id)), &encode_rgb_png(size, &s.pixels)?)?;
        write(&masks.join(format!("{}.png", s.id)), &encode_mask_png(size, size, &s.mask)?)
    })?;
    let meta = DatasetMeta { domain, seed, count };
    write(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every `images/*.png` with its mask, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    let meta = read_meta(dir)?;
    let images = dir.join("images");
    let mut ids: Vec<String> = fs::read_dir(&images)
        .map_err(|e| AppError::io(&images, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "png").then(|| p.file_stem()?.to_str().map(str::to_owned))?
        })
        .collect();
    if ids.is_empty() {
        return Err(AppError::Dataset(format!("{} contains no images", images.display())));
    }
    ids.sort();
    ids.par_iter()
        .map(|id| {
            let ip: PathBuf = images.join(format!("{id}.png"));
            let mp = dir.join("masks").join(format!("{id}.png"));
            if !mp.exists() {
                return Err(AppError::Dataset(format!("missing mask for image {id}")));
            }
            let (w, h, pixels) = decode_rgb(&fs::read(&ip).map_err(|e| AppError::io(&ip, e))?)?;
            let (mw, mh, mask) = decode_mask(&fs::read(&mp).map_err(|e| AppError::io(&mp, e))?)?;
            if (w, h) != (mw, mh) || w != h {
                return Err(AppError::Dataset(format!(
                    "{id}: image {w}x{h} and mask {mw}x{mh} must be equal and square"
                )));
            }
            Ok(SegmentationSample::new(id.clone(), meta.domain, w, pixels, mask)?)
        })
        .collect()
}
