//! 8-bit PNG reading and writing for RGB images and masks.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(image_err(path))
}

pub fn write_rgb(path: &Path, img: &FeatureMap) -> Result<()> {
    if img.depth() != 3 {
        return Err(Error::shape("write_rgb", img.dims(), "HxWx3"));
    }
    let raw = img.values().iter().map(|&v| to_u8(v)).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer length matches dims");
    buf.save(path).map_err(image_err(path))
}

/// Writes a single-channel map in `[0, 1]` as 8-bit grey.
pub fn write_gray(path: &Path, map: &FeatureMap) -> Result<()> {
    if map.depth() != 1 {
        return Err(Error::shape("write_gray", map.dims(), "HxWx1"));
    }
    let raw = map.values().iter().map(|&v| to_u8(v)).collect();
    let buf = GrayImage::from_raw(map.width() as u32, map.height() as u32, raw).expect("buffer length matches dims");
    buf.save(path).map_err(image_err(path))
}

/// Binary masks are stored as 0/255 grey.
pub fn write_mask(path: &Path, mask: &FeatureMap) -> Result<()> {
    write_gray(path, mask)
}

pub fn read_rgb(path: &Path) -> Result<FeatureMap> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    FeatureMap::from_vec(h as usize, w as usize, 3, values)
}

pub fn read_gray(path: &Path) -> Result<FeatureMap> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    FeatureMap::from_vec(h as usize, w as usize, 1, values)
}

/// Reads a grey mask, binarizing at mid-grey.
pub fn read_mask(path: &Path) -> Result<FeatureMap> {
    Ok(read_gray(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}
