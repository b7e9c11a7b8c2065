//! PNG encoding of scenes, label maps and masks.

use anyhow::{bail, Context, Result};
use image::{ImageFormat, RgbImage};
use serde::Serialize;
use touchprint::classes;
use touchprint::{BinaryMask, LabelMap};

/// Display colors of the three scene classes, by class index.
pub const PALETTE: [[u8; 3]; 3] = [[58, 168, 72], [214, 104, 48], [128, 112, 96]];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PaletteEntry {
    pub index: usize,
    pub name: String,
    pub color: [u8; 3],
}

pub fn palette() -> Vec<PaletteEntry> {
    classes::NAMES
        .iter()
        .zip(PALETTE)
        .enumerate()
        .map(|(index, (name, color))| PaletteEntry {
            index,
            name: name.to_string(),
            color,
        })
        .collect()
}

/// Paletted 8-bit PNG whose pixel values are the class indices.
pub fn indexed_png(labels: &LabelMap) -> Result<Vec<u8>> {
    if let Some(max) = labels.max_label().filter(|&m| m >= PALETTE.len()) {
        bail!("label {max} has no palette entry");
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, labels.width() as u32, labels.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(PALETTE.concat());
        let mut writer = enc.write_header()?;
        let data: Vec<u8> = labels.as_slice().iter().map(|&l| l as u8).collect();
        writer.write_image_data(&data)?;
    }
    Ok(out)
}

pub fn colorize(labels: &LabelMap) -> RgbImage {
    RgbImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        let c = labels.get(x as usize, y as usize);
        image::Rgb(PALETTE.get(c).copied().unwrap_or([255, 0, 255]))
    })
}

/// Class colors blended over the image, `alpha` in [0, 1].
pub fn overlay(rgb: &RgbImage, labels: &LabelMap, alpha: f64) -> RgbImage {
    let colors = colorize(labels);
    RgbImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let (a, b) = (rgb.get_pixel(x, y).0, colors.get_pixel(x, y).0);
        image::Rgb(std::array::from_fn(|i| {
            ((1.0 - alpha) * a[i] as f64 + alpha * b[i] as f64).round() as u8
        }))
    })
}

pub fn rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).context("encoding PNG")?;
    Ok(out.into_inner())
}

pub fn mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    mask.to_luma().write_to(&mut out, ImageFormat::Png).context("encoding PNG")?;
    Ok(out.into_inner())
}
