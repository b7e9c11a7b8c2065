//! Dense per-pixel containers shared by all modules.

use crate::error::{Error, Result};

pub use image::RgbImage;

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
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
            return Err(Error::invalid(format!(
                "mask data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// True if every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| !a || b)
    }

    pub fn or_assign(&mut self, other: &BinaryMask) {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a |= b);
    }

    /// Grayscale 0/255 rendering.
    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Any non-zero pixel counts as set.
    pub fn from_luma(img: &image::GrayImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] != 0
        })
    }
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "label data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, label: usize) -> Self {
        Self {
            width,
            height,
            data: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> usize {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: usize) {
        self.data[y * self.width + x] = label;
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.data
    }

    pub fn max_label(&self) -> Option<usize> {
        self.data.iter().copied().max()
    }

    pub fn mask_of(&self, label: usize) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }

    /// 8-bit rendering of the raw indices; fails for indices above 255.
    pub fn to_luma(&self) -> Result<image::GrayImage> {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for (px, &l) in out.pixels_mut().zip(&self.data) {
            let v = u8::try_from(l)
                .map_err(|_| Error::invalid(format!("label {l} does not fit in 8 bits")))?;
            *px = image::Luma([v]);
        }
        Ok(out)
    }

    pub fn from_luma(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p[0] as usize).collect(),
        }
    }
}
