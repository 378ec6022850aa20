//! Planar RGB images, binary masks and the augmentation / compositing
//! primitives used to build training views.

pub mod color;
pub mod composite;
pub mod filter;
pub mod geom;

pub use color::{apply_color_aug, sample_color_aug, ColorAugConfig, ColorAugParams};
pub use composite::{alpha_blend, color_transfer, color_transfer_unclamped, transfer_channel};
pub use filter::{erode, gaussian_blur, gaussian_kernel};
pub use geom::{
    apply_geom_image, apply_geom_mask, sample_geom_aug, CropWindow, GeomAugConfig, GeomAugRecord,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("crop {crop:?} exceeds image bounds {height}x{width}")]
    CropOutOfBounds {
        crop: CropWindow,
        height: usize,
        width: usize,
    },
    #[error("invalid image data: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// RGB image stored channel-planar (`[c][y][x]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(ImageError::Invalid(format!(
                "expected {} values for {height}x{width} RGB, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        clamp_unit(&mut data);
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn same_size(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(ImageError::SizeMismatch(self.height, self.width, h, w));
        }
        Ok(())
    }
}

/// Binary mask: 0 = background, 1 = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ImageError::Invalid(format!(
                "expected {} mask values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(ImageError::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value.min(1); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v.min(1);
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    pub fn same_size(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(ImageError::SizeMismatch(self.height, self.width, h, w));
        }
        Ok(())
    }
}

/// Real-valued blending weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AlphaMap {
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ImageError::Invalid(format!(
                "expected {} alpha values, got {}",
                height * width,
                data.len()
            )));
        }
        clamp_unit(&mut data);
        Ok(Self { height, width, data })
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            data: mask.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Anything stored as one or more `height x width` planes of `f64`.
pub trait Planar: Clone {
    fn dims(&self) -> (usize, usize);
    fn planes_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Planar for ImageRgb {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        let n = self.height * self.width;
        self.data.chunks_mut(n.max(1)).collect()
    }
}

impl Planar for AlphaMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.data[..]]
    }
}

pub(crate) fn clamp_unit(data: &mut [f64]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Rec.601 luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}
