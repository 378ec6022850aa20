use rand::Rng;

use super::{ImageError, ImageRgb, Mask, Result};

/// Crop rectangle in source-image pixels: top-left column `u`, top-left row
/// `v`, width `w`, height `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropWindow {
    pub u: usize,
    pub v: usize,
    pub w: usize,
    pub h: usize,
}

impl CropWindow {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            u: 0,
            v: 0,
            w: width,
            h: height,
        }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.u + self.w <= width && self.v + self.h <= height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.v && row < self.v + self.h && col >= self.u && col < self.u + self.w
    }
}

/// Everything needed to replay or invert one geometric augmentation:
/// crop, resize to `out_h x out_w`, then optional flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GeomAugRecord {
    pub crop: CropWindow,
    pub out_h: usize,
    pub out_w: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl GeomAugRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: CropWindow::full(height, width),
            out_h: height,
            out_w: width,
            hflip: false,
            vflip: false,
        }
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if !self.crop.fits(height, width) || self.out_h == 0 || self.out_w == 0 {
            return Err(ImageError::CropOutOfBounds {
                crop: self.crop,
                height,
                width,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeomAugConfig {
    /// Crop area as a fraction of the image area.
    pub scale: (f64, f64),
    /// Crop aspect ratio `w / h`, sampled log-uniformly.
    pub ratio: (f64, f64),
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for GeomAugConfig {
    fn default() -> Self {
        Self {
            scale: (0.8, 1.0),
            ratio: (1.0, 1.0),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl GeomAugConfig {
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }

    pub fn flips_only() -> Self {
        Self {
            scale: (1.0, 1.0),
            ..Self::default()
        }
    }
}

/// Random resized crop plus flips. Side lengths are rounded up, so the crop
/// area never falls below `scale.0` of the image area.
pub fn sample_geom_aug(
    rng: &mut impl Rng,
    cfg: &GeomAugConfig,
    height: usize,
    width: usize,
) -> GeomAugRecord {
    let area = (height * width) as f64;
    let s = cfg.scale.0 + (cfg.scale.1 - cfg.scale.0) * rng.random::<f64>();
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    let ratio = (lr0 + (lr1 - lr0) * rng.random::<f64>()).exp();
    let target = s * area;
    let mut w = ((target * ratio).sqrt().ceil() as usize).clamp(1, width);
    let mut h = ((target / ratio).sqrt().ceil() as usize).clamp(1, height);
    if w == width {
        h = ((target / w as f64).ceil() as usize).clamp(h, height);
    }
    if h == height {
        w = ((target / h as f64).ceil() as usize).clamp(w, width);
    }
    let u = rng.random_range(0..=width - w);
    let v = rng.random_range(0..=height - h);
    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let vflip = rng.random::<f64>() < cfg.vflip_prob;
    GeomAugRecord {
        crop: CropWindow { u, v, w, h },
        out_h: height,
        out_w: width,
        hflip,
        vflip,
    }
}

/// Flip reindexing of an output coordinate.
pub(crate) fn flip_index(i: usize, n: usize, flip: bool) -> usize {
    if flip {
        n - 1 - i
    } else {
        i
    }
}

/// Bilinear sample positions (half-pixel centers) along one axis.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Crop, bilinear resize, flips.
pub fn apply_geom_image(img: &ImageRgb, rec: &GeomAugRecord) -> Result<ImageRgb> {
    rec.check(img.height(), img.width())?;
    let c = rec.crop;
    let ys = bilinear_taps(rec.out_h, c.h);
    let xs = bilinear_taps(rec.out_w, c.w);
    let mut data = vec![0.0; 3 * rec.out_h * rec.out_w];
    for ch in 0..3 {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let ty = flip_index(oy, rec.out_h, rec.vflip);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let tx = flip_index(ox, rec.out_w, rec.hflip);
                let p = |y: usize, x: usize| img.get(ch, c.v + y, c.u + x);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data[(ch * rec.out_h + ty) * rec.out_w + tx] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageRgb::new(rec.out_h, rec.out_w, data)
}

/// Nearest-neighbor source index for output index `d`: the source pixel that
/// contains the right edge of the output pixel's footprint. With this choice
/// the point map `floor(q * out / len)` lands on a pixel that samples `q`.
pub(crate) fn nearest_index(d: usize, out_len: usize, in_len: usize) -> usize {
    ((d + 1) * in_len).div_ceil(out_len) - 1
}

/// Crop, nearest-neighbor resize, flips; the output stays binary.
pub fn apply_geom_mask(mask: &Mask, rec: &GeomAugRecord) -> Result<Mask> {
    rec.check(mask.height(), mask.width())?;
    let c = rec.crop;
    let mut data = vec![0u8; rec.out_h * rec.out_w];
    for oy in 0..rec.out_h {
        let sy = c.v + nearest_index(oy, rec.out_h, c.h);
        let ty = flip_index(oy, rec.out_h, rec.vflip);
        for ox in 0..rec.out_w {
            let sx = c.u + nearest_index(ox, rec.out_w, c.w);
            let tx = flip_index(ox, rec.out_w, rec.hflip);
            data[ty * rec.out_w + tx] = mask.get(sy, sx);
        }
    }
    Mask::new(rec.out_h, rec.out_w, data)
}
