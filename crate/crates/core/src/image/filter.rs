use super::{Mask, Planar};

/// Normalized 1-D Gaussian weights for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur<T: Planar>(img: &T, sigma: f64, radius: usize) -> T {
    assert!(sigma > 0.0, "sigma must be positive");
    let kernel = gaussian_kernel(sigma, radius);
    let (h, w) = img.dims();
    let mut out = img.clone();
    let r = radius as isize;
    let mut tmp = vec![0.0; h * w];
    for plane in out.planes_mut() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Binary erosion with a `(2r+1)^2` square; out-of-image neighbors are ignored.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let src = mask.data();
    // square erosion = row-wise min followed by column-wise min
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().copied().min().unwrap_or(0);
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).min().unwrap_or(0);
        }
    }
    Mask::new(h, w, out).expect("eroded mask stays binary")
}
