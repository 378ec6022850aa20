use super::{clamp_unit, AlphaMap, ImageError, ImageRgb, Result};

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Matches the population mean and standard deviation of `src` to `tgt`:
/// `sigma_t * (src - mu_s) / (sigma_s + eps) + mu_t`. No clamping.
pub fn transfer_channel(src: &[f64], tgt: &[f64], eps: f64) -> Vec<f64> {
    let (mu_s, sd_s) = mean_std(src);
    let (mu_t, sd_t) = mean_std(tgt);
    let k = sd_t / (sd_s + eps);
    src.iter().map(|v| k * (v - mu_s) + mu_t).collect()
}

/// Per-channel statistics transfer without the final clamp, in planar layout.
pub fn color_transfer_unclamped(src: &ImageRgb, tgt: &ImageRgb, eps: f64) -> Result<Vec<f64>> {
    tgt.same_size(src.height(), src.width())?;
    let mut out = Vec::with_capacity(src.data().len());
    for c in 0..3 {
        out.extend(transfer_channel(src.plane(c), tgt.plane(c), eps));
    }
    Ok(out)
}

/// Recolors `src` to carry the channel statistics of `tgt`, clamped to `[0, 1]`.
pub fn color_transfer(src: &ImageRgb, tgt: &ImageRgb, eps: f64) -> Result<ImageRgb> {
    let mut data = color_transfer_unclamped(src, tgt, eps)?;
    clamp_unit(&mut data);
    ImageRgb::new(src.height(), src.width(), data)
}

/// `(1 - alpha) * fg + alpha * bg` per pixel and channel.
pub fn alpha_blend(fg: &ImageRgb, bg: &ImageRgb, alpha: &AlphaMap) -> Result<ImageRgb> {
    let (h, w) = (fg.height(), fg.width());
    bg.same_size(h, w)?;
    if alpha.height() != h || alpha.width() != w {
        return Err(ImageError::SizeMismatch(alpha.height(), alpha.width(), h, w));
    }
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        let (f, b) = (fg.plane(c), bg.plane(c));
        for i in 0..n {
            let a = alpha.data()[i];
            data[c * n + i] = (1.0 - a) * f[i] + a * b[i];
        }
    }
    ImageRgb::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn self_transfer_is_identity() {
        let img = noise_image(1, 8, 8);
        let raw = color_transfer_unclamped(&img, &img, 1e-6).unwrap();
        // the eps guard shrinks deviations by sigma / (sigma + eps), so the
        // residual is at most 1e-6 per unit of z-score
        for c in 0..3 {
            let (mu, sd) = mean_std(img.plane(c));
            for (a, b) in img.plane(c).iter().zip(&raw[c * 64..(c + 1) * 64]) {
                assert!((a - b).abs() <= 1e-6 * (a - mu).abs() / sd);
            }
        }
    }

    #[test]
    fn hand_arithmetic_case() {
        // src mean 1 std 1, tgt mean 12 std 2
        let out = transfer_channel(&[0.0, 2.0], &[10.0, 14.0], 1e-6);
        assert!((out[0] - 10.0).abs() < 1e-5);
        assert!((out[1] - 14.0).abs() < 1e-5);
    }

    #[test]
    fn flat_source_maps_to_target_mean() {
        let out = transfer_channel(&[0.3; 5], &[0.1, 0.2, 0.3, 0.4, 0.5], 1e-6);
        for v in out {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn statistics_are_matched() {
        let src = noise_image(2, 10, 12);
        let tgt = noise_image(3, 10, 12);
        let eps = 1e-6;
        let raw = color_transfer_unclamped(&src, &tgt, eps).unwrap();
        let n = 120;
        for c in 0..3 {
            let (mo, so) = mean_std(&raw[c * n..(c + 1) * n]);
            let (_, ss) = mean_std(src.plane(c));
            let (mt, st) = mean_std(tgt.plane(c));
            assert!((mo - mt).abs() < 1e-9);
            assert!((so - st * ss / (ss + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn blend_limits() {
        let fg = noise_image(4, 5, 5);
        let bg = noise_image(5, 5, 5);
        assert_eq!(alpha_blend(&fg, &bg, &AlphaMap::filled(5, 5, 0.0)).unwrap(), fg);
        assert_eq!(alpha_blend(&fg, &bg, &AlphaMap::filled(5, 5, 1.0)).unwrap(), bg);
        let a = ImageRgb::filled(2, 2, [0.2; 3]);
        let b = ImageRgb::filled(2, 2, [0.6; 3]);
        let mid = alpha_blend(&a, &b, &AlphaMap::filled(2, 2, 0.5)).unwrap();
        for v in mid.data() {
            assert!((v - 0.4).abs() < 1e-15);
        }
        assert!(alpha_blend(&a, &fg, &AlphaMap::filled(2, 2, 0.5)).is_err());
    }
}
