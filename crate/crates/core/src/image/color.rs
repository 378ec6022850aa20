use rand::Rng;

use super::filter::gaussian_blur;
use super::{clamp_unit, luma, ImageRgb};

/// Sampling ranges for photometric augmentation.
///
/// A jitter strength `s` maps to a multiplicative factor in `[1 - s, 1 + s]`
/// (brightness, contrast, saturation) or an additive hue shift in `[-s, s]`
/// on the `[0, 1)` hue circle.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorAugConfig {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    /// Upper bound on the blur radius; the radius is `ceil(3 sigma)` below it.
    pub blur_max_radius: usize,
}

impl Default for ColorAugConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            blur_max_radius: 4,
        }
    }
}

impl ColorAugConfig {
    /// No photometric change at all.
    pub fn disabled() -> Self {
        Self {
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorAugParams {
    pub apply_jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub apply_blur: bool,
    pub blur_sigma: f64,
    pub blur_radius: usize,
}

impl ColorAugParams {
    pub fn identity() -> Self {
        Self {
            apply_jitter: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            apply_blur: false,
            blur_sigma: 1.0,
            blur_radius: 3,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws one set of photometric parameters. Every value is drawn on every
/// call, whatever the flags, so the stream position does not depend on them.
pub fn sample_color_aug(rng: &mut impl Rng, cfg: &ColorAugConfig) -> ColorAugParams {
    let apply_jitter = rng.random::<f64>() < cfg.jitter_prob;
    let brightness = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
    let contrast = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let saturation = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
    let hue = uniform(rng, -cfg.hue, cfg.hue);
    let apply_blur = rng.random::<f64>() < cfg.blur_prob;
    let blur_sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
    let blur_radius = ((3.0 * blur_sigma).ceil() as usize).clamp(1, cfg.blur_max_radius.max(1));
    ColorAugParams {
        apply_jitter,
        brightness,
        contrast,
        saturation,
        hue,
        apply_blur,
        blur_sigma,
        blur_radius,
    }
}

/// Brightness, contrast, saturation and hue (in that order), then optional
/// blur. Each stage clamps to `[0, 1]`; stages at their identity value are
/// skipped so identity parameters return the input bit-exactly.
pub fn apply_color_aug(img: &ImageRgb, p: &ColorAugParams) -> ImageRgb {
    let mut out = img.clone();
    if p.apply_jitter {
        if p.brightness != 1.0 {
            adjust_brightness(&mut out, p.brightness);
        }
        if p.contrast != 1.0 {
            adjust_contrast(&mut out, p.contrast);
        }
        if p.saturation != 1.0 {
            adjust_saturation(&mut out, p.saturation);
        }
        if p.hue != 0.0 {
            rotate_hue(&mut out, p.hue);
        }
    }
    if p.apply_blur {
        out = gaussian_blur(&out, p.blur_sigma, p.blur_radius);
    }
    out
}

pub fn adjust_brightness(img: &mut ImageRgb, factor: f64) {
    let n = img.height() * img.width();
    for c in 0..3 {
        let plane = img.plane_mut(c);
        for v in plane.iter_mut().take(n) {
            *v *= factor;
        }
        clamp_unit(plane);
    }
}

/// Interpolates every value towards the mean luma of the whole image.
pub fn adjust_contrast(img: &mut ImageRgb, factor: f64) {
    let n = (img.height() * img.width()) as f64;
    let mean = (0..img.height() * img.width())
        .map(|i| luma(img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]))
        .sum::<f64>()
        / n;
    for c in 0..3 {
        let plane = img.plane_mut(c);
        for v in plane.iter_mut() {
            *v = mean + factor * (*v - mean);
        }
        clamp_unit(plane);
    }
}

/// Interpolates each pixel towards its own grayscale value.
pub fn adjust_saturation(img: &mut ImageRgb, factor: f64) {
    let n = img.height() * img.width();
    let gray: Vec<f64> = (0..n)
        .map(|i| luma(img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]))
        .collect();
    for c in 0..3 {
        let plane = img.plane_mut(c);
        for (v, g) in plane.iter_mut().zip(&gray) {
            *v = g + factor * (*v - g);
        }
        clamp_unit(plane);
    }
}

pub fn rotate_hue(img: &mut ImageRgb, shift: f64) {
    let n = img.height() * img.width();
    for i in 0..n {
        let (r, g, b) = (img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r2, g2, b2) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        img.plane_mut(0)[i] = r2.clamp(0.0, 1.0);
        img.plane_mut(1)[i] = g2.clamp(0.0, 1.0);
        img.plane_mut(2)[i] = b2.clamp(0.0, 1.0);
    }
}

/// Hue in `[0, 1)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ColorAugConfig::default();
        let a = sample_color_aug(&mut ChaCha8Rng::seed_from_u64(5), &cfg);
        let b = sample_color_aug(&mut ChaCha8Rng::seed_from_u64(5), &cfg);
        assert_eq!(a, b);
        assert!((0.6..=1.4).contains(&a.brightness));
        assert!((-0.1..=0.1).contains(&a.hue));
        assert!((0.1..=2.0).contains(&a.blur_sigma));
    }

    #[test]
    fn zero_strength_is_identity() {
        let cfg = ColorAugConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            ..ColorAugConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = sample_color_aug(&mut rng, &cfg);
            assert_eq!(p.brightness, 1.0);
            assert_eq!(p.contrast, 1.0);
            assert_eq!(p.saturation, 1.0);
            assert_eq!(p.hue, 0.0);
        }
    }

    #[test]
    fn jitter_probability_monte_carlo() {
        let cfg = ColorAugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let hits = (0..10_000)
            .filter(|_| sample_color_aug(&mut rng, &cfg).apply_jitter)
            .count();
        let frac = hits as f64 / 10_000.0;
        assert!((frac - 0.8).abs() <= 0.02, "jitter fraction {frac}");
    }

    #[test]
    fn identity_params_are_bit_exact() {
        let img = noise_image(2, 8, 8);
        let mut p = ColorAugParams::identity();
        assert_eq!(apply_color_aug(&img, &p), img);
        p.apply_jitter = true;
        assert_eq!(apply_color_aug(&img, &p), img);
    }

    #[test]
    fn brightness_halves_constant_image() {
        let img = ImageRgb::filled(4, 4, [0.8, 0.8, 0.8]);
        let p = ColorAugParams {
            apply_jitter: true,
            brightness: 0.5,
            ..ColorAugParams::identity()
        };
        for v in apply_color_aug(&img, &p).data() {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_saturation_gives_rec601_gray() {
        let img = noise_image(3, 6, 6);
        let p = ColorAugParams {
            apply_jitter: true,
            saturation: 0.0,
            ..ColorAugParams::identity()
        };
        let out = apply_color_aug(&img, &p);
        for y in 0..6 {
            for x in 0..6 {
                let [r, g, b] = img.pixel(y, x);
                let gray = 0.299 * r + 0.587 * g + 0.114 * b;
                for c in 0..3 {
                    assert!((out.get(c, y, x) - gray).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = noise_image(4, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ColorAugConfig {
            jitter_prob: 1.0,
            brightness: 0.9,
            contrast: 0.9,
            ..ColorAugConfig::default()
        };
        for _ in 0..50 {
            let out = apply_color_aug(&img, &sample_color_aug(&mut rng, &cfg));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (r, g, b) = (rng.random(), rng.random(), rng.random());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
