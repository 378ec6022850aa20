//! Three-view generation for a mini-batch.
//!
//! Views 1 and 2 are independent photometric + geometric augmentations of the
//! source image. View 3 keeps the foreground of view 1 and replaces the common
//! background with the (color-matched) view 1 of a partner sample, blended
//! through an eroded and blurred background mask.

use rand::Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::image::{
    alpha_blend, apply_color_aug, apply_geom_image, apply_geom_mask, color_transfer, erode, gaussian_blur,
    sample_color_aug, sample_geom_aug, AlphaMap, ColorAugConfig, ColorAugParams, GeomAugConfig,
    GeomAugRecord, ImageError, ImageRgb, Mask,
};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("mask has no foreground pixel")]
    NoForeground,
    #[error("batch inputs differ in length: {images} images, {masks} masks")]
    BatchLength { images: usize, masks: usize },
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, ViewError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub color: ColorAugConfig,
    pub geom: GeomAugConfig,
    pub erode_radius: usize,
    pub blend_sigma: f64,
    pub blend_radius: usize,
    pub transfer_eps: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            color: ColorAugConfig::default(),
            geom: GeomAugConfig::default(),
            erode_radius: 3,
            blend_sigma: 1.0,
            blend_radius: 2,
            transfer_eps: 1e-6,
        }
    }
}

impl ViewConfig {
    /// No photometric or geometric change; only the background swap remains.
    pub fn identity() -> Self {
        Self {
            color: ColorAugConfig::disabled(),
            geom: GeomAugConfig::identity(),
            ..Self::default()
        }
    }
}

/// Views 1 and 2 of one sample together with their augmentation records.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViews {
    pub view1: ImageRgb,
    pub view2: ImageRgb,
    pub mask1: Mask,
    pub mask2: Mask,
    pub rec1: GeomAugRecord,
    pub rec2: GeomAugRecord,
    pub color1: ColorAugParams,
    pub color2: ColorAugParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriplet {
    pub view1: ImageRgb,
    pub view2: ImageRgb,
    pub view3: ImageRgb,
    pub mask1: Mask,
    pub mask2: Mask,
    pub rec1: GeomAugRecord,
    pub rec2: GeomAugRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchViews {
    pub triplets: Vec<ViewTriplet>,
}

impl BatchViews {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

pub fn generate_two_views(
    img: &ImageRgb,
    mask: &Mask,
    rng: &mut impl Rng,
    cfg: &ViewConfig,
) -> Result<TwoViews> {
    mask.same_size(img.height(), img.width())?;
    if mask.count(1) == 0 {
        return Err(ViewError::NoForeground);
    }
    let (h, w) = (img.height(), img.width());
    let color1 = sample_color_aug(rng, &cfg.color);
    let rec1 = sample_geom_aug(rng, &cfg.geom, h, w);
    let color2 = sample_color_aug(rng, &cfg.color);
    let rec2 = sample_geom_aug(rng, &cfg.geom, h, w);
    let view1 = apply_geom_image(&apply_color_aug(img, &color1), &rec1)?;
    let view2 = apply_geom_image(&apply_color_aug(img, &color2), &rec2)?;
    Ok(TwoViews {
        view1,
        view2,
        mask1: apply_geom_mask(mask, &rec1)?,
        mask2: apply_geom_mask(mask, &rec2)?,
        rec1,
        rec2,
        color1,
        color2,
    })
}

/// 1 where both masks are background.
pub fn common_background_mask(mask1: &Mask, partner_mask1: &Mask) -> Result<Mask> {
    partner_mask1.same_size(mask1.height(), mask1.width())?;
    let data = mask1
        .data()
        .iter()
        .zip(partner_mask1.data())
        .map(|(&a, &b)| (a == 0 && b == 0) as u8)
        .collect();
    Ok(Mask::new(mask1.height(), mask1.width(), data)?)
}

/// Eroded, blurred common-background mask used as blending weights.
pub fn background_alpha(mask1: &Mask, partner_mask1: &Mask, cfg: &ViewConfig) -> Result<AlphaMap> {
    let bg = common_background_mask(mask1, partner_mask1)?;
    let eroded = erode(&bg, cfg.erode_radius);
    Ok(gaussian_blur(
        &AlphaMap::from_mask(&eroded),
        cfg.blend_sigma,
        cfg.blend_radius,
    ))
}

pub fn swap_background(
    view1: &ImageRgb,
    mask1: &Mask,
    partner_view1: &ImageRgb,
    partner_mask1: &Mask,
    cfg: &ViewConfig,
) -> Result<ImageRgb> {
    mask1.same_size(view1.height(), view1.width())?;
    partner_view1.same_size(view1.height(), view1.width())?;
    let transferred = color_transfer(partner_view1, view1, cfg.transfer_eps)?;
    let alpha = background_alpha(mask1, partner_mask1, cfg)?;
    Ok(alpha_blend(view1, &transferred, &alpha)?)
}

/// Mirror pairing within a batch: `i <-> B - 1 - i`.
pub fn partner_index(i: usize, batch: usize) -> usize {
    batch - 1 - i
}

/// Builds view 3 for every sample from already generated two-view pairs.
pub fn assemble_triplets(pairs: Vec<TwoViews>, cfg: &ViewConfig) -> Result<BatchViews> {
    if pairs.is_empty() {
        return Err(ViewError::EmptyBatch);
    }
    let b = pairs.len();
    let build = |i: usize| -> Result<ImageRgb> {
        let p = &pairs[partner_index(i, b)];
        swap_background(&pairs[i].view1, &pairs[i].mask1, &p.view1, &p.mask1, cfg)
    };
    #[cfg(feature = "parallel")]
    let view3: Vec<ImageRgb> = (0..b).into_par_iter().map(build).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let view3: Vec<ImageRgb> = (0..b).map(build).collect::<Result<_>>()?;
    let triplets = pairs
        .into_iter()
        .zip(view3)
        .map(|(p, view3)| ViewTriplet {
            view1: p.view1,
            view2: p.view2,
            view3,
            mask1: p.mask1,
            mask2: p.mask2,
            rec1: p.rec1,
            rec2: p.rec2,
        })
        .collect();
    Ok(BatchViews { triplets })
}

/// Two-view draw for sample `index` of a batch; `attempt` selects a fresh
/// stream for re-draws.
pub fn two_views_for_sample(
    img: &ImageRgb,
    mask: &Mask,
    batch_seed: u64,
    index: usize,
    attempt: usize,
    cfg: &ViewConfig,
) -> Result<TwoViews> {
    let mut r = rng::stream(batch_seed, &[index as u64, attempt as u64]);
    generate_two_views(img, mask, &mut r, cfg)
}

/// Generates all three views for every sample. Each sample draws from its own
/// stream derived from `(batch_seed, index)`.
pub fn generate_views_batch(
    images: &[ImageRgb],
    masks: &[Mask],
    batch_seed: u64,
    cfg: &ViewConfig,
) -> Result<BatchViews> {
    if images.len() != masks.len() {
        return Err(ViewError::BatchLength {
            images: images.len(),
            masks: masks.len(),
        });
    }
    let draw = |i: usize| two_views_for_sample(&images[i], &masks[i], batch_seed, i, 0, cfg);
    #[cfg(feature = "parallel")]
    let pairs: Vec<TwoViews> = (0..images.len())
        .into_par_iter()
        .map(draw)
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let pairs: Vec<TwoViews> = (0..images.len()).map(draw).collect::<Result<_>>()?;
    assemble_triplets(pairs, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::CropWindow;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn square_mask(n: usize, lo: usize, hi: usize) -> Mask {
        let mut m = Mask::filled(n, n, 0);
        for y in lo..hi {
            for x in lo..hi {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn identity_augmentations_reproduce_the_image() {
        let img = noise_image(1, 16, 16);
        let mask = square_mask(16, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tv = generate_two_views(&img, &mask, &mut rng, &ViewConfig::identity()).unwrap();
        assert_eq!(tv.view1, img);
        assert_eq!(tv.view2, img);
        assert_eq!(tv.mask1, mask);
    }

    #[test]
    fn mask_count_matches_crop_window_at_unit_scale() {
        let img = noise_image(2, 32, 32);
        let mask = square_mask(32, 5, 20);
        let cfg = ViewConfig {
            geom: GeomAugConfig {
                scale: (0.5, 0.5),
                ..GeomAugConfig::default()
            },
            ..ViewConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tv = generate_two_views(&img, &mask, &mut rng, &cfg).unwrap();
        // replay rec1 without resizing
        let rec = GeomAugRecord {
            out_h: tv.rec1.crop.h,
            out_w: tv.rec1.crop.w,
            ..tv.rec1
        };
        let m = apply_geom_mask(&mask, &rec).unwrap();
        let c: CropWindow = tv.rec1.crop;
        let inside = (0..32)
            .flat_map(|y| (0..32).map(move |x| (y, x)))
            .filter(|&(y, x)| c.contains(y, x) && mask.get(y, x) == 1)
            .count();
        assert_eq!(m.count(1), inside);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let imgs = vec![noise_image(4, 16, 16), noise_image(5, 16, 16)];
        let masks = vec![square_mask(16, 2, 8), square_mask(16, 6, 12)];
        let a = generate_views_batch(&imgs, &masks, 99, &ViewConfig::default()).unwrap();
        let b = generate_views_batch(&imgs, &masks, 99, &ViewConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn common_background_cases() {
        let bg = Mask::filled(4, 4, 0);
        let fg = Mask::filled(4, 4, 1);
        assert_eq!(common_background_mask(&bg, &bg).unwrap(), Mask::filled(4, 4, 1));
        assert_eq!(common_background_mask(&bg, &fg).unwrap(), Mask::filled(4, 4, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r1 = Mask::new(8, 8, (0..64).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let r2 = Mask::new(8, 8, (0..64).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let expect = r1
            .data()
            .iter()
            .zip(r2.data())
            .filter(|(a, b)| **a == 0 && **b == 0)
            .count();
        assert_eq!(common_background_mask(&r1, &r2).unwrap().count(1), expect);
        assert!(common_background_mask(&r1, &Mask::filled(4, 4, 0)).is_err());
    }

    #[test]
    fn self_swap_is_near_identity() {
        let img = noise_image(7, 24, 24);
        let mask = square_mask(24, 8, 14);
        let out = swap_background(&img, &mask, &img, &mask, &ViewConfig::default()).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_common_background_returns_view1() {
        let img = noise_image(8, 16, 16);
        let partner = noise_image(9, 16, 16);
        let mask = square_mask(16, 3, 7);
        let all_fg = Mask::filled(16, 16, 1);
        let out = swap_background(&img, &mask, &partner, &all_fg, &ViewConfig::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn deep_background_takes_transferred_partner() {
        let n = 32;
        let img = noise_image(10, n, n);
        let partner = noise_image(11, n, n);
        let mask = square_mask(n, 12, 20);
        let none = Mask::filled(n, n, 0);
        let cfg = ViewConfig::default();
        let out = swap_background(&img, &mask, &partner, &none, &cfg).unwrap();
        let transferred = color_transfer(&partner, &img, cfg.transfer_eps).unwrap();
        // alpha is exactly 1 where the eroded background covers the whole
        // blur support: distance to the square > erode + blur radius
        let reach = cfg.erode_radius + cfg.blend_radius;
        for y in 0..n {
            for x in 0..n {
                let dy = if y < 12 { 12 - y } else { y.saturating_sub(19) };
                let dx = if x < 12 { 12 - x } else { x.saturating_sub(19) };
                if dy.max(dx) > reach {
                    for c in 0..3 {
                        assert!((out.get(c, y, x) - transferred.get(c, y, x)).abs() < 1e-9);
                    }
                }
                if mask.get(y, x) == 1 {
                    assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn partner_pairing() {
        assert_eq!(partner_index(0, 1), 0);
        let pairs: Vec<usize> = (0..4).map(|i| partner_index(i, 4)).collect();
        assert_eq!(pairs, vec![3, 2, 1, 0]);
        let pairs: Vec<usize> = (0..3).map(|i| partner_index(i, 3)).collect();
        assert_eq!(pairs, vec![2, 1, 0]);
        for b in 1..20 {
            for i in 0..b {
                assert_eq!(partner_index(partner_index(i, b), b), i);
            }
        }
    }

    #[test]
    fn single_sample_batch_self_swaps() {
        let img = noise_image(12, 16, 16);
        let mask = square_mask(16, 5, 10);
        let bv = generate_views_batch(
            std::slice::from_ref(&img),
            std::slice::from_ref(&mask),
            3,
            &ViewConfig::default(),
        )
        .unwrap();
        let t = &bv.triplets[0];
        for (a, b) in t.view1.data().iter().zip(t.view3.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn no_foreground_is_rejected() {
        let img = noise_image(13, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            generate_two_views(&img, &Mask::filled(8, 8, 0), &mut rng, &ViewConfig::default()),
            Err(ViewError::NoForeground)
        );
    }
}
