//! Geometry of masked point sampling: invert augmentations to source-space
//! boxes, intersect them, draw class-balanced points inside the overlap, and
//! carry those points into each view and onto the feature map.

use rand::Rng;
use thiserror::Error;

use crate::image::{CropWindow, GeomAugRecord, Mask};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const BACKGROUND: usize = 1;
pub const FOREGROUND: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    /// No pixel of class `k` (1 = background, 2 = foreground) inside the box.
    #[error("class {0} absent from the sampling region")]
    ClassAbsent(usize),
    #[error("point ({row}, {col}) lies outside crop window {crop:?}")]
    PointOutsideCrop {
        row: usize,
        col: usize,
        crop: CropWindow,
    },
    #[error("empty sampling region")]
    EmptyRegion,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// Axis-aligned box in original-image pixels (`u` column, `v` row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub u: usize,
    pub v: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.v && row < self.v + self.h && col >= self.u && col < self.u + self.w
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Window of the original image that a view shows. Flips permute pixels
/// inside the window without moving it.
pub fn reverse_geom(rec: &GeomAugRecord) -> BBox {
    BBox {
        u: rec.crop.u,
        v: rec.crop.v,
        w: rec.crop.w,
        h: rec.crop.h,
    }
}

pub fn overlap(a: &BBox, b: &BBox) -> Option<BBox> {
    let u0 = a.u.max(b.u);
    let v0 = a.v.max(b.v);
    let u1 = (a.u + a.w).min(b.u + b.w);
    let v1 = (a.v + a.h).min(b.v + b.h);
    if u1 <= u0 || v1 <= v0 {
        return None;
    }
    Some(BBox {
        u: u0,
        v: v0,
        w: u1 - u0,
        h: v1 - v0,
    })
}

/// Sampled source-space points: `points[k - 1][n]` as `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointSet {
    pub points: [Vec<(usize, usize)>; 2],
}

impl PointSet {
    pub fn class(&self, k: usize) -> &[(usize, usize)] {
        &self.points[k - 1]
    }

    pub fn has_class(&self, k: usize) -> bool {
        !self.points[k - 1].is_empty()
    }

    /// Background points followed by foreground points.
    pub fn all(&self) -> Vec<(usize, usize)> {
        self.points.concat()
    }
}

fn candidates(mask: &Mask, bb: &BBox, value: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in bb.v..bb.v + bb.h {
        for c in bb.u..bb.u + bb.w {
            if mask.get(r, c) == value {
                out.push((r, c));
            }
        }
    }
    out
}

fn check_box(mask: &Mask, bb: &BBox) -> Result<()> {
    if bb.w == 0 || bb.h == 0 {
        return Err(SamplingError::EmptyRegion);
    }
    if bb.u + bb.w > mask.width() || bb.v + bb.h > mask.height() {
        return Err(SamplingError::Invalid(format!(
            "box {bb:?} outside {}x{} mask",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Draws `n` points per class uniformly with replacement from the pixels of
/// that class inside `bb`. Classes without pixels come back empty.
pub fn sample_available_points(mask: &Mask, bb: &BBox, n: usize, rng: &mut impl Rng) -> Result<PointSet> {
    check_box(mask, bb)?;
    if n == 0 {
        return Err(SamplingError::Invalid("N must be at least 1".into()));
    }
    let mut points: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for k in [BACKGROUND, FOREGROUND] {
        let pool = candidates(mask, bb, (k - 1) as u8);
        if pool.is_empty() {
            continue;
        }
        points[k - 1] = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    }
    Ok(PointSet { points })
}

/// Like [`sample_available_points`] but every class must be present.
pub fn sample_points(mask: &Mask, bb: &BBox, n: usize, rng: &mut impl Rng) -> Result<PointSet> {
    let set = sample_available_points(mask, bb, n, rng)?;
    for k in [BACKGROUND, FOREGROUND] {
        if !set.has_class(k) {
            return Err(SamplingError::ClassAbsent(k));
        }
    }
    Ok(set)
}

/// Source-space points to view-space pixel coordinates:
/// `floor((p - origin) * out / crop)` per axis, then flip reindexing.
pub fn map_points(points: &[(usize, usize)], rec: &GeomAugRecord) -> Result<Vec<(usize, usize)>> {
    let c = rec.crop;
    points
        .iter()
        .map(|&(row, col)| {
            if !c.contains(row, col) {
                return Err(SamplingError::PointOutsideCrop { row, col, crop: c });
            }
            let r = (row - c.v) * rec.out_h / c.h;
            let q = (col - c.u) * rec.out_w / c.w;
            let r = if rec.vflip { rec.out_h - 1 - r } else { r };
            let q = if rec.hflip { rec.out_w - 1 - q } else { q };
            Ok((r, q))
        })
        .collect()
}

/// View coordinates to feature-map coordinates by floor division, clamped to
/// a `map_h x map_w` map.
pub fn downscale_points(
    coords: &[(usize, usize)],
    ds: usize,
    map_h: usize,
    map_w: usize,
) -> Vec<(usize, usize)> {
    let ds = ds.max(1);
    coords
        .iter()
        .map(|&(r, c)| ((r / ds).min(map_h - 1), (c / ds).min(map_w - 1)))
        .collect()
}

/// Per-cell majority vote over `ds x ds` blocks. A cell is foreground only
/// when strictly more than half of its pixels are.
pub fn downscale_mask(mask: &Mask, ds: usize) -> Mask {
    let ds = ds.max(1);
    let (h, w) = (mask.height() / ds, mask.width() / ds);
    let mut data = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut ones = 0;
            for y in r * ds..(r + 1) * ds {
                for x in c * ds..(c + 1) * ds {
                    ones += mask.get(y, x) as usize;
                }
            }
            data[r * w + c] = (2 * ones > ds * ds) as u8;
        }
    }
    Mask::new(h, w, data).expect("binary")
}

/// Mean feature over the cells of `x[b]` (`x` is `[B, C, H, W]`) whose
/// downscaled mask equals class `k - 1`. Returns a `[1, C]` row.
pub fn masked_pool(
    tape: &mut Tape,
    x: Var,
    batch_index: usize,
    mask_view: &Mask,
    class_k: usize,
    ds: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(SamplingError::Invalid(format!(
            "expected [B, C, H, W], got {shape:?}"
        )));
    }
    let small = downscale_mask(mask_view, ds);
    if small.height() != shape[2] || small.width() != shape[3] {
        return Err(SamplingError::Invalid(format!(
            "downscaled mask {}x{} does not match feature map {}x{}",
            small.height(),
            small.width(),
            shape[2],
            shape[3]
        )));
    }
    let target = (class_k - 1) as u8;
    let cells: Vec<(usize, usize, usize)> = (0..small.height())
        .flat_map(|r| (0..small.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| small.get(r, c) == target)
        .map(|(r, c)| (batch_index, r, c))
        .collect();
    if cells.is_empty() {
        return Err(SamplingError::EmptyRegion);
    }
    let rows = tape.gather(x, &cells)?;
    let weights = tape.constant(Tensor::new(
        vec![1, cells.len()],
        vec![1.0 / cells.len() as f64; cells.len()],
    )?);
    Ok(tape.matmul(weights, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{apply_geom_mask, sample_geom_aug, GeomAugConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(u: usize, v: usize, w: usize, h: usize, hflip: bool) -> GeomAugRecord {
        GeomAugRecord {
            crop: CropWindow { u, v, w, h },
            out_h: 64,
            out_w: 64,
            hflip,
            vflip: false,
        }
    }

    #[test]
    fn reverse_returns_crop_window() {
        assert_eq!(
            reverse_geom(&GeomAugRecord::identity(64, 64)),
            BBox {
                u: 0,
                v: 0,
                w: 64,
                h: 64
            }
        );
        assert_eq!(
            reverse_geom(&rec(8, 8, 32, 32, true)),
            BBox {
                u: 8,
                v: 8,
                w: 32,
                h: 32
            }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let r = sample_geom_aug(&mut rng, &GeomAugConfig::default(), 64, 64);
            let bb = reverse_geom(&r);
            assert_eq!((bb.u, bb.v, bb.w, bb.h), (r.crop.u, r.crop.v, r.crop.w, r.crop.h));
        }
    }

    #[test]
    fn overlap_cases() {
        let a = BBox {
            u: 0,
            v: 0,
            w: 128,
            h: 128,
        };
        let b = BBox {
            u: 64,
            v: 64,
            w: 128,
            h: 128,
        };
        assert_eq!(
            overlap(&a, &b),
            Some(BBox {
                u: 64,
                v: 64,
                w: 64,
                h: 64
            })
        );
        let c = BBox {
            u: 200,
            v: 0,
            w: 10,
            h: 10,
        };
        assert_eq!(overlap(&a, &c), None);
        assert_eq!(overlap(&a, &a), Some(a));
    }

    #[test]
    fn balanced_sampling_on_half_mask() {
        let mut m = Mask::filled(8, 8, 0);
        for y in 0..8 {
            for x in 4..8 {
                m.set(y, x, 1);
            }
        }
        let bb = BBox {
            u: 0,
            v: 0,
            w: 8,
            h: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_points(&m, &bb, 16, &mut rng).unwrap();
        for k in [BACKGROUND, FOREGROUND] {
            assert_eq!(p.class(k).len(), 16);
            for &(r, c) in p.class(k) {
                assert_eq!(m.get(r, c) as usize, k - 1);
                assert!(bb.contains(r, c));
            }
        }
    }

    #[test]
    fn single_foreground_pixel_is_repeated() {
        let mut m = Mask::filled(6, 6, 0);
        m.set(2, 3, 1);
        let bb = BBox {
            u: 0,
            v: 0,
            w: 6,
            h: 6,
        };
        let p = sample_points(&m, &bb, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p.class(FOREGROUND), &[(2, 3); 4]);
    }

    #[test]
    fn two_pixel_region_is_uniform() {
        let mut m = Mask::filled(4, 4, 0);
        m.set(1, 1, 1);
        m.set(2, 2, 1);
        let bb = BBox {
            u: 0,
            v: 0,
            w: 4,
            h: 4,
        };
        let p = sample_points(&m, &bb, 10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let first = p.class(FOREGROUND).iter().filter(|&&q| q == (1, 1)).count();
        let frac = first as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn absent_class_is_reported() {
        let m = Mask::filled(4, 4, 0);
        let bb = BBox {
            u: 0,
            v: 0,
            w: 4,
            h: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            sample_points(&m, &bb, 2, &mut rng),
            Err(SamplingError::ClassAbsent(FOREGROUND))
        );
        let partial = sample_available_points(&m, &bb, 2, &mut rng).unwrap();
        assert!(partial.has_class(BACKGROUND) && !partial.has_class(FOREGROUND));
    }

    #[test]
    fn map_points_examples() {
        let id = GeomAugRecord::identity(64, 64);
        assert_eq!(map_points(&[(5, 9)], &id).unwrap(), vec![(5, 9)]);
        let flip = GeomAugRecord { hflip: true, ..id };
        assert_eq!(map_points(&[(5, 9)], &flip).unwrap(), vec![(5, 54)]);
        let r = rec(8, 8, 32, 32, false);
        assert_eq!(map_points(&[(10, 12)], &r).unwrap(), vec![(4, 8)]);
        assert!(matches!(
            map_points(&[(2, 12)], &r),
            Err(SamplingError::PointOutsideCrop { .. })
        ));
    }

    #[test]
    fn downscale_examples() {
        assert_eq!(downscale_points(&[(7, 9)], 1, 64, 64), vec![(7, 9)]);
        assert_eq!(downscale_points(&[(7, 9)], 4, 16, 16), vec![(1, 2)]);
        assert_eq!(downscale_points(&[(63, 63)], 4, 16, 16), vec![(15, 15)]);
    }

    #[test]
    fn mapped_points_keep_their_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mask = Mask::filled(64, 64, 0);
        for y in 10..23 {
            for x in 30..41 {
                mask.set(y, x, 1);
            }
        }
        for _ in 0..200 {
            let r1 = sample_geom_aug(&mut rng, &GeomAugConfig::default(), 64, 64);
            let r2 = sample_geom_aug(&mut rng, &GeomAugConfig::default(), 64, 64);
            let Some(bb) = overlap(&reverse_geom(&r1), &reverse_geom(&r2)) else {
                panic!("default crops always overlap");
            };
            let Ok(p) = sample_points(&mask, &bb, 16, &mut rng) else {
                continue;
            };
            for r in [r1, r2] {
                let m = apply_geom_mask(&mask, &r).unwrap();
                for k in [BACKGROUND, FOREGROUND] {
                    for (rr, cc) in map_points(p.class(k), &r).unwrap() {
                        assert_eq!(m.get(rr, cc) as usize, k - 1);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_pool_examples() {
        // 2 channels on a 2x2 map, ds = 1
        let data = vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
        let mask = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let fg = masked_pool(&mut tape, x, 0, &mask, FOREGROUND, 1).unwrap();
        assert_eq!(tape.value(fg).data(), &[2.5, 25.0]);
        let all = Mask::filled(2, 2, 1);
        let gap = masked_pool(&mut tape, x, 0, &all, FOREGROUND, 1).unwrap();
        assert_eq!(tape.value(gap).data(), &[2.5, 25.0]);
        assert_eq!(
            masked_pool(&mut tape, x, 0, &all, BACKGROUND, 1),
            Err(SamplingError::EmptyRegion)
        );

        let uniform = tape.constant(
            Tensor::new(vec![1, 2, 2, 2], vec![0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]).unwrap(),
        );
        let big = Mask::new(8, 8, (0..64).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let v = masked_pool(&mut tape, uniform, 0, &big, BACKGROUND, 4).unwrap();
        assert_eq!(tape.value(v).data(), &[0.5, -1.0]);
    }
}
