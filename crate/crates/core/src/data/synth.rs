//! Synthetic aerial-like scenes: rectangular buildings over value-noise
//! terrain, and bitemporal pairs derived from them.

use rand::Rng;

use super::{DataError, Result};
use crate::image::{apply_color_aug, sample_color_aug, ColorAugConfig, ImageRgb, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub min_buildings: usize,
    pub max_buildings: usize,
    pub min_side: usize,
    /// Coarse noise grid spacing in pixels.
    pub noise_cell: usize,
    pub noise_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_buildings: 1,
            max_buildings: 6,
            min_side: 6,
            noise_cell: 16,
            noise_amplitude: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(DataError::Invalid(format!(
                "scene size {} is not a positive multiple of 16",
                self.size
            )));
        }
        if self.min_buildings == 0 || self.min_buildings > self.max_buildings {
            return Err(DataError::Invalid(
                "building count range must start at 1 or more".into(),
            ));
        }
        if self.min_side > self.max_side() {
            return Err(DataError::Invalid(format!(
                "size {} too small for buildings of side {}",
                self.size, self.min_side
            )));
        }
        Ok(())
    }

    pub fn max_side(&self) -> usize {
        self.size / 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub fill: [f64; 3],
    pub border: [f64; 3],
}

impl Building {
    /// Clipped extent `(y0, x0, y1, x1)` (exclusive ends) on a `size` grid.
    pub fn clipped(&self, size: usize) -> (usize, usize, usize, usize) {
        (
            self.y,
            self.x,
            (self.y + self.h).min(size),
            (self.x + self.w).min(size),
        )
    }
}

/// Low-frequency background shared by both epochs of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub size: usize,
    pub base: [f64; 3],
    pub amplitude: f64,
    grid_n: usize,
    grid: Vec<f64>,
}

impl Terrain {
    pub fn sample(rng: &mut impl Rng, cfg: &SceneConfig) -> Self {
        let base = [
            0.22 + 0.15 * rng.random::<f64>(),
            0.30 + 0.15 * rng.random::<f64>(),
            0.15 + 0.12 * rng.random::<f64>(),
        ];
        let grid_n = cfg.size / cfg.noise_cell.max(1) + 2;
        let grid = (0..grid_n * grid_n).map(|_| rng.random::<f64>()).collect();
        Self {
            size: cfg.size,
            base,
            amplitude: cfg.noise_amplitude,
            grid_n,
            grid,
        }
    }

    /// Bilinear interpolation of the coarse grid at pixel `(y, x)`.
    pub fn noise(&self, y: usize, x: usize) -> f64 {
        let cell = self.size as f64 / (self.grid_n - 2) as f64;
        let gy = y as f64 / cell;
        let gx = x as f64 / cell;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let g = |r: usize, c: usize| self.grid[r.min(self.grid_n - 1) * self.grid_n + c.min(self.grid_n - 1)];
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
        let bot = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn render(&self) -> ImageRgb {
        let s = self.size;
        let mut img = ImageRgb::filled(s, s, [0.0; 3]);
        for y in 0..s {
            for x in 0..s {
                let n = self.amplitude * (self.noise(y, x) - 0.5);
                for c in 0..3 {
                    img.set(c, y, x, (self.base[c] + n).clamp(0.0, 1.0));
                }
            }
        }
        img
    }
}

pub fn sample_building(rng: &mut impl Rng, cfg: &SceneConfig) -> Building {
    let h = rng.random_range(cfg.min_side..=cfg.max_side());
    let w = rng.random_range(cfg.min_side..=cfg.max_side());
    let y = rng.random_range(0..cfg.size);
    let x = rng.random_range(0..cfg.size);
    let shade = 0.55 + 0.4 * rng.random::<f64>();
    let tint = [
        rng.random_range(-0.08..0.08),
        rng.random_range(-0.08..0.08),
        rng.random_range(-0.08..0.08),
    ];
    let fill = tint.map(|t| (shade + t).clamp(0.0, 1.0));
    let border = fill.map(|v| 0.45 * v);
    Building {
        y,
        x,
        h,
        w,
        fill,
        border,
    }
}

/// Paints buildings over the terrain; later buildings cover earlier ones.
pub fn render_scene(terrain: &Terrain, buildings: &[Building]) -> (ImageRgb, Mask) {
    let s = terrain.size;
    let mut img = terrain.render();
    let mut mask = Mask::filled(s, s, 0);
    for b in buildings {
        let (y0, x0, y1, x1) = b.clipped(s);
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = y == b.y || x == b.x || y == b.y + b.h - 1 || x == b.x + b.w - 1;
                let color = if edge { b.border } else { b.fill };
                for (c, v) in color.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
                mask.set(y, x, 1);
            }
        }
    }
    (img, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageRgb,
    pub mask: Mask,
    pub terrain: Terrain,
    pub buildings: Vec<Building>,
}

pub fn synth_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let terrain = Terrain::sample(rng, cfg);
    let count = rng.random_range(cfg.min_buildings..=cfg.max_buildings);
    let buildings: Vec<Building> = (0..count).map(|_| sample_building(rng, cfg)).collect();
    let (image, mask) = render_scene(&terrain, &buildings);
    Ok(Scene {
        image,
        mask,
        terrain,
        buildings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdConfig {
    pub scene: SceneConfig,
    pub remove_prob: f64,
    pub max_added: usize,
    /// Per-epoch photometric variation.
    pub jitter: ColorAugConfig,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            remove_prob: 0.3,
            max_added: 2,
            jitter: ColorAugConfig {
                jitter_prob: 1.0,
                brightness: 0.15,
                contrast: 0.15,
                saturation: 0.15,
                hue: 0.02,
                blur_prob: 0.0,
                ..ColorAugConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdPair {
    pub image_t1: ImageRgb,
    pub image_t2: ImageRgb,
    pub change: Mask,
}

pub fn xor_masks(a: &Mask, b: &Mask) -> Mask {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x ^ y).collect();
    Mask::new(a.height(), a.width(), data).expect("binary")
}

pub fn synth_cd_pair(rng: &mut impl Rng, cfg: &CdConfig) -> Result<CdPair> {
    let scene = synth_scene(rng, &cfg.scene)?;
    let mut later: Vec<Building> = scene
        .buildings
        .iter()
        .filter(|_| rng.random::<f64>() >= cfg.remove_prob)
        .cloned()
        .collect();
    let added = rng.random_range(0..=cfg.max_added);
    later.extend((0..added).map(|_| sample_building(rng, &cfg.scene)));
    let (img2, mask2) = render_scene(&scene.terrain, &later);
    let j1 = sample_color_aug(rng, &cfg.jitter);
    let j2 = sample_color_aug(rng, &cfg.jitter);
    Ok(CdPair {
        image_t1: apply_color_aug(&scene.image, &j1),
        image_t2: apply_color_aug(&img2, &j2),
        change: xor_masks(&scene.mask, &mask2),
    })
}
