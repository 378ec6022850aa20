//! Browser demo: view generation, point sampling and background swapping on
//! a synthetic scene. Images cross the boundary as RGBA bytes.

use wasm_bindgen::prelude::*;

use sadl::data::{synth_scene, SceneConfig};
use sadl::image::{ImageRgb, Mask};
use sadl::rng;
use sadl::sampling::{
    map_points, overlap, reverse_geom, sample_available_points, BBox, BACKGROUND, FOREGROUND,
};
use sadl::views::{swap_background, two_views_for_sample, TwoViews, ViewConfig};

const FG_TINT: [u8; 3] = [255, 64, 64];
const BG_DOT: [u8; 3] = [40, 120, 255];
const FG_DOT: [u8; 3] = [255, 40, 40];
const BOX: [u8; 3] = [255, 220, 0];

/// RGBA bytes of `img`; foreground pixels of `tint` are mixed with red.
pub fn to_rgba(img: &ImageRgb, tint: Option<&Mask>) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let px = img.pixel(y, x);
            let on = tint.is_some_and(|m| m.get(y, x) == 1);
            for (c, v) in px.iter().enumerate() {
                let b = (v.clamp(0.0, 1.0) * 255.0).round();
                let b = if on { 0.6 * b + 0.4 * FG_TINT[c] as f64 } else { b };
                out.push(b.round() as u8);
            }
            out.push(255);
        }
    }
    out
}

fn put(rgba: &mut [u8], w: usize, h: usize, y: isize, x: isize, color: [u8; 3]) {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        return;
    }
    let i = (y as usize * w + x as usize) * 4;
    rgba[i..i + 3].copy_from_slice(&color);
}

fn dot(rgba: &mut [u8], w: usize, h: usize, (r, c): (usize, usize), color: [u8; 3]) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(rgba, w, h, r as isize + dy, c as isize + dx, color);
        }
    }
}

fn outline(rgba: &mut [u8], w: usize, h: usize, bb: &BBox, color: [u8; 3]) {
    let (top, left) = (bb.v as isize, bb.u as isize);
    let (bottom, right) = ((bb.v + bb.h) as isize - 1, (bb.u + bb.w) as isize - 1);
    for x in left..=right {
        put(rgba, w, h, top, x, color);
        put(rgba, w, h, bottom, x, color);
    }
    for y in top..=bottom {
        put(rgba, w, h, y, left, color);
        put(rgba, w, h, y, right, color);
    }
}

/// Scene, partner scene and the most recent view draw.
pub struct State {
    pub images: [ImageRgb; 2],
    pub masks: [Mask; 2],
    pub views: Option<[TwoViews; 2]>,
    pub cfg: ViewConfig,
}

impl State {
    pub fn new(seed: u64, size: usize) -> Result<Self, String> {
        let scene = SceneConfig::with_size(size);
        let draw = |i: u64| synth_scene(&mut rng::stream(seed, &[i]), &scene).map_err(|e| e.to_string());
        let (a, b) = (draw(0)?, draw(1)?);
        Ok(Self {
            images: [a.image, b.image],
            masks: [a.mask, b.mask],
            views: None,
            cfg: ViewConfig::default(),
        })
    }

    pub fn size(&self) -> usize {
        self.images[0].height()
    }

    pub fn generate(&mut self, seed: u64) -> Result<(), String> {
        let draw = |i: usize| {
            two_views_for_sample(&self.images[i], &self.masks[i], seed, i, 0, &self.cfg)
                .map_err(|e| e.to_string())
        };
        self.views = Some([draw(0)?, draw(1)?]);
        Ok(())
    }

    fn views(&self) -> Result<&[TwoViews; 2], String> {
        self.views
            .as_ref()
            .ok_or_else(|| "generate views first".to_string())
    }

    /// View 3 of the scene with the given erosion and blur radii.
    pub fn view3(&self, erode_radius: usize, blend_radius: usize) -> Result<ImageRgb, String> {
        let [v, p] = self.views()?;
        let cfg = ViewConfig {
            erode_radius,
            blend_radius,
            blend_sigma: (blend_radius as f64 / 2.0).max(0.5),
            ..self.cfg.clone()
        };
        swap_background(&v.view1, &v.mask1, &p.view1, &p.mask1, &cfg).map_err(|e| e.to_string())
    }

    /// Source, view 1 and view 2 (RGBA, stacked) with the crop overlap and
    /// the `n` points per class drawn inside it.
    pub fn sample_overlay(&self, seed: u64, n: usize) -> Result<Vec<u8>, String> {
        let [v, _] = self.views()?;
        let s = self.size();
        let mut src = to_rgba(&self.images[0], Some(&self.masks[0]));
        let mut a = to_rgba(&v.view1, None);
        let mut b = to_rgba(&v.view2, None);
        outline(&mut src, s, s, &reverse_geom(&v.rec1), [200, 200, 200]);
        outline(&mut src, s, s, &reverse_geom(&v.rec2), [200, 200, 200]);
        if let Some(bb) = overlap(&reverse_geom(&v.rec1), &reverse_geom(&v.rec2)) {
            outline(&mut src, s, s, &bb, BOX);
            let pts = sample_available_points(&self.masks[0], &bb, n, &mut rng::seeded(seed))
                .map_err(|e| e.to_string())?;
            for (k, color) in [(BACKGROUND, BG_DOT), (FOREGROUND, FG_DOT)] {
                let p = pts.class(k);
                let in1 = map_points(p, &v.rec1).map_err(|e| e.to_string())?;
                let in2 = map_points(p, &v.rec2).map_err(|e| e.to_string())?;
                for i in 0..p.len() {
                    dot(&mut src, s, s, p[i], color);
                    dot(&mut a, s, s, in1[i], color);
                    dot(&mut b, s, s, in2[i], color);
                }
            }
        }
        src.extend(a);
        src.extend(b);
        Ok(src)
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub struct Demo {
    state: State,
}

#[wasm_bindgen]
impl Demo {
    /// `size` must be a positive multiple of 16.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Demo, JsError> {
        Ok(Demo {
            state: State::new(seed as u64, size).map_err(js)?,
        })
    }

    pub fn size(&self) -> usize {
        self.state.size()
    }

    /// Scene `which` (0 = sample, 1 = partner) with buildings tinted.
    pub fn scene_rgba(&self, which: usize) -> Vec<u8> {
        let i = which.min(1);
        to_rgba(&self.state.images[i], Some(&self.state.masks[i]))
    }

    /// Draws two augmented views for the sample and its partner.
    pub fn generate_views(&mut self, seed: u32) -> Result<(), JsError> {
        self.state.generate(seed as u64).map_err(js)
    }

    /// View 1 or 2 of the sample.
    pub fn view_rgba(&self, k: usize) -> Result<Vec<u8>, JsError> {
        let [v, _] = self.state.views().map_err(js)?;
        Ok(to_rgba(if k == 2 { &v.view2 } else { &v.view1 }, None))
    }

    pub fn view3_rgba(&self, erode_radius: usize, blend_radius: usize) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(
            &self.state.view3(erode_radius, blend_radius).map_err(js)?,
            None,
        ))
    }

    pub fn sample_overlay(&self, seed: u32, n: usize) -> Result<Vec<u8>, JsError> {
        self.state.sample_overlay(seed as u64, n).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> State {
        let mut s = State::new(4, 64).unwrap();
        s.generate(9).unwrap();
        s
    }

    #[test]
    fn rgba_layout() {
        let img = ImageRgb::filled(2, 3, [1.0, 0.0, 0.5]);
        let v = to_rgba(&img, None);
        assert_eq!(v.len(), 24);
        assert_eq!(&v[..4], &[255, 0, 128, 255]);
    }

    #[test]
    fn overlay_holds_three_images() {
        let s = state();
        let o = s.sample_overlay(1, 8).unwrap();
        assert_eq!(o.len(), 3 * 64 * 64 * 4);
        assert!(o.chunks(4).any(|p| p[..3] == FG_DOT) || o.chunks(4).any(|p| p[..3] == BG_DOT));
    }

    #[test]
    fn view3_keeps_foreground() {
        let s = state();
        let v3 = s.view3(3, 2).unwrap();
        let [v, _] = s.views.as_ref().unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if v.mask1.get(y, x) == 1 {
                    assert_eq!(v3.pixel(y, x), v.view1.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn needs_views_first() {
        let s = State::new(1, 32).unwrap();
        assert!(s.sample_overlay(0, 4).is_err());
        assert!(State::new(1, 40).is_err());
    }
}
