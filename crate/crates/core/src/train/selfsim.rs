//! Self-similarity maps: softmax over all feature positions of the dot
//! product with one query embedding.

use super::{Result, TrainError};
use crate::data::netpbm::encode_gray;
use crate::image::ImageRgb;
use crate::model::Model;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SimilarityMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Min-max scaled to 0..=1; a constant map is all zeros.
    pub fn to_unit(&self) -> Vec<f64> {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.data
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect()
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.to_unit().iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_gray(self.width, self.height, &self.to_gray())
    }
}

/// `x` is `[C, H, W]` or `[1, C, H, W]`; `point` is `(row, col)` in feature
/// coordinates.
pub fn self_similarity_map(x: &Tensor, point: (usize, usize)) -> Result<SimilarityMap> {
    let s = x.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => {
            return Err(TrainError::Invalid(format!(
                "expected a [C, H, W] feature map, got {s:?}"
            )))
        }
    };
    let (r, q) = point;
    if r >= h || q >= w {
        return Err(TrainError::Invalid(format!(
            "point ({r}, {q}) outside the {h}x{w} feature map"
        )));
    }
    let hw = h * w;
    let d = x.data();
    let query: Vec<f64> = (0..c).map(|k| d[k * hw + r * w + q]).collect();
    let mut logits = vec![0.0; hw];
    for (k, qk) in query.iter().enumerate() {
        for (l, v) in logits.iter_mut().zip(&d[k * hw..(k + 1) * hw]) {
            *l += qk * v;
        }
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= z);
    Ok(SimilarityMap {
        height: h,
        width: w,
        data,
    })
}

/// Encodes `image` alone and maps similarity to the query feature position.
pub fn model_similarity_map(model: &Model, image: &ImageRgb, point: (usize, usize)) -> Result<SimilarityMap> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = model.encode_images(&mut tape, &bound, &[image])?;
    self_similarity_map(tape.value(x), point)
}
