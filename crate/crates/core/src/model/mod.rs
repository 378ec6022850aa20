//! Dense encoder (small conv backbone + feature pyramid), projector and
//! predictor heads, and the parameter store they share with the trainer.

pub mod loss;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::ImageRgb;
use crate::sampling::SamplingError;
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

pub use loss::{
    batch_loss, batch_loss_on_tape, gather_points, per_sample_loss, plan_available_points, plan_points,
    GatheredPoints, LossBreakdown, LossOutput, PointPlan, SampleLoss,
};

/// Output stride of the encoder.
pub const DS: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("input {0}x{1} is not divisible by 16")]
    InputSize(usize, usize),
    #[error("batch norm needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("no sample in the batch produced a loss term")]
    NoValidSamples,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }
}

/// Layer widths. The backbone is stem (stride 2) followed by three stride-2
/// stages, giving pyramid levels at 1/4, 1/8 and 1/16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub stem: usize,
    pub stages: [usize; 3],
    pub channels: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            stem: 16,
            stages: [32, 64, 64],
            channels: 32,
            proj_hidden: 64,
            proj_out: 32,
            pred_hidden: 16,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            channels: 256,
            proj_hidden: 2048,
            proj_out: 1024,
            pred_hidden: 256,
            ..Self::desk()
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }
}

/// Named tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector laid out as [`Self::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(ModelError::Invalid(format!(
                "flat vector has {} values, parameters hold {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for (_, t) in self.entries.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars: Vec<(String, Var)> = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        let index = vars
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Bound { vars, index }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].1)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients in parameter order; parameters the loss never touched get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, v)| match grads.get(*v) {
                Some(g) => Tensor::new(tape.shape(*v).to_vec(), g.to_vec()).expect("shape"),
                None => Tensor::zeros(tape.shape(*v)),
            })
            .collect()
    }

    pub fn flat_gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        self.gradients(tape, grads)
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect()
    }
}

/// Per-channel input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl InputNorm {
    /// Population statistics over every pixel of `images`.
    pub fn from_images(images: &[ImageRgb]) -> Self {
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for c in 0..3 {
            let n: usize = images.iter().map(|i| i.plane(c).len()).sum();
            if n == 0 {
                continue;
            }
            let m = images.iter().flat_map(|i| i.plane(c)).sum::<f64>() / n as f64;
            let v = images
                .iter()
                .flat_map(|i| i.plane(c))
                .map(|x| (x - m) * (x - m))
                .sum::<f64>()
                / n as f64;
            mean[c] = m;
            std[c] = v.sqrt().max(1e-3);
        }
        Self { mean, std }
    }

    /// Stacks images into a standardized `[B, 3, H, W]` tensor.
    pub fn apply(&self, images: &[&ImageRgb]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| ModelError::Invalid("no images".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(ModelError::Invalid(format!(
                    "mixed image sizes {h}x{w} and {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            for c in 0..3 {
                data.extend(img.plane(c).iter().map(|v| (v - self.mean[c]) / self.std[c]));
            }
        }
        Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub norm: InputNorm,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn add_conv_bn(p: &mut ParamSet, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) {
    let fan_in = (cin * 9) as f64;
    p.insert(
        format!("{name}.w"),
        normal(rng, &[cout, cin, 3, 3], (2.0 / fan_in).sqrt()),
    );
    p.insert(format!("{name}.bn.g"), Tensor::full(&[cout], 1.0));
    p.insert(format!("{name}.bn.b"), Tensor::zeros(&[cout]));
}

fn add_mlp(p: &mut ParamSet, rng: &mut impl Rng, name: &str, din: usize, hidden: usize, dout: usize) {
    p.insert(
        format!("{name}.fc1.w"),
        normal(rng, &[din, hidden], (2.0 / din as f64).sqrt()),
    );
    p.insert(format!("{name}.fc1.b"), Tensor::zeros(&[hidden]));
    p.insert(format!("{name}.bn.g"), Tensor::full(&[hidden], 1.0));
    p.insert(format!("{name}.bn.b"), Tensor::zeros(&[hidden]));
    p.insert(
        format!("{name}.fc2.w"),
        normal(rng, &[hidden, dout], (1.0 / hidden as f64).sqrt()),
    );
    p.insert(format!("{name}.fc2.b"), Tensor::zeros(&[dout]));
}

pub const STAGE_NAMES: [&str; 4] = ["enc.stem", "enc.s1", "enc.s2", "enc.s3"];
pub const LATERAL_NAMES: [&str; 3] = ["fpn.lat1", "fpn.lat2", "fpn.lat3"];

/// True for parameters that belong to the encoder (backbone + pyramid).
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("fpn.")
}

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let widths = [3, cfg.stem, cfg.stages[0], cfg.stages[1], cfg.stages[2]];
        for (i, name) in STAGE_NAMES.iter().enumerate() {
            add_conv_bn(&mut p, rng, name, widths[i], widths[i + 1]);
        }
        for (i, name) in LATERAL_NAMES.iter().enumerate() {
            let cin = cfg.stages[i];
            p.insert(
                format!("{name}.w"),
                normal(rng, &[cfg.channels, cin, 1, 1], (1.0 / cin as f64).sqrt()),
            );
        }
        add_mlp(&mut p, rng, "proj", cfg.channels, cfg.proj_hidden, cfg.proj_out);
        add_mlp(&mut p, rng, "pred", cfg.proj_out, cfg.pred_hidden, cfg.proj_out);
        Self {
            cfg,
            params: p,
            norm: InputNorm::default(),
        }
    }

    /// Dense features `[B, C, H/4, W/4]` for a batch of images.
    pub fn encode_images(&self, tape: &mut Tape, bound: &Bound, images: &[&ImageRgb]) -> Result<Var> {
        let input = tape.constant(self.norm.apply(images)?);
        encode(tape, bound, input)
    }
}

fn conv_bn_relu(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, bound.var(&format!("{name}.w"))?, 2, 1)?;
    let y = tape.batch_norm2d(
        y,
        bound.var(&format!("{name}.bn.g"))?,
        bound.var(&format!("{name}.bn.b"))?,
        BN_EPS,
    )?;
    Ok(tape.relu(y))
}

/// Backbone + top-down pyramid on a standardized `[B, 3, H, W]` input.
pub fn encode(tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(ModelError::Invalid(format!(
            "expected [B, 3, H, W], got {shape:?}"
        )));
    }
    if !shape[2].is_multiple_of(16) || !shape[3].is_multiple_of(16) || shape[2] == 0 || shape[3] == 0 {
        return Err(ModelError::InputSize(shape[2], shape[3]));
    }
    let stem = conv_bn_relu(tape, bound, STAGE_NAMES[0], input)?;
    let c4 = conv_bn_relu(tape, bound, STAGE_NAMES[1], stem)?;
    let c8 = conv_bn_relu(tape, bound, STAGE_NAMES[2], c4)?;
    let c16 = conv_bn_relu(tape, bound, STAGE_NAMES[3], c8)?;
    let mut lat = Vec::with_capacity(3);
    for (name, level) in LATERAL_NAMES.iter().zip([c4, c8, c16]) {
        lat.push(tape.conv2d(level, bound.var(&format!("{name}.w"))?, 1, 0)?);
    }
    let up = tape.upsample_nearest2x(lat[2])?;
    let p8 = tape.add(lat[1], up)?;
    let up = tape.upsample_nearest2x(p8)?;
    Ok(tape.add(lat[0], up)?)
}

/// Linear, batch norm, ReLU, linear on `x[M, D]`.
pub fn mlp(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let m = tape.shape(x)[0];
    if m < 2 {
        return Err(ModelError::TooFewRows(m));
    }
    let h = tape.matmul(x, bound.var(&format!("{name}.fc1.w"))?)?;
    let h = tape.add(h, bound.var(&format!("{name}.fc1.b"))?)?;
    let h = tape.batch_norm(
        h,
        bound.var(&format!("{name}.bn.g"))?,
        bound.var(&format!("{name}.bn.b"))?,
        BN_EPS,
    )?;
    let h = tape.relu(h);
    let out = tape.matmul(h, bound.var(&format!("{name}.fc2.w"))?)?;
    Ok(tape.add(out, bound.var(&format!("{name}.fc2.b"))?)?)
}

/// `z = g(x)`, `p = h(z)` for stacked point embeddings `x[M, C]`.
pub fn project_predict(tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
    let z = mlp(tape, bound, "proj", x)?;
    let p = mlp(tape, bound, "pred", z)?;
    Ok((z, p))
}
