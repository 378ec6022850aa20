//! Pre-training loop, optimizer, checkpoints, change-detection fine-tuning
//! and evaluation.

pub mod cd;
pub mod checkpoint;
pub mod gradcheck;
pub mod selfsim;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::data::DataError;
use crate::image::{ImageError, ImageRgb, Mask};
use crate::model::{
    batch_loss_on_tape, gather_points, plan_available_points, InputNorm, Model, ModelConfig, ModelError,
    ParamSet, PointPlan, Preset,
};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::views::{assemble_triplets, two_views_for_sample, BatchViews, TwoViews, ViewConfig, ViewError};

pub use cd::{
    build_cd_model, cd_metrics, evaluate_cd, finetune_cd, format_metrics, CdMetrics, CdModel, EpochMetrics,
};
pub use checkpoint::Checkpoint;
pub use selfsim::{self_similarity_map, SimilarityMap};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Points sampled per class and sample.
    pub n_points: usize,
    pub retry_limit: usize,
    pub seed: u64,
    pub preset: Preset,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
            epochs: 5,
            batch: 8,
            n_points: 16,
            retry_limit: 10,
            seed: 0,
            preset: Preset::Desk,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 200,
            batch: 64,
            preset: Preset::Paper,
            ..Self::desk()
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.momentum, self.weight_decay, self.poly_power];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(TrainError::Invalid("rates must be positive".into()));
        }
        if self.batch == 0 || self.n_points == 0 {
            return Err(TrainError::Invalid(
                "batch and n_points must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::from_preset(self.preset)
    }
}

/// `lr0 * (1 - step / total)^power`.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = 1.0 - (step.min(total_steps) as f64 / total_steps as f64);
    lr0 * frac.powf(power)
}

/// `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Invalid(format!(
            "sgd shapes differ: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every tensor of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() || params.len() != grads.len() {
            return Err(TrainError::Invalid(
                "gradient count does not match parameters".into(),
            ));
        }
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            sgd_step(p.data_mut(), g.data(), v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_sd: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub total: f64,
}

pub const PRETRAIN_CSV_HEADER: &str = "step,lr,l_sd,l_s1,l_s2,total";

pub fn pretrain_csv(rows: &[StepLog]) -> String {
    let mut s = format!("{PRETRAIN_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.l_sd, r.l_s1, r.l_s2, r.total
        ));
    }
    s
}

// stream tags
const INIT: u64 = 1;
const EPOCH: u64 = 2;
const STEP: u64 = 3;
const POINTS: u64 = 4;
const PROBE: u64 = 5;

/// Fresh model with input statistics taken from `images`.
pub fn init_model(cfg: &TrainConfig, images: &[ImageRgb]) -> Model {
    let mut m = Model::init(cfg.model_config(), &mut rng::stream(cfg.seed, &[INIT]));
    m.norm = InputNorm::from_images(images);
    m
}

/// Views and points for one sample. Augmentations are re-drawn while the
/// overlap lacks a class, up to `retry_limit` times; the last draw is then
/// kept with whatever classes it has. `None` when even that has no points.
pub fn sample_with_retry(
    img: &ImageRgb,
    mask: &Mask,
    batch_seed: u64,
    index: usize,
    n: usize,
    retry_limit: usize,
    view_cfg: &ViewConfig,
) -> Result<Option<(TwoViews, PointPlan)>> {
    for attempt in 0..=retry_limit {
        let tv = two_views_for_sample(img, mask, batch_seed, index, attempt, view_cfg)?;
        let mut r = rng::stream(batch_seed, &[index as u64, attempt as u64, POINTS]);
        let plan = match plan_available_points(mask, &tv.rec1, &tv.rec2, n, &mut r) {
            Ok(p) => p,
            Err(ModelError::Sampling(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        if plan.is_complete() || attempt == retry_limit {
            return Ok(Some((tv, plan)));
        }
    }
    Ok(None)
}

/// Views, triplets and point plans for a batch of sample indices.
pub fn prepare_batch(
    images: &[ImageRgb],
    masks: &[Mask],
    indices: &[usize],
    batch_seed: u64,
    cfg: &TrainConfig,
    view_cfg: &ViewConfig,
) -> Result<Option<(BatchViews, Vec<PointPlan>)>> {
    let draw = |slot: usize| {
        let i = indices[slot];
        sample_with_retry(
            &images[i],
            &masks[i],
            batch_seed,
            slot,
            cfg.n_points,
            cfg.retry_limit,
            view_cfg,
        )
    };
    #[cfg(feature = "parallel")]
    let drawn: Vec<_> = (0..indices.len())
        .into_par_iter()
        .map(draw)
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let drawn: Vec<_> = (0..indices.len()).map(draw).collect::<Result<_>>()?;
    let (pairs, plans): (Vec<TwoViews>, Vec<PointPlan>) = drawn.into_iter().flatten().unzip();
    if pairs.is_empty() {
        return Ok(None);
    }
    Ok(Some((assemble_triplets(pairs, view_cfg)?, plans)))
}

fn check_dataset(images: &[ImageRgb], masks: &[Mask]) -> Result<()> {
    if images.is_empty() {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    if images.len() != masks.len() {
        return Err(TrainError::Invalid(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs of SGD on the point-level objective. `on_epoch`
/// sees the model after every epoch (1-based).
pub fn pretrain(
    cfg: &TrainConfig,
    mut model: Model,
    images: &[ImageRgb],
    masks: &[Mask],
    mut on_epoch: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<(Model, Vec<StepLog>)> {
    cfg.validate()?;
    check_dataset(images, masks)?;
    let view_cfg = ViewConfig::default();
    let steps_per_epoch = images.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[EPOCH, epoch as u64]));
        for chunk in order.chunks(cfg.batch) {
            let batch_seed = rng::derive_seed(cfg.seed, &[STEP, step as u64]);
            let lr = poly_lr(step, total_steps, cfg.lr0, cfg.poly_power);
            let Some((batch, plans)) = prepare_batch(images, masks, chunk, batch_seed, cfg, &view_cfg)?
            else {
                return Err(ModelError::NoValidSamples.into());
            };
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let out = batch_loss_on_tape(&mut tape, &model, &bound, &batch, &plans)?;
            let grads = tape.backward(out.loss).map_err(ModelError::from)?;
            let g = bound.gradients(&tape, &grads);
            opt.step(&mut model.params, &g, lr)?;
            let b = out.breakdown;
            log.push(StepLog {
                step,
                lr,
                l_sd: b.l_sd,
                l_s1: b.l_s1,
                l_s2: b.l_s2,
                total: b.total,
            });
            step += 1;
        }
        on_epoch(epoch + 1, &model)?;
    }
    Ok((model, log))
}

/// Mean losses of the steps belonging to each epoch.
pub fn epoch_means(log: &[StepLog], steps_per_epoch: usize) -> Vec<f64> {
    log.chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Cosine statistics of encoder embeddings at sampled points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeStats {
    /// Mean cosine between paired background and foreground points of a view.
    pub fg_bg_cos: f64,
    /// Mean cosine between the same source point seen in views 1 and 2.
    pub cross_view_cos: f64,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + crate::model::COS_EPS) * (nb + crate::model::COS_EPS))
}

/// Evaluates embedding statistics on a fixed, seed-determined set of views,
/// so probes of different models see identical inputs.
pub fn embedding_probe(
    model: &Model,
    images: &[ImageRgb],
    masks: &[Mask],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ProbeStats> {
    check_dataset(images, masks)?;
    let view_cfg = ViewConfig::default();
    let (mut fb, mut nfb, mut cv, mut ncv) = (0.0, 0usize, 0.0, 0usize);
    let order: Vec<usize> = (0..images.len()).collect();
    for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
        let batch_seed = rng::derive_seed(seed, &[PROBE, bi as u64]);
        let Some((batch, plans)) = prepare_batch(images, masks, chunk, batch_seed, cfg, &view_cfg)? else {
            continue;
        };
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let pts = gather_points(&mut tape, model, &bound, &batch, &plans)?;
        let n = pts.n;
        let c = model.cfg.channels;
        let row = |v: usize, r: usize| -> &[f64] {
            let x = tape.value(pts.x[v].expect("points present"));
            &x.data()[r * c..(r + 1) * c]
        };
        for r in &pts.rows {
            if let (Some(bg), Some(fg)) = (r.bg, r.fg) {
                for v in 0..2 {
                    for j in 0..n {
                        fb += cos(row(v, bg + j), row(v, fg + j));
                        nfb += 1;
                    }
                }
            }
            for start in [r.bg, r.fg].into_iter().flatten() {
                for j in 0..n {
                    cv += cos(row(0, start + j), row(1, start + j));
                    ncv += 1;
                }
            }
        }
    }
    if nfb == 0 || ncv == 0 {
        return Err(ModelError::NoValidSamples.into());
    }
    Ok(ProbeStats {
        fg_bg_cos: fb / nfb as f64,
        cross_view_cos: cv / ncv as f64,
    })
}

/// FNV-1a 64-bit hash, used to tag checkpoints with their configuration.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub const NORM_MEAN: &str = "input.mean";
pub const NORM_STD: &str = "input.std";

/// Parameters plus input statistics and metadata.
pub fn model_checkpoint(model: &Model, meta: &[(&str, String)]) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    tensors.push((NORM_MEAN.into(), Tensor::vector(model.norm.mean.to_vec())));
    tensors.push((NORM_STD.into(), Tensor::vector(model.norm.std.to_vec())));
    let mut ck = Checkpoint {
        tensors,
        ..Checkpoint::default()
    };
    ck.metadata
        .insert("preset".into(), model.cfg.preset.name().into());
    for (k, v) in meta {
        ck.metadata.insert(k.to_string(), v.clone());
    }
    ck
}

pub fn checkpoint_preset(ck: &Checkpoint) -> Result<Preset> {
    let name = ck
        .meta("preset")
        .ok_or_else(|| TrainError::Checkpoint("missing preset metadata".into()))?;
    Preset::parse(name).ok_or_else(|| TrainError::Checkpoint(format!("unknown preset `{name}`")))
}

pub fn norm_from_checkpoint(ck: &Checkpoint) -> Result<InputNorm> {
    let get = |name: &str| -> Result<[f64; 3]> {
        let t = ck
            .get(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing `{name}`")))?;
        t.data()
            .try_into()
            .map_err(|_| TrainError::Checkpoint(format!("`{name}` must hold 3 values")))
    };
    Ok(InputNorm {
        mean: get(NORM_MEAN)?,
        std: get(NORM_STD)?,
    })
}

/// Copies every tensor named in `params` out of `ck`, checking shapes.
pub fn load_params(params: &mut ParamSet, ck: &Checkpoint, filter: impl Fn(&str) -> bool) -> Result<()> {
    for (name, t) in params.iter_mut() {
        if !filter(name) {
            continue;
        }
        let src = ck
            .get(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(TrainError::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.clone();
    }
    Ok(())
}

/// Rebuilds a pre-training model from its checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let cfg = ModelConfig::from_preset(checkpoint_preset(ck)?);
    let mut model = Model::init(cfg, &mut rng::seeded(0));
    load_params(&mut model.params, ck, |_| true)?;
    model.norm = norm_from_checkpoint(ck)?;
    Ok(model)
}
