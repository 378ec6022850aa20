//! Siamese change detection on top of the pre-trained encoder: shared
//! encoder, absolute feature difference, two 3x3 convolutions and nearest
//! upsampling back to input resolution.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    checkpoint_preset, load_params, norm_from_checkpoint, Checkpoint, Result, Sgd, TrainConfig, TrainError,
    NORM_MEAN, NORM_STD,
};
use crate::data::CdPair;
use crate::image::{
    apply_geom_image, apply_geom_mask, gaussian_blur, CropWindow, GeomAugRecord, ImageRgb, Mask,
};
use crate::model::{encode, is_encoder_param, Bound, InputNorm, Model, ModelConfig, ModelError, ParamSet};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct CdModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub norm: InputNorm,
}

const CD_INIT: u64 = 11;
const CD_EPOCH: u64 = 12;
const CD_AUG: u64 = 13;

/// Encoder from `init` (or random), freshly initialized head.
pub fn build_cd_model(
    cfg: ModelConfig,
    init: Option<&Checkpoint>,
    fallback_norm: InputNorm,
    seed: u64,
) -> Result<CdModel> {
    let mut r = rng::stream(seed, &[CD_INIT]);
    let base = Model::init(cfg.clone(), &mut r);
    let mut params = ParamSet::new();
    for (n, t) in base.params.iter().filter(|(n, _)| is_encoder_param(n)) {
        params.insert(n, t.clone());
    }
    let mut norm = fallback_norm;
    if let Some(ck) = init {
        let preset = checkpoint_preset(ck)?;
        if preset != cfg.preset {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint preset `{}` does not match `{}`",
                preset.name(),
                cfg.preset.name()
            )));
        }
        load_params(&mut params, ck, is_encoder_param)?;
        norm = norm_from_checkpoint(ck)?;
    }
    let c = cfg.channels;
    let half = (c / 2).max(1);
    let dist = Normal::new(0.0, HEAD_INIT_STD).expect("finite");
    let mut normal = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut r)).collect()).expect("shape")
    };
    params.insert("head.c1.w", normal(&[half, c, 3, 3]));
    params.insert("head.c2.w", normal(&[2, half, 3, 3]));
    params.insert("head.c2.b", Tensor::zeros(&[2]));
    Ok(CdModel { cfg, params, norm })
}

impl CdModel {
    /// Logits `[P, 2, H, W]` for `P` bitemporal pairs.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, t1: &[&ImageRgb], t2: &[&ImageRgb]) -> Result<Var> {
        if t1.len() != t2.len() || t1.is_empty() {
            return Err(TrainError::Invalid(
                "need equal, nonzero numbers of t1 and t2 images".into(),
            ));
        }
        let p = t1.len();
        let all: Vec<&ImageRgb> = t1.iter().chain(t2).copied().collect();
        let input = tape.constant(self.norm.apply(&all)?);
        let feats = encode(tape, bound, input)?;
        let f1 = tape.slice_rows(feats, 0, p).map_err(ModelError::from)?;
        let f2 = tape.slice_rows(feats, p, p).map_err(ModelError::from)?;
        let d = tape.sub(f1, f2).map_err(ModelError::from)?;
        let fdi = tape.abs(d);
        let h = tape
            .conv2d(fdi, bound.var("head.c1.w")?, 1, 1)
            .map_err(ModelError::from)?;
        let h = tape.relu(h);
        let y = tape
            .conv2d(h, bound.var("head.c2.w")?, 1, 1)
            .map_err(ModelError::from)?;
        let y = add_channel_bias(tape, y, bound.var("head.c2.b")?)?;
        let y = tape.upsample_nearest2x(y).map_err(ModelError::from)?;
        Ok(tape.upsample_nearest2x(y).map_err(ModelError::from)?)
    }

    /// Hard prediction (change where logit 1 exceeds logit 0) for one pair.
    pub fn predict(&self, t1: &ImageRgb, t2: &ImageRgb) -> Result<Mask> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let l = self.logits(&mut tape, &bound, &[t1], &[t2])?;
        let v = tape.value(l);
        let hw = t1.height() * t1.width();
        let d = v.data();
        let data = (0..hw).map(|i| (d[hw + i] > d[i]) as u8).collect();
        Ok(Mask::new(t1.height(), t1.width(), data)?)
    }
}

/// Adds `bias[C]` to every pixel of `x[B, C, H, W]`.
fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    let col = tape.reshape(bias, &[c, 1]).map_err(ModelError::from)?;
    let ones = tape.constant(Tensor::full(&[1, hw], 1.0));
    let plane = tape.matmul(col, ones).map_err(ModelError::from)?;
    let plane = tape.reshape(plane, &[c, s[2], s[3]]).map_err(ModelError::from)?;
    Ok(tape.add(x, plane).map_err(ModelError::from)?)
}

/// Mean per-pixel cross-entropy of the change head on a batch of pairs.
pub fn cd_loss(tape: &mut Tape, model: &CdModel, bound: &Bound, pairs: &[&CdPair]) -> Result<Var> {
    let t1: Vec<&ImageRgb> = pairs.iter().map(|p| &p.image_t1).collect();
    let t2: Vec<&ImageRgb> = pairs.iter().map(|p| &p.image_t2).collect();
    let logits = model.logits(tape, bound, &t1, &t2)?;
    let target: Vec<u8> = pairs
        .iter()
        .flat_map(|p| p.change.data().iter().copied())
        .collect();
    Ok(tape
        .cross_entropy_2class(logits, &target)
        .map_err(ModelError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CdMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl CdMetrics {
    /// Ratios are 0 whenever their denominator is 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision > 0.0 && recall > 0.0 {
            2.0 / (1.0 / recall + 1.0 / precision)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fn_ + fp),
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Metrics of the change class (value 1).
pub fn cd_metrics(pred: &Mask, gt: &Mask) -> Result<CdMetrics> {
    gt.same_size(pred.height(), pred.width())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(CdMetrics::from_counts(tp, fp, fn_))
}

/// `precision recall f1 iou` with four decimals.
pub fn format_metrics(m: &CdMetrics) -> String {
    format!("{:.4} {:.4} {:.4} {:.4}", m.precision, m.recall, m.f1, m.iou)
}

/// Pixel counts pooled over all pairs.
pub fn evaluate_cd(model: &CdModel, pairs: &[CdPair]) -> Result<CdMetrics> {
    let mut total = CdMetrics::default();
    for p in pairs {
        let pred = model.predict(&p.image_t1, &p.image_t2)?;
        total = total.merge(&cd_metrics(&pred, &p.change)?);
    }
    Ok(total)
}

/// Joint random flips of both epochs and the change mask, then (with
/// probability 0.5) the same Gaussian blur on both images.
pub fn augment_pair(pair: &CdPair, rng: &mut impl Rng) -> Result<CdPair> {
    let (h, w) = (pair.image_t1.height(), pair.image_t1.width());
    let rec = GeomAugRecord {
        crop: CropWindow::full(h, w),
        out_h: h,
        out_w: w,
        hflip: rng.random::<f64>() < 0.5,
        vflip: rng.random::<f64>() < 0.5,
    };
    let blur = rng.random::<f64>() < 0.5;
    let sigma = 0.1 + 1.9 * rng.random::<f64>();
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, 4);
    let mut t1 = apply_geom_image(&pair.image_t1, &rec)?;
    let mut t2 = apply_geom_image(&pair.image_t2, &rec)?;
    if blur {
        t1 = gaussian_blur(&t1, sigma, radius);
        t2 = gaussian_blur(&t2, sigma, radius);
    }
    Ok(CdPair {
        image_t1: t1,
        image_t2: t2,
        change: apply_geom_mask(&pair.change, &rec)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub metrics: CdMetrics,
}

pub const FINETUNE_CSV_HEADER: &str = "epoch,split,precision,recall,f1,iou";

pub fn finetune_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{FINETUNE_CSV_HEADER}\n");
    for r in rows {
        let m = r.metrics;
        s.push_str(&format!(
            "{},val,{},{},{},{}\n",
            r.epoch, m.precision, m.recall, m.f1, m.iou
        ));
    }
    s
}

/// SGD with linearly decaying learning rate; validates after every epoch
/// (epoch 0 = the initial model) and returns the model with the best
/// validation F1 of the change class.
pub fn finetune_cd(
    cfg: &TrainConfig,
    mut model: CdModel,
    train: &[CdPair],
    val: &[CdPair],
) -> Result<(CdModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Invalid(
            "fine-tuning needs nonempty train and val splits".into(),
        ));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let first = evaluate_cd(&model, val)?;
    let mut log = vec![EpochMetrics {
        epoch: 0,
        metrics: first,
    }];
    let mut best = (first.f1, model.clone());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[CD_EPOCH, epoch as u64]));
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<CdPair> = chunk
                .iter()
                .map(|&i| {
                    augment_pair(
                        &train[i],
                        &mut rng::stream(cfg.seed, &[CD_AUG, step as u64, i as u64]),
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&CdPair> = batch.iter().collect();
            let lr = cfg.lr0 * (1.0 - step as f64 / total as f64);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let loss = cd_loss(&mut tape, &model, &bound, &refs)?;
            let grads = tape.backward(loss).map_err(ModelError::from)?;
            let g = bound.gradients(&tape, &grads);
            opt.step(&mut model.params, &g, lr)?;
            step += 1;
        }
        let m = evaluate_cd(&model, val)?;
        log.push(EpochMetrics { epoch, metrics: m });
        if m.f1 > best.0 {
            best = (m.f1, model.clone());
        }
    }
    Ok((best.1, log))
}

pub fn cd_checkpoint(model: &CdModel, meta: &[(&str, String)]) -> Checkpoint {
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
    ck.metadata.insert("kind".into(), "cd".into());
    for (k, v) in meta {
        ck.metadata.insert(k.to_string(), v.clone());
    }
    ck
}

pub fn cd_model_from_checkpoint(ck: &Checkpoint) -> Result<CdModel> {
    if ck.meta("kind") != Some("cd") {
        return Err(TrainError::Checkpoint("not a change-detection checkpoint".into()));
    }
    let cfg = ModelConfig::from_preset(checkpoint_preset(ck)?);
    let mut m = build_cd_model(cfg, None, InputNorm::default(), 0)?;
    load_params(&mut m.params, ck, |_| true)?;
    m.norm = norm_from_checkpoint(ck)?;
    Ok(m)
}
