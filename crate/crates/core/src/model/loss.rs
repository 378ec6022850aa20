//! Point-level objective: semantic dissimilarity between paired
//! background/foreground embeddings, plus symmetrized cross-view similarity
//! between views 1-2 (both classes) and views 1-3 (foreground only).

use rand::Rng;

use super::{project_predict, Bound, Model, ModelError, Result, COS_EPS, DS};
use crate::image::{GeomAugRecord, ImageRgb, Mask};
use crate::sampling::{
    downscale_points, map_points, overlap, reverse_geom, sample_available_points, PointSet, SamplingError,
    BACKGROUND, FOREGROUND,
};
use crate::tensor::{Tape, Var};
use crate::views::{BatchViews, ViewTriplet};

/// Sampled points of one sample and their feature-map coordinates in views
/// 1 and 2 (`[background, foreground]`). View 3 reuses the view-1 coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointPlan {
    pub source: PointSet,
    pub view1: [Vec<(usize, usize)>; 2],
    pub view2: [Vec<(usize, usize)>; 2],
}

impl PointPlan {
    pub fn has_class(&self, k: usize) -> bool {
        self.source.has_class(k)
    }

    pub fn is_complete(&self) -> bool {
        self.has_class(BACKGROUND) && self.has_class(FOREGROUND)
    }

    /// Exchanges the roles of views 1 and 2.
    pub fn swapped(&self) -> Self {
        Self {
            source: self.source.clone(),
            view1: self.view2.clone(),
            view2: self.view1.clone(),
        }
    }
}

fn to_feature_coords(points: &[(usize, usize)], rec: &GeomAugRecord) -> Result<Vec<(usize, usize)>> {
    let view = map_points(points, rec)?;
    Ok(downscale_points(&view, DS, rec.out_h / DS, rec.out_w / DS))
}

/// Samples `n` points per class in the overlap of the two crop windows,
/// keeping whichever classes are present there.
pub fn plan_available_points(
    mask: &Mask,
    rec1: &GeomAugRecord,
    rec2: &GeomAugRecord,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PointPlan> {
    let bb = overlap(&reverse_geom(rec1), &reverse_geom(rec2)).ok_or(SamplingError::EmptyRegion)?;
    let source = sample_available_points(mask, &bb, n, rng)?;
    let mut view1: [Vec<(usize, usize)>; 2] = Default::default();
    let mut view2: [Vec<(usize, usize)>; 2] = Default::default();
    for k in 0..2 {
        view1[k] = to_feature_coords(&source.points[k], rec1)?;
        view2[k] = to_feature_coords(&source.points[k], rec2)?;
    }
    Ok(PointPlan { source, view1, view2 })
}

/// Like [`plan_available_points`] but both classes must be present.
pub fn plan_points(
    mask: &Mask,
    rec1: &GeomAugRecord,
    rec2: &GeomAugRecord,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PointPlan> {
    let plan = plan_available_points(mask, rec1, rec2, n, rng)?;
    for k in [BACKGROUND, FOREGROUND] {
        if !plan.has_class(k) {
            return Err(SamplingError::ClassAbsent(k).into());
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_sd: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub total: f64,
}

/// Terms of one sample; a term is `None` when its classes were absent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleLoss {
    pub l_sd: Option<f64>,
    pub l_s1: Option<f64>,
    pub l_s2: Option<f64>,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.l_sd.unwrap_or(0.0) + self.l_s1.unwrap_or(0.0) + self.l_s2.unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.l_sd.is_none() && self.l_s1.is_none() && self.l_s2.is_none()
    }
}

/// Row offsets of one sample inside the stacked point matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleRows {
    /// Background rows in views 1 and 2.
    pub bg: Option<usize>,
    /// Foreground rows in views 1 and 2.
    pub fg: Option<usize>,
    /// Foreground rows in view 3.
    pub fg3: Option<usize>,
}

/// Dense features of the three views and the embeddings gathered at the
/// sampled points, stacked sample by sample (background rows first).
#[derive(Debug, Clone)]
pub struct GatheredPoints {
    pub features: [Var; 3],
    /// `[rows, C]` per view; `None` when the view has no points.
    pub x: [Option<Var>; 3],
    pub rows: Vec<SampleRows>,
    pub n: usize,
}

struct Layout {
    coords: [Vec<(usize, usize, usize)>; 3],
    rows: Vec<SampleRows>,
    n: usize,
}

fn layout(plans: &[PointPlan]) -> Result<Layout> {
    let mut coords: [Vec<(usize, usize, usize)>; 3] = Default::default();
    let mut rows = Vec::with_capacity(plans.len());
    let mut n = None;
    for (b, plan) in plans.iter().enumerate() {
        let mut r = SampleRows::default();
        for k in 0..2 {
            let pts1 = &plan.view1[k];
            if pts1.is_empty() {
                continue;
            }
            if *n.get_or_insert(pts1.len()) != pts1.len() || plan.view2[k].len() != pts1.len() {
                return Err(ModelError::Invalid("unequal point counts across classes".into()));
            }
            let start = coords[0].len();
            if k == 0 {
                r.bg = Some(start);
            } else {
                r.fg = Some(start);
                r.fg3 = Some(coords[2].len());
                coords[2].extend(pts1.iter().map(|&(y, x)| (b, y, x)));
            }
            coords[0].extend(pts1.iter().map(|&(y, x)| (b, y, x)));
            coords[1].extend(plan.view2[k].iter().map(|&(y, x)| (b, y, x)));
        }
        rows.push(r);
    }
    let n = n.ok_or(ModelError::NoValidSamples)?;
    Ok(Layout { coords, rows, n })
}

fn views_of(batch: &BatchViews, which: usize) -> Vec<&ImageRgb> {
    batch
        .triplets
        .iter()
        .map(|t| match which {
            0 => &t.view1,
            1 => &t.view2,
            _ => &t.view3,
        })
        .collect()
}

fn gather_with(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    batch: &BatchViews,
    lay: &Layout,
) -> Result<GatheredPoints> {
    let mut features = Vec::with_capacity(3);
    let mut x = [None; 3];
    for (v, slot) in x.iter_mut().enumerate() {
        let f = model.encode_images(tape, bound, &views_of(batch, v))?;
        if !lay.coords[v].is_empty() {
            *slot = Some(tape.gather(f, &lay.coords[v])?);
        }
        features.push(f);
    }
    Ok(GatheredPoints {
        features: [features[0], features[1], features[2]],
        x,
        rows: lay.rows.clone(),
        n: lay.n,
    })
}

/// Encodes all three views of the batch and gathers the planned points.
pub fn gather_points(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    batch: &BatchViews,
    plans: &[PointPlan],
) -> Result<GatheredPoints> {
    check_batch(batch, plans)?;
    gather_with(tape, model, bound, batch, &layout(plans)?)
}

fn check_batch(batch: &BatchViews, plans: &[PointPlan]) -> Result<()> {
    if batch.is_empty() || batch.len() != plans.len() {
        return Err(ModelError::Invalid(format!(
            "{} samples but {} point plans",
            batch.len(),
            plans.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Scalar total on the tape.
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub per_sample: Vec<SampleLoss>,
    pub points: GatheredPoints,
}

struct Heads {
    z: [Option<Var>; 3],
    p: [Option<Var>; 3],
}

fn heads(tape: &mut Tape, bound: &Bound, x: &[Option<Var>; 3]) -> Result<Heads> {
    let mut z = [None; 3];
    let mut p = [None; 3];
    for v in 0..3 {
        if let Some(xv) = x[v] {
            let (zv, pv) = project_predict(tape, bound, xv)?;
            z[v] = Some(zv);
            p[v] = Some(pv);
        }
    }
    Ok(Heads { z, p })
}

/// `1 - 1/2 (D(p_a, sg z_b) + D(p_b, sg z_a))` averaged over rows, for the
/// given `(rows in a, rows in b)` blocks of length `n`.
fn symmetric_term(
    tape: &mut Tape,
    pa: Var,
    zb: Var,
    pb: Var,
    za: Var,
    blocks: &[(usize, usize)],
    n: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * blocks.len());
    for &(ra, rb) in blocks {
        let p1 = tape.slice_rows(pa, ra, n)?;
        let z2 = tape.slice_rows(zb, rb, n)?;
        parts.push(tape.cosine_rows(p1, z2, COS_EPS)?);
        let p2 = tape.slice_rows(pb, rb, n)?;
        let z1 = tape.slice_rows(za, ra, n)?;
        parts.push(tape.cosine_rows(p2, z1, COS_EPS)?);
    }
    let all = tape.concat(&parts)?;
    let m = tape.mean(all);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

fn term_mean(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(terms.len());
    for &t in terms {
        rows.push(tape.reshape(t, &[1])?);
    }
    let all = tape.concat(&rows)?;
    Ok(Some(tape.mean(all)))
}

/// Batch objective where the stop-gradient targets `z` are produced by
/// `target` and everything else by `online`. With the same binding for both
/// this is the usual objective; with a second binding of identical values it
/// makes the target path separately inspectable.
pub fn batch_loss_split(
    tape: &mut Tape,
    model: &Model,
    online: &Bound,
    target: Option<&Bound>,
    batch: &BatchViews,
    plans: &[PointPlan],
) -> Result<LossOutput> {
    check_batch(batch, plans)?;
    let lay = layout(plans)?;
    let points = gather_with(tape, model, online, batch, &lay)?;
    let on = heads(tape, online, &points.x)?;
    let z_src = match target {
        None => on.z,
        Some(t) => {
            let tp = gather_with(tape, model, t, batch, &lay)?;
            heads(tape, t, &tp.x)?.z
        }
    };
    let mut sz = [None; 3];
    for v in 0..3 {
        sz[v] = z_src[v].map(|z| tape.stop_gradient(z));
    }
    let n = lay.n;

    let mut per_sample = Vec::with_capacity(lay.rows.len());
    let (mut sd_terms, mut s1_terms, mut s2_terms) = (Vec::new(), Vec::new(), Vec::new());
    for r in &lay.rows {
        let mut s = SampleLoss::default();
        if let (Some(bg), Some(fg)) = (r.bg, r.fg) {
            let mut parts = Vec::with_capacity(2);
            for v in 0..2 {
                let x = points.x[v].expect("rows exist");
                let xb = tape.slice_rows(x, bg, n)?;
                let xf = tape.slice_rows(x, fg, n)?;
                parts.push(tape.cosine_rows(xb, xf, COS_EPS)?);
            }
            let all = tape.concat(&parts)?;
            let m = tape.mean(all);
            let t = tape.add_scalar(m, 1.0);
            s.l_sd = Some(tape.value(t).item());
            sd_terms.push(t);
        }
        let blocks: Vec<(usize, usize)> = [r.bg, r.fg].iter().flatten().map(|&o| (o, o)).collect();
        if !blocks.is_empty() {
            let (p1, p2) = (on.p[0].expect("rows"), on.p[1].expect("rows"));
            let (z1, z2) = (sz[0].expect("rows"), sz[1].expect("rows"));
            let t = symmetric_term(tape, p1, z2, p2, z1, &blocks, n)?;
            s.l_s1 = Some(tape.value(t).item());
            s1_terms.push(t);
        }
        if let (Some(fg), Some(fg3)) = (r.fg, r.fg3) {
            let (p1, p3) = (on.p[0].expect("rows"), on.p[2].expect("rows"));
            let (z1, z3) = (sz[0].expect("rows"), sz[2].expect("rows"));
            let t = symmetric_term(tape, p1, z3, p3, z1, &[(fg, fg3)], n)?;
            s.l_s2 = Some(tape.value(t).item());
            s2_terms.push(t);
        }
        per_sample.push(s);
    }

    let means = [
        term_mean(tape, &sd_terms)?,
        term_mean(tape, &s1_terms)?,
        term_mean(tape, &s2_terms)?,
    ];
    let present: Vec<Var> = means.iter().flatten().copied().collect();
    let mut loss = *present.first().ok_or(ModelError::NoValidSamples)?;
    for &t in &present[1..] {
        loss = tape.add(loss, t)?;
    }
    let val = |m: Option<Var>| m.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let (l_sd, l_s1, l_s2) = (val(means[0]), val(means[1]), val(means[2]));
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown {
            l_sd,
            l_s1,
            l_s2,
            total: l_sd + l_s1 + l_s2,
        },
        per_sample,
        points,
    })
}

/// Batch objective on an existing tape. Each term is averaged over the
/// samples that produced it; the total is the sum of the three averages.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    batch: &BatchViews,
    plans: &[PointPlan],
) -> Result<LossOutput> {
    batch_loss_split(tape, model, bound, None, batch, plans)
}

pub fn batch_loss(model: &Model, batch: &BatchViews, plans: &[PointPlan]) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    Ok(batch_loss_on_tape(&mut tape, model, &bound, batch, plans)?.breakdown)
}

/// Samples points for one triplet and evaluates its loss on its own.
pub fn per_sample_loss(
    model: &Model,
    triplet: &ViewTriplet,
    mask: &Mask,
    n: usize,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let plan = plan_points(mask, &triplet.rec1, &triplet.rec2, n, rng)?;
    let batch = BatchViews {
        triplets: vec![triplet.clone()],
    };
    batch_loss(model, &batch, &[plan])
}
