//! Scalar re-implementation of the point-level objective of one sample,
//! starting from the dense feature maps of its three views.

use sadl::model::{ParamSet, PointPlan, BN_EPS, COS_EPS};
use sadl::tensor::Tensor;

type Rows = Vec<Vec<f64>>;

/// Embedding of `f[1, C, H, W]` at `(r, c)`.
pub fn pick(f: &Tensor, (r, c): (usize, usize)) -> Vec<f64> {
    let s = f.shape();
    let (ch, h, w) = (s[1], s[2], s[3]);
    (0..ch).map(|k| f.data()[(k * h + r) * w + c]).collect()
}

fn linear(x: &Rows, w: &Tensor, b: &Tensor) -> Rows {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| (0..din).map(|i| row[i] * w.data()[i * dout + j]).sum::<f64>() + b.data()[j])
                .collect()
        })
        .collect()
}

fn batch_norm(x: &Rows, g: &Tensor, b: &Tensor) -> Rows {
    let m = x.len() as f64;
    let mut out = x.clone();
    for j in 0..x[0].len() {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / m;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
        for (o, r) in out.iter_mut().zip(x) {
            o[j] = g.data()[j] * (r[j] - mean) / (var + BN_EPS).sqrt() + b.data()[j];
        }
    }
    out
}

fn mlp(p: &ParamSet, name: &str, x: &Rows) -> Rows {
    let t = |s: &str| p.get(&format!("{name}.{s}")).expect("parameter present");
    let h = linear(x, t("fc1.w"), t("fc1.b"));
    let mut h = batch_norm(&h, t("bn.g"), t("bn.b"));
    for v in h.iter_mut().flatten() {
        *v = v.max(0.0);
    }
    linear(&h, t("fc2.w"), t("fc2.b"))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + COS_EPS) * (nb + COS_EPS))
}

#[derive(Debug, Clone, Copy)]
pub struct Terms {
    pub l_sd: f64,
    pub l_s1: f64,
    pub l_s2: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.l_sd + self.l_s1 + self.l_s2
    }
}

/// `features` are the maps of views 1, 2 and 3; the plan must hold both classes.
pub fn scalar_loss(params: &ParamSet, features: [&Tensor; 3], plan: &PointPlan) -> Terms {
    let n = plan.view1[0].len();
    let x1: Rows = plan
        .view1
        .iter()
        .flatten()
        .map(|&q| pick(features[0], q))
        .collect();
    let x2: Rows = plan
        .view2
        .iter()
        .flatten()
        .map(|&q| pick(features[1], q))
        .collect();
    let x3: Rows = plan.view1[1].iter().map(|&q| pick(features[2], q)).collect();
    let heads = |x: &Rows| {
        let z = mlp(params, "proj", x);
        let p = mlp(params, "pred", &z);
        (z, p)
    };
    let (z1, p1) = heads(&x1);
    let (z2, p2) = heads(&x2);
    let (z3, p3) = heads(&x3);

    let mut sd = 0.0;
    for x in [&x1, &x2] {
        for i in 0..n {
            sd += cosine(&x[i], &x[n + i]);
        }
    }
    let mut s1 = 0.0;
    for i in 0..2 * n {
        s1 += cosine(&p1[i], &z2[i]) + cosine(&p2[i], &z1[i]);
    }
    let mut s2 = 0.0;
    for i in 0..n {
        s2 += cosine(&p1[n + i], &z3[i]) + cosine(&p3[i], &z1[n + i]);
    }
    Terms {
        l_sd: 1.0 + sd / (2 * n) as f64,
        l_s1: 1.0 - s1 / (4 * n) as f64,
        l_s2: 1.0 - s2 / (2 * n) as f64,
    }
}
