//! Central finite-difference checks for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lower bound on the denominator of [`rel_error`]. Below it the comparison
/// is effectively absolute, which keeps round-off in near-zero gradients from
/// reading as a large relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let fp = f(&p);
    p[i] = x[i] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

#[derive(Debug, Clone)]
pub struct FdConfig {
    pub step: f64,
    /// A coordinate is skipped when moving it by less than this distance
    /// would flip the sign of some ReLU pre-activation.
    pub kink_margin: f64,
    /// Number of coordinates to check; `None` checks all of them.
    pub samples: Option<usize>,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_margin: 1e-3,
            samples: None,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub within_tolerance: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// `(coordinate, analytic, numeric, relative error)` for every checked coordinate.
    pub entries: Vec<(usize, f64, f64, f64)>,
}

impl FdReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.within_tolerance as f64 / self.checked as f64
        }
    }
}

fn near_kink(x0: &[f64], xp: &[f64], xm: &[f64], h: f64, margin: f64) -> bool {
    if x0.len() != xp.len() || x0.len() != xm.len() {
        return true;
    }
    x0.iter().zip(xp).zip(xm).any(|((&a, &p), &m)| {
        let active = a > 0.0;
        if (p > 0.0) != active || (m > 0.0) != active {
            return true;
        }
        let slope = (p - m) / (2.0 * h);
        slope != 0.0 && a.abs() < margin * slope.abs()
    })
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` returns the scalar value together with the ReLU pre-activations seen
/// during the evaluation (an empty probe disables kink detection).
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    params: &[f64],
    analytic: &[f64],
    cfg: &FdConfig,
) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let coords: Vec<usize> = match cfg.samples {
        Some(n) if n < params.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, params.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..params.len()).collect(),
    };
    let (_, probe0) = f(params);
    let h = cfg.step;
    let mut entries = Vec::new();
    let mut skipped = 0;
    let mut p = params.to_vec();
    for &i in &coords {
        p[i] = params[i] + h;
        let (fp, probe_p) = f(&p);
        p[i] = params[i] - h;
        let (fm, probe_m) = f(&p);
        p[i] = params[i];
        if near_kink(&probe0, &probe_p, &probe_m, h, cfg.kink_margin) {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        entries.push((i, analytic[i], numeric, rel_error(analytic[i], numeric)));
    }
    let checked = entries.len();
    let max_rel_error = entries.iter().map(|e| e.3).fold(0.0, f64::max);
    let mean_rel_error = if checked == 0 {
        0.0
    } else {
        entries.iter().map(|e| e.3).sum::<f64>() / checked as f64
    };
    FdReport {
        checked,
        skipped,
        within_tolerance: entries.iter().filter(|e| e.3 <= cfg.tolerance).count(),
        max_rel_error,
        mean_rel_error,
        entries,
    }
}
