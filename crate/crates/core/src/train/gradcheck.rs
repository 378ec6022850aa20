//! Finite-difference check of the full pre-training loss on a tiny batch.

use super::{init_model, prepare_batch, Result, TrainConfig};
use crate::data::{synth_scene, SceneConfig};
use crate::model::loss::batch_loss_split;
use crate::model::ModelError;
use crate::rng;
use crate::tensor::gradcheck::{finite_diff_check, FdConfig, FdReport};
use crate::tensor::Tape;
use crate::views::ViewConfig;

pub const CHECK_SIZE: usize = 16;
pub const CHECK_SAMPLES: usize = 2;

/// Two synthetic 16x16 scenes, desk model seeded by `seed`, `coords`
/// randomly chosen parameter coordinates. Perturbations move only the online
/// branch; the stop-gradient targets stay at the unperturbed parameters.
pub fn loss_gradcheck(seed: u64, coords: usize) -> Result<FdReport> {
    let mut scene = SceneConfig::with_size(CHECK_SIZE);
    scene.min_side = 3;
    let (images, masks): (Vec<_>, Vec<_>) = (0..CHECK_SAMPLES)
        .map(|i| synth_scene(&mut rng::stream(seed, &[0x6c, i as u64]), &scene).map(|s| (s.image, s.mask)))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    let cfg = TrainConfig {
        seed,
        batch: CHECK_SAMPLES,
        ..TrainConfig::desk()
    };
    let model = init_model(&cfg, &images);
    let indices: Vec<usize> = (0..CHECK_SAMPLES).collect();
    let (batch, plans) = prepare_batch(&images, &masks, &indices, seed, &cfg, &ViewConfig::default())?
        .ok_or(ModelError::NoValidSamples)?;
    let flat = model.params.flatten();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = batch_loss_split(&mut tape, &model, &bound, None, &batch, &plans)?;
    let grads = tape.backward(out.loss).map_err(ModelError::from)?;
    let analytic = bound.flat_gradient(&tape, &grads);
    let value = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut m = model.clone();
        m.params.load_flat(x).expect("same length");
        let mut tape = Tape::new();
        let online = m.params.bind(&mut tape);
        let target = model.params.bind(&mut tape);
        let out =
            batch_loss_split(&mut tape, &m, &online, Some(&target), &batch, &plans).expect("fixed batch");
        (tape.value(out.loss).item(), tape.relu_inputs())
    };
    Ok(finite_diff_check(
        value,
        &flat,
        &analytic,
        &FdConfig {
            samples: Some(coords),
            seed,
            ..FdConfig::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_check_passes() {
        let r = loss_gradcheck(1, 20).unwrap();
        assert!(r.checked >= 10, "{r:?}");
        assert!(r.pass_fraction() >= 0.9, "{r:?}");
    }
}
