use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::SyntheticScene;
use super::model::CqlModel;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::numcore::Tape;

const SHUFFLE_SALT: u64 = 0x0dd_ba11_5eed;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub base: f64,
    pub image: Option<f64>,
}

/// Runs `model.config.optim.steps` Adam steps, one scene per step, visiting
/// scenes in a seeded shuffled order each epoch.
pub fn train(model: &mut CqlModel, data: &[SyntheticScene]) -> Result<Vec<StepLoss>> {
    if data.is_empty() {
        return Err(Error::Domain("training needs at least one scene".into()));
    }
    let steps = model.config.optim.steps;
    let mut adam = Adam::new(model.config.optim.clone(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(steps);

    for step in 0..steps {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let scene = &data[order.pop().expect("refilled above")];
        model.store.zero_grad();
        let tape = Tape::new();
        let parts = model
            .forward(&tape, scene)
            .and_then(|fwd| model.loss(&fwd, scene))
            .map_err(|e| match e {
                Error::NonFinite(_) | Error::Domain(_) => Error::DivergenceDetected { step },
                other => other,
            })?;
        let total = parts.total.value().item();
        if !total.is_finite() {
            return Err(Error::DivergenceDetected { step });
        }
        curve.push(StepLoss {
            step,
            total,
            base: parts.base.value().item(),
            image: parts.image.map(|v| v.value().item()),
        });
        tape.backward(parts.total)?.accumulate_into(&mut model.store);
        adam.step(&mut model.store);
        model.clamp_temperatures();
    }
    model.store.zero_grad();
    Ok(curve)
}

/// Mean total loss over consecutive windows of `window` steps.
pub fn smoothed(curve: &[StepLoss], window: usize) -> Vec<f64> {
    curve
        .chunks(window.max(1))
        .map(|c| c.iter().map(|s| s.total).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Loss curve as CSV with a header row.
pub fn curve_csv(curve: &[StepLoss]) -> String {
    let mut out = String::from("step,total,base,image\n");
    for s in curve {
        let img = s.image.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", s.step, s.total, s.base, img));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::RunConfig;
    use crate::harness::dataset::generate_dataset;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.k = 3;
        c.d = 8;
        c.h = 2;
        c.w = 2;
        c.decoder.heads = 2;
        c.decoder.ffn_hidden = 8;
        c.integration.kappa = 3;
        c.data.scenes = 4;
        c.optim.steps = 5;
        c
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let mut c = small();
        c.optim.steps = 0;
        let data = generate_dataset(&c.dataset_spec(), 0).unwrap();
        let mut model = CqlModel::new(c).unwrap();
        let before = model.store.clone();
        let curve = train(&mut model, &data).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.store, before);
    }

    #[test]
    fn training_is_deterministic() {
        let c = small();
        let data = generate_dataset(&c.dataset_spec(), 0).unwrap();
        let mut a = CqlModel::new(c.clone()).unwrap();
        let mut b = CqlModel::new(c).unwrap();
        let ca = train(&mut a, &data).unwrap();
        let cb = train(&mut b, &data).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.store, b.store);
        assert_eq!(curve_csv(&ca), curve_csv(&cb));
    }

    #[test]
    fn empty_data_rejected() {
        let mut model = CqlModel::new(small()).unwrap();
        assert!(train(&mut model, &[]).is_err());
    }

    #[test]
    fn smoothing_windows() {
        let curve: Vec<StepLoss> = (0..5)
            .map(|i| StepLoss {
                step: i,
                total: i as f64,
                base: 0.0,
                image: None,
            })
            .collect();
        assert_eq!(smoothed(&curve, 2), vec![0.5, 2.5, 4.0]);
        assert!(curve_csv(&curve).starts_with("step,total,base,image\n0,0,0,\n"));
    }
}
