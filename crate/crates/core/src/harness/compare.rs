use serde::Serialize;

use super::dataset::{category_prototypes, generate_dataset, SyntheticScene};
use super::density::attach_baseline;
use super::eval::{evaluate_model, EvalReport};
use super::model::CqlModel;
use super::train::{train, StepLoss};
use crate::cli::config::{Components, RunConfig};
use crate::error::Result;

const TEST_SEED_SALT: u64 = 0x7e57_0000_0000_0001;

/// Train and test scenes drawn from the same prototypes with independent streams.
pub fn make_splits(run: &RunConfig) -> Result<(Vec<SyntheticScene>, Vec<SyntheticScene>)> {
    let mut spec = run.dataset_spec();
    spec.prototypes = Some(category_prototypes(run.k, run.d, run.seed));
    let train_set = generate_dataset(&spec, run.seed)?;
    spec.scenes = run.data.test_scenes;
    let test_set = generate_dataset(&spec, run.seed ^ TEST_SEED_SALT)?;
    Ok((train_set, test_set))
}

pub struct Fitted {
    pub model: CqlModel,
    pub curve: Vec<StepLoss>,
    pub report: EvalReport,
}

pub fn fit_and_evaluate(run: &RunConfig, train_set: &[SyntheticScene], test_set: &[SyntheticScene]) -> Result<Fitted> {
    let mut model = CqlModel::new(run.clone())?;
    let curve = train(&mut model, train_set)?;
    let report = evaluate_model(&model, test_set)?;
    Ok(Fitted { model, curve, report })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub components: Components,
    pub map: f64,
    pub per_category_ap: Vec<Option<f64>>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub variants: Vec<VariantResult>,
    /// mAP of (c) minus mAP of (b).
    pub delta_c_minus_b: f64,
    /// Density report of (d) with (a) as the baseline.
    pub density_d_vs_a: EvalReport,
}

/// Trains the four cumulative variants (a)-(d) on shared data and seeds.
pub fn compare_models(run: &RunConfig, train_set: &[SyntheticScene], test_set: &[SyntheticScene]) -> Result<ComparisonReport> {
    let mut variants = Vec::with_capacity(4);
    let mut reports = Vec::with_capacity(4);
    for v in ['a', 'b', 'c', 'd'] {
        let mut cfg = run.clone();
        cfg.components = Components::variant(v).expect("known variant letter");
        let fitted = fit_and_evaluate(&cfg, train_set, test_set)?;
        variants.push(VariantResult {
            variant: v.to_string(),
            components: cfg.components,
            map: fitted.report.map,
            per_category_ap: fitted.report.per_category_ap.clone(),
            initial_loss: fitted.curve.first().map(|s| s.total),
            final_loss: fitted.curve.last().map(|s| s.total),
        });
        reports.push(fitted.report);
    }
    let mut density = reports[3].clone();
    attach_baseline(&mut density, &reports[0]);
    Ok(ComparisonReport {
        delta_c_minus_b: variants[2].map - variants[1].map,
        variants,
        density_d_vs_a: density,
    })
}
