//! Interaction-density partition: per category, scenes are grouped by how
//! many instances of that category they contain.

use serde::Serialize;

use super::dataset::SyntheticScene;
use super::eval::{category_aps, mean_present, predictions, EvalReport, GroundTruth, IOU_THRESHOLD};
use super::eval::{evaluate_ap, Detection};
use super::model::CqlModel;
use crate::error::{Error, Result};

pub const BUCKET_LABELS: [&str; 6] = ["1", "2", "3", "4", "5", ">5"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityBucket {
    pub bucket: String,
    /// Number of (scene, category) pairs in the bucket.
    pub pairs: usize,
    /// Absent when no category has a scene in this bucket.
    pub map: Option<f64>,
    pub baseline_map: Option<f64>,
    pub ratio: Option<f64>,
}

/// Bucket index for a per-category instance count; `None` for zero.
pub fn bucket_of(n: usize) -> Option<usize> {
    match n {
        0 => None,
        1..=5 => Some(n - 1),
        _ => Some(5),
    }
}

/// The (scene, category) pairs falling into each bucket.
pub fn partition_pairs(scenes: &[SyntheticScene], k: usize) -> [Vec<(usize, usize)>; 6] {
    let mut out: [Vec<(usize, usize)>; 6] = Default::default();
    for (s, scene) in scenes.iter().enumerate() {
        for c in 0..k {
            if let Some(b) = bucket_of(scene.count(c)) {
                out[b].push((s, c));
            }
        }
    }
    out
}

pub fn density_buckets(dets: &[Detection], gts: &[GroundTruth], scenes: &[SyntheticScene], k: usize, thresh: f64) -> Vec<DensityBucket> {
    let counts: Vec<Vec<usize>> = scenes.iter().map(|s| (0..k).map(|c| s.count(c)).collect()).collect();
    let pairs = partition_pairs(scenes, k);
    (0..BUCKET_LABELS.len())
        .map(|b| {
            let aps = category_aps(dets, gts, k, thresh, |s, c| bucket_of(counts[s][c]) == Some(b));
            DensityBucket {
                bucket: BUCKET_LABELS[b].to_string(),
                pairs: pairs[b].len(),
                map: mean_present(&aps),
                baseline_map: None,
                ratio: None,
            }
        })
        .collect()
}

/// `(ours - baseline) / baseline`.
pub fn relative_improvement(ours: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::EmptyBucket("baseline mAP is zero".into()));
    }
    Ok((ours - baseline) / baseline)
}

/// Fills `baseline_map` and `ratio` of `ours` from a baseline evaluated on
/// the same scenes. Buckets missing on either side stay absent.
pub fn attach_baseline(ours: &mut EvalReport, baseline: &EvalReport) {
    for (o, b) in ours.density.iter_mut().zip(&baseline.density) {
        o.baseline_map = b.map;
        o.ratio = match (o.map, b.map) {
            (Some(x), Some(y)) => relative_improvement(x, y).ok(),
            _ => None,
        };
    }
}

/// Density report of `model_a` with ratios against `model_b`.
pub fn density_partition_report(model_a: &CqlModel, model_b: &CqlModel, scenes: &[SyntheticScene]) -> Result<EvalReport> {
    if model_a.k() != model_b.k() {
        return Err(Error::InvalidConfig("models disagree on the number of categories".into()));
    }
    let k = model_a.k();
    let mut a = evaluate_ap(&predictions(model_a, scenes)?, scenes, k, IOU_THRESHOLD);
    let b = evaluate_ap(&predictions(model_b, scenes)?, scenes, k, IOU_THRESHOLD);
    attach_baseline(&mut a, &b);
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets() {
        assert_eq!(bucket_of(0), None);
        assert_eq!(bucket_of(3), Some(2));
        assert_eq!(bucket_of(5), Some(4));
        assert_eq!(bucket_of(6), Some(5));
        assert_eq!(bucket_of(40), Some(5));
    }

    #[test]
    fn ratio_arithmetic() {
        let r = relative_improvement(35.36, 33.69).unwrap();
        assert!((r - 0.04957).abs() < 5e-6);
        assert_eq!(relative_improvement(0.4, 0.4).unwrap(), 0.0);
        assert!(matches!(relative_improvement(0.4, 0.0), Err(Error::EmptyBucket(_))));
    }
}
