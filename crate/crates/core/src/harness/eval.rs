use std::thread;

use serde::Serialize;

use super::dataset::SyntheticScene;
use super::density::{density_buckets, DensityBucket};
use super::model::CqlModel;
use crate::error::Result;
use crate::interaction::BBox;

pub const IOU_THRESHOLD: f64 = 0.5;

/// One scored (human, object, category) triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub scene: usize,
    pub category: usize,
    pub score: f64,
    pub human_box: BBox,
    pub object_box: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub scene: usize,
    pub category: usize,
    pub human_box: BBox,
    pub object_box: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// AP per category; absent for categories with no ground truth.
    pub per_category_ap: Vec<Option<f64>>,
    /// Mean over categories that have ground truth.
    pub map: f64,
    pub density: Vec<DensityBucket>,
}

/// Pair overlap: both boxes must overlap, so the weaker IoU decides.
pub fn pair_overlap(det: &Detection, gt: &GroundTruth) -> f64 {
    det.human_box.iou(&gt.human_box).min(det.object_box.iou(&gt.object_box))
}

/// All-points interpolated AP for one category.
///
/// Detections are ranked by descending score (ties keep input order). Each
/// detection claims the unmatched ground truth in its scene with the highest
/// pair overlap, provided that overlap exceeds `thresh`.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let det = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] || gt.scene != det.scene || gt.category != det.category {
                continue;
            }
            let ov = pair_overlap(det, gt);
            if ov > thresh && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
        }
        tp.push(best.is_some());
    }

    let npos = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &hit) in tp.iter().enumerate() {
        hits += hit as usize;
        precision.push(hits as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = tp
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .map(|(_, &p)| p)
        .sum::<f64>()
        / npos;
    Some(ap)
}

pub fn ground_truths(scenes: &[SyntheticScene]) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for inst in &scene.instances {
            for (k, &y) in inst.labels.data().iter().enumerate() {
                if y == 1.0 {
                    out.push(GroundTruth {
                        scene: s,
                        category: k,
                        human_box: inst.human_box,
                        object_box: inst.object_box,
                    });
                }
            }
        }
    }
    out
}

/// Scores every instance for every category, reusing the ground-truth boxes.
/// Scenes are scored in parallel and concatenated in scene order.
pub fn predictions(model: &CqlModel, scenes: &[SyntheticScene]) -> Result<Vec<Detection>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(scenes.len().max(1));
    let chunk = scenes.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Detection>>> = thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .enumerate()
            .map(|(c, block)| s.spawn(move || score_block(model, block, c * chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn score_block(model: &CqlModel, scenes: &[SyntheticScene], offset: usize) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (j, scene) in scenes.iter().enumerate() {
        let scores = model.score(scene)?.integrated;
        for (i, inst) in scene.instances.iter().enumerate() {
            for k in 0..model.k() {
                out.push(Detection {
                    scene: offset + j,
                    category: k,
                    score: scores.at(i, k),
                    human_box: inst.human_box,
                    object_box: inst.object_box,
                });
            }
        }
    }
    Ok(out)
}

/// Per-category AP restricted to scenes accepted by `keep`.
pub fn category_aps(
    dets: &[Detection],
    gts: &[GroundTruth],
    k: usize,
    thresh: f64,
    keep: impl Fn(usize, usize) -> bool,
) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let d: Vec<&Detection> = dets.iter().filter(|d| d.category == c && keep(d.scene, c)).collect();
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c && keep(g.scene, c)).collect();
            average_precision(&d, &g, thresh)
        })
        .collect()
}

/// Mean of the present values, or `None` when every value is absent.
pub fn mean_present(aps: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn evaluate_ap(dets: &[Detection], scenes: &[SyntheticScene], k: usize, thresh: f64) -> EvalReport {
    let gts = ground_truths(scenes);
    let per_category_ap = category_aps(dets, &gts, k, thresh, |_, _| true);
    EvalReport {
        map: mean_present(&per_category_ap).unwrap_or(0.0),
        per_category_ap,
        density: density_buckets(dets, &gts, scenes, k, thresh),
    }
}

pub fn evaluate_model(model: &CqlModel, scenes: &[SyntheticScene]) -> Result<EvalReport> {
    let dets = predictions(model, scenes)?;
    Ok(evaluate_ap(&dets, scenes, model.k(), IOU_THRESHOLD))
}
