//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng;

use cql::cli::config::RunConfig;
use cql::harness::eval::{Detection, GroundTruth};
use cql::interaction::BBox;
use cql::numcore::{Tensor, Var};
use cql::Result;

/// Deterministic, uneven weights used to turn a tensor output into a scalar.
pub fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos() + 0.1).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn weighted_sum(v: Var<'_>) -> Result<Var<'_>> {
    let w = v.tape().constant(probe_weights(&v.shape()));
    v.mul(w)?.sum()
}

/// Plain scalar intersection-over-union.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.0;
    let [bx1, by1, bx2, by2] = b.0;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

type Key = Vec<(u8, f64, i64)>;

fn better(a: &Key, b: &Key) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => return true,
            Some(std::cmp::Ordering::Less) => return false,
            _ => {}
        }
    }
    false
}

/// Average precision by exhaustive enumeration.
///
/// Every injective assignment of ranked detections to overlapping ground
/// truths is enumerated; the one that is best rank by rank (matched first,
/// then larger overlap, then lower ground-truth index) fixes the true
/// positives. Precision is interpolated with the classic padded-envelope
/// construction over recall.
pub fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    fn walk(
        r: usize,
        ranked: &[&Detection],
        gts: &[GroundTruth],
        thresh: f64,
        used: &mut Vec<bool>,
        key: &mut Key,
        best: &mut Option<Key>,
    ) {
        if r == ranked.len() {
            if best.as_ref().is_none_or(|b| better(key, b)) {
                *best = Some(key.clone());
            }
            return;
        }
        key.push((0, -1.0, i64::MIN));
        walk(r + 1, ranked, gts, thresh, used, key, best);
        key.pop();
        for g in 0..gts.len() {
            let (d, t) = (ranked[r], &gts[g]);
            if used[g] || d.scene != t.scene || d.category != t.category {
                continue;
            }
            let ov = iou_ref(&d.human_box, &t.human_box).min(iou_ref(&d.object_box, &t.object_box));
            if ov <= thresh {
                continue;
            }
            used[g] = true;
            key.push((1, ov, -(g as i64)));
            walk(r + 1, ranked, gts, thresh, used, key, best);
            key.pop();
            used[g] = false;
        }
    }

    let mut best = None;
    walk(0, &ranked, gts, thresh, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    let tp: Vec<bool> = best.unwrap().iter().map(|k| k.0 == 1).collect();

    let npos = gts.len() as f64;
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    let mut hits = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        mrec.push(hits / npos);
        mpre.push(hits / (i + 1) as f64);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (1..mpre.len()).rev() {
        mpre[i - 1] = mpre[i - 1].max(mpre[i]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    Some(ap)
}

fn grid_box<R: Rng>(rng: &mut R) -> BBox {
    let (x, y) = (rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64);
    let (w, h) = (rng.gen_range(2..6) as f64, rng.gen_range(2..6) as f64);
    BBox([x, y, x + w, y + h])
}

fn jitter<R: Rng>(b: &BBox, rng: &mut R) -> BBox {
    let dx = rng.gen_range(-1..=1) as f64;
    let dy = rng.gen_range(-1..=1) as f64;
    let grow = rng.gen_range(0..=1) as f64;
    BBox([b.0[0] + dx, b.0[1] + dy, b.0[2] + dx + grow, b.0[3] + dy])
}

/// A small single-category case over two scenes with distinct scores.
pub fn random_eval_case<R: Rng>(rng: &mut R, max_dets: usize, max_gts: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let n_gt = rng.gen_range(1..=max_gts);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| {
            let h = grid_box(rng);
            let o = grid_box(rng);
            GroundTruth {
                scene: rng.gen_range(0..2),
                category: 0,
                human_box: h,
                object_box: o,
            }
        })
        .collect();
    let n_det = rng.gen_range(0..=max_dets);
    let mut scores: Vec<f64> = (1..=n_det).map(|i| i as f64 / (n_det + 1) as f64).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.gen_range(0..=i));
    }
    let dets = scores
        .into_iter()
        .map(|score| {
            if rng.gen_bool(0.75) {
                let g = &gts[rng.gen_range(0..gts.len())];
                Detection {
                    scene: if rng.gen_bool(0.85) { g.scene } else { 1 - g.scene },
                    category: 0,
                    score,
                    human_box: jitter(&g.human_box, rng),
                    object_box: jitter(&g.object_box, rng),
                }
            } else {
                Detection {
                    scene: rng.gen_range(0..2),
                    category: 0,
                    score,
                    human_box: grid_box(rng),
                    object_box: grid_box(rng),
                }
            }
        })
        .collect();
    (dets, gts)
}

/// The separable toy task: K=4, D=16, 100 scenes, near-noiseless features.
pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 0;
    c.k = 4;
    c.d = 16;
    c.data.scenes = 100;
    c.data.noise_std = 0.01;
    c.integration.kappa = 4;
    c.optim.steps = 500;
    c.optim.lr = 3e-3;
    c
}
