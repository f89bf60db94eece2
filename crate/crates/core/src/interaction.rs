//! Instance-level interaction scoring with refined category queries as
//! adaptive classification weights, the static-weight baseline head, and
//! hard/soft score integration with image-level probabilities.

use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var};

/// Axis-aligned box `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self([x1, y1, x2, y2]);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.0;
        if !(x1 < x2 && y1 < y2) || self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("degenerate box {:?}", self.0)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.0;
        (x2 - x1) * (y2 - y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let [ax1, ay1, ax2, ay2] = self.0;
        let [bx1, by1, bx2, by2] = other.0;
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        // distinct boxes never round up to a perfect overlap
        (inter / union).clamp(0.0, 1.0 - f64::EPSILON)
    }
}

/// One human-object pair with its feature and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub feature: Tensor,
    pub human_box: BBox,
    pub object_box: BBox,
    pub labels: Tensor,
    pub confidence: f64,
}

impl InstanceRecord {
    pub fn validate(&self, k: usize, d: usize) -> Result<()> {
        self.human_box.validate()?;
        self.object_box.validate()?;
        if self.feature.shape() != [d] || self.labels.shape() != [k] {
            return Err(Error::ShapeMismatch {
                op: "instance",
                lhs: self.feature.shape().to_vec(),
                rhs: self.labels.shape().to_vec(),
            });
        }
        if self.labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("instance labels must be binary".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Domain("confidence outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationConfig {
    /// Number of categories kept by hard integration; clamped to K.
    pub kappa: usize,
    pub tau_init: f64,
    pub use_hard: bool,
    pub use_soft: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            kappa: 70,
            tau_init: 1.0,
            use_hard: true,
            use_soft: true,
        }
    }
}

impl IntegrationConfig {
    pub fn effective_kappa(&self, k: usize) -> usize {
        self.kappa.min(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::InvalidConfig("kappa must be >= 1".into()));
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(Error::InvalidConfig("tau_init must be > 0".into()));
        }
        Ok(())
    }
}

/// Image and instance scores for one scene. `integrated` is always `N × K`,
/// with categories dropped by hard integration scored exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBundle {
    pub image_probs: Option<Tensor>,
    pub instance_scores: Tensor,
    pub integrated: Tensor,
    pub selected: Option<Vec<usize>>,
}

/// `s[i, k] = sigmoid(cos(F_i, Q'_k))`, an `N × K` matrix.
pub fn cosine_scores<'t>(refined: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    cosine_logits(refined, features)?.sigmoid()
}

fn cosine_logits<'t>(refined: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    let (_, d) = refined.value().dims2("cosine_scores")?;
    let (_, df) = features.value().dims2("cosine_scores")?;
    if d != df {
        return Err(Error::ShapeMismatch {
            op: "cosine_scores",
            lhs: refined.shape(),
            rhs: features.shape(),
        });
    }
    let q = refined.normalize_rows()?;
    let f = features.normalize_rows()?;
    f.matmul(q.transpose()?)
}

/// Conventional linear head `sigmoid(F_i · W_k + b_k)`.
pub fn static_scores<'t>(weights: Var<'t>, bias: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    let (k, d) = weights.value().dims2("static_scores")?;
    let (_, df) = features.value().dims2("static_scores")?;
    if d != df || bias.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "static_scores",
            lhs: weights.shape(),
            rhs: features.shape(),
        });
    }
    features.matmul(weights.transpose()?)?.add_row(bias)?.sigmoid()
}

fn check_open_unit(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(v) => Err(Error::Domain(format!("{what} value {v} outside (0, 1)"))),
        None => Ok(()),
    }
}

/// `s^s[i, k] = sqrt(s[i, k] · p_k)`
pub fn soft_integration<'t>(scores: Var<'t>, probs: Var<'t>) -> Result<Var<'t>> {
    check_open_unit(&scores.value(), "instance score")?;
    check_open_unit(&probs.value(), "image probability")?;
    scores.mul_row(probs)?.sqrt()
}

/// Indices of the `kappa` largest probabilities, by descending value with
/// ties broken by ascending index.
pub fn top_kappa(probs: &Tensor, kappa: usize) -> Result<Vec<usize>> {
    let k = probs.numel();
    if kappa == 0 || kappa > k {
        return Err(Error::Domain(format!("kappa {kappa} outside 1..={k}")));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let p = probs.data();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(kappa);
    Ok(idx)
}

/// Category selection and ranking.
///
/// Keeps the `kappa` categories with the highest image probability and
/// scores rank j as `sigmoid(cos(F_i, Q'_sel[j]) / tau_j)`. The selection is
/// not differentiated; gradients reach the selected query rows and `tau`.
pub fn hard_integration<'t>(
    features: Var<'t>,
    refined: Var<'t>,
    probs: &Tensor,
    tau: Var<'t>,
    kappa: usize,
) -> Result<(Var<'t>, Vec<usize>)> {
    let tv = tau.value();
    if tv.shape() != [kappa] {
        return Err(Error::ShapeMismatch {
            op: "hard_integration",
            lhs: tv.shape().to_vec(),
            rhs: vec![kappa],
        });
    }
    if let Some(t) = tv.data().iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Domain(format!("temperature {t} must be > 0")));
    }
    if probs.numel() != refined.value().dims2("hard_integration")?.0 {
        return Err(Error::ShapeMismatch {
            op: "hard_integration",
            lhs: probs.shape().to_vec(),
            rhs: refined.shape(),
        });
    }
    let selected = top_kappa(probs, kappa)?;
    let chosen = refined.gather(&selected)?;
    let scores = cosine_logits(chosen, features)?.div_row(tau)?.sigmoid()?;
    Ok((scores, selected))
}

/// `s^{s,h}[i, j] = sqrt(s^h[i, j] · p̄_j)` with `p̄_j` the j-th largest image probability.
pub fn combined_integration<'t>(hard: Var<'t>, selected: &[usize], probs: Var<'t>) -> Result<Var<'t>> {
    let (_, kappa) = hard.value().dims2("combined_integration")?;
    if kappa != selected.len() {
        return Err(Error::ShapeMismatch {
            op: "combined_integration",
            lhs: hard.shape(),
            rhs: vec![selected.len()],
        });
    }
    soft_integration(hard, probs.gather(selected)?)
}

/// Scatters `N × κ` selected-category scores into a dense `N × K` matrix,
/// leaving dropped categories at 0.
pub fn expand_selected(scores: &Tensor, selected: &[usize], k: usize) -> Result<Tensor> {
    let (n, kappa) = scores.dims2("expand_selected")?;
    if kappa != selected.len() {
        return Err(Error::ShapeMismatch {
            op: "expand_selected",
            lhs: scores.shape().to_vec(),
            rhs: vec![selected.len()],
        });
    }
    let mut out = Tensor::zeros(vec![n, k]);
    for i in 0..n {
        for (j, &c) in selected.iter().enumerate() {
            if c >= k {
                return Err(Error::IndexOutOfRange { index: c, len: k });
            }
            out.data_mut()[i * k + c] = scores.at(i, j);
        }
    }
    Ok(out)
}

/// Column `j` of `labels` re-indexed to the selected categories.
pub fn gather_columns(labels: &Tensor, selected: &[usize]) -> Result<Tensor> {
    let (n, k) = labels.dims2("gather_columns")?;
    let mut data = Vec::with_capacity(n * selected.len());
    for i in 0..n {
        for &c in selected {
            if c >= k {
                return Err(Error::IndexOutOfRange { index: c, len: k });
            }
            data.push(labels.at(i, c));
        }
    }
    Tensor::new(vec![n, selected.len()], data)
}
