//! Image-level multi-label losses and the combined training objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageLossKind {
    Focal,
    Asl,
}

impl fmt::Display for ImageLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageLossKind::Focal => "focal",
            ImageLossKind::Asl => "asl",
        })
    }
}

impl FromStr for ImageLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "focal" => Ok(Self::Focal),
            "asl" | "asymmetric" => Ok(Self::Asl),
            other => Err(Error::InvalidConfig(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: ImageLossKind,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    /// Weight of the image-level loss in the total objective.
    pub lambda: f64,
    /// Focusing exponent of the image loss when `kind` is focal.
    pub focal_gamma: f64,
    /// Focusing exponent of the instance-level base loss.
    pub instance_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: ImageLossKind::Asl,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
            lambda: 1.0,
            focal_gamma: 2.0,
            instance_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma_pos", self.gamma_pos),
            ("gamma_neg", self.gamma_neg),
            ("lambda", self.lambda),
            ("focal_gamma", self.focal_gamma),
            ("instance_gamma", self.instance_gamma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!("margin must be in [0, 1), got {}", self.margin)));
        }
        Ok(())
    }
}

fn check_inputs(p: &Tensor, y: &Tensor, op: &'static str) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: p.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if let Some(v) = p.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("{op}: probability {v} outside (0, 1)")));
    }
    if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("{op}: label {v} is not binary")));
    }
    Ok(())
}

/// `y * pos + (1 - y) * neg`, averaged over all entries.
fn masked_mean<'t>(pos: Var<'t>, neg: Var<'t>, y: &Tensor) -> Result<Var<'t>> {
    let tape = pos.tape();
    let yv = tape.constant(y.clone());
    let not_y = tape.constant(y.map(|v| 1.0 - v));
    pos.mul(yv)?.add(neg.mul(not_y)?)?.mean()
}

/// Mean focal loss: `-(1-p)^γ ln p` for positives, `-p^γ ln(1-p)` for negatives.
pub fn focal_loss<'t>(p: Var<'t>, y: &Tensor, gamma: f64) -> Result<Var<'t>> {
    check_inputs(&p.value(), y, "focal_loss")?;
    let q = p.one_minus()?;
    let pos = q.powf(gamma)?.mul(p.ln()?)?.scale(-1.0)?;
    let neg = p.powf(gamma)?.mul(q.ln()?)?.scale(-1.0)?;
    masked_mean(pos, neg, y)
}

/// Mean asymmetric loss with the negative probability shifted by `margin`:
/// `-(1-p)^γ+ ln p` for positives and `-(p')^γ- ln(1-p')` for negatives,
/// where `p' = max(p - m, 0)`.
pub fn asymmetric_loss<'t>(p: Var<'t>, y: &Tensor, gamma_pos: f64, gamma_neg: f64, margin: f64) -> Result<Var<'t>> {
    check_inputs(&p.value(), y, "asymmetric_loss")?;
    let pos = p.one_minus()?.powf(gamma_pos)?.mul(p.ln()?)?.scale(-1.0)?;
    let shifted = p.add_scalar(-margin)?.relu()?;
    let neg = shifted.powf(gamma_neg)?.mul(shifted.one_minus()?.ln()?)?.scale(-1.0)?;
    masked_mean(pos, neg, y)
}

/// Image-level loss selected by `cfg.kind`.
pub fn image_loss<'t>(p: Var<'t>, y: &Tensor, cfg: &LossConfig) -> Result<Var<'t>> {
    match cfg.kind {
        ImageLossKind::Focal => focal_loss(p, y, cfg.focal_gamma),
        ImageLossKind::Asl => asymmetric_loss(p, y, cfg.gamma_pos, cfg.gamma_neg, cfg.margin),
    }
}

/// Focal loss averaged over every instance-category pair of an `N × K` score matrix.
pub fn instance_base_loss<'t>(s: Var<'t>, labels: &Tensor, gamma: f64) -> Result<Var<'t>> {
    let sv = s.value();
    sv.dims2("instance_base_loss")?;
    if sv.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "instance_base_loss",
            lhs: sv.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    focal_loss(s, labels, gamma)
}

/// `base + λ · img`
pub fn total_loss<'t>(base: Var<'t>, img: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    base.add(img.scale(lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Tape};
    use proptest::prelude::*;

    fn eval(f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>, p: &[f64]) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(p.to_vec()).unwrap());
        f(v).unwrap().value().item()
    }

    fn y(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn focal_examples() {
        let l = eval(|p| focal_loss(p, &y(&[1.0]), 0.0), &[0.5]);
        assert!((l - 0.6931471805599453).abs() < 1e-12);
        let l = eval(|p| focal_loss(p, &y(&[1.0]), 2.0), &[0.9]);
        assert!((l - 0.01 * (-(0.9f64).ln())).abs() < 1e-15);
        assert!((l - 0.00105361).abs() < 1e-8);
        let l = eval(|p| focal_loss(p, &y(&[1.0]), 2.0), &[1.0 - 1e-12]);
        assert!(l < 1e-30);
    }

    #[test]
    fn asl_examples() {
        let l = eval(|p| asymmetric_loss(p, &y(&[0.0]), 0.0, 4.0, 0.05), &[0.05]);
        assert_eq!(l, 0.0);
        let l = eval(|p| asymmetric_loss(p, &y(&[0.0]), 0.0, 4.0, 0.05), &[0.55]);
        assert!((l - 0.0433217).abs() < 1e-7);
        assert!((l - 0.0625 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn asl_reduces_to_bce() {
        let p = [0.2, 0.7, 0.5, 0.93];
        let labels = y(&[1.0, 0.0, 0.0, 1.0]);
        let a = eval(|v| asymmetric_loss(v, &labels, 0.0, 0.0, 0.0), &p);
        let f = eval(|v| focal_loss(v, &labels, 0.0), &p);
        assert_eq!(a, f);
    }

    #[test]
    fn domain_and_shape_errors() {
        let tape = Tape::new();
        let p = tape.leaf(y(&[0.0, 0.5]));
        assert!(matches!(focal_loss(p, &y(&[1.0, 0.0]), 2.0), Err(Error::Domain(_))));
        let p = tape.leaf(y(&[0.3, 0.5]));
        assert!(matches!(focal_loss(p, &y(&[1.0, 0.5]), 2.0), Err(Error::Domain(_))));
        assert!(matches!(
            asymmetric_loss(p, &y(&[1.0]), 0.0, 4.0, 0.05),
            Err(Error::ShapeMismatch { .. })
        ));
        let s = tape.leaf(Tensor::full(vec![2, 3], 0.5));
        assert!(instance_base_loss(s, &Tensor::zeros(vec![3, 2]), 2.0).is_err());
    }

    #[test]
    fn instance_base_loss_examples() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::full(vec![2, 3], 0.5));
        let labels = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0]]).unwrap();
        let l = instance_base_loss(s, &labels, 0.0).unwrap().value().item();
        assert!((l - 0.6931471805599453).abs() < 1e-12);

        let eps = 1e-9;
        let s = tape.leaf(labels.map(|v| if v == 1.0 { 1.0 - eps } else { eps }));
        let l = instance_base_loss(s, &labels, 2.0).unwrap().value().item();
        assert!(l < 1e-15);

        let r = grad_check(
            |_, s| instance_base_loss(s, &labels, 2.0),
            &Tensor::matrix(&[&[0.2, 0.6, 0.9], &[0.4, 0.35, 0.7]]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let base = tape.leaf(Tensor::scalar(0.3));
        let img = tape.leaf(Tensor::scalar(0.2));
        assert!((total_loss(base, img, 1.5).unwrap().value().item() - 0.6).abs() < 1e-12);
        assert_eq!(total_loss(base, img, 0.0).unwrap().value().item(), 0.3);
        assert_eq!(LossConfig::default().lambda, 1.0);
    }

    #[test]
    fn grads_at_margin_boundary() {
        for p0 in [0.05 - 1e-3, 0.05 + 1e-3] {
            let labels = y(&[0.0, 1.0]);
            let r = grad_check(
                |_, p| asymmetric_loss(p, &labels, 0.0, 4.0, 0.05),
                &y(&[p0, 0.4]),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "p0={p0}: {}", r.max_rel_error);
        }
        let r = grad_check(|_, p| asymmetric_loss(p, &y(&[0.0]), 0.0, 4.0, 0.05), &y(&[0.03]), 1e-5).unwrap();
        assert_eq!(r.analytic.item(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            margin: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            gamma_neg: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("ASL".parse::<ImageLossKind>().unwrap(), ImageLossKind::Asl);
        assert!("hinge".parse::<ImageLossKind>().is_err());
    }

    proptest! {
        #[test]
        fn asl_nonnegative_and_zero_iff_perfect(
            ps in proptest::collection::vec(0.001f64..0.999, 1..8),
            bits in proptest::collection::vec(any::<bool>(), 8),
        ) {
            let labels: Vec<f64> = ps.iter().zip(&bits).map(|(_, &b)| if b { 1.0 } else { 0.0 }).collect();
            let l = eval(|p| asymmetric_loss(p, &y(&labels), 0.0, 4.0, 0.05), &ps);
            prop_assert!(l >= 0.0);
            let perfect = ps.iter().zip(&labels).all(|(&p, &t)| if t == 1.0 { p == 1.0 } else { p <= 0.05 });
            prop_assert_eq!(l == 0.0, perfect);
        }

        #[test]
        fn total_loss_linear_in_lambda(base in 0.0f64..5.0, img in 0.0f64..5.0, a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let tape = Tape::new();
            let bv = tape.leaf(Tensor::scalar(base));
            let iv = tape.leaf(Tensor::scalar(img));
            let la = total_loss(bv, iv, a).unwrap().value().item();
            let lb = total_loss(bv, iv, b).unwrap().value().item();
            prop_assert!(((la - lb) - (a - b) * img).abs() < 1e-12);
        }
    }
}
