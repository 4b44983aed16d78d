//! Hard and soft segmentation losses.
//!
//! Every loss takes per-pixel foreground probabilities. Values are computed in
//! f64 over the whole batch and exposed as scalar autograd nodes whose
//! gradient flows to the student probabilities only. Probabilities are clamped
//! where a logarithm of them is taken (cross-entropy and KL); the overlap
//! losses use them as given, with additive smoothing.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::ops::weighted_sum;
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[EPS_CLAMP, 1 − EPS_CLAMP]`.
pub const EPS_CLAMP: f64 = 1e-7;
/// Additive smoothing of the Dice and IoU ratios.
pub const EPS_SMOOTH: f64 = 1e-6;

/// Clamped value and whether the clamp was inactive (derivative 1).
fn clamp(q: f64) -> (f64, bool) {
    if q < EPS_CLAMP {
        (EPS_CLAMP, false)
    } else if q > 1.0 - EPS_CLAMP {
        (1.0 - EPS_CLAMP, false)
    } else {
        (q, true)
    }
}

fn check_pair(q: &[f64], y: &[f64]) -> Result<()> {
    if q.len() != y.len() || q.is_empty() {
        return Err(Error::Structural(format!(
            "loss inputs need equal, non-empty sizes ({} vs {})",
            q.len(),
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("target mask holds non-binary value {bad}")));
    }
    Ok(())
}

/// Loss value and gradient with respect to the (unclamped) probabilities.
pub type LossGrad = (f64, Vec<f64>);

/// Mean binary cross-entropy.
pub fn cross_entropy_terms(q: &[f64], y: &[f64]) -> Result<LossGrad> {
    check_pair(q, y)?;
    let n = q.len() as f64;
    let mut total = 0.0;
    let grad = q
        .iter()
        .zip(y)
        .map(|(&qi, &yi)| {
            let (c, live) = clamp(qi);
            total -= yi * c.ln() + (1.0 - yi) * (1.0 - c).ln();
            if live {
                (-yi / c + (1.0 - yi) / (1.0 - c)) / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// Two-class Dice loss with class weights 1/2 and squared denominators.
pub fn dice_terms(q: &[f64], y: &[f64], smooth: f64) -> Result<LossGrad> {
    check_pair(q, y)?;
    let w = 0.5;
    let (mut n1, mut m1, mut n0, mut m0) = (0.0, smooth, 0.0, smooth);
    for (&p, &g) in q.iter().zip(y) {
        n1 += p * g;
        m1 += p * p + g * g;
        n0 += (1.0 - p) * (1.0 - g);
        m0 += (1.0 - p) * (1.0 - p) + (1.0 - g) * (1.0 - g);
    }
    let ratio = |n: f64, m: f64| if m > 0.0 { 2.0 * w * n / m } else { 0.0 };
    let loss = 1.0 - ratio(n1, m1) - ratio(n0, m0);
    let grad = q
        .iter()
        .zip(y)
        .map(|(&p, &g)| {
            let d1 = if m1 > 0.0 { 2.0 * w * (g * m1 - n1 * 2.0 * p) / (m1 * m1) } else { 0.0 };
            let p0 = 1.0 - p;
            let d0 = if m0 > 0.0 { 2.0 * w * ((1.0 - g) * m0 - n0 * 2.0 * p0) / (m0 * m0) } else { 0.0 };
            -(d1 - d0)
        })
        .collect();
    Ok((loss, grad))
}

/// Negative log soft IoU of the foreground.
pub fn iou_terms(q: &[f64], y: &[f64]) -> Result<LossGrad> {
    check_pair(q, y)?;
    let inter: f64 = q.iter().zip(y).map(|(&p, &g)| p * g).sum();
    let union = q.iter().sum::<f64>() + y.iter().sum::<f64>() - inter;
    let (a, b) = (inter + EPS_SMOOTH, union + EPS_SMOOTH);
    let grad = y.iter().map(|&g| -g / a + (1.0 - g) / b).collect();
    Ok((-(a / b).ln(), grad))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn soften(p: f64, temperature: f64) -> f64 {
    if temperature == 1.0 {
        p
    } else {
        clamp(1.0 / (1.0 + (-logit(p) / temperature).exp())).0
    }
}

/// Mean per-pixel two-point KL(p ‖ q) between temperature-softened maps.
pub fn kl_terms(p: &[f64], q: &[f64], temperature: f64) -> Result<LossGrad> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Structural(format!(
            "KL inputs need equal, non-empty sizes ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let n = p.len() as f64;
    let mut total = 0.0;
    let grad = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pt = soften(clamp(pi).0, temperature);
            let (qc, live) = clamp(qi);
            let qt = soften(qc, temperature);
            total += pt * (pt / qt).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - qt)).ln();
            if live {
                (qt - pt) / (temperature * qc * (1.0 - qc)) / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, grad))
}

struct FusedLoss {
    grad: Vec<f64>,
}

impl<T: Scalar> Backward<T> for FusedLoss {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0].to_f64_lossy();
        let data = self.grad.iter().map(|&d| T::from_f64_lossy(d * g)).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), data).expect("input shape"))]
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

fn fused<T: Scalar>(q: &Var<T>, (value, grad): LossGrad) -> Var<T> {
    Var::from_op(Tensor::scalar(T::from_f64_lossy(value)), vec![q.clone()], FusedLoss { grad })
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.expect_same_shape(b)
}

pub fn cross_entropy<T: Scalar>(q: &Var<T>, y: &Tensor<T>) -> Result<Var<T>> {
    same_shape(q.value(), y)?;
    Ok(fused(q, cross_entropy_terms(&to_f64(q.value()), &to_f64(y))?))
}

/// Dice loss with explicit smoothing; [`EPS_SMOOTH`] is the training default.
pub fn dice_loss<T: Scalar>(q: &Var<T>, y: &Tensor<T>, smooth: f64) -> Result<Var<T>> {
    same_shape(q.value(), y)?;
    Ok(fused(q, dice_terms(&to_f64(q.value()), &to_f64(y), smooth)?))
}

pub fn iou_loss<T: Scalar>(q: &Var<T>, y: &Tensor<T>) -> Result<Var<T>> {
    same_shape(q.value(), y)?;
    Ok(fused(q, iou_terms(&to_f64(q.value()), &to_f64(y))?))
}

/// `2·CE + Dice + IoU`.
pub fn weight_balance_loss<T: Scalar>(q: &Var<T>, y: &Tensor<T>) -> Result<Var<T>> {
    same_shape(q.value(), y)?;
    let (qv, yv) = (to_f64(q.value()), to_f64(y));
    let (ce, gce) = cross_entropy_terms(&qv, &yv)?;
    let (dice, gd) = dice_terms(&qv, &yv, EPS_SMOOTH)?;
    let (iou, gi) = iou_terms(&qv, &yv)?;
    let grad = gce.iter().zip(&gd).zip(&gi).map(|((a, b), c)| 2.0 * a + b + c).collect();
    Ok(fused(q, (2.0 * ce + dice + iou, grad)))
}

/// KL from a detached teacher map to the student probabilities.
pub fn kl_divergence<T: Scalar>(p_teacher: &Tensor<T>, q_student: &Var<T>, temperature: f64) -> Result<Var<T>> {
    same_shape(p_teacher, q_student.value())?;
    Ok(fused(q_student, kl_terms(&to_f64(p_teacher), &to_f64(q_student.value()), temperature)?))
}

/// Weights of the hard loss and of the benign and malignant KL terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub hard: f64,
    pub benign: f64,
    pub malignant: f64,
}

impl LossWeights {
    pub const fn double_teacher() -> Self {
        LossWeights { hard: 0.3, benign: 0.5, malignant: 0.2 }
    }

    /// One teacher, carried in the benign slot.
    pub const fn single_teacher() -> Self {
        LossWeights { hard: 0.3, benign: 0.7, malignant: 0.0 }
    }

    pub const fn supervised() -> Self {
        LossWeights { hard: 1.0, benign: 0.0, malignant: 0.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "double_teacher" => Ok(Self::double_teacher()),
            "single_teacher" => Ok(Self::single_teacher()),
            "supervised" => Ok(Self::supervised()),
            other => Err(Error::Config(format!(
                "unknown loss preset {other:?} (expected double_teacher, single_teacher or supervised)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hard, self.benign, self.malignant];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.hard, self.benign, self.malignant]
    }
}

/// Student prediction, optional teacher predictions and the target.
#[derive(Clone, Debug)]
pub struct PredictionBundle<'a, T: Scalar> {
    pub student: &'a Var<T>,
    pub benign: Option<&'a Tensor<T>>,
    pub malignant: Option<&'a Tensor<T>>,
    pub target: &'a Tensor<T>,
}

/// Differentiable total plus detached component values.
#[derive(Clone, Debug)]
pub struct LossBreakdown<T: Scalar> {
    pub total: Var<T>,
    pub wb: f64,
    pub kl_benign: f64,
    pub kl_malignant: f64,
}

/// `λ1·L_WB(y, S) + λ2·KL(B, S) + λ3·KL(M, S)`.
///
/// A teacher term is evaluated whenever its prediction is present; a positive
/// weight without the matching prediction is a configuration error.
pub fn total_loss<T: Scalar>(bundle: &PredictionBundle<'_, T>, w: &LossWeights, temperature: f64) -> Result<LossBreakdown<T>> {
    w.validate()?;
    let need = |weight: f64, t: Option<&Tensor<T>>, which: &str| -> Result<()> {
        if weight > 0.0 && t.is_none() {
            return Err(Error::Config(format!(
                "loss weight {weight} on the {which} teacher term but no {which} teacher prediction"
            )));
        }
        Ok(())
    };
    need(w.benign, bundle.benign, "benign")?;
    need(w.malignant, bundle.malignant, "malignant")?;

    let wb = weight_balance_loss(bundle.student, bundle.target)?;
    let mut terms = vec![(T::from_f64_lossy(w.hard), wb.clone())];
    let mut kl = |teacher: Option<&Tensor<T>>, weight: f64| -> Result<f64> {
        match teacher {
            Some(p) => {
                let term = kl_divergence(p, bundle.student, temperature)?;
                let v = term.value().data()[0].to_f64_lossy();
                terms.push((T::from_f64_lossy(weight), term));
                Ok(v)
            }
            None => Ok(0.0),
        }
    };
    let kl_benign = kl(bundle.benign, w.benign)?;
    let kl_malignant = kl(bundle.malignant, w.malignant)?;
    Ok(LossBreakdown {
        total: weighted_sum(&terms)?,
        wb: wb.value().data()[0].to_f64_lossy(),
        kl_benign,
        kl_malignant,
    })
}
