//! Class centres and the anchor-loss term.
//!
//! Each known class `y` owns a fixed centre in logit space with `+alpha` in
//! dimension `y` and `-alpha` everywhere else. The anchor loss is the plain
//! Euclidean distance from a logit vector to its class centre, and is added
//! to the usual classification loss with weight `lambda`.

use serde::{Deserialize, Serialize};

use crate::extraction::{log_sum_exp, softmax};
use crate::{Error, Result};

/// Default centre magnitude.
pub const DEFAULT_ALPHA: f64 = 10.0;
/// Default anchor weight (the smaller-dataset setting; use 0.05 for larger
/// label spaces if closed-set accuracy suffers).
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CentreSet {
    alpha: f64,
    n_classes: usize,
}

impl CentreSet {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Centre of `class` as a dense vector.
    pub fn centre(&self, class: usize) -> Result<Vec<f64>> {
        self.check_label(class)?;
        Ok((0..self.n_classes)
            .map(|i| if i == class { self.alpha } else { -self.alpha })
            .collect())
    }

    pub fn centres(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes)
            .map(|c| self.centre(c).expect("in range"))
            .collect()
    }

    #[inline]
    fn coord(&self, class: usize, i: usize) -> f64 {
        if i == class {
            self.alpha
        } else {
            -self.alpha
        }
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    fn check_logit(&self, logit: &[f64], label: usize) -> Result<()> {
        if logit.len() != self.n_classes {
            return Err(Error::DimensionMismatch {
                expected: self.n_classes,
                got: logit.len(),
            });
        }
        self.check_label(label)
    }
}

pub fn class_centres(n_classes: usize, alpha: f64) -> Result<CentreSet> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(CentreSet { alpha, n_classes })
}

/// ‖logit − c_label‖₂.
pub fn anchor_loss(logit: &[f64], label: usize, centres: &CentreSet) -> Result<f64> {
    centres.check_logit(logit, label)?;
    Ok(distance_to_centre(logit, label, centres))
}

fn distance_to_centre(logit: &[f64], label: usize, centres: &CentreSet) -> f64 {
    logit
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = v - centres.coord(label, i);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Gradient of [`anchor_loss`]: the unit vector from the centre towards the
/// logit. At the centre itself the zero subgradient is returned.
pub fn anchor_loss_grad(logit: &[f64], label: usize, centres: &CentreSet) -> Result<Vec<f64>> {
    centres.check_logit(logit, label)?;
    let dist = distance_to_centre(logit, label, centres);
    if dist == 0.0 {
        return Ok(vec![0.0; logit.len()]);
    }
    Ok(logit
        .iter()
        .enumerate()
        .map(|(i, v)| (v - centres.coord(label, i)) / dist)
        .collect())
}

/// Classification loss paired with the anchor term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassificationLoss {
    /// Softmax cross-entropy.
    #[default]
    CrossEntropy,
    /// Softmax focal loss, −(1 − p_y)^γ log p_y.
    Focal { gamma: f64 },
}

impl ClassificationLoss {
    /// Loss value and gradient with respect to the logits.
    pub fn value_and_grad(&self, logit: &[f64], label: usize) -> (f64, Vec<f64>) {
        let p = softmax(logit);
        let log_p = logit[label] - log_sum_exp(logit);
        match *self {
            ClassificationLoss::CrossEntropy => {
                let mut g = p;
                g[label] -= 1.0;
                (-log_p, g)
            }
            ClassificationLoss::Focal { gamma } => {
                let py = p[label];
                let q = 1.0 - py;
                let value = -q.powf(gamma) * log_p;
                // dL/dp_y, multiplied through by p_y so the softmax Jacobian
                // p_y (δ_yk − p_k) can be applied directly.
                let qg1 = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
                let coeff = qg1 * py * log_p - q.powf(gamma);
                let g = p
                    .iter()
                    .enumerate()
                    .map(|(k, pk)| coeff * ((k == label) as u8 as f64 - pk))
                    .collect();
                (value, g)
            }
        }
    }
}

/// L_cls(l, y) + λ·L_A(l, y) and its gradient.
pub fn combined_loss(
    logit: &[f64],
    label: usize,
    centres: &CentreSet,
    lambda: f64,
    cls: ClassificationLoss,
) -> Result<(f64, Vec<f64>)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    centres.check_logit(logit, label)?;
    let (cls_value, mut grad) = cls.value_and_grad(logit, label);
    let a = distance_to_centre(logit, label, centres);
    if lambda != 0.0 {
        let ag = anchor_loss_grad(logit, label, centres)?;
        for (g, a) in grad.iter_mut().zip(ag) {
            *g += lambda * a;
        }
    }
    Ok((cls_value + lambda * a, grad))
}
