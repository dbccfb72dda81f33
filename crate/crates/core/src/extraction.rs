//! From detections to uncertainty: per-class training sets, uncertainty
//! vectors, threshold rejection and the class-mismatch flag.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::eval::{iou, BBox};
use crate::gmm::GmmSet;
use crate::{Error, Result};

/// Default IoU gate for training-set membership.
pub const DEFAULT_THETA_IOU: f64 = 0.6;
/// Default score gate for training-set membership.
pub const DEFAULT_THETA_CONF: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalisation {
    #[default]
    Softmax,
    Sigmoid,
}

impl std::str::FromStr for Normalisation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalisation::Softmax),
            "sigmoid" => Ok(Normalisation::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown normalisation {other:?}"))),
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normalise_scores(logits: &[f64], mode: Normalisation) -> Vec<f64> {
    match mode {
        Normalisation::Softmax => softmax(logits),
        Normalisation::Sigmoid => logits.iter().map(|&x| sigmoid(x)).collect(),
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One detector output: a box plus its raw logits and normalised scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl Detection {
    /// Builds a detection whose scores are computed from the logits.
    pub fn from_logits(
        image_id: impl Into<String>,
        bbox: BBox,
        logits: Vec<f64>,
        mode: Normalisation,
    ) -> Self {
        let scores = normalise_scores(&logits, mode);
        Detection {
            image_id: image_id.into(),
            bbox,
            logits,
            scores,
        }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.scores)
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Checks dimensions and that `scores` are the declared normalisation of
    /// `logits` within `tol`.
    pub fn validate(&self, n_classes: usize, mode: Normalisation, tol: f64) -> Result<()> {
        if self.logits.len() != n_classes || self.scores.len() != n_classes {
            return Err(Error::Data(format!(
                "detection in image {:?} has {} logits and {} scores, expected {n_classes}",
                self.image_id,
                self.logits.len(),
                self.scores.len()
            )));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "detection in image {:?} has non-finite logits",
                self.image_id
            )));
        }
        let expected = normalise_scores(&self.logits, mode);
        for (a, b) in expected.iter().zip(&self.scores) {
            if (a - b).abs() > tol {
                return Err(Error::Data(format!(
                    "detection in image {:?}: scores are not the {mode:?} of its logits",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// A labelled object. `class_id` indexes the known classes when `known`,
/// and the held-out classes otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub known: bool,
}

/// Logit sets keyed by known class, with classes that ended up empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSets {
    pub sets: BTreeMap<usize, Vec<Vec<f64>>>,
    pub empty_classes: Vec<usize>,
}

pub(crate) fn index_by_image<'a>(truths: &'a [GroundTruthObject]) -> HashMap<&'a str, Vec<usize>> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, t) in truths.iter().enumerate() {
        by_image.entry(t.image_id.as_str()).or_default().push(i);
    }
    by_image
}

/// Highest-IoU truth among `candidates`, first in annotation order on ties.
pub(crate) fn best_match(
    bbox: &BBox,
    truths: &[GroundTruthObject],
    candidates: impl IntoIterator<Item = usize>,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let v = iou(bbox, &truths[i].bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Collects, per known class, the logits of detections that localise a
/// ground-truth object of that class with IoU ≥ `theta_iou` and give that
/// class a score ≥ `theta_conf`. A detection is matched only to its
/// highest-IoU known truth.
pub fn build_training_logit_sets(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    n_classes: usize,
    theta_iou: f64,
    theta_conf: f64,
) -> Result<TrainingSets> {
    for (name, v) in [("theta_iou", theta_iou), ("theta_conf", theta_conf)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidArgument(format!("{name} must be in (0, 1], got {v}")));
        }
    }
    let known: Vec<GroundTruthObject> = ground_truth.iter().filter(|t| t.known).cloned().collect();
    if let Some(t) = known.iter().find(|t| t.class_id >= n_classes) {
        return Err(Error::Data(format!(
            "ground-truth class {} outside the {n_classes} known classes",
            t.class_id
        )));
    }
    let by_image = index_by_image(&known);
    let mut sets: BTreeMap<usize, Vec<Vec<f64>>> = (0..n_classes).map(|c| (c, Vec::new())).collect();
    for det in detections {
        if det.scores.len() != n_classes {
            return Err(Error::DimensionMismatch {
                expected: n_classes,
                got: det.scores.len(),
            });
        }
        let Some(cands) = by_image.get(det.image_id.as_str()) else {
            continue;
        };
        let Some((t, v)) = best_match(&det.bbox, &known, cands.iter().copied()) else {
            continue;
        };
        let class = known[t].class_id;
        if v >= theta_iou && det.scores[class] >= theta_conf {
            sets.get_mut(&class).unwrap().push(det.logits.clone());
        }
    }
    let empty_classes = sets
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(&c, _)| c)
        .collect();
    Ok(TrainingSets {
        sets,
        empty_classes,
    })
}

/// Validation detections split into correctly classified and misclassified
/// ones, each as (logits, predicted class). Detections not localising any
/// known object with IoU ≥ `iou_threshold` are dropped.
#[allow(clippy::type_complexity)]
pub fn validation_pairs(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
) -> (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>) {
    let known: Vec<GroundTruthObject> = ground_truth.iter().filter(|t| t.known).cloned().collect();
    let by_image = index_by_image(&known);
    let mut correct = Vec::new();
    let mut wrong = Vec::new();
    for det in detections {
        let Some(cands) = by_image.get(det.image_id.as_str()) else {
            continue;
        };
        if let Some((t, v)) = best_match(&det.bbox, &known, cands.iter().copied()) {
            if v >= iou_threshold {
                let pred = det.predicted_class();
                if pred == known[t].class_id {
                    correct.push((det.logits.clone(), pred));
                } else {
                    wrong.push((det.logits.clone(), pred));
                }
            }
        }
    }
    (correct, wrong)
}

/// Per-class log-likelihoods of one logit vector, with the best class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyVector {
    pub log_likelihoods: Vec<f64>,
    pub max_log_likelihood: f64,
    pub argmax_class: usize,
}

pub fn uncertainty_vector(models: &GmmSet, logit: &[f64]) -> Result<UncertaintyVector> {
    let log_likelihoods = models.log_likelihoods(logit)?;
    let argmax_class = argmax(&log_likelihoods);
    Ok(UncertaintyVector {
        max_log_likelihood: log_likelihoods[argmax_class],
        log_likelihoods,
        argmax_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    #[serde(flatten)]
    pub detection: Detection,
    pub uncertainty: UncertaintyVector,
}

pub fn score_detections(models: &GmmSet, detections: &[Detection]) -> Result<Vec<ScoredDetection>> {
    detections
        .iter()
        .map(|d| {
            Ok(ScoredDetection {
                detection: d.clone(),
                uncertainty: uncertainty_vector(models, &d.logits)?,
            })
        })
        .collect()
}

/// Splits detections into those whose best class log-likelihood reaches
/// `theta_ose` (accepted) and the rest (rejected). Input order is kept
/// within each side.
pub fn reject(
    scored: Vec<ScoredDetection>,
    theta_ose: f64,
) -> (Vec<ScoredDetection>, Vec<ScoredDetection>) {
    scored
        .into_iter()
        .partition(|s| s.uncertainty.max_log_likelihood >= theta_ose)
}

/// True when the detector's predicted class differs from the class whose
/// mixture explains the logits best.
pub fn flag_class_mismatch(det: &Detection, u: &UncertaintyVector) -> bool {
    det.predicted_class() != u.argmax_class
}

/// Smallest acceptance threshold that lets through at most `target_rate` of
/// the proxy-negative scores (acceptance is `score >= threshold`).
pub fn select_theta_ose(negative_scores: &[f64], target_rate: f64) -> Result<f64> {
    if negative_scores.is_empty() {
        return Err(Error::InvalidArgument("no negative scores".into()));
    }
    if !(0.0..=1.0).contains(&target_rate) {
        return Err(Error::InvalidArgument(format!(
            "target rate must be in [0, 1], got {target_rate}"
        )));
    }
    let mut sorted = negative_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = (target_rate * sorted.len() as f64).floor() as usize;
    if allowed >= sorted.len() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(sorted[allowed].next_up())
}
