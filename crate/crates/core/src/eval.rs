//! Open-set evaluation: categorising detections, ROC analysis of an
//! uncertainty measure, TPR at fixed open-set error rates, and mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::extraction::{index_by_image, Detection, GroundTruthObject, ScoredDetection};
use crate::{Error, Result};

/// IoU at which a detection localises a labelled object.
pub const MATCH_IOU: f64 = 0.5;
/// Operating points reported by default.
pub const DEFAULT_OSR_LEVELS: [f64; 3] = [0.05, 0.10, 0.20];

/// Axis-aligned box `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// From COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Localises a known object and predicts its class.
    Correct,
    /// Misclassification, duplicate or background detection.
    ClosedSetError,
    /// Localises an object of a held-out class.
    OpenSetError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRef {
    /// Index into the ground-truth list given to [`categorise`].
    pub index: usize,
    pub known: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorisedDetection {
    /// Position of the detection in the input list.
    pub index: usize,
    pub category: Category,
    pub matched_gt: Option<GtRef>,
}

/// Assigns every detection to exactly one of correct, closed-set error or
/// open-set error.
///
/// Detections are processed in descending max-score order. A detection is
/// correct if an unmatched known truth of its predicted class overlaps it
/// with IoU ≥ 0.5 (the highest-IoU such truth is consumed). Otherwise it is
/// an open-set error if it overlaps a held-out truth with IoU ≥ 0.5. All
/// remaining detections, duplicates included, are closed-set errors.
pub fn categorise(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
) -> Vec<CategorisedDetection> {
    let by_image = index_by_image(ground_truth);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].max_score().total_cmp(&detections[a].max_score()));
    let mut taken = vec![false; ground_truth.len()];
    let mut out: Vec<Option<CategorisedDetection>> = vec![None; detections.len()];
    let empty = Vec::new();
    for idx in order {
        let det = &detections[idx];
        let cands = by_image.get(det.image_id.as_str()).unwrap_or(&empty);
        let pred = det.predicted_class();
        let best = |filter: &dyn Fn(usize) -> bool| -> Option<(usize, f64)> {
            let mut best: Option<(usize, f64)> = None;
            for &t in cands {
                if !filter(t) {
                    continue;
                }
                let v = iou(&det.bbox, &ground_truth[t].bbox);
                if v >= MATCH_IOU && best.is_none_or(|(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
            best
        };
        let (category, matched) = if let Some((t, _)) = best(&|t| {
            let g = &ground_truth[t];
            g.known && g.class_id == pred && !taken[t]
        }) {
            taken[t] = true;
            (Category::Correct, Some(t))
        } else if let Some((t, _)) = best(&|t| !ground_truth[t].known) {
            (Category::OpenSetError, Some(t))
        } else {
            (Category::ClosedSetError, best(&|t| ground_truth[t].known).map(|(t, _)| t))
        };
        out[idx] = Some(CategorisedDetection {
            index: idx,
            category,
            matched_gt: matched.map(|index| GtRef {
                index,
                known: ground_truth[index].known,
            }),
        });
    }
    out.into_iter().map(|c| c.expect("every detection visited")).collect()
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad threshold {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub tpr: f64,
    pub osr: f64,
    /// Correct detections with score strictly above the threshold.
    pub tp_count: usize,
    /// Open-set errors with score strictly above the threshold.
    pub ose_count: usize,
}

/// ROC curve of an uncertainty score, ordered by ascending threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub n_correct: usize,
    pub n_open_set: usize,
    pub points: Vec<RocPoint>,
}

fn count_above(sorted: &[f64], threshold: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s <= threshold)
}

/// Sweeps every distinct score (plus ±∞) as a threshold, counting scores
/// strictly above it.
pub fn roc_curve(correct_scores: &[f64], ose_scores: &[f64]) -> Result<RocCurve> {
    if correct_scores.is_empty() || ose_scores.is_empty() {
        return Err(Error::Data(
            "ROC analysis needs at least one correct detection and one open-set error".into(),
        ));
    }
    if correct_scores.iter().chain(ose_scores).any(|s| s.is_nan()) {
        return Err(Error::Data("NaN uncertainty score".into()));
    }
    let mut pos = correct_scores.to_vec();
    let mut neg = ose_scores.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let np = pos.len();
    let nn = neg.len();
    let point = |t: f64| {
        let tp = count_above(&pos, t);
        let fp = count_above(&neg, t);
        RocPoint {
            threshold: t,
            tpr: tp as f64 / np as f64,
            osr: fp as f64 / nn as f64,
            tp_count: tp,
            ose_count: fp,
        }
    };
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(point(f64::NEG_INFINITY));
    points.extend(thresholds.into_iter().filter(|t| t.is_finite()).map(point));
    points.push(point(f64::INFINITY));
    Ok(RocCurve {
        n_correct: np,
        n_open_set: nn,
        points,
    })
}

/// Trapezoidal area under (OSR, TPR), accumulated in integer counts so the
/// only rounding is the final division.
pub fn auroc(curve: &RocCurve) -> f64 {
    let mut twice_area: u128 = 0;
    for w in curve.points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let d_neg = a.ose_count.abs_diff(b.ose_count) as u128;
        twice_area += d_neg * (a.tp_count + b.tp_count) as u128;
    }
    twice_area as f64 / (2 * curve.n_correct as u128 * curve.n_open_set as u128) as f64
}

pub fn auroc_from_scores(positive: &[f64], negative: &[f64]) -> Result<f64> {
    Ok(auroc(&roc_curve(positive, negative)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub osr_level: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub tpr: f64,
    pub osr: f64,
    pub tp_count: usize,
    pub ose_count: usize,
}

/// For each level, the best TPR among curve points whose OSR does not exceed
/// it, with the absolute counts at that point.
pub fn tpr_at_osr(curve: &RocCurve, osr_levels: &[f64]) -> Result<Vec<OperatingPoint>> {
    osr_levels
        .iter()
        .map(|&level| {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "OSR level must be in (0, 1), got {level}"
                )));
            }
            let mut best: Option<&RocPoint> = None;
            // High thresholds first, so ties keep the lowest-OSR point.
            for p in curve.points.iter().rev() {
                if p.osr <= level && best.is_none_or(|b| p.tpr > b.tpr) {
                    best = Some(p);
                }
            }
            let p = best.expect("the +inf point has zero OSR");
            Ok(OperatingPoint {
                osr_level: level,
                threshold: p.threshold,
                tpr: p.tpr,
                osr: p.osr,
                tp_count: p.tp_count,
                ose_count: p.ose_count,
            })
        })
        .collect()
}

/// All-point interpolated average precision of a ranked list of hits.
pub fn average_precision(ranked_hits: &[bool], n_truths: usize) -> f64 {
    if n_truths == 0 || ranked_hits.is_empty() {
        return 0.0;
    }
    // Recall rises by 1/n_truths at every hit, so AP is the mean of the
    // enveloped precision at the hits.
    let mut tp = 0u64;
    let mut precision: Vec<(u64, u64)> = Vec::with_capacity(ranked_hits.len());
    for (i, &hit) in ranked_hits.iter().enumerate() {
        tp += hit as u64;
        precision.push((tp, i as u64 + 1));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        let (a, b) = (precision[i], precision[i + 1]);
        if (b.0 as u128) * (a.1 as u128) > (a.0 as u128) * (b.1 as u128) {
            precision[i] = b;
        }
    }
    let at_hits: Vec<(u64, u64)> = ranked_hits
        .iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| *p)
        .collect();
    exact_mean(&at_hits, n_truths as u64).unwrap_or_else(|| {
        at_hits.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / n_truths as f64
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Σ(n/d) / count as a correctly rounded double, when the exact fraction
/// stays small enough to represent.
fn exact_mean(terms: &[(u64, u64)], count: u64) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in terms {
        let (n, d) = (n as u128, d as u128);
        num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(count as u128)?;
    let g = gcd(num, den).max(1);
    (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Mean AP over evaluated classes, as a percentage.
    pub map: f64,
    pub iou_threshold: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Known classes without any ground-truth instance.
    pub excluded_classes: Vec<usize>,
}

/// Mean average precision over the known classes at the given IoU.
pub fn map_at_iou(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    n_classes: usize,
    iou_threshold: f64,
) -> Result<MapResult> {
    let mut per_class_ap = BTreeMap::new();
    let mut excluded_classes = Vec::new();
    for class in 0..n_classes {
        let truths: Vec<GroundTruthObject> = ground_truth
            .iter()
            .filter(|t| t.known && t.class_id == class)
            .cloned()
            .collect();
        if truths.is_empty() {
            excluded_classes.push(class);
            continue;
        }
        let by_image = index_by_image(&truths);
        let mut dets: Vec<&Detection> =
            detections.iter().filter(|d| d.predicted_class() == class).collect();
        dets.sort_by(|a, b| b.scores[class].total_cmp(&a.scores[class]));
        let mut taken = vec![false; truths.len()];
        let hits: Vec<bool> = dets
            .iter()
            .map(|d| {
                let cands = by_image.get(d.image_id.as_str());
                let best = cands.and_then(|c| {
                    crate::extraction::best_match(&d.bbox, &truths, c.iter().copied())
                });
                match best {
                    Some((t, v)) if v >= iou_threshold && !taken[t] => {
                        taken[t] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class_ap.insert(class, average_precision(&hits, truths.len()));
    }
    if per_class_ap.is_empty() {
        return Err(Error::Data("no known class has ground-truth instances".into()));
    }
    let map = 100.0 * per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(MapResult {
        map,
        iou_threshold,
        per_class_ap,
        excluded_classes,
    })
}

/// Single-pass baseline confidences; higher means keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    /// Maximum class score.
    pub score: f64,
    /// Negated entropy (nats) of the class-score distribution.
    pub entropy: f64,
}

pub fn baseline_uncertainties(det: &Detection) -> BaselineScores {
    BaselineScores {
        score: det.max_score(),
        entropy: -entropy(&det.scores),
    }
}

/// Entropy in nats of a score vector, normalised to sum to one first.
pub fn entropy(scores: &[f64]) -> f64 {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    -scores
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Maximum class log-likelihood under the fitted mixtures.
    Gmm,
    Score,
    Entropy,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gmm => "gmm",
            Method::Score => "score",
            Method::Entropy => "entropy",
        }
    }

    pub fn confidence(&self, s: &ScoredDetection) -> f64 {
        match self {
            Method::Gmm => s.uncertainty.max_log_likelihood,
            Method::Score => baseline_uncertainties(&s.detection).score,
            Method::Entropy => baseline_uncertainties(&s.detection).entropy,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Method::Gmm),
            "score" => Ok(Method::Score),
            "entropy" => Ok(Method::Entropy),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub correct: usize,
    pub closed_set_error: usize,
    pub open_set_error: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub auroc: f64,
    pub operating_points: Vec<OperatingPoint>,
    pub curve: RocCurve,
}

/// How often the predicted class disagrees with the most likely mixture,
/// split by whether the detection was correct.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MismatchStats {
    pub flagged_correct: usize,
    pub flagged_errors: usize,
    /// Fraction of flagged detections that are errors (closed- or open-set).
    pub error_fraction_of_flagged: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: CategoryCounts,
    pub methods: Vec<MethodReport>,
    pub map: Option<MapResult>,
    pub mismatch: MismatchStats,
}

/// Categorises the scored detections and computes every metric for each
/// requested method.
pub fn evaluate(
    scored: &[ScoredDetection],
    ground_truth: &[GroundTruthObject],
    n_classes: usize,
    methods: &[Method],
    osr_levels: &[f64],
) -> Result<EvalReport> {
    let dets: Vec<Detection> = scored.iter().map(|s| s.detection.clone()).collect();
    let cats = categorise(&dets, ground_truth);
    let mut counts = CategoryCounts {
        total: cats.len(),
        ..Default::default()
    };
    let mut mismatch = MismatchStats::default();
    for c in &cats {
        match c.category {
            Category::Correct => counts.correct += 1,
            Category::ClosedSetError => counts.closed_set_error += 1,
            Category::OpenSetError => counts.open_set_error += 1,
        }
        let s = &scored[c.index];
        if crate::extraction::flag_class_mismatch(&s.detection, &s.uncertainty) {
            if c.category == Category::Correct {
                mismatch.flagged_correct += 1;
            } else {
                mismatch.flagged_errors += 1;
            }
        }
    }
    let flagged = mismatch.flagged_correct + mismatch.flagged_errors;
    if flagged > 0 {
        mismatch.error_fraction_of_flagged = Some(mismatch.flagged_errors as f64 / flagged as f64);
    }
    let mut reports = Vec::with_capacity(methods.len());
    for &method in methods {
        let pick = |cat: Category| -> Vec<f64> {
            cats.iter()
                .filter(|c| c.category == cat)
                .map(|c| method.confidence(&scored[c.index]))
                .collect()
        };
        let curve = roc_curve(&pick(Category::Correct), &pick(Category::OpenSetError))?;
        reports.push(MethodReport {
            method,
            auroc: auroc(&curve),
            operating_points: tpr_at_osr(&curve, osr_levels)?,
            curve,
        });
    }
    let map = map_at_iou(&dets, ground_truth, n_classes, MATCH_IOU).ok();
    Ok(EvalReport {
        counts,
        methods: reports,
        map,
        mismatch,
    })
}

impl EvalReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// One row per method × metric.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("method,metric,value\n");
        for r in &self.methods {
            let name = r.method.name();
            out.push_str(&format!("{name},auroc,{}\n", r.auroc));
            for p in &r.operating_points {
                let pct = (p.osr_level * 100.0).round();
                out.push_str(&format!("{name},tpr_at_{pct}pct_osr,{}\n", p.tpr));
                out.push_str(&format!("{name},tp_count_at_{pct}pct_osr,{}\n", p.tp_count));
                out.push_str(&format!("{name},ose_count_at_{pct}pct_osr,{}\n", p.ose_count));
            }
        }
        if let Some(m) = &self.map {
            out.push_str(&format!("all,map50,{}\n", m.map));
        }
        out
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("method,threshold,tpr,osr,tp_count,ose_count\n");
        for r in &self.methods {
            for p in &r.curve.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.method.name(),
                    p.threshold,
                    p.tpr,
                    p.osr,
                    p.tp_count,
                    p.ose_count
                ));
            }
        }
        out
    }
}
