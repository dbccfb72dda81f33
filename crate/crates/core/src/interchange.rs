//! JSON formats exchanged between the tools.
//!
//! Detections:
//!
//! ```json
//! {"version": 1, "normalisation": "softmax", "classes": ["cat", "dog"],
//!  "detections": [{"image_id": "12", "bbox": [x1, y1, x2, y2],
//!                  "logits": [..], "scores": [..]}]}
//! ```
//!
//! Scored detections add the per-class log-likelihoods to every record.
//! Ground truth is read from COCO annotation files; a category is known when
//! its name appears in the detection file's class list.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::AnnotationSet;
use crate::eval::BBox;
use crate::extraction::{
    flag_class_mismatch, Detection, GroundTruthObject, Normalisation, ScoredDetection,
};
use crate::{Error, Result};

pub const DETECTION_FORMAT_VERSION: u32 = 1;

/// Tolerance for recorded scores against re-normalised logits.
pub const SCORE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub version: u32,
    pub normalisation: Normalisation,
    pub classes: Vec<String>,
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl DetectionFile {
    pub fn new(normalisation: Normalisation, classes: Vec<String>, detections: Vec<Detection>) -> Self {
        DetectionFile {
            version: DETECTION_FORMAT_VERSION,
            normalisation,
            classes,
            detections,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DETECTION_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported detection format version {}",
                self.version
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Data("detection file lists no classes".into()));
        }
        for d in &self.detections {
            d.validate(self.classes.len(), self.normalisation, SCORE_TOLERANCE)?;
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: DetectionFile = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    #[serde(flatten)]
    pub scored: ScoredDetection,
    /// Predicted class differs from the most likely mixture.
    pub class_mismatch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFile {
    pub version: u32,
    pub normalisation: Normalisation,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_ose: Option<f64>,
    pub detections: Vec<ScoredRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl ScoredFile {
    pub fn new(
        normalisation: Normalisation,
        classes: Vec<String>,
        scored: Vec<ScoredDetection>,
        theta_ose: Option<f64>,
    ) -> Self {
        let detections = scored
            .into_iter()
            .map(|s| ScoredRecord {
                class_mismatch: flag_class_mismatch(&s.detection, &s.uncertainty),
                accepted: theta_ose.map(|t| s.uncertainty.max_log_likelihood >= t),
                scored: s,
            })
            .collect();
        ScoredFile {
            version: DETECTION_FORMAT_VERSION,
            normalisation,
            classes,
            theta_ose,
            detections,
            meta: BTreeMap::new(),
        }
    }

    pub fn scored(&self) -> Vec<ScoredDetection> {
        self.detections.iter().map(|r| r.scored.clone()).collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: ScoredFile = serde_json::from_str(s)?;
        if f.version != DETECTION_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported scored file version {}", f.version)));
        }
        for r in &f.detections {
            r.scored
                .detection
                .validate(f.classes.len(), f.normalisation, SCORE_TOLERANCE)?;
            if r.scored.uncertainty.log_likelihoods.len() != f.classes.len() {
                return Err(Error::Data("uncertainty vector length differs from class count".into()));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Converts COCO annotations into ground-truth objects in the detector's
/// class space. Categories named in `known_classes` map to that index; all
/// others are held-out classes, indexed in ascending category-id order.
///
/// Detection `image_id`s are matched against the COCO image id rendered as a
/// string; annotations are emitted with that key.
pub fn ground_truth_from_coco(
    set: &AnnotationSet,
    known_classes: &[String],
) -> Result<Vec<GroundTruthObject>> {
    let known_index: HashMap<&str, usize> = known_classes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut unknown_index = HashMap::new();
    for c in set.sorted_categories() {
        if !known_index.contains_key(c.name.as_str()) {
            let next = unknown_index.len();
            unknown_index.insert(c.id, next);
        }
    }
    let names: HashMap<u64, &str> = set.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    set.annotations
        .iter()
        .map(|a| {
            let [x, y, w, h] = a.bbox;
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::Data(format!("annotation {}: {e}", a.id)))?;
            let name = names
                .get(&a.category_id)
                .ok_or_else(|| Error::Data(format!("annotation {} has unknown category", a.id)))?;
            let (class_id, known) = match known_index.get(name) {
                Some(&i) => (i, true),
                None => (unknown_index[&a.category_id], false),
            };
            Ok(GroundTruthObject {
                image_id: a.image_id.to_string(),
                bbox,
                class_id,
                known,
            })
        })
        .collect()
}
