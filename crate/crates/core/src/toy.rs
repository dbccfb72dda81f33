//! Synthetic open-set scenario: multi-modal Gaussian blobs in an input
//! feature space, some of whose classes are withheld from training.
//!
//! Every sample becomes its own "image" with a unit box, so the usual
//! detection tooling (training-set construction, categorisation, mAP) runs
//! unchanged on toy-head output.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, AnnotationSet, CategoryInfo, ImageInfo};
use crate::eval::{evaluate, BBox, EvalReport, Method, DEFAULT_OSR_LEVELS, MATCH_IOU};
use crate::extraction::{
    build_training_logit_sets, score_detections, validation_pairs, Detection, GroundTruthObject,
    Normalisation, DEFAULT_THETA_CONF, DEFAULT_THETA_IOU,
};
use crate::gmm::{select_components, ComponentSelection, EmConfig};
use crate::interchange::DetectionFile;
use crate::trainer::{train_toy_head, ToyHeadConfig, TrainOutput};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyScenario {
    pub n_known: usize,
    pub n_unknown: usize,
    pub input_dim: usize,
    /// Sub-clusters per class.
    pub modes_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of class centres around the origin.
    pub class_spread: f64,
    /// Standard deviation of held-out class centres around the origin.
    pub unknown_spread: f64,
    /// Standard deviation of sub-cluster centres around their class centre.
    pub mode_spread: f64,
    /// Within-mode noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyScenario {
    fn default() -> Self {
        ToyScenario {
            n_known: 10,
            n_unknown: 3,
            input_dim: 32,
            modes_per_class: 2,
            train_per_class: 200,
            val_per_class: 60,
            test_per_class: 60,
            class_spread: 1.0,
            unknown_spread: 3.0,
            mode_spread: 0.8,
            noise: 1.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub train: Vec<(Vec<f64>, usize)>,
    pub val: Vec<(Vec<f64>, usize)>,
    pub test_known: Vec<(Vec<f64>, usize)>,
    /// Labels index the held-out classes.
    pub test_unknown: Vec<(Vec<f64>, usize)>,
}

impl ToyScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_known < 2 || self.n_unknown == 0 {
            return Err(Error::InvalidArgument(
                "need at least two known and one held-out class".into(),
            ));
        }
        if self.input_dim == 0 || self.modes_per_class == 0 || self.train_per_class == 0 {
            return Err(Error::InvalidArgument("scenario sizes must be positive".into()));
        }
        for v in [self.class_spread, self.unknown_spread, self.mode_spread, self.noise] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument("spreads must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<ToyData> {
        self.validate()?;
        let mut rng = Rng::seed_from_u64(self.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let gauss = |scale: f64, rng: &mut Rng| -> Vec<f64> {
            (0..self.input_dim).map(|_| scale * unit.sample(rng)).collect()
        };
        let n_classes = self.n_known + self.n_unknown;
        let modes: Vec<Vec<Vec<f64>>> = (0..n_classes)
            .map(|class| {
                let spread = if class < self.n_known {
                    self.class_spread
                } else {
                    self.unknown_spread
                };
                let c = gauss(spread, &mut rng);
                (0..self.modes_per_class)
                    .map(|_| {
                        let off = gauss(self.mode_spread, &mut rng);
                        c.iter().zip(off).map(|(a, b)| a + b).collect()
                    })
                    .collect()
            })
            .collect();
        let draw = |class: usize, count: usize, rng: &mut Rng| -> Vec<(Vec<f64>, usize)> {
            (0..count)
                .map(|i| {
                    let m = &modes[class][i % self.modes_per_class];
                    let x = gauss(self.noise, rng).into_iter().zip(m).map(|(a, b)| a + b).collect();
                    (x, class)
                })
                .collect()
        };
        let mut data = ToyData {
            train: Vec::new(),
            val: Vec::new(),
            test_known: Vec::new(),
            test_unknown: Vec::new(),
        };
        for c in 0..self.n_known {
            data.train.extend(draw(c, self.train_per_class, &mut rng));
            data.val.extend(draw(c, self.val_per_class, &mut rng));
            data.test_known.extend(draw(c, self.test_per_class, &mut rng));
        }
        for u in 0..self.n_unknown {
            let samples = draw(self.n_known + u, self.test_per_class, &mut rng);
            data.test_unknown
                .extend(samples.into_iter().map(|(x, _)| (x, u)));
        }
        Ok(data)
    }

    pub fn known_names(&self) -> Vec<String> {
        (0..self.n_known).map(|i| format!("class_{i}")).collect()
    }

    pub fn unknown_names(&self) -> Vec<String> {
        (0..self.n_unknown).map(|i| format!("unknown_{i}")).collect()
    }
}

/// Logits of every toy sample after training, as detection splits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySplit {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub training: TrainOutput,
    pub train: ToySplit,
    pub val: ToySplit,
    pub test: ToySplit,
}

fn unit_box() -> BBox {
    BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box")
}

fn to_split(
    logits: &[Vec<f64>],
    labels: impl IntoIterator<Item = (usize, bool)>,
) -> ToySplit {
    let mut split = ToySplit {
        detections: Vec::with_capacity(logits.len()),
        ground_truth: Vec::with_capacity(logits.len()),
    };
    for (i, (l, (class_id, known))) in logits.iter().zip(labels).enumerate() {
        let image_id = (i + 1).to_string();
        split.detections.push(Detection::from_logits(
            image_id.clone(),
            unit_box(),
            l.clone(),
            Normalisation::Softmax,
        ));
        split.ground_truth.push(GroundTruthObject {
            image_id,
            bbox: unit_box(),
            class_id,
            known,
        });
    }
    split
}

/// Trains the head on the known training samples and turns the logits of
/// every split into detections with matching ground truth.
pub fn train_and_export(data: &ToyData, head: &ToyHeadConfig) -> Result<ToyRun> {
    let probe: Vec<Vec<f64>> = data
        .train
        .iter()
        .chain(&data.val)
        .chain(&data.test_known)
        .chain(&data.test_unknown)
        .map(|(x, _)| x.clone())
        .collect();
    let training = train_toy_head(&data.train, &probe, head)?;
    let (nt, nv, nk) = (data.train.len(), data.val.len(), data.test_known.len());
    let logits = &training.probe_logits;
    let train = to_split(&logits[..nt], data.train.iter().map(|(_, y)| (*y, true)));
    let val = to_split(&logits[nt..nt + nv], data.val.iter().map(|(_, y)| (*y, true)));
    let test = to_split(
        &logits[nt + nv..],
        data.test_known
            .iter()
            .map(|(_, y)| (*y, true))
            .chain(data.test_unknown.iter().map(|(_, u)| (*u, false))),
    );
    debug_assert_eq!(test.detections.len(), nk + data.test_unknown.len());
    Ok(ToyRun {
        training,
        train,
        val,
        test,
    })
}

/// Thresholds and search space for the mixture stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub theta_iou: f64,
    pub theta_conf: f64,
    pub candidates: Vec<usize>,
    pub em: EmConfig,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            theta_iou: DEFAULT_THETA_IOU,
            theta_conf: DEFAULT_THETA_CONF,
            candidates: (1..=6).collect(),
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub selection: ComponentSelection,
    pub report: EvalReport,
    /// Test-set AUROC (correct vs open-set error) of the max log-likelihood
    /// for every candidate component count.
    pub test_auroc_by_count: BTreeMap<usize, f64>,
}

/// Fits mixtures on the training split, selects the component count on the
/// validation split and evaluates every method on the test split.
pub fn fit_and_evaluate(run: &ToyRun, settings: &FitSettings, n_classes: usize) -> Result<PipelineResult> {
    let sets = build_training_logit_sets(
        &run.train.detections,
        &run.train.ground_truth,
        n_classes,
        settings.theta_iou,
        settings.theta_conf,
    )?;
    if let Some(&class_id) = sets.empty_classes.first() {
        return Err(Error::EmptyClass { class_id });
    }
    let (correct, wrong) = validation_pairs(&run.val.detections, &run.val.ground_truth, MATCH_IOU);
    let selection = select_components(&settings.candidates, &sets.sets, &correct, &wrong, &settings.em)?;

    let categories = crate::eval::categorise(&run.test.detections, &run.test.ground_truth);
    let mut test_auroc_by_count = BTreeMap::new();
    for &m in &settings.candidates {
        let model = if m == selection.selected {
            selection.model.clone()
        } else {
            match crate::gmm::fit_all(&sets.sets, m, &settings.em) {
                Ok(model) => model,
                Err(_) => continue,
            }
        };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for c in &categories {
            let v = model.max_log_likelihood(&run.test.detections[c.index].logits)?;
            match c.category {
                crate::eval::Category::Correct => pos.push(v),
                crate::eval::Category::OpenSetError => neg.push(v),
                crate::eval::Category::ClosedSetError => {}
            }
        }
        test_auroc_by_count.insert(m, crate::eval::auroc_from_scores(&pos, &neg)?);
    }

    let scored = score_detections(&selection.model, &run.test.detections)?;
    let report = evaluate(
        &scored,
        &run.test.ground_truth,
        n_classes,
        &[Method::Gmm, Method::Score, Method::Entropy],
        &DEFAULT_OSR_LEVELS,
    )?;
    Ok(PipelineResult {
        selection,
        report,
        test_auroc_by_count,
    })
}

/// Converts a toy split into the on-disk formats: a detection file and a
/// COCO ground-truth file whose image ids match the detections.
pub fn split_files(split: &ToySplit, scenario: &ToyScenario) -> (DetectionFile, AnnotationSet) {
    let known = scenario.known_names();
    let unknown = scenario.unknown_names();
    let categories: Vec<CategoryInfo> = known
        .iter()
        .chain(&unknown)
        .enumerate()
        .map(|(i, name)| CategoryInfo {
            id: i as u64 + 1,
            name: name.clone(),
            extra: BTreeMap::new(),
        })
        .collect();
    let mut gt = AnnotationSet {
        categories,
        ..Default::default()
    };
    for (i, t) in split.ground_truth.iter().enumerate() {
        let image_id: u64 = t.image_id.parse().expect("numeric toy image id");
        gt.images.push(ImageInfo {
            id: image_id,
            file_name: format!("{image_id}.png"),
            width: 1,
            height: 1,
            extra: BTreeMap::new(),
        });
        let category_id = if t.known {
            t.class_id as u64 + 1
        } else {
            (scenario.n_known + t.class_id) as u64 + 1
        };
        gt.annotations.push(Annotation {
            id: i as u64 + 1,
            image_id,
            category_id,
            bbox: [0.0, 0.0, 1.0, 1.0],
            extra: BTreeMap::new(),
        });
    }
    let dets = DetectionFile::new(Normalisation::Softmax, known, split.detections.clone());
    (dets, gt)
}
