use std::path::PathBuf;

use openset_core::dataset::AnnotationSet;
use openset_core::eval::MATCH_IOU;
use openset_core::extraction::{build_training_logit_sets, validation_pairs};
use openset_core::gmm::{fit_all, select_components};
use openset_core::interchange::{ground_truth_from_coco, DetectionFile};
use openset_core::toy::FitSettings;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::io::{self, Input, Provenance, PROVENANCE_KEY};

#[derive(clap::Args)]
pub struct Args {
    /// Training detections (interchange format).
    #[arg(long)]
    detections: PathBuf,
    /// COCO ground truth for the training detections.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Validation detections; required when more than one component count
    /// is tried.
    #[arg(long, requires = "val_ground_truth")]
    val_detections: Option<PathBuf>,
    #[arg(long, requires = "val_detections")]
    val_ground_truth: Option<PathBuf>,
    /// Minimum IoU between a detection and its ground truth.
    #[arg(long)]
    theta_iou: Option<f64>,
    /// Minimum score for the ground-truth class.
    #[arg(long)]
    theta_conf: Option<f64>,
    /// Candidate component counts, e.g. `1-6` or `2,4,6`.
    #[arg(long, value_parser = parse_counts)]
    components: Option<Counts>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the fitted mixtures.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Counts(Vec<usize>);

fn parse_counts(s: &str) -> Result<Counts, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty range {part}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(Counts(out))
}

fn load_split(det_path: &PathBuf, gt_path: &PathBuf, role: &str, prov: &mut Provenance) -> Result<(DetectionFile, AnnotationSet)> {
    let det = Input::read(det_path)?;
    let gt = Input::read(gt_path)?;
    prov.record(&format!("{role}_detections"), &det);
    prov.record(&format!("{role}_ground_truth"), &gt);
    Ok((det.parse(DetectionFile::from_json_str)?, gt.parse(AnnotationSet::from_json_str)?))
}

pub fn run(args: Args) -> Result<()> {
    let mut prov = Provenance::new("fit");
    let mut p: FitSettings = io::load_config(args.config.as_deref(), &mut prov)?;
    p.theta_iou = args.theta_iou.unwrap_or(p.theta_iou);
    p.theta_conf = args.theta_conf.unwrap_or(p.theta_conf);
    if let Some(Counts(c)) = args.components {
        p.candidates = c;
    }
    p.em.seed = args.seed.unwrap_or(p.em.seed);
    p.em.max_iterations = args.max_iterations.unwrap_or(p.em.max_iterations);
    p.em.n_restarts = args.restarts.unwrap_or(p.em.n_restarts);
    for (name, v) in [("theta_iou", p.theta_iou), ("theta_conf", p.theta_conf)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Usage(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if p.candidates.is_empty() || p.candidates.contains(&0) {
        return Err(CliError::Usage("component counts must be a nonempty list of positive integers".into()));
    }
    p.candidates.sort_unstable();
    p.candidates.dedup();
    p.em.validate()?;
    if p.candidates.len() > 1 && args.val_detections.is_none() {
        return Err(CliError::Usage(
            "choosing between several component counts needs --val-detections and --val-ground-truth".into(),
        ));
    }

    let (train, train_gt) = load_split(&args.detections, &args.ground_truth, "train", &mut prov)?;
    let classes = train.classes.clone();
    let truths = ground_truth_from_coco(&train_gt, &classes)?;
    let sets = build_training_logit_sets(&train.detections, &truths, classes.len(), p.theta_iou, p.theta_conf)?;
    if !sets.empty_classes.is_empty() {
        let names: Vec<String> = sets
            .empty_classes
            .iter()
            .map(|&c| format!("{c} ({})", classes[c]))
            .collect();
        return Err(CliError::Data(format!(
            "no training logits pass θ_iou = {} and θ_conf = {} for class {}",
            p.theta_iou,
            p.theta_conf,
            names.join(", ")
        )));
    }

    let (mut model, selection) = match (&args.val_detections, &args.val_ground_truth) {
        (Some(vd), Some(vg)) => {
            let (val, val_gt) = load_split(vd, vg, "val", &mut prov)?;
            if val.classes != classes {
                return Err(CliError::Data("validation detections use a different class list".into()));
            }
            let val_truths = ground_truth_from_coco(&val_gt, &classes)?;
            let (correct, wrong) = validation_pairs(&val.detections, &val_truths, MATCH_IOU);
            let s = select_components(&p.candidates, &sets.sets, &correct, &wrong, &p.em)?;
            let summary = json!({
                "candidates": p.candidates,
                "selected": s.selected,
                "validation_auroc": s.per_count_auroc,
                "skipped": s.skipped,
                "validation_correct": correct.len(),
                "validation_misclassified": wrong.len(),
            });
            (s.model, summary)
        }
        _ => {
            let m = p.candidates[0];
            let model = fit_all(&sets.sets, m, &p.em)?;
            (model, json!({ "candidates": [m], "selected": m }))
        }
    };

    model.meta.theta_iou = Some(p.theta_iou);
    model.meta.theta_conf = Some(p.theta_conf);
    model.meta.extra.insert("classes".into(), json!(classes));
    model.meta.extra.insert("training_samples".into(), json!(sets.sets.values().map(Vec::len).collect::<Vec<_>>()));
    model.meta.extra.insert("selection".into(), selection.clone());
    model.meta.extra.insert(PROVENANCE_KEY.into(), prov.to_value(&p));
    io::write(&args.out, &model.to_json_string()?)?;

    println!("selected {} components", selection["selected"]);
    if let Some(table) = selection["validation_auroc"].as_object() {
        for (m, auc) in table {
            println!("  M = {m}: validation AUROC {auc}");
        }
    }
    Ok(())
}
