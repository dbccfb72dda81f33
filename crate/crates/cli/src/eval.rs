use std::path::PathBuf;

use openset_core::dataset::AnnotationSet;
use openset_core::eval::{evaluate, Method, DEFAULT_OSR_LEVELS};
use openset_core::interchange::{ground_truth_from_coco, ScoredFile};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::io::{self, Input, Provenance, PROVENANCE_KEY};

#[derive(clap::Args)]
pub struct Args {
    /// Output of `openset score`.
    #[arg(long)]
    scored: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Comma-separated subset of gmm, score, entropy.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Open-set error rates at which TPR is reported.
    #[arg(long, value_delimiter = ',')]
    osr_levels: Option<Vec<f64>>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Receives report.json, metrics.csv and roc.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Params {
    methods: Vec<Method>,
    osr_levels: Vec<f64>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            methods: vec![Method::Gmm, Method::Score, Method::Entropy],
            osr_levels: DEFAULT_OSR_LEVELS.to_vec(),
        }
    }
}

pub fn run(args: Args) -> Result<()> {
    let mut prov = Provenance::new("eval");
    let mut p: Params = io::load_config(args.config.as_deref(), &mut prov)?;
    if let Some(m) = args.methods {
        p.methods = m;
    }
    if let Some(l) = args.osr_levels {
        p.osr_levels = l;
    }
    if p.methods.is_empty() {
        return Err(CliError::Usage("no methods selected".into()));
    }
    let scored_in = Input::read(&args.scored)?;
    let gt_in = Input::read(&args.ground_truth)?;
    prov.record("scored", &scored_in);
    prov.record("ground_truth", &gt_in);
    let scored = scored_in.parse(ScoredFile::from_json_str)?;
    let gt = gt_in.parse(AnnotationSet::from_json_str)?;
    let truths = ground_truth_from_coco(&gt, &scored.classes)?;
    let report = evaluate(&scored.scored(), &truths, scored.classes.len(), &p.methods, &p.osr_levels)?;

    let provenance = prov.to_value(&p);
    let doc = json!({ PROVENANCE_KEY: provenance, "report": report });
    io::write(&args.out_dir.join("report.json"), &io::to_pretty(&doc)?)?;
    io::write(&args.out_dir.join("metrics.csv"), &io::csv_with_header(&provenance, &report.metrics_csv()))?;
    io::write(&args.out_dir.join("roc.csv"), &io::csv_with_header(&provenance, &report.roc_csv()))?;

    let c = report.counts;
    println!(
        "{} detections: {} correct, {} closed-set errors, {} open-set errors",
        c.total, c.correct, c.closed_set_error, c.open_set_error
    );
    for r in &report.methods {
        println!("{:>8}  AUROC {:.4}", r.method.name(), r.auroc);
    }
    Ok(())
}
