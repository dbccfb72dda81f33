use std::path::PathBuf;

use openset_core::extraction::score_detections;
use openset_core::gmm::GmmSet;
use openset_core::interchange::{DetectionFile, ScoredFile};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{self, Input, Provenance, PROVENANCE_KEY};

#[derive(clap::Args)]
pub struct Args {
    /// Mixtures written by `openset fit`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Accept detections whose best class log-likelihood is at least this.
    #[arg(long, allow_hyphen_values = true)]
    theta_ose: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Params {
    theta_ose: Option<f64>,
}

pub fn run(args: Args) -> Result<()> {
    let mut prov = Provenance::new("score");
    let mut p: Params = io::load_config(args.config.as_deref(), &mut prov)?;
    p.theta_ose = args.theta_ose.or(p.theta_ose);
    if p.theta_ose.is_some_and(f64::is_nan) {
        return Err(CliError::Usage("theta_ose is NaN".into()));
    }
    let model_in = Input::read(&args.model)?;
    let det_in = Input::read(&args.detections)?;
    prov.record("model", &model_in);
    prov.record("detections", &det_in);
    let model = model_in.parse(GmmSet::from_json_str)?;
    let dets = det_in.parse(DetectionFile::from_json_str)?;
    if model.dim() != dets.classes.len() {
        return Err(CliError::Data(format!(
            "model covers {} classes but the detections have {}",
            model.dim(),
            dets.classes.len()
        )));
    }
    if let Some(names) = model.meta.extra.get("classes") {
        if *names != serde_json::json!(dets.classes) {
            return Err(CliError::Data("model and detections disagree on class names".into()));
        }
    }
    let scored = score_detections(&model, &dets.detections)?;
    let mut file = ScoredFile::new(dets.normalisation, dets.classes, scored, p.theta_ose);
    file.meta.insert(PROVENANCE_KEY.into(), prov.to_value(&p));
    io::write(&args.out, &serde_json::to_string(&file).map_err(openset_core::Error::from)?)?;

    let flagged = file.detections.iter().filter(|r| r.class_mismatch).count();
    println!("scored {} detections, {flagged} with a class mismatch", file.detections.len());
    if p.theta_ose.is_some() {
        let accepted = file.detections.iter().filter(|r| r.accepted == Some(true)).count();
        println!("accepted {accepted}, rejected {}", file.detections.len() - accepted);
    }
    Ok(())
}
