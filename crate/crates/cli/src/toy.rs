use std::path::PathBuf;

use openset_core::toy::{split_files, train_and_export, ToyScenario};
use openset_core::trainer::ToyHeadConfig;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{self, Provenance, PROVENANCE_KEY};

#[derive(clap::Args)]
pub struct Args {
    /// Weight of the anchor term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Magnitude of the class-centre coordinates.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Seeds both the synthetic data and the weight initialisation.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON with optional `scenario` and `head` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// The head's input width and class count always follow the scenario.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Params {
    seed: u64,
    scenario: ToyScenario,
    head: ToyHeadConfig,
}

pub fn run(args: Args) -> Result<()> {
    let mut prov = Provenance::new("train-toy");
    let mut p: Params = io::load_config(args.config.as_deref(), &mut prov)?;
    p.seed = args.seed.unwrap_or(p.seed);
    p.scenario.seed = p.seed;
    p.head.seed = p.seed;
    p.head.n_classes = p.scenario.n_known;
    p.head.input_dim = p.scenario.input_dim;
    p.head.lambda = args.lambda.unwrap_or(p.head.lambda);
    p.head.alpha = args.alpha.unwrap_or(p.head.alpha);
    p.head.epochs = args.epochs.unwrap_or(p.head.epochs);
    p.head.learning_rate = args.learning_rate.unwrap_or(p.head.learning_rate);
    p.scenario.validate()?;
    p.head.validate()?;

    let data = p.scenario.generate()?;
    let run = train_and_export(&data, &p.head)?;
    let provenance = prov.to_value(&p);
    for (name, split) in [("train", &run.train), ("val", &run.val), ("test", &run.test)] {
        let (mut dets, mut gt) = split_files(split, &p.scenario);
        dets.meta.insert(PROVENANCE_KEY.into(), provenance.clone());
        gt.extra.insert(PROVENANCE_KEY.into(), provenance.clone());
        io::write(&args.out_dir.join(format!("{name}.detections.json")), &dets.to_json_string()?)?;
        io::write(&args.out_dir.join(format!("{name}.gt.json")), &gt.to_json_string()?)?;
    }
    let mut csv = String::from("epoch,combined_loss,anchor_loss,accuracy\n");
    for e in &run.training.history {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.mean_combined_loss, e.mean_anchor_loss, e.accuracy
        ));
    }
    io::write(&args.out_dir.join("loss.csv"), &io::csv_with_header(&provenance, &csv))?;

    let (first, last) = (&run.training.history[0], run.training.history.last().unwrap());
    println!(
        "anchor loss {:.3} -> {:.3}, training accuracy {:.3}",
        first.mean_anchor_loss, last.mean_anchor_loss, last.accuracy
    );
    Ok(())
}
