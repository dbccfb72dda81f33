use std::fmt::Write;
use std::path::PathBuf;

use openset_core::eval::EvalReport;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::io::{self, Input, Provenance, PROVENANCE_KEY};

#[derive(clap::Args)]
pub struct Args {
    /// report.json written by `openset eval`.
    #[arg(long)]
    report: PathBuf,
    /// Mixtures written by `openset fit`, for the component-selection table.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_json(input: &Input) -> Result<Value> {
    serde_json::from_str(&input.text).map_err(|e| CliError::Data(format!("{}: {e}", input.path)))
}

fn render(report: &EvalReport, selection: Option<&Value>) -> String {
    let mut s = String::from("# Open-set evaluation\n\n");
    let c = report.counts;
    let _ = writeln!(
        s,
        "{} detections: {} correct, {} closed-set errors, {} open-set errors.\n",
        c.total, c.correct, c.closed_set_error, c.open_set_error
    );
    if let Some(m) = &report.map {
        let _ = writeln!(s, "mAP@{}: {:.2}%\n", m.iou_threshold, m.map);
    }
    let levels: Vec<f64> = report
        .methods
        .first()
        .map(|r| r.operating_points.iter().map(|p| p.osr_level).collect())
        .unwrap_or_default();
    s.push_str("| method | AUROC |");
    for l in &levels {
        let _ = write!(s, " TPR@{}% OSR |", l * 100.0);
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(levels.len()));
    s.push('\n');
    for r in &report.methods {
        let _ = write!(s, "| {} | {:.4} |", r.method.name(), r.auroc);
        for p in &r.operating_points {
            let _ = write!(s, " {:.4} |", p.tpr);
        }
        s.push('\n');
    }
    let mm = report.mismatch;
    let _ = write!(
        s,
        "\nClass-mismatch flags: {} on correct detections, {} on errors",
        mm.flagged_correct, mm.flagged_errors
    );
    match mm.error_fraction_of_flagged {
        Some(f) => { let _ = writeln!(s, " ({:.1}% errors).", f * 100.0); }
        None => s.push_str(".\n"),
    }
    if let Some(sel) = selection {
        let _ = writeln!(s, "\n## Component selection\n\nSelected M = {}.\n", sel["selected"]);
        if let Some(table) = sel["validation_auroc"].as_object() {
            s.push_str("| M | validation AUROC |\n|---|---|\n");
            for (m, auc) in table {
                let _ = writeln!(s, "| {m} | {:.4} |", auc.as_f64().unwrap_or(f64::NAN));
            }
        }
    }
    s
}

pub fn run(args: Args) -> Result<()> {
    let mut prov = Provenance::new("report");
    let report_in = Input::read(&args.report)?;
    prov.record("report", &report_in);
    let doc = parse_json(&report_in)?;
    let report: EvalReport = serde_json::from_value(doc["report"].clone())
        .map_err(|e| CliError::Data(format!("{}: not an eval report: {e}", report_in.path)))?;
    let selection = match &args.model {
        Some(path) => {
            let input = Input::read(path)?;
            prov.record("model", &input);
            let model = parse_json(&input)?;
            Some(model["meta"]["selection"].clone()).filter(|v| !v.is_null())
        }
        None => None,
    };
    let header = json!({ PROVENANCE_KEY: prov.to_value(&json!({})) });
    let text = format!("<!-- {header} -->\n{}", render(&report, selection.as_ref()));
    match &args.out {
        Some(path) => io::write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
