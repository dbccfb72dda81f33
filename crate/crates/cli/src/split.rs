use std::path::{Path, PathBuf};

use openset_core::dataset::{
    annotation_set_from_voc, open_set_split, parse_voc_xml, AnnotationSet, KnownSpec,
};
use openset_core::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::io::{self, Input, Provenance, PROVENANCE_KEY};

#[derive(clap::Args)]
pub struct Args {
    /// COCO-format training annotations.
    #[arg(long, conflicts_with = "voc_dir", required_unless_present = "voc_dir")]
    annotations: Option<PathBuf>,
    /// Directory of Pascal VOC XML annotations, used instead of --annotations.
    #[arg(long)]
    voc_dir: Option<PathBuf>,
    /// COCO-format test annotations; copied through unfiltered.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Keep the first N classes (by category id) as known.
    #[arg(long, conflicts_with = "known")]
    known_prefix: Option<usize>,
    /// Comma-separated names of the known classes.
    #[arg(long, value_delimiter = ',')]
    known: Option<Vec<String>>,
    /// Fraction of retained training images moved to a validation subset.
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Params {
    known_prefix: Option<usize>,
    known: Option<Vec<String>>,
    val_fraction: Option<f64>,
    seed: u64,
}

/// Reads every `*.xml` in `dir` in file-name order. The recorded hash covers
/// the names and contents of all files.
fn read_voc(dir: &Path, prov: &mut Provenance) -> Result<AnnotationSet> {
    let err = |e: std::io::Error| CliError::Data(format!("{}: {e}", dir.display()));
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(err)?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "xml"));
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .xml files", dir.display())));
    }
    let mut listing = String::new();
    let mut records = Vec::with_capacity(paths.len());
    for p in &paths {
        let input = Input::read(p)?;
        let name = p.file_name().unwrap().to_string_lossy();
        listing.push_str(&format!("{} {name}\n", input.sha256));
        records.push(input.parse(|s| parse_voc_xml(s, &name))?);
    }
    prov.record_value(
        "annotations",
        json!({ "path": dir.display().to_string(), "files": paths.len(), "sha256": sha256_hex(listing.as_bytes()) }),
    );
    Ok(annotation_set_from_voc(&records))
}

pub fn run(args: Args) -> Result<()> {
    let mut prov = Provenance::new("split-dataset");
    let mut p: Params = io::load_config(args.config.as_deref(), &mut prov)?;
    if let Some(n) = args.known_prefix {
        (p.known_prefix, p.known) = (Some(n), None);
    }
    if let Some(k) = args.known {
        (p.known_prefix, p.known) = (None, Some(k));
    }
    p.val_fraction = args.val_fraction.or(p.val_fraction);
    p.seed = args.seed.unwrap_or(p.seed);
    let spec = match (&p.known_prefix, &p.known) {
        (Some(n), None) => KnownSpec::Prefix(*n),
        (None, Some(k)) => KnownSpec::Explicit(k.clone()),
        (None, None) => return Err(CliError::Usage("give --known-prefix or --known".into())),
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("config sets both known_prefix and known".into()))
        }
    };

    let train = match (&args.annotations, &args.voc_dir) {
        (Some(path), _) => {
            let input = Input::read(path)?;
            prov.record("annotations", &input);
            input.parse(AnnotationSet::from_json_str)?
        }
        (None, Some(dir)) => read_voc(dir, &mut prov)?,
        (None, None) => unreachable!("clap requires one of the inputs"),
    };
    let test = match &args.test {
        Some(path) => {
            let input = Input::read(path)?;
            prov.record("test", &input);
            Some(input.parse(AnnotationSet::from_json_str)?)
        }
        None => None,
    };

    let mut split = open_set_split(&train, test.as_ref(), &spec, p.val_fraction, p.seed)?;
    let provenance = prov.to_value(&p);
    for c in split.manifest.ratio_report.flagged() {
        eprintln!(
            "warning: class {:?} keeps {} of {} instances, below the {:.3} floor",
            c.name, c.retained, c.original, split.manifest.ratio_report.floor
        );
    }

    let out = &args.out_dir;
    let mut subsets = vec![("train", Some(split.train)), ("val", split.val), ("test", split.test)];
    for (name, set) in subsets.iter_mut() {
        if let Some(set) = set {
            set.extra.insert(PROVENANCE_KEY.into(), provenance.clone());
            io::write(&out.join(format!("{name}.json")), &set.to_json_string()?)?;
        }
    }
    split.manifest.extra.insert(PROVENANCE_KEY.into(), provenance);
    io::write(&out.join("manifest.json"), &io::to_pretty(&split.manifest)?)?;
    println!(
        "known {} / unknown {}: {}",
        split.manifest.known.len(),
        split.manifest.unknown.len(),
        split.manifest.unknown.join(", ")
    );
    for (name, c) in &split.manifest.counts {
        println!("{name}: {} of {} images kept", c.images_out, c.images_in);
    }
    Ok(())
}
