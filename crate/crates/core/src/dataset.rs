//! Turning a closed-set detection dataset into an open-set benchmark.
//!
//! The labelled classes are split into known and held-out classes. Every
//! image that contains a held-out object is dropped from the training,
//! validation and closed-set test subsets, while the original test subset is
//! kept as-is for open-set evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

/// Pascal VOC class names in their canonical order.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// COCO `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// A COCO-format annotation file. Fields this crate does not interpret are
/// carried through untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<CategoryInfo>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl AnnotationSet {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let set: AnnotationSet = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Every annotation must reference an existing image and category, and
    /// ids must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut images = HashSet::new();
        for im in &self.images {
            if !images.insert(im.id) {
                return Err(Error::Data(format!("duplicate image id {}", im.id)));
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Data(format!("duplicate category id {}", c.id)));
            }
        }
        for a in &self.annotations {
            if !images.contains(&a.image_id) {
                return Err(Error::Data(format!(
                    "annotation {} references missing image {}",
                    a.id, a.image_id
                )));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Data(format!(
                    "annotation {} references missing category {}",
                    a.id, a.category_id
                )));
            }
        }
        Ok(())
    }

    /// Category names in dataset order (ascending category id).
    pub fn class_names(&self) -> Vec<String> {
        self.sorted_categories().into_iter().map(|c| c.name).collect()
    }

    pub fn sorted_categories(&self) -> Vec<CategoryInfo> {
        let mut cats = self.categories.clone();
        cats.sort_by_key(|c| c.id);
        cats
    }

    /// Instance count per category id.
    pub fn instance_counts(&self) -> BTreeMap<u64, usize> {
        let mut counts: BTreeMap<u64, usize> =
            self.categories.iter().map(|c| (c.id, 0)).collect();
        for a in &self.annotations {
            *counts.entry(a.category_id).or_default() += 1;
        }
        counts
    }
}

/// Which classes are treated as known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownSpec {
    /// The first `n` classes in dataset order.
    Prefix(usize),
    /// An explicit list of class names.
    Explicit(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub known: Vec<CategoryInfo>,
    pub unknown: Vec<CategoryInfo>,
}

impl ClassSplit {
    pub fn known_names(&self) -> Vec<String> {
        self.known.iter().map(|c| c.name.clone()).collect()
    }

    pub fn unknown_names(&self) -> Vec<String> {
        self.unknown.iter().map(|c| c.name.clone()).collect()
    }

    pub fn unknown_ids(&self) -> BTreeSet<u64> {
        self.unknown.iter().map(|c| c.id).collect()
    }

    pub fn known_ids(&self) -> BTreeSet<u64> {
        self.known.iter().map(|c| c.id).collect()
    }
}

/// Partitions the categories (in ascending id order) into known and
/// held-out classes. Both sides must be nonempty.
pub fn split_classes(all_classes: &[CategoryInfo], known_spec: &KnownSpec) -> Result<ClassSplit> {
    let mut all = all_classes.to_vec();
    all.sort_by_key(|c| c.id);
    let (known, unknown): (Vec<_>, Vec<_>) = match known_spec {
        KnownSpec::Prefix(n) => {
            let n = (*n).min(all.len());
            let unknown = all.split_off(n);
            (all, unknown)
        }
        KnownSpec::Explicit(names) => {
            let present: HashSet<&str> = all.iter().map(|c| c.name.as_str()).collect();
            if let Some(missing) = names.iter().find(|n| !present.contains(n.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "known class {missing:?} is not in the dataset"
                )));
            }
            let wanted: HashSet<&str> = names.iter().map(String::as_str).collect();
            all.into_iter().partition(|c| wanted.contains(c.name.as_str()))
        }
    };
    if known.is_empty() {
        return Err(Error::InvalidArgument("the known class set is empty".into()));
    }
    if unknown.is_empty() {
        return Err(Error::InvalidArgument(
            "every class is known; at least one class must be held out".into(),
        ));
    }
    Ok(ClassSplit { known, unknown })
}

/// Keeps exactly the images without any annotation of a held-out class,
/// with all of their annotations, and restricts the category table to the
/// remaining classes. Images without annotations are kept.
pub fn filter_images(dataset: &AnnotationSet, unknown_ids: &BTreeSet<u64>) -> AnnotationSet {
    let tainted: HashSet<u64> = dataset
        .annotations
        .iter()
        .filter(|a| unknown_ids.contains(&a.category_id))
        .map(|a| a.image_id)
        .collect();
    AnnotationSet {
        images: dataset
            .images
            .iter()
            .filter(|im| !tainted.contains(&im.id))
            .cloned()
            .collect(),
        annotations: dataset
            .annotations
            .iter()
            .filter(|a| !tainted.contains(&a.image_id))
            .cloned()
            .collect(),
        categories: dataset
            .categories
            .iter()
            .filter(|c| !unknown_ids.contains(&c.id))
            .cloned()
            .collect(),
        extra: dataset.extra.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRatio {
    pub id: u64,
    pub name: String,
    pub original: usize,
    pub retained: usize,
    /// `retained / original`; absent when the class has no original instances.
    pub ratio: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    /// |known| / |all classes|.
    pub floor: f64,
    pub classes: Vec<ClassRatio>,
}

impl RatioReport {
    pub fn flagged(&self) -> Vec<&ClassRatio> {
        self.classes.iter().filter(|c| c.flagged).collect()
    }
}

/// Audits how many training instances each known class keeps after
/// filtering. Classes keeping less than |known|/|all| of their instances are
/// flagged; the split itself is never rejected.
pub fn check_instance_ratio(
    original: &AnnotationSet,
    filtered: &AnnotationSet,
    split: &ClassSplit,
) -> RatioReport {
    let total = split.known.len() + split.unknown.len();
    let floor = split.known.len() as f64 / total as f64;
    let before = original.instance_counts();
    let after = filtered.instance_counts();
    let classes = split
        .known
        .iter()
        .map(|c| {
            let o = before.get(&c.id).copied().unwrap_or(0);
            let r = after.get(&c.id).copied().unwrap_or(0);
            let ratio = (o > 0).then(|| r as f64 / o as f64);
            ClassRatio {
                id: c.id,
                name: c.name.clone(),
                original: o,
                retained: r,
                ratio,
                flagged: ratio.is_none_or(|v| v < floor),
            }
        })
        .collect();
    RatioReport { floor, classes }
}

fn hash_unit(seed: u64, image_id: u64) -> f64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.to_le_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic train/validation split of images by a seeded hash of the
/// image id. Annotations follow their images.
pub fn train_val_split(
    dataset: &AnnotationSet,
    val_fraction: f64,
    seed: u64,
) -> Result<(AnnotationSet, AnnotationSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let val_ids: HashSet<u64> = dataset
        .images
        .iter()
        .filter(|im| hash_unit(seed, im.id) < val_fraction)
        .map(|im| im.id)
        .collect();
    let subset = |want_val: bool| AnnotationSet {
        images: dataset
            .images
            .iter()
            .filter(|im| val_ids.contains(&im.id) == want_val)
            .cloned()
            .collect(),
        annotations: dataset
            .annotations
            .iter()
            .filter(|a| val_ids.contains(&a.image_id) == want_val)
            .cloned()
            .collect(),
        categories: dataset.categories.clone(),
        extra: dataset.extra.clone(),
    };
    Ok((subset(false), subset(true)))
}

fn xml_child<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<roxmltree::Node<'a, 'a>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn xml_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    xml_child(node, name).and_then(|c| c.text()).map(str::trim)
}

fn xml_num(node: roxmltree::Node, name: &str, file: &str) -> Result<f64> {
    xml_text(node, name)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Data(format!("{file}: missing or invalid <{name}>")))
}

/// One parsed VOC XML file: image size and (class name, xmin, ymin, xmax,
/// ymax) objects.
#[derive(Debug, Clone, PartialEq)]
pub struct VocRecord {
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<(String, [f64; 4])>,
}

pub fn parse_voc_xml(xml: &str, source: &str) -> Result<VocRecord> {
    let doc = roxmltree::Document::parse(xml)
        .map_err(|e| Error::Data(format!("{source}: {e}")))?;
    let root = doc.root_element();
    let file_name = xml_text(root, "filename").unwrap_or(source).to_string();
    let (width, height) = match xml_child(root, "size") {
        Some(size) => (
            xml_num(size, "width", source)? as u32,
            xml_num(size, "height", source)? as u32,
        ),
        None => (0, 0),
    };
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = xml_text(obj, "name")
            .ok_or_else(|| Error::Data(format!("{source}: object without <name>")))?;
        let bb = xml_child(obj, "bndbox")
            .ok_or_else(|| Error::Data(format!("{source}: object without <bndbox>")))?;
        objects.push((
            name.to_string(),
            [
                xml_num(bb, "xmin", source)?,
                xml_num(bb, "ymin", source)?,
                xml_num(bb, "xmax", source)?,
                xml_num(bb, "ymax", source)?,
            ],
        ));
    }
    Ok(VocRecord {
        file_name,
        width,
        height,
        objects,
    })
}

/// Builds an [`AnnotationSet`] from parsed VOC records. Image ids follow the
/// record order starting at 1; VOC classes keep their canonical order and any
/// other names follow alphabetically.
pub fn annotation_set_from_voc(records: &[VocRecord]) -> AnnotationSet {
    let names: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.objects.iter().map(|(n, _)| n.as_str()))
        .collect();
    let mut ordered: Vec<String> = VOC_CLASSES.iter().map(|s| s.to_string()).collect();
    ordered.extend(
        names
            .iter()
            .filter(|n| !VOC_CLASSES.contains(n))
            .map(|n| n.to_string()),
    );
    let categories: Vec<CategoryInfo> = ordered
        .iter()
        .enumerate()
        .map(|(i, name)| CategoryInfo {
            id: i as u64 + 1,
            name: name.clone(),
            extra: BTreeMap::new(),
        })
        .collect();
    let cat_id: HashMap<&str, u64> = categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let image_id = i as u64 + 1;
        images.push(ImageInfo {
            id: image_id,
            file_name: r.file_name.clone(),
            width: r.width,
            height: r.height,
            extra: BTreeMap::new(),
        });
        for (name, [x1, y1, x2, y2]) in &r.objects {
            annotations.push(Annotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: cat_id[name.as_str()],
                bbox: [*x1, *y1, x2 - x1, y2 - y1],
                extra: BTreeMap::new(),
            });
        }
    }
    AnnotationSet {
        images,
        annotations,
        categories,
        extra: BTreeMap::new(),
    }
}

/// Reads every `*.xml` file in `dir` (sorted by file name).
pub fn read_voc_dir(dir: &Path) -> Result<AnnotationSet> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xml"))
        .collect();
    paths.sort();
    let records = paths
        .iter()
        .map(|p| parse_voc_xml(&std::fs::read_to_string(p)?, &p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok(annotation_set_from_voc(&records))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub images_in: usize,
    pub images_out: usize,
    pub annotations_out: usize,
    /// Retained image ids, ascending.
    pub image_ids: Vec<u64>,
}

/// Everything needed to reproduce an open-set split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub known: Vec<String>,
    pub unknown: Vec<String>,
    pub seed: u64,
    pub counts: BTreeMap<String, SubsetCounts>,
    pub ratio_report: RatioReport,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

pub const SPLIT_MANIFEST_VERSION: u32 = 1;

/// The filtered subsets of an open-set split and its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetSplit {
    pub classes: ClassSplit,
    pub train: AnnotationSet,
    pub val: Option<AnnotationSet>,
    /// The original test set, untouched: held-out objects stay in it.
    pub test: Option<AnnotationSet>,
    pub manifest: SplitManifest,
}

fn subset_counts(images_in: usize, out: &AnnotationSet) -> SubsetCounts {
    SubsetCounts {
        images_in,
        images_out: out.images.len(),
        annotations_out: out.annotations.len(),
        image_ids: {
            let mut ids: Vec<u64> = out.images.iter().map(|i| i.id).collect();
            ids.sort_unstable();
            ids
        },
    }
}

/// Builds an open-set benchmark from a training set: picks the known
/// classes, removes every training image showing a held-out class, audits
/// the retained instance ratios and optionally carves a validation subset
/// out of the filtered training images.
pub fn open_set_split(
    train: &AnnotationSet,
    test: Option<&AnnotationSet>,
    known_spec: &KnownSpec,
    val_fraction: Option<f64>,
    seed: u64,
) -> Result<OpenSetSplit> {
    train.validate()?;
    if let Some(t) = test {
        t.validate()?;
        if t.sorted_categories() != train.sorted_categories() {
            return Err(Error::Data(
                "test and training sets have different category tables".into(),
            ));
        }
    }
    let classes = split_classes(&train.categories, known_spec)?;
    let filtered = filter_images(train, &classes.unknown_ids());
    let ratio_report = check_instance_ratio(train, &filtered, &classes);
    let mut counts = BTreeMap::new();
    let (train_out, val) = match val_fraction {
        Some(f) => {
            let (t, v) = train_val_split(&filtered, f, seed)?;
            counts.insert("val".to_string(), subset_counts(filtered.images.len(), &v));
            (t, Some(v))
        }
        None => (filtered, None),
    };
    counts.insert("train".to_string(), subset_counts(train.images.len(), &train_out));
    if let Some(t) = test {
        counts.insert("test".to_string(), subset_counts(t.images.len(), t));
    }
    let manifest = SplitManifest {
        version: SPLIT_MANIFEST_VERSION,
        known: classes.known_names(),
        unknown: classes.unknown_names(),
        seed,
        counts,
        ratio_report,
        extra: BTreeMap::new(),
    };
    Ok(OpenSetSplit {
        classes,
        train: train_out,
        val,
        test: test.cloned(),
        manifest,
    })
}
