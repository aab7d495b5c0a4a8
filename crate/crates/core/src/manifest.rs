//! Corpus bookkeeping: image records with generation provenance, manifest
//! building from a labelled directory tree, validation and stratified
//! splitting.
//!
//! A manifest is one JSON document. Image paths are relative to the
//! directory the manifest file lives in (its *root*).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::augment::TransformSpec;
use crate::error::{Error, Result};
use crate::raster::Image;

pub const SCHEMA_VERSION: u32 = 1;

pub const LABEL_REAL: u8 = 0;
pub const LABEL_SYNTHETIC: u8 = 1;

/// File extensions accepted as images.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "webp"];

/// Suffix of sidecar generation-config files: `<stem>.gen.json`.
pub const SIDECAR_SUFFIX: &str = ".gen.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model_name: String,
    pub steps: u32,
    pub guidance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jpeg_quality: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    /// 0 = real, 1 = synthetic.
    pub label: u8,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationConfig>,
    #[serde(default)]
    pub applied_transforms: Vec<TransformSpec>,
    #[serde(default)]
    pub split: Split,
}

impl ImageRecord {
    pub fn is_synthetic(&self) -> bool {
        self.label == LABEL_SYNTHETIC
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub records: Vec<ImageRecord>,
    /// Directory that record paths are relative to; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            records,
            root: root.into(),
        }
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<Image> {
        Image::load(&self.resolve(record))
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = (usize, &ImageRecord)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    pub fn label_counts(&self, split: Split) -> (usize, usize) {
        self.in_split(split).fold((0, 0), |(r, s), (_, rec)| {
            if rec.is_synthetic() {
                (r, s + 1)
            } else {
                (r + 1, s)
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a manifest document; `root` becomes the base for record paths.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest = serde_json::from_str(text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "schema_version {} is not supported (expected {})",
                m.schema_version, SCHEMA_VERSION
            )));
        }
        m.root = root.into();
        Ok(m)
    }

    /// Writes the manifest with a `root` entry locating the corpus: relative
    /// to the manifest's directory when the corpus lies below it, absolute
    /// otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })
            .map_err(|e| Error::io(format!("resolving {}", base.display()), e))?;
        let root = fs::canonicalize(&self.root).unwrap_or_else(|_| self.root.clone());
        let stored = match root.strip_prefix(&base) {
            Ok(rel) if rel.as_os_str().is_empty() => PathBuf::from("."),
            Ok(rel) => rel.to_path_buf(),
            Err(_) => root,
        };
        let mut doc = serde_json::to_value(self)?;
        doc["root"] = serde_json::Value::String(stored.to_string_lossy().into_owned());
        fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        let root = match doc.get("root").and_then(|r| r.as_str()) {
            Some(r) => base.join(r),
            None => base,
        };
        Self::from_json(&text, root)
    }
}

/// Label and source assigned to every image below a top-level subdirectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub label: u8,
    pub source: String,
}

/// Top-level subdirectory name -> label/source.
pub type LabelingRule = BTreeMap<String, LabelRule>;

/// Parses `subdir=label:source`, e.g. `real=0:coco`.
pub fn parse_label_rule(s: &str) -> Result<(String, LabelRule)> {
    let bad = || Error::Manifest(format!("expected `subdir=label:source`, got `{s}`"));
    let (dir, rest) = s.split_once('=').ok_or_else(bad)?;
    let (label, source) = rest.split_once(':').ok_or_else(bad)?;
    let label: u8 = label.trim().parse().map_err(|_| bad())?;
    if label > 1 || dir.is_empty() || source.is_empty() {
        return Err(bad());
    }
    Ok((
        dir.trim().to_string(),
        LabelRule {
            label,
            source: source.trim().to_string(),
        },
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub scanned: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    generation: GenerationConfig,
    #[serde(default)]
    caption_dataset: Option<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans `root` and emits one record per decodable image. Records come out
/// sorted by path; all start in the train split.
pub fn build_manifest(root: &Path, rule: &LabelingRule) -> Result<(DatasetManifest, BuildReport)> {
    if !root.is_dir() {
        return Err(Error::Manifest(format!("{} is not a directory", root.display())));
    }
    let mut report = BuildReport::default();
    let mut paths: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image(e.path()))
        .map(|e| e.into_path())
        .collect();
    paths.sort();

    let mut records = Vec::new();
    for path in paths {
        report.scanned += 1;
        let rel = path.strip_prefix(root).expect("walked under root");
        let top = match rel.components().next() {
            Some(Component::Normal(c)) if rel.components().count() > 1 => c.to_string_lossy().into_owned(),
            _ => {
                return Err(Error::Manifest(format!(
                    "image {} is not inside a labelled subdirectory",
                    rel.display()
                )))
            }
        };
        let Some(lr) = rule.get(&top) else {
            return Err(Error::Manifest(format!("subdirectory `{top}` is not covered by the labeling rule")));
        };
        if let Err(e) = Image::load(&path) {
            report.warnings.push(format!("skipped {}: {e}", rel.display()));
            continue;
        }
        let rel_str = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let mut record = ImageRecord {
            path: rel_str,
            label: lr.label,
            source: lr.source.clone(),
            caption_dataset: None,
            generation: None,
            applied_transforms: Vec::new(),
            split: Split::Train,
        };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let sidecar = path.with_file_name(format!("{stem}{SIDECAR_SUFFIX}"));
        if sidecar.is_file() {
            match fs::read_to_string(&sidecar)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<Sidecar>(&t).map_err(|e| e.to_string()))
            {
                Ok(sc) => {
                    record.generation = Some(sc.generation);
                    record.caption_dataset = sc.caption_dataset;
                }
                Err(e) => report.warnings.push(format!("ignored sidecar {}: {e}", sidecar.display())),
            }
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::NoImages(root.to_path_buf()));
    }
    Ok((DatasetManifest::new(root, records), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationProfile {
    /// Generation parameters must lie in the benchmark ranges.
    Benchmark,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub record: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_manifest(m: &DatasetManifest, profile: ValidationProfile) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |record: Option<usize>, message: String| violations.push(Violation { record, message });
    if m.schema_version != SCHEMA_VERSION {
        push(None, format!("unsupported schema_version {}", m.schema_version));
    }
    let mut seen = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        if r.label > 1 {
            push(Some(i), format!("label {} not in {{0, 1}}", r.label));
        }
        if let Some(first) = seen.insert(r.path.as_str(), i) {
            push(Some(i), format!("duplicate path `{}` (first at record {first})", r.path));
        }
        if let Some(g) = &r.generation {
            if r.label != LABEL_SYNTHETIC {
                push(Some(i), "generation config on a non-synthetic record".into());
            }
            if profile == ValidationProfile::Benchmark {
                if !(10..=50).contains(&g.steps) {
                    push(Some(i), format!("steps {} outside [10, 50]", g.steps));
                }
                if !(3.0..=7.0).contains(&g.guidance) {
                    push(Some(i), format!("guidance {} outside [3.0, 7.0]", g.guidance));
                }
                if let Some(q) = g.jpeg_quality {
                    if !(75..=95).contains(&q) {
                        push(Some(i), format!("jpeg_quality {q} outside [75, 95]"));
                    }
                }
            }
        }
        for t in &r.applied_transforms {
            if let Err(e) = t.validate() {
                push(Some(i), e.to_string());
            }
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        let sum = train + val + test;
        if [train, val, test].iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(sum));
        }
        Ok(f)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Stratified, seeded split.
///
/// Within each label, records are grouped by source and shuffled; each record
/// gets the key `(rank + 0.5) / n_source` from its position in its source, so
/// sorting by key interleaves the sources evenly. Each label is then cut at
/// `round(f * n_label)`, which keeps every label (and every source within
/// it) within one record of exact proportionality.
pub fn split_manifest(m: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<DatasetManifest> {
    SplitFractions::new(fractions.train, fractions.val, fractions.test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_label: BTreeMap<u8, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..m.records.len()).collect();
    order.sort_by(|&a, &b| m.records[a].path.cmp(&m.records[b].path));
    for i in order {
        let r = &m.records[i];
        by_label.entry(r.label).or_default().entry(r.source.as_str()).or_default().push(i);
    }

    let mut out = m.clone();
    for sources in by_label.values() {
        let mut within: Vec<(f64, usize)> = Vec::new();
        for idx in sources.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let n = idx.len() as f64;
            within.extend(idx.into_iter().enumerate().map(|(rank, i)| ((rank as f64 + 0.5) / n, i)));
        }
        within.sort_by(|a, b| a.0.total_cmp(&b.0).then(m.records[a.1].path.cmp(&m.records[b.1].path)));
        let n = within.len() as f64;
        let n_train = (fractions.train * n).round() as usize;
        let n_train_val = (((fractions.train + fractions.val) * n).round() as usize).max(n_train);
        for (pos, &(_, i)) in within.iter().enumerate() {
            out.records[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// Distinct sources, sorted.
pub fn sources(m: &DatasetManifest) -> BTreeSet<&str> {
    m.records.iter().map(|r| r.source.as_str()).collect()
}
