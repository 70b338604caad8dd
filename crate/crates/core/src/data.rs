//! Datasets: manifest ingestion, synthetic imbalanced ordinal data, and
//! group-level (patient-level) cross-validation splits.
//!
//! # Manifest format
//!
//! A manifest is JSONL. The first line is a header, every following
//! non-blank line is one sample:
//!
//! ```text
//! {"format":"alrank-manifest/1","num_levels":4,"normalization":{"kind":"min_max","min":[..],"max":[..]}}
//! {"id":"s00000","label":0,"group":"g0000","seq":0,"features":[0.12,-0.40]}
//! {"id":"s00001","label":3,"group":"g0000","seq":1,"image":"img/s00001.pgm"}
//! ```
//!
//! Samples carry either inline `features` or an `image` path (PNG or
//! PGM/PPM, resolved relative to the manifest, decoded to grayscale and
//! flattened). Features are kept raw in the manifest; the normalization
//! recorded in the header is applied when a [`Dataset`] is built, which maps
//! every feature into `[0, 1]`.
//!
//! A CSV adapter accepts `id,label,group,feat_0,..,feat_{d-1}` with an
//! optional `seq` column; its normalization is the per-feature min/max of
//! the file.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

const MANIFEST_FORMAT: &str = "alrank-manifest/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("manifest has no samples")]
    Empty,
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{id}` has label {label} outside [0, {levels})")]
    LabelOutOfRange { id: String, label: u32, levels: u32 },
    #[error("sample `{0}`: {1}")]
    InvalidSample(String, String),
    #[error("invalid priors: {0}")]
    InvalidPriors(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("need at least {needed} groups, found {found}")]
    TooFewGroups { needed: usize, found: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    /// Ordinal level in `[0, num_levels)`.
    pub label: u32,
    /// Patient or other grouping unit; splits never cut a group.
    pub group: String,
    /// Capture order within the group, if known.
    pub sequence_pos: Option<u32>,
    /// Raster the features were decoded from, relative to the manifest.
    pub image: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Features are used as stored.
    #[default]
    None,
    /// Every feature is mapped from `[lo, hi]` to `[0, 1]`.
    Range { lo: f64, hi: f64 },
    /// Per-feature min/max scaling.
    MinMax { min: Vec<f64>, max: Vec<f64> },
}

impl Normalization {
    /// Min/max of each feature over `samples`.
    pub fn fit_min_max(samples: &[Sample]) -> Self {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for s in samples {
            for (k, &v) in s.features.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Normalization::MinMax { min, max }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let scale = |v: f64, lo: f64, hi: f64| {
            if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        };
        match self {
            Normalization::None => x.to_vec(),
            Normalization::Range { lo, hi } => x.iter().map(|&v| scale(v, *lo, *hi)).collect(),
            Normalization::MinMax { min, max } => x
                .iter()
                .enumerate()
                .map(|(k, &v)| scale(v, min[k], max[k]))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub num_levels: u32,
    pub normalization: Normalization,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(DataError::Empty);
        }
        if self.num_levels < 2 {
            return Err(DataError::Invalid(format!("num_levels must be at least 2, got {}", self.num_levels)));
        }
        let dim = self.samples[0].features.len();
        if dim == 0 {
            return Err(DataError::InvalidSample(self.samples[0].id.clone(), "no features".into()));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            if s.label >= self.num_levels {
                return Err(DataError::LabelOutOfRange { id: s.id.clone(), label: s.label, levels: self.num_levels });
            }
            if s.group.is_empty() {
                return Err(DataError::InvalidSample(s.id.clone(), "empty group id".into()));
            }
            if s.features.len() != dim {
                return Err(DataError::InvalidSample(
                    s.id.clone(),
                    format!("{} features, expected {dim}", s.features.len()),
                ));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidSample(s.id.clone(), "non-finite feature".into()));
            }
        }
        match &self.normalization {
            Normalization::MinMax { min, max } if min.len() != dim || max.len() != dim => {
                Err(DataError::Invalid("normalization length does not match feature dimension".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Sample counts per level.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_levels as usize];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    num_levels: u32,
    #[serde(default)]
    normalization: Normalization,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    id: String,
    label: u32,
    group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

/// Loads a JSONL manifest, or a CSV file when the extension is `.csv`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return load_csv(path);
    }
    let text = fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let parse_err = |line: usize, message: String| DataError::Parse { path: shown.clone(), line, message };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(DataError::Empty)?;
    let header: HeaderLine = serde_json::from_str(header).map_err(|e| parse_err(hline + 1, format!("header: {e}")))?;
    if header.format != MANIFEST_FORMAT {
        return Err(parse_err(hline + 1, format!("unsupported format `{}`", header.format)));
    }

    let mut samples = Vec::new();
    for (n, line) in lines {
        let rec: SampleLine = serde_json::from_str(line).map_err(|e| parse_err(n + 1, e.to_string()))?;
        let features = match (rec.features, &rec.image) {
            (Some(f), None) => f,
            (None, Some(img)) => decode_image(&base.join(img))?,
            (Some(_), Some(_)) => return Err(parse_err(n + 1, "both `features` and `image` given".into())),
            (None, None) => return Err(parse_err(n + 1, "missing `features` or `image`".into())),
        };
        samples.push(Sample {
            id: rec.id,
            features,
            label: rec.label,
            group: rec.group,
            sequence_pos: rec.seq,
            image: rec.image,
        });
    }
    let manifest = DatasetManifest { num_levels: header.num_levels, normalization: header.normalization, samples };
    manifest.validate()?;
    Ok(manifest)
}

fn decode_image(path: &Path) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?;
    Ok(img.to_luma8().pixels().map(|p| f64::from(p.0[0])).collect())
}

pub fn manifest_to_jsonl(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    let header = HeaderLine {
        format: MANIFEST_FORMAT.to_string(),
        num_levels: manifest.num_levels,
        normalization: manifest.normalization.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for s in &manifest.samples {
        let line = SampleLine {
            id: s.id.clone(),
            label: s.label,
            group: s.group.clone(),
            seq: s.sequence_pos,
            features: s.image.is_none().then(|| s.features.clone()),
            image: s.image.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(manifest_to_jsonl(manifest).as_bytes())?;
    Ok(())
}

/// CSV adapter: `id,label,group[,seq],feat_0,...`.
pub fn load_csv(path: &Path) -> Result<DatasetManifest> {
    let shown = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Parse {
        path: shown.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Parse { path: shown.clone(), line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, label_col, group_col) = match (col("id"), col("label"), col("group")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(DataError::Parse {
                path: shown,
                line: 1,
                message: "header must contain id, label and group columns".into(),
            })
        }
    };
    let seq_col = col("seq");
    let feat_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("feat_"))
        .map(|(k, _)| k)
        .collect();

    let mut samples = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let err = |message: String| DataError::Parse { path: shown.clone(), line, message };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let label = field(label_col).parse::<u32>().map_err(|e| err(format!("label: {e}")))?;
        let sequence_pos = match seq_col.map(field) {
            Some("") | None => None,
            Some(v) => Some(v.parse::<u32>().map_err(|e| err(format!("seq: {e}")))?),
        };
        let features = feat_cols
            .iter()
            .map(|&k| field(k).parse::<f64>().map_err(|e| err(format!("{}: {e}", &headers[k]))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: field(id_col).to_string(),
            features,
            label,
            group: field(group_col).to_string(),
            sequence_pos,
            image: None,
        });
    }
    let num_levels = samples.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2);
    let normalization = Normalization::fit_min_max(&samples);
    let manifest = DatasetManifest { num_levels, normalization, samples };
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// Class priors; must be positive and sum to one.
    pub priors: Vec<f64>,
    pub dim: usize,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub group_size: usize,
}

impl SynthSpec {
    pub fn new(n: usize, priors: Vec<f64>, dim: usize, noise: f64, seed: u64) -> Self {
        SynthSpec { n, priors, dim, noise, seed, group_size: 10 }
    }
}

/// Unit direction along which class centers are placed.
pub fn severity_direction(dim: usize) -> Vec<f64> {
    vec![1.0 / (dim as f64).sqrt(); dim]
}

/// Generates an ordinal dataset with class `c` centered at `c * e` for a
/// fixed unit direction `e`, isotropic noise, and multinomial labels.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetManifest> {
    let priors = &spec.priors;
    if priors.len() < 2 {
        return Err(DataError::InvalidPriors("need at least two classes".into()));
    }
    if priors.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(DataError::InvalidPriors("every prior must be positive".into()));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(DataError::InvalidPriors(format!("priors sum to {total}, not 1")));
    }
    if spec.dim == 0 {
        return Err(DataError::Invalid("feature dimension must be at least 1".into()));
    }
    if spec.n == 0 {
        return Err(DataError::Empty);
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(DataError::Invalid(format!("noise must be nonnegative, got {}", spec.noise)));
    }
    let group_size = spec.group_size.max(1);

    let mut rng = rng::rng(spec.seed);
    let classes = WeightedIndex::new(priors).map_err(|e| DataError::InvalidPriors(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).expect("noise is finite and nonnegative");
    let e = severity_direction(spec.dim);
    let width = spec.n.saturating_sub(1).to_string().len().max(5);
    let gwidth = (spec.n / group_size).to_string().len().max(4);

    let samples: Vec<Sample> = (0..spec.n)
        .map(|k| {
            let label = classes.sample(&mut rng) as u32;
            let features = e
                .iter()
                .map(|&ei| f64::from(label) * ei + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                .collect();
            Sample {
                id: format!("s{k:0width$}"),
                features,
                label,
                group: format!("g{:0gwidth$}", k / group_size),
                sequence_pos: Some((k % group_size) as u32),
                image: None,
            }
        })
        .collect();
    let normalization = Normalization::fit_min_max(&samples);
    Ok(DatasetManifest { num_levels: priors.len() as u32, normalization, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fold_count: usize,
    pub train_pct: f64,
    pub val_pct: f64,
    pub test_pct: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fold_count: 5, train_pct: 60.0, val_pct: 20.0, test_pct: 20.0, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fold_count < 2 {
            return Err(DataError::InvalidSplit("at least two folds are required".into()));
        }
        let sum = self.train_pct + self.val_pct + self.test_pct;
        if (sum - 100.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions sum to {sum}, not 100")));
        }
        if [self.train_pct, self.val_pct, self.test_pct].iter().any(|&p| p < 0.0) {
            return Err(DataError::InvalidSplit("fractions must be nonnegative".into()));
        }
        // Every group is tested exactly once, so the test share is fixed by the fold count.
        let implied = 100.0 / self.fold_count as f64;
        if (self.test_pct - implied).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!(
                "test fraction {} does not match {} folds ({implied})",
                self.test_pct, self.fold_count
            )));
        }
        Ok(())
    }
}

/// One cross-validation fold. Id lists keep manifest order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub train_groups: BTreeSet<String>,
    pub val_groups: BTreeSet<String>,
    pub test_groups: BTreeSet<String>,
}

/// Partitions groups (never individual samples) into folds. Each group is in
/// the test part of exactly one fold; validation takes the groups that follow
/// the test chunk in the shuffled order.
pub fn group_kfold_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Vec<Fold>> {
    spec.validate()?;
    let mut groups: Vec<&str> = manifest
        .samples
        .iter()
        .map(|s| s.group.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let g = groups.len();
    let f = spec.fold_count;
    if g < f {
        return Err(DataError::TooFewGroups { needed: f, found: g });
    }
    groups.shuffle(&mut rng::rng(spec.seed));
    let n_val = ((spec.val_pct / 100.0) * g as f64).round() as usize;

    let mut folds = Vec::with_capacity(f);
    for k in 0..f {
        let (lo, hi) = (k * g / f, (k + 1) * g / f);
        let test: BTreeSet<String> = groups[lo..hi].iter().map(|s| s.to_string()).collect();
        let rest = g - (hi - lo);
        let n_val = n_val.min(rest.saturating_sub(1));
        let val: BTreeSet<String> = (0..n_val).map(|o| groups[(hi + o) % g].to_string()).collect();
        let train: BTreeSet<String> = groups
            .iter()
            .filter(|s| !test.contains(**s) && !val.contains(**s))
            .map(|s| s.to_string())
            .collect();
        let pick = |set: &BTreeSet<String>| {
            manifest
                .samples
                .iter()
                .filter(|s| set.contains(&s.group))
                .map(|s| s.id.clone())
                .collect::<Vec<_>>()
        };
        folds.push(Fold {
            index: k,
            train: pick(&train),
            val: pick(&val),
            test: pick(&test),
            train_groups: train,
            val_groups: val,
            test_groups: test,
        });
    }
    Ok(folds)
}

/// Normalized, index-addressable view of a manifest used for training and
/// evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_levels: u32,
    ids: Vec<String>,
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
    groups: Vec<String>,
    seq: Vec<Option<u32>>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let n = manifest.samples.len();
        let mut ds = Dataset {
            num_levels: manifest.num_levels,
            ids: Vec::with_capacity(n),
            features: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            groups: Vec::with_capacity(n),
            seq: Vec::with_capacity(n),
            index: HashMap::with_capacity(n),
        };
        for (k, s) in manifest.samples.iter().enumerate() {
            ds.ids.push(s.id.clone());
            ds.features.push(manifest.normalization.apply(&s.features));
            ds.labels.push(s.label);
            ds.groups.push(s.group.clone());
            ds.seq.push(s.sequence_pos);
            ds.index.insert(s.id.clone(), k);
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, k: usize) -> &str {
        &self.ids[k]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self, k: usize) -> &[f64] {
        &self.features[k]
    }

    pub fn features_of(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|k| self.features[k].as_slice())
    }

    pub fn label(&self, k: usize) -> u32 {
        self.labels[k]
    }

    pub fn label_of(&self, id: &str) -> Option<u32> {
        self.index_of(id).map(|k| self.labels[k])
    }

    pub fn group(&self, k: usize) -> &str {
        &self.groups[k]
    }

    pub fn sequence_pos(&self, k: usize) -> Option<u32> {
        self.seq[k]
    }

    /// `(id, label)` for each id, skipping unknown ids.
    pub fn labeled(&self, ids: &[String]) -> Vec<(String, u32)> {
        ids.iter()
            .filter_map(|id| self.label_of(id).map(|l| (id.clone(), l)))
            .collect()
    }

    /// Hidden labels keyed by id.
    pub fn label_map(&self) -> BTreeMap<String, u32> {
        self.ids.iter().cloned().zip(self.labels.iter().copied()).collect()
    }

    /// Sample indices of one group ordered by capture position.
    pub fn group_members(&self, group: &str) -> Vec<usize> {
        let mut members: Vec<usize> = (0..self.len()).filter(|&k| self.groups[k] == group).collect();
        members.sort_by_key(|&k| (self.seq[k], k));
        members
    }
}

/// Random subset of `ids` of the given size.
pub(crate) fn sample_ids(ids: &[String], count: usize, rng: &mut rng::Rng) -> Vec<String> {
    let mut pool = ids.to_vec();
    let (picked, _) = pool.partial_shuffle(rng, count);
    picked.to_vec()
}

/// Resolves a path relative to a base directory unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetManifest {
        DatasetManifest {
            num_levels: 3,
            normalization: Normalization::None,
            samples: (0..3)
                .map(|k| Sample {
                    id: format!("a{k}"),
                    features: vec![k as f64, 1.0],
                    label: k,
                    group: "g".into(),
                    sequence_pos: Some(k),
                    image: None,
                })
                .collect(),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = tiny();
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.samples.len(), 3);
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = tiny();
        m.samples.clear();
        save_manifest(&m, &path).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::Empty)));
    }

    #[test]
    fn duplicate_id_named() {
        let mut m = tiny();
        m.samples[2].id = "a0".into();
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("a0"));
    }

    #[test]
    fn label_out_of_range() {
        let mut m = tiny();
        m.samples[1].label = 3;
        assert!(matches!(m.validate(), Err(DataError::LabelOutOfRange { .. })));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut text = manifest_to_jsonl(&tiny());
        text.push_str("{\"id\":\"x\",\"label\":\"two\",\"group\":\"g\",\"features\":[1,2]}\n");
        fs::write(&path, text).unwrap();
        match load_manifest(&path) {
            Err(DataError::Parse { line, message, .. }) => {
                assert_eq!(line, 5);
                assert!(message.contains("invalid type"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "id,label,group,feat_0,feat_1\nx,0,g1,0.0,10\ny,2,g2,4.0,20\n").unwrap();
        let m = load_csv(&path).unwrap();
        assert_eq!(m.num_levels, 3);
        let ds = Dataset::from_manifest(&m);
        assert_eq!(ds.features_of("y").unwrap(), &[1.0, 1.0]);
        assert_eq!(ds.features_of("x").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn image_samples_are_flattened() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), b"P2\n2 2\n255\n0 255\n128 64\n").unwrap();
        let text = format!(
            "{{\"format\":\"{MANIFEST_FORMAT}\",\"num_levels\":2,\"normalization\":{{\"kind\":\"range\",\"lo\":0,\"hi\":255}}}}\n\
             {{\"id\":\"a\",\"label\":1,\"group\":\"g\",\"image\":\"a.pgm\"}}\n\
             {{\"id\":\"b\",\"label\":0,\"group\":\"g\",\"features\":[0,0,0,0]}}\n"
        );
        let path = dir.path().join("m.jsonl");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples[0].features, vec![0.0, 255.0, 128.0, 64.0]);
        let ds = Dataset::from_manifest(&m);
        assert_eq!(ds.features_of("a").unwrap()[1], 1.0);
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn synth_is_deterministic_and_validates() {
        let spec = SynthSpec::new(200, vec![0.25; 4], 3, 0.5, 9);
        let a = synth_generate(&spec).unwrap();
        assert_eq!(a, synth_generate(&spec).unwrap());
        a.validate().unwrap();
        let bad = SynthSpec::new(200, vec![0.5, 0.6], 3, 0.5, 9);
        assert!(matches!(synth_generate(&bad), Err(DataError::InvalidPriors(_))));
        let zero = SynthSpec::new(200, vec![1.0, 0.0], 3, 0.5, 9);
        assert!(synth_generate(&zero).is_err());
    }

    #[test]
    fn noiseless_synth_is_separable() {
        let m = synth_generate(&SynthSpec::new(400, vec![0.25; 4], 4, 0.0, 3)).unwrap();
        let e = severity_direction(4);
        let proj = |s: &Sample| s.features.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>();
        for a in &m.samples {
            for b in &m.samples {
                if a.label > b.label {
                    assert!(proj(a) > proj(b));
                }
            }
        }
    }

    #[test]
    fn minority_count_near_expectation() {
        let m = synth_generate(&SynthSpec::new(2000, vec![0.65, 0.19, 0.14, 0.02], 4, 0.5, 1)).unwrap();
        let counts = m.class_counts();
        // Binomial(2000, 0.02): mean 40, sd ≈ 6.26.
        assert!((counts[3] as f64 - 40.0).abs() < 4.0 * 6.26, "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 2000);
    }

    #[test]
    fn class_means_converge_to_centers() {
        let sigma = 0.7;
        let m = synth_generate(&SynthSpec::new(4000, vec![0.4, 0.3, 0.2, 0.1], 3, sigma, 5)).unwrap();
        let e = severity_direction(3);
        for c in 0..4u32 {
            let members: Vec<&Sample> = m.samples.iter().filter(|s| s.label == c).collect();
            let nc = members.len() as f64;
            for d in 0..3 {
                let mean = members.iter().map(|s| s.features[d]).sum::<f64>() / nc;
                let center = f64::from(c) * e[d];
                assert!((mean - center).abs() < 3.0 * sigma / nc.sqrt(), "class {c} dim {d}");
            }
        }
    }

    fn groups_manifest(groups: usize, per: usize) -> DatasetManifest {
        DatasetManifest {
            num_levels: 2,
            normalization: Normalization::None,
            samples: (0..groups * per)
                .map(|k| Sample {
                    id: format!("s{k:04}"),
                    features: vec![k as f64],
                    label: (k % 2) as u32,
                    group: format!("g{:02}", k / per),
                    sequence_pos: None,
                    image: None,
                })
                .collect(),
        }
    }

    #[test]
    fn five_groups_five_folds() {
        let m = groups_manifest(5, 3);
        let folds = group_kfold_split(&m, &SplitSpec::default()).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test_groups.len(), 1);
            assert_eq!(f.val_groups.len(), 1);
            assert_eq!(f.train_groups.len(), 3);
        }
    }

    #[test]
    fn folds_are_disjoint_and_cover_groups() {
        let m = groups_manifest(25, 4);
        let spec = SplitSpec { seed: 13, ..SplitSpec::default() };
        let folds = group_kfold_split(&m, &spec).unwrap();
        let mut tested = BTreeSet::new();
        for f in &folds {
            assert!(f.train_groups.is_disjoint(&f.test_groups));
            assert!(f.train_groups.is_disjoint(&f.val_groups));
            assert!(f.val_groups.is_disjoint(&f.test_groups));
            let ids: HashSet<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
            assert_eq!(ids.len(), 100);
            assert_eq!(f.test_groups.len(), 5);
            assert_eq!(f.val_groups.len(), 5);
            for g in &f.test_groups {
                assert!(tested.insert(g.clone()), "group {g} tested twice");
            }
        }
        let all: BTreeSet<String> = m.samples.iter().map(|s| s.group.clone()).collect();
        assert_eq!(tested, all);
    }

    #[test]
    fn too_few_groups() {
        let m = groups_manifest(3, 2);
        assert!(matches!(
            group_kfold_split(&m, &SplitSpec::default()),
            Err(DataError::TooFewGroups { needed: 5, found: 3 })
        ));
        let bad = SplitSpec { train_pct: 50.0, ..SplitSpec::default() };
        assert!(bad.validate().is_err());
    }
}
