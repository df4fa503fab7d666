//! Manifests, stratified splits, the feature cache layout, and in-memory
//! datasets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::{read_feature_cache, FeatureError};
use crate::model::{ArchConfig, EmotionLabel, NetworkKind};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("class {label} has {count} utterances, too few for a {split} split under ratios {ratios:?}")]
    InsufficientClassSamples {
        label: EmotionLabel,
        count: usize,
        split: Split,
        ratios: [f64; 3],
    },
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("no cached features for {path} (expected {cache}); run `featurize` first")]
    MissingFeatures { path: String, cache: PathBuf },
    #[error("cached features for {path} have shape {found:?}, the model expects {expected:?}")]
    FeatureShape {
        path: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| format!("unknown split {s:?} (expected train, val or test)"))
    }
}

/// One manifest row. `path` is kept as written; relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: EmotionLabel,
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// Parse CSV manifest text with header `path,label[,split]`.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>, DataError> {
    let bad = |reason: String| DataError::BadManifest {
        path: origin.to_string(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let has_split = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["path", "label"] => false,
        ["path", "label", "split"] => true,
        other => return Err(bad(format!("header must be path,label[,split], found {}", other.join(",")))),
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = i + 2;
        let path = rec.get(0).unwrap_or_default().to_string();
        if path.is_empty() {
            return Err(bad(format!("row {row}: empty path")));
        }
        let label = rec
            .get(1)
            .unwrap_or_default()
            .parse()
            .map_err(|e| bad(format!("row {row}: {e}")))?;
        let split = match rec.get(2).filter(|_| has_split) {
            Some("") | None => None,
            Some(s) => Some(s.parse().map_err(|e| bad(format!("row {row}: {e}")))?),
        };
        out.push(ManifestEntry { path, label, split });
    }
    if out.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text, &path.display().to_string())
}

/// Manifest CSV text. The split column is written only if every entry has one.
pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let with_split = !entries.is_empty() && entries.iter().all(|e| e.split.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    if with_split {
        w.write_record(["path", "label", "split"]).expect("in-memory write");
    } else {
        w.write_record(["path", "label"]).expect("in-memory write");
    }
    for e in entries {
        match (with_split, e.split) {
            (true, Some(s)) => w.write_record([e.path.as_str(), e.label.name(), s.name()]),
            _ => w.write_record([e.path.as_str(), e.label.name()]),
        }
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

/// Stratified split assignment, one entry per manifest row.
///
/// Each label's rows are shuffled with a seeded generator; validation and
/// test take `round(n·ratio)` rows each (at least one when their ratio is
/// positive) and training keeps the rest. Every label must end up in every
/// split.
pub fn make_splits(entries: &[ManifestEntry], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>, DataError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    let mut by_label: BTreeMap<EmotionLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_label.entry(e.label).or_default().push(i);
    }
    if let Some(&label) = EmotionLabel::ALL.iter().find(|l| !by_label.contains_key(l)) {
        return Err(DataError::InsufficientClassSamples {
            label,
            count: 0,
            split: Split::Train,
            ratios,
        });
    }
    let mut out = vec![Split::Train; entries.len()];
    for (label, mut idx) in by_label {
        let n = idx.len();
        let take = |r: f64| {
            if r > 0.0 {
                ((n as f64 * r).round() as usize).max(1)
            } else {
                0
            }
        };
        let (n_val, n_test) = (take(ratios[1]), take(ratios[2]));
        let short = if n_val == 0 {
            Some(Split::Val)
        } else if n_test == 0 {
            Some(Split::Test)
        } else if n_val + n_test >= n {
            Some(Split::Train)
        } else {
            None
        };
        if let Some(split) = short {
            return Err(DataError::InsufficientClassSamples {
                label,
                count: n,
                split,
                ratios,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.index() as u64);
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

/// Splits from the manifest's own column if every row has one, otherwise
/// from [`make_splits`]. A partially filled column is an error.
pub fn resolve_splits(entries: &[ManifestEntry], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>, DataError> {
    let given: Vec<Split> = entries.iter().filter_map(|e| e.split).collect();
    if given.len() == entries.len() {
        Ok(given)
    } else if given.is_empty() {
        make_splits(entries, ratios, seed)
    } else {
        Err(DataError::BadManifest {
            path: "<manifest>".into(),
            reason: "split column must be filled for every row or for none".into(),
        })
    }
}

/// Cache file locations for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePaths {
    /// Standardized, fixed-length log-Mel map.
    pub features: PathBuf,
    /// MFCC mean/std vector, stored as a 1-frame map.
    pub mfcc: PathBuf,
    /// Hex SHA-256 of the source audio and feature settings.
    pub stamp: PathBuf,
}

/// Flatten a manifest path into a cache file stem: separators become `__`.
pub fn cache_stem(path: &str) -> String {
    let trimmed = path.trim_start_matches("./").trim_start_matches('/');
    trimmed.replace(['/', '\\'], "__")
}

pub fn cache_paths(cache_dir: &Path, manifest_path: &str) -> CachePaths {
    let stem = cache_stem(manifest_path);
    CachePaths {
        features: cache_dir.join(format!("{stem}.serfeat")),
        mfcc: cache_dir.join(format!("{stem}.mfcc.serfeat")),
        stamp: cache_dir.join(format!("{stem}.sha256")),
    }
}

/// Model inputs with labels, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stack the items at `idx` into one batch tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let items: Vec<&Tensor> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let x = Tensor::stack(&items).expect("dataset items share a shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Load cached features for `entries`, shaped for `arch`.
    pub fn from_cache(entries: &[&ManifestEntry], cache_dir: &Path, arch: &ArchConfig) -> Result<Self, DataError> {
        let mut ds = Dataset {
            ids: Vec::with_capacity(entries.len()),
            inputs: Vec::with_capacity(entries.len()),
            labels: Vec::with_capacity(entries.len()),
        };
        for e in entries {
            let paths = cache_paths(cache_dir, &e.path);
            let (file, expected) = match arch.network {
                NetworkKind::CnnTransformer => (&paths.features, (arch.n_mels, arch.input_frames)),
                NetworkKind::Mlp => (&paths.mfcc, (arch.mlp_input, 1)),
            };
            if !file.exists() {
                return Err(DataError::MissingFeatures {
                    path: e.path.clone(),
                    cache: file.clone(),
                });
            }
            let fm = read_feature_cache(file)?;
            if (fm.n_mels(), fm.n_frames()) != expected {
                return Err(DataError::FeatureShape {
                    path: e.path.clone(),
                    found: (fm.n_mels(), fm.n_frames()),
                    expected,
                });
            }
            let t = Tensor::new(&arch.input_shape(), fm.into_values()).expect("shape checked above");
            ds.ids.push(e.path.clone());
            ds.inputs.push(t);
            ds.labels.push(e.label.index());
        }
        Ok(ds)
    }
}
