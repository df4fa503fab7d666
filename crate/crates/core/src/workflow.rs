//! End-to-end steps over a manifest: build the feature cache, load split
//! datasets, and featurize single files for prediction.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio::{load_wav, AudioError};
use crate::config::RunConfig;
use crate::data::{cache_paths, read_manifest, resolve_splits, DataError, Dataset, ManifestEntry, Split};
use crate::features::{write_feature_cache, ExtractError, FeatureExtractor, FeatureMap, DEFAULT_MFCC_COEFFS};
use crate::model::{ArchConfig, NetworkKind};
use crate::tensor::Tensor;

/// Bumped whenever cached feature contents change meaning.
const CACHE_FORMAT: &str = "serfeat-v1";

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheAction {
    Written,
    UpToDate,
}

#[derive(Debug, Default)]
pub struct FeaturizeReport {
    pub written: Vec<String>,
    pub up_to_date: Vec<String>,
    /// Failed manifest paths with their errors, in manifest order.
    pub failures: Vec<(String, FileError)>,
}

impl FeaturizeReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Hex SHA-256 over the audio bytes and the feature settings.
fn stamp_for(audio: &[u8], fx: &FeatureExtractor) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_FORMAT.as_bytes());
    h.update(format!("{:?};mfcc={DEFAULT_MFCC_COEFFS}", fx.config()).as_bytes());
    h.update(audio);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Model-ready log-Mel map and MFCC summary for one file.
pub fn featurize_file(path: &Path, fx: &FeatureExtractor) -> Result<(FeatureMap, FeatureMap), FileError> {
    let w = load_wav(path)?;
    let (fm, stats) = fx.extract_with_mfcc_stats(&w, DEFAULT_MFCC_COEFFS)?;
    let n = stats.len();
    Ok((fm, FeatureMap::new(n, 1, stats)?))
}

fn cache_one(entry: &ManifestEntry, base: &Path, cache_dir: &Path, fx: &FeatureExtractor) -> Result<CacheAction, FileError> {
    let src = entry.resolve(base);
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| FileError::Io { path, source }
    };
    let bytes = std::fs::read(&src).map_err(io(&src))?;
    let stamp = stamp_for(&bytes, fx);
    let paths = cache_paths(cache_dir, &entry.path);
    let fresh = std::fs::read_to_string(&paths.stamp).is_ok_and(|s| s.trim() == stamp)
        && paths.features.exists()
        && paths.mfcc.exists();
    if fresh {
        return Ok(CacheAction::UpToDate);
    }
    let (fm, mfcc) = featurize_file(&src, fx)?;
    write_feature_cache(&paths.features, &fm)?;
    write_feature_cache(&paths.mfcc, &mfcc)?;
    std::fs::write(&paths.stamp, format!("{stamp}\n")).map_err(io(&paths.stamp))?;
    Ok(CacheAction::Written)
}

/// Cache features for every entry in parallel. Entries whose stamp matches
/// are left alone. Per-file failures are collected, not fatal.
pub fn featurize_entries(
    entries: &[ManifestEntry],
    base: &Path,
    cache_dir: &Path,
    fx: &FeatureExtractor,
) -> Result<FeaturizeReport, DataError> {
    std::fs::create_dir_all(cache_dir).map_err(|source| DataError::Io {
        path: cache_dir.display().to_string(),
        source,
    })?;
    let results: Vec<_> = entries.par_iter().map(|e| cache_one(e, base, cache_dir, fx)).collect();
    let mut report = FeaturizeReport::default();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(CacheAction::Written) => report.written.push(e.path.clone()),
            Ok(CacheAction::UpToDate) => report.up_to_date.push(e.path.clone()),
            Err(err) => report.failures.push((e.path.clone(), err)),
        }
    }
    Ok(report)
}

/// Manifest entries with their split assignment and loaded datasets.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub entries: Vec<ManifestEntry>,
    pub splits: Vec<Split>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitData {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn manifest_path(cfg: &RunConfig) -> Result<PathBuf, DataError> {
    cfg.paths.manifest.clone().ok_or_else(|| DataError::BadManifest {
        path: "<none>".into(),
        reason: "no manifest given (set paths.manifest or pass --manifest)".into(),
    })
}

/// Read the manifest, assign splits and load every split from the cache.
pub fn load_splits(cfg: &RunConfig) -> Result<SplitData, DataError> {
    let entries = read_manifest(&manifest_path(cfg)?)?;
    let splits = resolve_splits(&entries, cfg.split_ratios, cfg.train.seed)?;
    let pick = |s: Split| -> Result<Dataset, DataError> {
        let chosen: Vec<&ManifestEntry> = entries.iter().zip(&splits).filter(|(_, &x)| x == s).map(|(e, _)| e).collect();
        Dataset::from_cache(&chosen, &cfg.paths.cache_dir, &cfg.arch)
    };
    Ok(SplitData {
        train: pick(Split::Train)?,
        val: pick(Split::Val)?,
        test: pick(Split::Test)?,
        entries,
        splits,
    })
}

/// Input tensor for one audio file, shaped for `arch`.
pub fn input_for_file(path: &Path, fx: &FeatureExtractor, arch: &ArchConfig) -> Result<Tensor, FileError> {
    let (fm, mfcc) = featurize_file(path, fx)?;
    let values = match arch.network {
        NetworkKind::CnnTransformer => fm.into_values(),
        NetworkKind::Mlp => mfcc.into_values(),
    };
    let mut shape = vec![1];
    shape.extend(arch.input_shape());
    Ok(Tensor::new(&shape, values).expect("extractor output matches the configured shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;
    use crate::features::{read_feature_cache, FeatureConfig};
    use crate::model::EmotionLabel;
    use crate::synth::synth_corpus;

    fn small_fx() -> FeatureExtractor {
        FeatureExtractor::new(FeatureConfig {
            target_frames: 40,
            ..FeatureConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn featurize_writes_then_skips() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cache = dir.path().join("cache");
        let mut entries = synth_corpus(&data, 1, 3).unwrap();
        let fx = small_fx();
        let r = featurize_entries(&entries, &data, &cache, &fx).unwrap();
        assert_eq!((r.written.len(), r.up_to_date.len()), (4, 0));
        let p = cache_paths(&cache, &entries[0].path);
        let fm = read_feature_cache(&p.features).unwrap();
        assert_eq!((fm.n_mels(), fm.n_frames()), (128, 40));
        let mfcc = read_feature_cache(&p.mfcc).unwrap();
        assert_eq!((mfcc.n_mels(), mfcc.n_frames()), (2 * DEFAULT_MFCC_COEFFS, 1));
        assert_eq!(std::fs::read_to_string(&p.stamp).unwrap().trim().len(), 64);

        let before = std::fs::metadata(&p.features).unwrap().modified().unwrap();
        let r = featurize_entries(&entries, &data, &cache, &fx).unwrap();
        assert_eq!((r.written.len(), r.up_to_date.len()), (0, 4));
        assert_eq!(std::fs::metadata(&p.features).unwrap().modified().unwrap(), before);

        let other = FeatureExtractor::new(FeatureConfig { target_frames: 41, ..FeatureConfig::default() }).unwrap();
        assert_eq!(featurize_entries(&entries, &data, &cache, &other).unwrap().written.len(), 4);

        entries.push(ManifestEntry {
            path: "missing.wav".into(),
            label: EmotionLabel::Anger,
            split: None,
        });
        let r = featurize_entries(&entries, &data, &cache, &fx).unwrap();
        assert!(!r.ok());
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].0, "missing.wav");
    }

    #[test]
    fn single_file_input_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let entries = synth_corpus(dir.path(), 1, 3).unwrap();
        let fx = small_fx();
        let path = dir.path().join(&entries[0].path);
        let arch = ArchConfig { input_frames: 40, ..ArchConfig::default() };
        assert_eq!(input_for_file(&path, &fx, &arch).unwrap().shape(), &[1, 1, 128, 40]);
        assert_eq!(input_for_file(&path, &fx, &ArchConfig::mlp()).unwrap().shape(), &[1, 26]);
    }
}
