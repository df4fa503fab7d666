//! INI run configuration. Sections: `[audio]`, `[features]`, `[model]`,
//! `[train]`, `[paths]`. Every key is optional and defaults to the reference
//! hyperparameters, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use ini::Ini;

use crate::data::DEFAULT_RATIOS;
use crate::features::{FeatureConfig, DEFAULT_MFCC_COEFFS};
use crate::model::{ArchConfig, NetworkKind};
use crate::train::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SER_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("unknown config key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("bad value {value:?} for {section}.{key}: {reason}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    /// Base for relative manifest paths; defaults to the manifest's directory.
    pub data_dir: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            data_dir: None,
            cache_dir: "cache".into(),
            run_dir: "run".into(),
            checkpoint: None,
            report_dir: "reports".into(),
        }
    }
}

impl PathsConfig {
    pub fn data_base(&self) -> PathBuf {
        match (&self.data_dir, &self.manifest) {
            (Some(d), _) => d.clone(),
            (None, Some(m)) => m.parent().map(Path::to_path_buf).unwrap_or_default(),
            (None, None) => PathBuf::new(),
        }
    }

    /// Explicit checkpoint, else `best.ckpt` in the run directory.
    pub fn checkpoint_or_best(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.run_dir.join("best.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub features: FeatureConfig,
    /// `n_mels` and `input_frames` always mirror the feature settings.
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub split_ratios: [f64; 3],
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            features: FeatureConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            split_ratios: DEFAULT_RATIOS,
            paths: PathsConfig::default(),
        };
        c.sync();
        c
    }
}

const SECTIONS: [&str; 5] = ["audio", "features", "model", "train", "paths"];

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| e.to_string())
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(parse_num).collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    fn sync(&mut self) {
        self.arch.n_mels = self.features.mel.n_mels;
        self.arch.input_frames = self.features.target_frames;
        self.arch.mlp_input = 2 * DEFAULT_MFCC_COEFFS;
    }

    /// Set one key from its text form.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        if !SECTIONS.contains(&section) {
            return Err(ConfigError::UnknownSection(section.to_string()));
        }
        let r: Result<(), String> = (|| {
            let f = &mut self.features;
            let a = &mut self.arch;
            let t = &mut self.train;
            let p = &mut self.paths;
            match (section, key) {
                ("audio", "sample_rate") => f.sample_rate = parse_num(value)?,
                ("audio", "trim_db") => f.trim_db = parse_num(value)?,
                ("features", "frame_len_ms") => f.framing.frame_len_ms = parse_num(value)?,
                ("features", "hop_ms") => f.framing.hop_ms = parse_num(value)?,
                ("features", "n_fft") => f.mel.n_fft = parse_num(value)?,
                ("features", "n_mels") => f.mel.n_mels = parse_num(value)?,
                ("features", "fmin") => f.mel.fmin = parse_num(value)?,
                ("features", "fmax") => f.mel.fmax = parse_num(value)?,
                ("features", "log_floor") => f.mel.log_floor = parse_num(value)?,
                ("features", "target_frames") => f.target_frames = parse_num(value)?,
                ("model", "network") => a.network = value.trim().parse::<NetworkKind>().map_err(|e| e.to_string())?,
                ("model", "conv_channels") => a.conv_channels = parse_list(value)?,
                ("model", "conv_kernel") => a.conv_kernel = parse_num(value)?,
                ("model", "n_encoder_layers") => a.n_encoder_layers = parse_num(value)?,
                ("model", "n_heads") => a.n_heads = parse_num(value)?,
                ("model", "d_model") => a.d_model = parse_num(value)?,
                ("model", "d_ff") => a.d_ff = parse_num(value)?,
                ("model", "dropout") => a.dropout = parse_num(value)?,
                ("model", "mlp_hidden") => a.mlp_hidden = parse_num(value)?,
                ("train", "lr0") => t.lr0 = parse_num(value)?,
                ("train", "weight_decay") => t.weight_decay = parse_num(value)?,
                ("train", "batch_size") => t.batch_size = parse_num(value)?,
                ("train", "max_epochs") => t.max_epochs = parse_num(value)?,
                ("train", "patience") => t.patience = parse_num(value)?,
                ("train", "seed") => t.seed = parse_num(value)?,
                ("train", "beta1") => t.beta1 = parse_num(value)?,
                ("train", "beta2") => t.beta2 = parse_num(value)?,
                ("train", "eps") => t.eps = parse_num(value)?,
                ("train", "eta_min") => t.eta_min = parse_num(value)?,
                ("train", "bn_momentum") => t.bn_momentum = parse_num(value)?,
                ("train", "precision") => t.precision = value.trim().parse()?,
                ("train", "split_ratios") => {
                    let v: Vec<f64> = parse_list(value)?;
                    self.split_ratios = v
                        .try_into()
                        .map_err(|v: Vec<f64>| format!("expected 3 ratios, got {}", v.len()))?;
                }
                ("paths", "manifest") => p.manifest = opt_path(value),
                ("paths", "data_dir") => p.data_dir = opt_path(value),
                ("paths", "cache_dir") => p.cache_dir = value.trim().into(),
                ("paths", "run_dir") => p.run_dir = value.trim().into(),
                ("paths", "checkpoint") => p.checkpoint = opt_path(value),
                ("paths", "report_dir") => p.report_dir = value.trim().into(),
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        self.sync();
        r.map_err(|reason| {
            if reason.is_empty() {
                ConfigError::UnknownKey {
                    section: section.to_string(),
                    key: key.to_string(),
                }
            } else {
                ConfigError::BadValue {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                }
            }
        })
    }

    /// Apply a `section.key=value` override.
    pub fn set_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Parse(format!("override {spec:?} is not section.key=value"));
        let (lhs, value) = spec.split_once('=').ok_or_else(bad)?;
        let (section, key) = lhs.trim().split_once('.').ok_or_else(bad)?;
        self.set(section, key, value)
    }

    /// Every key with its current value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let (f, a, t, p) = (&self.features, &self.arch, &self.train, &self.paths);
        vec![
            ("audio", "sample_rate", f.sample_rate.to_string()),
            ("audio", "trim_db", f.trim_db.to_string()),
            ("features", "frame_len_ms", f.framing.frame_len_ms.to_string()),
            ("features", "hop_ms", f.framing.hop_ms.to_string()),
            ("features", "n_fft", f.mel.n_fft.to_string()),
            ("features", "n_mels", f.mel.n_mels.to_string()),
            ("features", "fmin", f.mel.fmin.to_string()),
            ("features", "fmax", f.mel.fmax.to_string()),
            ("features", "log_floor", f.mel.log_floor.to_string()),
            ("features", "target_frames", f.target_frames.to_string()),
            ("model", "network", a.network.name().to_string()),
            ("model", "conv_channels", join(&a.conv_channels)),
            ("model", "conv_kernel", a.conv_kernel.to_string()),
            ("model", "n_encoder_layers", a.n_encoder_layers.to_string()),
            ("model", "n_heads", a.n_heads.to_string()),
            ("model", "d_model", a.d_model.to_string()),
            ("model", "d_ff", a.d_ff.to_string()),
            ("model", "dropout", a.dropout.to_string()),
            ("model", "mlp_hidden", a.mlp_hidden.to_string()),
            ("train", "lr0", t.lr0.to_string()),
            ("train", "weight_decay", t.weight_decay.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "max_epochs", t.max_epochs.to_string()),
            ("train", "patience", t.patience.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "beta1", t.beta1.to_string()),
            ("train", "beta2", t.beta2.to_string()),
            ("train", "eps", t.eps.to_string()),
            ("train", "eta_min", t.eta_min.to_string()),
            ("train", "bn_momentum", t.bn_momentum.to_string()),
            ("train", "precision", t.precision.name().to_string()),
            ("train", "split_ratios", join(&self.split_ratios)),
            ("paths", "manifest", show_path(&p.manifest)),
            ("paths", "data_dir", show_path(&p.data_dir)),
            ("paths", "cache_dir", p.cache_dir.display().to_string()),
            ("paths", "run_dir", p.run_dir.display().to_string()),
            ("paths", "checkpoint", show_path(&p.checkpoint)),
            ("paths", "report_dir", p.report_dir.display().to_string()),
        ]
    }

    pub fn from_ini_str(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(ConfigError::Parse(format!("key {key:?} appears before any [section]")));
                }
                continue;
            };
            if !SECTIONS.contains(&section) {
                return Err(ConfigError::UnknownSection(section.to_string()));
            }
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        for (section, key, value) in self.entries() {
            ini.with_section(Some(section)).set(key, value);
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_ini_str(&text)
    }

    /// Check every component's invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let f = &self.features;
        f.framing.in_samples(f.sample_rate).map_err(|e| invalid(&e))?;
        f.mel.validate(f.sample_rate).map_err(|e| invalid(&e))?;
        if f.target_frames == 0 {
            return Err(ConfigError::Invalid("target_frames must be >= 1".into()));
        }
        if f.mel.n_fft < (f.sample_rate as f64 * f.framing.frame_len_ms / 1000.0).round() as usize {
            return Err(ConfigError::Invalid("n_fft is shorter than one frame".into()));
        }
        if !(f.trim_db < 0.0) {
            return Err(ConfigError::Invalid(format!("trim_db must be negative, got {}", f.trim_db)));
        }
        self.arch.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        let r = self.split_ratios;
        if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("split ratios {r:?} must be >= 0 and sum to 1")));
        }
        Ok(())
    }
}
