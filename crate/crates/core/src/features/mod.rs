//! Log-Mel feature extraction.
//!
//! The chain is frame → Hamming window → |FFT|² → triangular Mel filterbank →
//! natural log → per-utterance standardization → fixed-length crop/pad. MFCCs
//! (orthonormal DCT-II of the log-Mel columns) feed the MLP baseline.

mod cache;
mod mel;
mod mfcc;
mod pipeline;
mod stft;

pub use cache::{read_feature_cache, write_feature_cache, FEATURE_MAGIC};
pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz};
pub use mfcc::{mfcc, mfcc_stats};
pub use mfcc::DEFAULT_MFCC_COEFFS;
pub use pipeline::{ExtractError, FeatureConfig, FeatureExtractor};
pub use stft::{frame_signal, hamming_window, stft_power};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("signal of {len} samples is shorter than one {frame_len}-sample frame")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("invalid spectral configuration: {0}")]
    InvalidSpec(String),
    #[error("degenerate Mel filter {index}: {reason}")]
    DegenerateFilter { index: usize, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature map is constant (std < 1e-12)")]
    ConstantFeatures,
    #[error("feature map contains non-finite values")]
    NonFinite,
    #[error("bad feature cache file {path}: {reason}")]
    BadCache { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Analysis frame geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramingSpec {
    pub frame_len_ms: f64,
    pub hop_ms: f64,
}

impl Default for FramingSpec {
    fn default() -> Self {
        Self {
            frame_len_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

impl FramingSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.hop_ms > 0.0 && self.frame_len_ms > self.hop_ms) {
            return Err(FeatureError::InvalidFraming(format!(
                "need frame_len_ms > hop_ms > 0, got {} / {}",
                self.frame_len_ms, self.hop_ms
            )));
        }
        Ok(())
    }

    /// Frame length and hop in samples; both must be whole numbers.
    pub fn in_samples(&self, sample_rate: u32) -> Result<(usize, usize), FeatureError> {
        self.validate()?;
        let to_samples = |ms: f64| {
            let s = sample_rate as f64 * ms / 1000.0;
            if (s - s.round()).abs() > 1e-9 {
                Err(FeatureError::InvalidFraming(format!(
                    "{ms} ms is not a whole number of samples at {sample_rate} Hz"
                )))
            } else {
                Ok(s.round() as usize)
            }
        };
        Ok((to_samples(self.frame_len_ms)?, to_samples(self.hop_ms)?))
    }
}

/// Mel filterbank and log-compression settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelSpec {
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelSpec {
    fn default() -> Self {
        Self {
            n_fft: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelSpec {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), FeatureError> {
        if self.n_mels == 0 {
            return Err(FeatureError::InvalidSpec("n_mels must be >= 1".into()));
        }
        if self.n_fft < 2 {
            return Err(FeatureError::InvalidSpec("n_fft must be >= 2".into()));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= sample_rate as f64 / 2.0) {
            return Err(FeatureError::InvalidSpec(format!(
                "need 0 <= fmin < fmax <= {} Hz, got {}..{}",
                sample_rate as f64 / 2.0,
                self.fmin,
                self.fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(FeatureError::InvalidSpec("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if data.len() != rows * cols {
            return Err(FeatureError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Mel bins × frames matrix of log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_mels: usize,
    n_frames: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f64>) -> Result<Self, FeatureError> {
        if n_mels == 0 || n_frames == 0 || values.len() != n_mels * n_frames {
            return Err(FeatureError::ShapeMismatch(format!(
                "{} values for a {n_mels}x{n_frames} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self {
            n_mels,
            n_frames,
            values,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Row-major values: `values()[m * n_frames + t]`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Standardize over all cells with a single mean and population std.
pub fn normalize_features(fm: &FeatureMap) -> Result<FeatureMap, FeatureError> {
    let (mean, std) = crate::audio::mean_std(&fm.values);
    if !(std >= 1e-12) {
        return Err(FeatureError::ConstantFeatures);
    }
    let values = fm.values.iter().map(|v| (v - mean) / std).collect();
    FeatureMap::new(fm.n_mels, fm.n_frames, values)
}

/// Crop (centered) or right-pad (with the map minimum) to `target_frames`.
pub fn pad_or_truncate(fm: &FeatureMap, target_frames: usize) -> FeatureMap {
    assert!(target_frames >= 1, "target_frames must be >= 1");
    let t = fm.n_frames;
    if t == target_frames {
        return fm.clone();
    }
    let mut values = Vec::with_capacity(fm.n_mels * target_frames);
    if t > target_frames {
        let start = (t - target_frames) / 2;
        for m in 0..fm.n_mels {
            let row = &fm.values[m * t..(m + 1) * t];
            values.extend_from_slice(&row[start..start + target_frames]);
        }
    } else {
        let fill = fm.values.iter().cloned().fold(f64::INFINITY, f64::min);
        for m in 0..fm.n_mels {
            values.extend_from_slice(&fm.values[m * t..(m + 1) * t]);
            values.extend(std::iter::repeat_n(fill, target_frames - t));
        }
    }
    FeatureMap {
        n_mels: fm.n_mels,
        n_frames: target_frames,
        values,
    }
}
