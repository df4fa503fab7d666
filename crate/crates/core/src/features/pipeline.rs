use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use super::stft::stft_power_with;
use super::{
    frame_signal, log_mel, mel_filterbank, normalize_features, pad_or_truncate, FeatureError,
    FeatureMap, FramingSpec, Matrix, MelSpec,
};
use crate::audio::{self, AudioError, Waveform};

/// Everything needed to turn a waveform into model input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub trim_db: f64,
    pub framing: FramingSpec,
    pub mel: MelSpec,
    pub target_frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: audio::TARGET_SAMPLE_RATE,
            trim_db: audio::DEFAULT_TRIM_DB,
            framing: FramingSpec::default(),
            mel: MelSpec::default(),
            target_frames: 300,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Reusable extractor holding the filterbank and FFT plan. Immutable and
/// shareable across threads.
pub struct FeatureExtractor {
    config: FeatureConfig,
    filterbank: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("config", &self.config).finish()
    }
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self, FeatureError> {
        let (frame_len, _) = config.framing.in_samples(config.sample_rate)?;
        if config.mel.n_fft < frame_len {
            return Err(FeatureError::InvalidSpec(format!(
                "n_fft {} is shorter than the {frame_len}-sample frame",
                config.mel.n_fft
            )));
        }
        if config.target_frames == 0 {
            return Err(FeatureError::InvalidSpec("target_frames must be >= 1".into()));
        }
        let filterbank = mel_filterbank(&config.mel, config.sample_rate)?;
        let fft = FftPlanner::new().plan_fft_forward(config.mel.n_fft);
        Ok(Self {
            config,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Resample, trim and condition raw audio.
    pub fn prepare(&self, w: &Waveform) -> Result<Waveform, AudioError> {
        let w = audio::resample(w, self.config.sample_rate);
        let w = audio::trim_silence(&w, self.config.trim_db);
        audio::condition(&w)
    }

    /// Log-Mel map of an already prepared waveform (no standardization).
    pub fn log_mel(&self, w: &Waveform) -> Result<FeatureMap, FeatureError> {
        let frames = frame_signal(w, &self.config.framing)?;
        let power = stft_power_with(&frames, self.config.mel.n_fft, &self.fft)?;
        log_mel(&power, &self.filterbank, self.config.mel.log_floor)
    }

    /// Full path from raw audio to the fixed-size, standardized model input.
    pub fn extract(&self, raw: &Waveform) -> Result<FeatureMap, ExtractError> {
        let prepared = self.prepare(raw)?;
        let fm = self.log_mel(&prepared)?;
        let fm = normalize_features(&fm)?;
        Ok(pad_or_truncate(&fm, self.config.target_frames))
    }

    /// Model input plus per-utterance MFCC statistics (mean and std of each
    /// of the first `n_coeffs` coefficients, from the unstandardized map).
    pub fn extract_with_mfcc_stats(
        &self,
        raw: &Waveform,
        n_coeffs: usize,
    ) -> Result<(FeatureMap, Vec<f64>), ExtractError> {
        let prepared = self.prepare(raw)?;
        let fm = self.log_mel(&prepared)?;
        let stats = super::mfcc_stats(&super::mfcc(&fm, n_coeffs)?);
        let fm = normalize_features(&fm)?;
        Ok((pad_or_truncate(&fm, self.config.target_frames), stats))
    }

    /// Raw log-Mel map (before standardization and cropping), used for MFCCs.
    pub fn extract_unnormalized(&self, raw: &Waveform) -> Result<FeatureMap, ExtractError> {
        let prepared = self.prepare(raw)?;
        Ok(self.log_mel(&prepared)?)
    }
}
