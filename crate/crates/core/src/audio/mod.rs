//! Audio ingestion: WAV decoding, resampling to the canonical rate, silence
//! trimming and amplitude standardization.

mod resample;
mod wav;

pub use resample::resample;
pub use wav::{load_wav, write_wav_pcm16};

use std::path::PathBuf;

/// Canonical sample rate of the feature pipeline.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Default trim level relative to the loudest frame.
pub const DEFAULT_TRIM_DB: f64 = -40.0;

const TRIM_FRAME_MS: u32 = 25;
const TRIM_HOP_MS: u32 = 10;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed WAV file {path}: {reason}")]
    MalformedWav { path: PathBuf, reason: String },
    #[error("unsupported encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },
    #[error("signal is constant (std < 1e-12); nothing to normalize")]
    ConstantSignal,
    #[error("waveform is empty")]
    Empty,
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardize to zero mean and unit (population) variance.
pub fn condition(w: &Waveform) -> Result<Waveform, AudioError> {
    let (mean, std) = mean_std(&w.samples);
    if std < 1e-12 {
        return Err(AudioError::ConstantSignal);
    }
    let samples = w.samples.iter().map(|s| (s - mean) / std).collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Remove leading and trailing low-energy frames.
///
/// Frames are 25 ms long with a 10 ms hop. A frame is quiet when its energy is
/// more than `|threshold_db|` below the loudest frame. Samples covered only by
/// leading (or trailing) quiet frames are dropped; the result is always a
/// contiguous slice of the input. Signals shorter than one frame, silent
/// signals and signals without quiet edges come back unchanged.
pub fn trim_silence(w: &Waveform, threshold_db: f64) -> Waveform {
    let frame = (w.sample_rate * TRIM_FRAME_MS / 1000) as usize;
    let hop = (w.sample_rate * TRIM_HOP_MS / 1000) as usize;
    let n = w.samples.len();
    if frame == 0 || hop == 0 || n < frame {
        return w.clone();
    }
    let n_frames = 1 + (n - frame) / hop;
    let energies: Vec<f64> = (0..n_frames)
        .map(|i| w.samples[i * hop..i * hop + frame].iter().map(|s| s * s).sum())
        .collect();
    let peak = energies.iter().cloned().fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return w.clone();
    }
    let floor = peak * 10f64.powf(-threshold_db.abs() / 10.0);
    let loud = |e: f64| e >= floor;
    let first = energies.iter().position(|&e| loud(e)).unwrap_or(0);
    let last = energies.iter().rposition(|&e| loud(e)).unwrap_or(n_frames - 1);

    let mut start = if first == 0 { 0 } else { (first - 1) * hop + frame };
    let mut end = if last == n_frames - 1 { n } else { (last + 1) * hop };
    if start >= end {
        // Burst shorter than a frame: fall back to the span of the loud frames.
        start = first * hop;
        end = (last * hop + frame).min(n);
    }
    Waveform {
        samples: w.samples[start..end].to_vec(),
        sample_rate: w.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, sr: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn condition_two_samples() {
        let w = Waveform::new(vec![1.0, 3.0], 16_000).unwrap();
        assert_eq!(condition(&w).unwrap().samples(), &[-1.0, 1.0]);
    }

    #[test]
    fn condition_constant_is_error() {
        let w = Waveform::new(vec![0.7, 0.7, 0.7], 16_000).unwrap();
        assert!(matches!(condition(&w), Err(AudioError::ConstantSignal)));
    }

    #[test]
    fn condition_normalized_noise_is_stable() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..20_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let once = condition(&Waveform::new(raw, 16_000).unwrap()).unwrap();
        let twice = condition(&once).unwrap();
        let (m, s) = mean_std(twice.samples());
        assert!(m.abs() < 1e-6);
        assert!((s * s - 1.0).abs() < 1e-6);
        for (a, b) in once.samples().iter().zip(twice.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(matches!(Waveform::new(vec![], 16_000), Err(AudioError::Empty)));
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn trim_padded_sine() {
        let sr = 16_000;
        let mut s = vec![0.0; 8000];
        s.extend(sine(440.0, sr, 16_000));
        s.extend(vec![0.0; 8000]);
        let w = Waveform::new(s, sr).unwrap();
        let t = trim_silence(&w, -40.0);
        let hop = 160.0;
        assert!((t.len() as f64 - 16_000.0).abs() <= hop, "len {}", t.len());
        let (m, _) = mean_std(t.samples());
        assert!(m.abs() < 0.05);
    }

    #[test]
    fn trim_pure_sine_is_noop() {
        let w = Waveform::new(sine(300.0, 16_000, 16_000), 16_000).unwrap();
        assert_eq!(trim_silence(&w, -40.0), w);
    }

    #[test]
    fn trim_all_zero_is_noop() {
        let w = Waveform::new(vec![0.0; 5000], 16_000).unwrap();
        assert_eq!(trim_silence(&w, -40.0), w);
    }

    #[test]
    fn trim_short_burst_keeps_burst() {
        let mut s = vec![0.0; 4000];
        for v in s.iter_mut().skip(2000).take(50) {
            *v = 1.0;
        }
        let w = Waveform::new(s, 16_000).unwrap();
        let t = trim_silence(&w, -40.0);
        assert!(t.samples().iter().filter(|&&v| v == 1.0).count() == 50);
    }

    proptest::proptest! {
        #[test]
        fn trim_output_is_contiguous_slice(
            lead in 0usize..3000, body in 400usize..4000, tail in 0usize..3000, freq in 100.0f64..3000.0
        ) {
            let mut s = vec![0.0; lead];
            s.extend(sine(freq, 16_000, body));
            s.extend(vec![0.0; tail]);
            let w = Waveform::new(s.clone(), 16_000).unwrap();
            let t = trim_silence(&w, -40.0);
            let out = t.samples();
            let found = (0..=s.len() - out.len()).any(|off| &s[off..off + out.len()] == out);
            proptest::prop_assert!(found);
        }
    }
}
