use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

use super::{FeatureError, FramingSpec, Matrix};
use crate::audio::Waveform;

/// Symmetric Hamming window, `w[n] = 0.54 - 0.46 cos(2πn / (N - 1))`.
pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Split into overlapping Hamming-windowed frames.
///
/// Yields `1 + (len - frame_len) / hop` frames; trailing samples that do not
/// fill a frame are dropped.
pub fn frame_signal(w: &Waveform, spec: &FramingSpec) -> Result<Vec<Vec<f64>>, FeatureError> {
    let (frame_len, hop) = spec.in_samples(w.sample_rate())?;
    let s = w.samples();
    if s.len() < frame_len {
        return Err(FeatureError::SignalTooShort {
            len: s.len(),
            frame_len,
        });
    }
    let window = hamming_window(frame_len);
    let n_frames = 1 + (s.len() - frame_len) / hop;
    Ok((0..n_frames)
        .map(|i| {
            s[i * hop..i * hop + frame_len]
                .iter()
                .zip(&window)
                .map(|(x, w)| x * w)
                .collect()
        })
        .collect())
}

/// One-sided power spectrum of each frame: an `(n_fft/2 + 1) × T` matrix
/// whose column `t` is `|DFT(frame_t zero-padded to n_fft)|²`.
pub fn stft_power(frames: &[Vec<f64>], n_fft: usize) -> Result<Matrix, FeatureError> {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    stft_power_with(frames, n_fft, &fft)
}

pub(crate) fn stft_power_with(
    frames: &[Vec<f64>],
    n_fft: usize,
    fft: &Arc<dyn Fft<f64>>,
) -> Result<Matrix, FeatureError> {
    let n_bins = n_fft / 2 + 1;
    let t = frames.len();
    let mut out = Matrix::zeros(n_bins, t);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for (col, frame) in frames.iter().enumerate() {
        if frame.len() > n_fft {
            return Err(FeatureError::InvalidSpec(format!(
                "n_fft {n_fft} is shorter than the {}-sample frame",
                frame.len()
            )));
        }
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, c) in buf[..n_bins].iter().enumerate() {
            out.data[bin * t + col] = c.norm_sqr();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_endpoints() {
        let w = hamming_window(400);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[399] - 0.08).abs() < 1e-12);
        assert!(w.iter().all(|&v| v <= 1.0 + 1e-12));
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.1; 16_000], 16_000).unwrap();
        assert_eq!(frame_signal(&w, &FramingSpec::default()).unwrap().len(), 98);
    }

    #[test]
    fn too_short_signal() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(
            frame_signal(&w, &FramingSpec::default()),
            Err(FeatureError::SignalTooShort { len: 399, frame_len: 400 })
        ));
    }

    #[test]
    fn zero_frame_zero_column() {
        let p = stft_power(&[vec![0.0; 400]], 512).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
        assert_eq!((p.rows, p.cols), (257, 1));
    }

    #[test]
    fn sine_peaks_at_bin_32() {
        let frame: Vec<f64> = (0..512)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let p = stft_power(&[frame], 512).unwrap();
        let peak = (0..p.rows).max_by(|&a, &b| p.get(a, 0).total_cmp(&p.get(b, 0))).unwrap();
        assert_eq!(peak, 32);
    }

    #[test]
    fn frame_longer_than_fft_rejected() {
        assert!(stft_power(&[vec![1.0; 600]], 512).is_err());
    }

    proptest::proptest! {
        #[test]
        fn frame_count_formula(len in 400usize..40_000) {
            let w = Waveform::new(vec![0.5; len], 16_000).unwrap();
            let frames = frame_signal(&w, &FramingSpec::default()).unwrap();
            proptest::prop_assert_eq!(frames.len(), 1 + (len - 400) / 160);
        }

        #[test]
        fn parseval(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frame: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n_fft = 512;
            let p = stft_power(std::slice::from_ref(&frame), n_fft).unwrap();
            let half = n_fft / 2;
            let spectral: f64 = (0..=half)
                .map(|b| if b == 0 || b == half { p.get(b, 0) } else { 2.0 * p.get(b, 0) })
                .sum();
            let temporal: f64 = n_fft as f64 * frame.iter().map(|x| x * x).sum::<f64>();
            proptest::prop_assert!(((spectral - temporal) / temporal).abs() < 1e-6);
        }
    }
}
