//! Synthetic emotional-speech corpus: harmonic tones whose pitch band,
//! amplitude envelope and spectral tilt depend on the class, plus seeded noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav_pcm16, AudioError, TARGET_SAMPLE_RATE};
use crate::data::{format_manifest, ManifestEntry};
use crate::model::EmotionLabel;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("n_per_class must be >= 1")]
    NoItems,
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Envelope families.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Envelope {
    /// Fast attack with syllable-rate amplitude bursts.
    Bursty,
    /// Rising pitch glide under a smooth bell.
    Bell,
    /// Slow attack, long exponential decay.
    Decaying,
    /// Flat with short fades.
    Steady,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Voice {
    f0: (f64, f64),
    /// Harmonic gain in dB per octave.
    tilt_db: f64,
    envelope: Envelope,
    /// Relative pitch rise over the utterance.
    glide: f64,
}

fn voice(label: EmotionLabel) -> Voice {
    match label {
        EmotionLabel::Anger => Voice { f0: (230.0, 270.0), tilt_db: -2.0, envelope: Envelope::Bursty, glide: 0.0 },
        EmotionLabel::Happiness => Voice { f0: (175.0, 205.0), tilt_db: -5.0, envelope: Envelope::Bell, glide: 0.25 },
        EmotionLabel::Sadness => Voice { f0: (95.0, 115.0), tilt_db: -13.0, envelope: Envelope::Decaying, glide: -0.1 },
        EmotionLabel::Neutral => Voice { f0: (130.0, 150.0), tilt_db: -8.0, envelope: Envelope::Steady, glide: 0.0 },
    }
}

fn envelope(kind: Envelope, u: f64, rate: f64) -> f64 {
    let fade = |w: f64| (u / w).min(1.0) * ((1.0 - u) / w).min(1.0);
    match kind {
        Envelope::Bursty => fade(0.02) * (0.55 + 0.45 * (2.0 * PI * rate * u).sin().abs()),
        Envelope::Bell => (PI * u).sin().powf(1.5),
        Envelope::Decaying => fade(0.02) * (u / 0.15).min(1.0) * (-2.5 * u).exp(),
        Envelope::Steady => fade(0.08),
    }
}

/// One utterance at 16 kHz. Every draw comes from `rng`, so a fixed stream
/// gives identical samples.
pub fn synth_utterance(label: EmotionLabel, rng: &mut impl Rng) -> Vec<f64> {
    let sr = TARGET_SAMPLE_RATE as f64;
    let v = voice(label);
    let secs = rng.gen_range(1.2..1.8);
    let f0 = rng.gen_range(v.f0.0..v.f0.1);
    let rate = rng.gen_range(3.0..5.0);
    let vibrato = rng.gen_range(4.0..6.0);
    let n = (secs * sr) as usize;
    let n_harm = ((7000.0 / (f0 * (1.0 + v.glide.max(0.0)))) as usize).max(1);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let gains: Vec<f64> = (1..=n_harm)
        .map(|h| 10f64.powf(v.tilt_db * (h as f64).log2() / 20.0))
        .collect();
    let pad = (0.1 * sr) as usize;
    let mut out = vec![0.0; n + 2 * pad];
    let mut phase = 0.0;
    for i in 0..n {
        let u = i as f64 / n as f64;
        let f = f0 * (1.0 + v.glide * u) * (1.0 + 0.01 * (2.0 * PI * vibrato * i as f64 / sr).sin());
        phase += 2.0 * PI * f / sr;
        let tone: f64 = gains
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(h, (&g, &p))| g * ((h + 1) as f64 * phase + p).sin())
            .sum();
        out[pad + i] = envelope(v.envelope, u, rate) * tone;
    }
    let peak = out.iter().fold(0.0f64, |m, &s| m.max(s.abs())).max(1e-12);
    for s in &mut out {
        *s = 0.7 * *s / peak + 0.01 * rng.gen_range(-1.0..1.0);
    }
    out
}

/// Write `n_per_class` WAVs per class plus `manifest.csv` into `out_dir`.
/// Returns the manifest rows, with paths relative to `out_dir`.
pub fn synth_corpus(out_dir: &Path, n_per_class: usize, seed: u64) -> Result<Vec<ManifestEntry>, SynthError> {
    if n_per_class == 0 {
        return Err(SynthError::NoItems);
    }
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_per_class * 4);
    for i in 0..n_per_class {
        for label in EmotionLabel::ALL {
            let name = format!("{}_{i:03}.wav", label.name());
            let samples = synth_utterance(label, &mut rng);
            write_wav_pcm16(&out_dir.join(&name), &samples, TARGET_SAMPLE_RATE)?;
            entries.push(ManifestEntry { path: name, label, split: None });
        }
    }
    let manifest = manifest_path(out_dir);
    std::fs::write(&manifest, format_manifest(&entries)).map_err(io(&manifest))?;
    Ok(entries)
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{load_wav, Waveform};
    use crate::data::read_manifest;
    use crate::features::{FeatureConfig, FeatureExtractor};

    #[test]
    fn corpus_counts_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let entries = synth_corpus(dir.path(), 4, 7).unwrap();
        assert_eq!(entries.len(), 16);
        let m = read_manifest(&manifest_path(dir.path())).unwrap();
        assert_eq!(m, entries);
        for label in EmotionLabel::ALL {
            assert_eq!(m.iter().filter(|e| e.label == label).count(), 4);
        }
        for e in &m {
            let w = load_wav(&dir.path().join(&e.path)).unwrap();
            assert_eq!(w.sample_rate(), 16_000);
            assert!(w.duration_secs() > 1.3 && w.duration_secs() < 2.1);
        }
        assert!(matches!(synth_corpus(dir.path(), 0, 7), Err(SynthError::NoItems)));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_corpus(a.path(), 2, 7).unwrap();
        synth_corpus(b.path(), 2, 7).unwrap();
        synth_corpus(c.path(), 2, 8).unwrap();
        let read = |d: &Path| std::fs::read(d.join("anger_001.wav")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        assert_ne!(read(a.path()), read(c.path()));
    }

    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }

    /// Nearest class centroid in mean-MFCC space classifies every item.
    #[test]
    fn classes_separate_by_mfcc_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let mut points: Vec<(usize, Vec<f64>)> = Vec::new();
        for _ in 0..6 {
            for label in EmotionLabel::ALL {
                let w = Waveform::new(synth_utterance(label, &mut rng), 16_000).unwrap();
                let (_, stats) = fx.extract_with_mfcc_stats(&w, 13).unwrap();
                points.push((label.index(), stats[..13].to_vec()));
            }
        }
        let centroids: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let members: Vec<&Vec<f64>> = points.iter().filter(|p| p.0 == c).map(|p| &p.1).collect();
                (0..13).map(|k| members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64).collect()
            })
            .collect();
        for (label, x) in &points {
            let nearest = (0..4)
                .min_by(|&a, &b| sq_dist(x, &centroids[a]).total_cmp(&sq_dist(x, &centroids[b])))
                .unwrap();
            assert_eq!(nearest, *label);
        }
    }
}
