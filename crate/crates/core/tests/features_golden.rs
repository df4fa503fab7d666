//! Full feature pipeline against fixtures produced by an independent NumPy
//! implementation (`fixtures/make_golden.py`).

use std::path::PathBuf;

use ser_core::audio::load_wav;
use ser_core::features::{read_feature_cache, FeatureConfig, FeatureExtractor};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(name: &str) -> f64 {
    let config = FeatureConfig {
        target_frames: 100,
        ..FeatureConfig::default()
    };
    let ex = FeatureExtractor::new(config).unwrap();
    let raw = load_wav(&fixture(&format!("{name}.wav"))).unwrap();
    let got = ex.extract(&raw).unwrap();
    let want = read_feature_cache(&fixture(&format!("{name}.serfeat"))).unwrap();
    assert_eq!((got.n_mels(), got.n_frames()), (want.n_mels(), want.n_frames()));
    got.values()
        .iter()
        .zip(want.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn two_tone_with_silence_matches_golden() {
    let err = check("two_tone_16k");
    assert!(err < 1e-4, "max abs error {err}");
}

#[test]
fn resampled_chirp_matches_golden() {
    let err = check("chirp_22k");
    assert!(err < 1e-4, "max abs error {err}");
}

#[test]
fn upsampled_noise_matches_golden() {
    let err = check("noise_8k");
    assert!(err < 1e-4, "max abs error {err}");
}
