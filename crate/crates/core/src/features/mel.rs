use super::{FeatureError, FeatureMap, Matrix, MelSpec};

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank, `n_mels × (n_fft/2 + 1)`.
///
/// Filter `k` peaks at the `k+1`-th of `n_mels + 2` points spaced uniformly on
/// the Mel scale between `fmin` and `fmax`, and falls to zero at its
/// neighbours. Each slope is widened to at least one FFT bin, so filters
/// narrower than the frequency resolution still sample the bins nearest their
/// centre instead of coming out empty.
pub fn mel_filterbank(spec: &MelSpec, sample_rate: u32) -> Result<Matrix, FeatureError> {
    spec.validate(sample_rate)?;
    let n_bins = spec.n_bins();
    if spec.n_mels > n_bins {
        return Err(FeatureError::DegenerateFilter {
            index: n_bins,
            reason: format!(
                "{} filters exceed the {n_bins} frequency bins of a {}-point FFT",
                spec.n_mels, spec.n_fft
            ),
        });
    }
    let bin_hz = sample_rate as f64 / spec.n_fft as f64;
    let (mel_lo, mel_hi) = (hz_to_mel(spec.fmin), hz_to_mel(spec.fmax));
    let step = (mel_hi - mel_lo) / (spec.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..spec.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();

    let mut fb = Matrix::zeros(spec.n_mels, n_bins);
    for k in 0..spec.n_mels {
        let centre = edges[k + 1];
        let left = edges[k].min(centre - bin_hz);
        let right = edges[k + 2].max(centre + bin_hz);
        let row = &mut fb.data[k * n_bins..(k + 1) * n_bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let rise = (f - left) / (centre - left);
            let fall = (right - f) / (right - centre);
            *w = rise.min(fall).max(0.0);
        }
        if !row.iter().any(|&w| w > 0.0) {
            return Err(FeatureError::DegenerateFilter {
                index: k,
                reason: format!("no FFT bin falls inside {left:.2}..{right:.2} Hz"),
            });
        }
    }
    Ok(fb)
}

/// `ln(max(fb · power, log_floor))`.
pub fn log_mel(power: &Matrix, fb: &Matrix, log_floor: f64) -> Result<FeatureMap, FeatureError> {
    if fb.cols != power.rows {
        return Err(FeatureError::ShapeMismatch(format!(
            "filterbank has {} columns but the power matrix has {} rows",
            fb.cols, power.rows
        )));
    }
    let t = power.cols;
    let mut out = vec![0.0; fb.rows * t];
    for m in 0..fb.rows {
        let acc = &mut out[m * t..(m + 1) * t];
        for (b, &w) in fb.row(m).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, &p) in acc.iter_mut().zip(power.row(b)) {
                *a += w * p;
            }
        }
        for a in acc.iter_mut() {
            *a = a.max(log_floor).ln();
        }
    }
    FeatureMap::new(fb.rows, t, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn default_bank_shape_and_support() {
        let fb = mel_filterbank(&MelSpec::default(), 16_000).unwrap();
        assert_eq!((fb.rows, fb.cols), (128, 257));
        for k in 0..fb.rows {
            let row = fb.row(k);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "row {k} empty");
            // Contiguous, unimodal support.
            let nz: Vec<usize> = (0..row.len()).filter(|&b| row[b] > 0.0).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "row {k} not contiguous");
            let peak = nz.iter().cloned().max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            for w in nz.windows(2) {
                if w[1] <= peak {
                    assert!(row[w[1]] >= row[w[0]]);
                } else {
                    assert!(row[w[1]] <= row[w[0]]);
                }
            }
        }
    }

    #[test]
    fn too_many_filters() {
        let spec = MelSpec {
            n_fft: 64,
            n_mels: 40,
            ..MelSpec::default()
        };
        assert!(matches!(
            mel_filterbank(&spec, 16_000),
            Err(FeatureError::DegenerateFilter { .. })
        ));
    }

    #[test]
    fn invalid_range_rejected() {
        let spec = MelSpec {
            fmax: 9000.0,
            ..MelSpec::default()
        };
        assert!(matches!(mel_filterbank(&spec, 16_000), Err(FeatureError::InvalidSpec(_))));
    }

    #[test]
    fn log_mel_floor_and_identity() {
        let zero = Matrix::zeros(2, 3);
        let eye = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let fm = log_mel(&zero, &eye, 1e-10).unwrap();
        assert!(fm.values().iter().all(|&v| (v - 1e-10f64.ln()).abs() < 1e-12));

        let e = std::f64::consts::E;
        let p = Matrix::from_vec(2, 1, vec![e, e * e]).unwrap();
        let fm = log_mel(&p, &eye, 1e-10).unwrap();
        assert!((fm.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((fm.get(1, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_mel_shape_mismatch() {
        let p = Matrix::zeros(3, 2);
        let fb = Matrix::zeros(2, 2);
        assert!(matches!(log_mel(&p, &fb, 1e-10), Err(FeatureError::ShapeMismatch(_))));
    }
}
