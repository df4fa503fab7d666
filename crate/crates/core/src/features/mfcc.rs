use std::f64::consts::PI;

use super::{FeatureError, FeatureMap, Matrix};

/// Default cepstral coefficient count for the MLP baseline.
pub const DEFAULT_MFCC_COEFFS: usize = 13;

/// Orthonormal DCT-II along the Mel axis of each frame, keeping the first
/// `n_coeffs` coefficients. Returns `n_coeffs × T`.
pub fn mfcc(fm: &FeatureMap, n_coeffs: usize) -> Result<Matrix, FeatureError> {
    let f = fm.n_mels();
    if n_coeffs == 0 || n_coeffs > f {
        return Err(FeatureError::InvalidSpec(format!(
            "n_coeffs must be in 1..={f}, got {n_coeffs}"
        )));
    }
    let t = fm.n_frames();
    let basis = dct_basis(n_coeffs, f);
    let mut out = Matrix::zeros(n_coeffs, t);
    for k in 0..n_coeffs {
        for m in 0..f {
            let c = basis[k * f + m];
            let src = &fm.values()[m * t..(m + 1) * t];
            for (o, &x) in out.data[k * t..(k + 1) * t].iter_mut().zip(src) {
                *o += c * x;
            }
        }
    }
    Ok(out)
}

/// Per-coefficient mean and population std over frames: `[means..., stds...]`.
pub fn mfcc_stats(coeffs: &Matrix) -> Vec<f64> {
    let mut means = Vec::with_capacity(coeffs.rows);
    let mut stds = Vec::with_capacity(coeffs.rows);
    for k in 0..coeffs.rows {
        let (m, s) = crate::audio::mean_std(coeffs.row(k));
        means.push(m);
        stds.push(s);
    }
    means.extend(stds);
    means
}

fn dct_basis(n_coeffs: usize, n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n_coeffs * n];
    for k in 0..n_coeffs {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for m in 0..n {
            b[k * n + m] = scale * (PI * k as f64 * (2 * m + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    b
}
