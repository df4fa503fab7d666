use super::Waveform;

/// Input samples contributing to each output sample.
const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;
/// Above this many phases the per-phase table is not precomputed.
const MAX_TABLE_PHASES: u64 = 8192;

/// Convert `w` to `target_rate` with a polyphase windowed-sinc filter
/// (Kaiser window, beta 8.6, 64 taps per phase).
///
/// When the rates already match the waveform is returned unchanged. The
/// output holds `round(len * target / source)` samples; samples outside the
/// input are taken as zero.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    let source_rate = w.sample_rate();
    if source_rate == target_rate {
        return w.clone();
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let input = w.samples();
    let n_in = input.len() as u64;
    let n_out = ((n_in * up + down / 2) / down).max(1) as usize;

    // Cutoff relative to the input Nyquist frequency.
    let cutoff = (up as f64 / down as f64).min(1.0);
    let table: Option<Vec<[f64; TAPS]>> = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| phase_taps(p as f64 / up as f64, cutoff))
            .collect()
    });

    let half = (TAPS / 2) as i64;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = phase_taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let mut acc = 0.0;
        for (k, &h) in taps.iter().enumerate() {
            let idx = base + k as i64 - (half - 1);
            if idx >= 0 && (idx as u64) < n_in {
                acc += input[idx as usize] * h;
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate).expect("non-empty output at positive rate")
}

/// Filter taps for an output instant `frac` input samples past the base index.
/// Tap `k` multiplies input sample `base + k - 31`.
fn phase_taps(frac: f64, cutoff: f64) -> [f64; TAPS] {
    let half = (TAPS / 2) as f64;
    let mut taps = [0.0; TAPS];
    for (k, tap) in taps.iter_mut().enumerate() {
        let tau = k as f64 - (half - 1.0) - frac;
        *tap = cutoff * sinc(cutoff * tau) * kaiser(tau / half, KAISER_BETA);
    }
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser window evaluated at `x` in [-1, 1].
fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - x * x).sqrt()) / bessel_i0(beta)
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
