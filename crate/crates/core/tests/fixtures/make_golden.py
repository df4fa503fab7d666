"""Regenerate the log-Mel golden fixtures with an independent NumPy pipeline.

Writes <name>.wav (PCM16 input) and <name>.serfeat (expected standardized,
cropped/padded log-Mel map) for each fixture. Run from this directory:

    python3 make_golden.py
"""

import struct
import wave

import numpy as np

TARGET_SR = 16000
TRIM_DB = -40.0
N_FFT = 512
N_MELS = 128
FMIN, FMAX = 0.0, 8000.0
LOG_FLOOR = 1e-10
TARGET_FRAMES = 100
TAPS = 64
BETA = 8.6


def write_pcm16(path, samples, sr):
    ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(ints.tobytes())
    return ints.astype(np.float64) / 32768.0


def resample(x, src, dst):
    if src == dst:
        return x
    g = np.gcd(src, dst)
    up, down = dst // g, src // g
    cutoff = min(1.0, up / down)
    n_out = max(1, (len(x) * up + down // 2) // down)
    half = TAPS // 2
    k = np.arange(TAPS)
    out = np.zeros(n_out)
    for n in range(n_out):
        pos = n * down
        base, phase = divmod(pos, up)
        tau = k - (half - 1) - phase / up
        win = np.i0(BETA * np.sqrt(np.clip(1.0 - (tau / half) ** 2, 0.0, None))) / np.i0(BETA)
        win[np.abs(tau / half) > 1.0] = 0.0
        h = cutoff * np.sinc(cutoff * tau) * win
        h /= h.sum()
        idx = base + k - (half - 1)
        ok = (idx >= 0) & (idx < len(x))
        out[n] = np.sum(x[idx[ok]] * h[ok])
    return out


def trim(x, sr):
    frame, hop = sr * 25 // 1000, sr * 10 // 1000
    n = len(x)
    if n < frame:
        return x
    nf = 1 + (n - frame) // hop
    e = np.array([np.sum(x[i * hop:i * hop + frame] ** 2) for i in range(nf)])
    peak = e.max()
    if peak <= 0:
        return x
    loud = e >= peak * 10 ** (-abs(TRIM_DB) / 10)
    idx = np.nonzero(loud)[0]
    first, last = idx[0], idx[-1]
    start = 0 if first == 0 else (first - 1) * hop + frame
    end = n if last == nf - 1 else (last + 1) * hop
    if start >= end:
        start, end = first * hop, min(n, last * hop + frame)
    return x[start:end]


def mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def imel(m):
    return 700.0 * (10 ** (m / 2595.0) - 1.0)


def filterbank(sr):
    nb = N_FFT // 2 + 1
    bin_hz = sr / N_FFT
    pts = imel(np.linspace(mel(FMIN), mel(FMAX), N_MELS + 2))
    f = np.arange(nb) * bin_hz
    fb = np.zeros((N_MELS, nb))
    for k in range(N_MELS):
        c = pts[k + 1]
        lo = min(pts[k], c - bin_hz)
        hi = max(pts[k + 2], c + bin_hz)
        fb[k] = np.maximum(0.0, np.minimum((f - lo) / (c - lo), (hi - f) / (hi - c)))
    return fb


def features(x, sr):
    x = resample(x, sr, TARGET_SR)
    x = trim(x, TARGET_SR)
    x = (x - x.mean()) / x.std()
    frame, hop = 400, 160
    nf = 1 + (len(x) - frame) // hop
    win = np.hamming(frame)
    frames = np.stack([x[i * hop:i * hop + frame] * win for i in range(nf)])
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    lm = np.log(np.maximum(filterbank(TARGET_SR) @ power.T, LOG_FLOOR))
    lm = (lm - lm.mean()) / lm.std()
    t = lm.shape[1]
    if t > TARGET_FRAMES:
        s = (t - TARGET_FRAMES) // 2
        lm = lm[:, s:s + TARGET_FRAMES]
    elif t < TARGET_FRAMES:
        pad = np.full((lm.shape[0], TARGET_FRAMES - t), lm.min())
        lm = np.concatenate([lm, pad], axis=1)
    return lm


def write_serfeat(path, m):
    with open(path, "wb") as f:
        f.write(b"SERFEAT1")
        f.write(struct.pack("<II", m.shape[0], m.shape[1]))
        f.write(m.astype("<f4").tobytes())


def main():
    rng = np.random.default_rng(1234)

    sr = 16000
    t = np.arange(int(0.6 * sr)) / sr
    body = (0.4 * np.sin(2 * np.pi * 300 * t) + 0.2 * np.sin(2 * np.pi * 1200 * t)) * np.exp(-2 * t)
    body += 0.01 * rng.standard_normal(len(t))
    two_tone = np.concatenate([np.zeros(3200), body, np.zeros(3200)])

    sr2 = 22050
    t2 = np.arange(sr2) / sr2
    chirp = 0.5 * np.sin(2 * np.pi * (100 * t2 + 0.5 * 3900 * t2**2))

    sr3 = 8000
    noise = rng.standard_normal(int(1.4 * sr3))
    noise = np.convolve(noise, np.ones(4) / 4, mode="same") * 0.3
    noise *= np.hanning(len(noise))

    for name, x, rate in [("two_tone_16k", two_tone, sr), ("chirp_22k", chirp, sr2), ("noise_8k", noise, sr3)]:
        decoded = write_pcm16(f"{name}.wav", x, rate)
        write_serfeat(f"{name}.serfeat", features(decoded, rate))


if __name__ == "__main__":
    main()
