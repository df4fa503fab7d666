use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioError, Waveform};

const PCM16_SCALE: f64 = 1.0 / 32768.0;

/// Decode a RIFF/WAVE file (PCM16 or float32) into a mono waveform.
///
/// Channels are averaged sample-wise. Files without a RIFF/WAVE signature are
/// reported as [`AudioError::UnsupportedEncoding`]; WAVE files with a broken
/// header or truncated data as [`AudioError::MalformedWav`].
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let io_err = |source: std::io::Error| {
        if source.kind() == std::io::ErrorKind::NotFound {
            AudioError::FileNotFound(path.to_path_buf())
        } else {
            AudioError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 12];
    let got = read_up_to(&mut file, &mut magic).map_err(io_err)?;
    if got < 12 || &magic[0..4] != b"RIFF" || &magic[8..12] != b"WAVE" {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "missing RIFF/WAVE signature".into(),
        });
    }
    let file = File::open(path).map_err(io_err)?;
    let malformed = |reason: String| AudioError::MalformedWav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = WavReader::new(BufReader::new(file)).map_err(|e| match e {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "compressed or unknown format tag".into(),
        },
        hound::Error::IoError(e) => malformed(format!("header: {e}")),
        other => malformed(other.to_string()),
    })?;

    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || spec.sample_rate == 0 {
        return Err(malformed("zero channels or sample rate".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 * PCM16_SCALE))
            .collect::<Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{bits}-bit {fmt:?} samples (only PCM16 and float32 are read)"),
            })
        }
    }
    .map_err(|e| malformed(format!("data: {e}")))?;

    if !interleaved.len().is_multiple_of(channels) {
        return Err(malformed("data length is not a whole number of frames".into()));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(malformed("no samples".into()));
    }
    Waveform::new(mono, spec.sample_rate)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Write mono PCM16. Samples are clamped to [-1, 1).
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), AudioError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let to_io = |e: hound::Error| AudioError::Io {
        path: path.to_path_buf(),
        source: match e {
            hound::Error::IoError(e) => e,
            other => std::io::Error::other(other.to_string()),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(to_io)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}
