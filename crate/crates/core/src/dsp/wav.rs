use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::Scalar;

const FULL_SCALE: f64 = 32767.0;

fn format_error(path: &Path, property: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        property: property.into(),
    }
}

fn hound_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => format_error(path, other.to_string()),
    }
}

/// Reads a mono 16-bit PCM file at 16 kHz. Anything else is rejected with an
/// error naming the offending property; there is no resampling or downmixing.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| hound_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_error(
            path,
            format!("channel count {} (expected 1)", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format_error(
            path,
            format!("sample rate {} Hz (expected {SAMPLE_RATE} Hz)", spec.sample_rate),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_error(
            path,
            format!(
                "encoding {:?} {}-bit (expected 16-bit signed PCM)",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| T::lit(v as f64 / FULL_SCALE))
                .map_err(|e| hound_error(path, e))
        })
        .collect::<Result<Vec<T>>>()?;
    Waveform::new(samples)
}

/// Writes 16-bit PCM, mono, 16 kHz. Samples outside [-1, 1] are clipped.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, wave: &Waveform<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_error(path, e))?;
    for &s in wave.samples() {
        let v = (s.as_f64().clamp(-1.0, 1.0) * FULL_SCALE).round() as i16;
        writer.write_sample(v).map_err(|e| hound_error(path, e))?;
    }
    writer.finalize().map_err(|e| hound_error(path, e))
}
