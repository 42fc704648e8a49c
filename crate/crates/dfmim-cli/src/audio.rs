//! WAV decoding into `AudioSignal` and 16-bit mono writing.
//!
//! Integer PCM of any width is scaled to [-1, 1) by its own full scale;
//! 32-bit float passes through. Multichannel input is averaged down to
//! mono before feature extraction.

use std::path::Path;

use dfmim_core::dsp::AudioSignal;
use hound::{SampleFormat, WavSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("unsupported WAV encoding in {path}: {message}")]
    Unsupported { path: String, message: String },
    #[error("cannot write {path}: {message}")]
    Encode { path: String, message: String },
}

fn decode_err(path: &Path, message: impl Into<String>) -> AudioError {
    AudioError::Decode {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Reads any PCM or float WAV into a mono signal.
pub fn load_wav(path: &Path) -> Result<AudioSignal, AudioError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| decode_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(decode_err(path, "zero channels"));
    }
    let mono = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            collect_mono(
                reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)),
                spec.channels,
                path,
            )?
        }
        (SampleFormat::Float, 32) => collect_mono(
            reader.samples::<f32>().map(|s| s.map(|v| v as f64)),
            spec.channels,
            path,
        )?,
        (format, bits) => {
            return Err(AudioError::Unsupported {
                path: path.display().to_string(),
                message: format!("{format:?} at {bits} bits per sample"),
            })
        }
    };
    AudioSignal::new(mono, spec.sample_rate).map_err(|e| decode_err(path, e.to_string()))
}

fn collect_mono<I>(samples: I, channels: u16, path: &Path) -> Result<Vec<f64>, AudioError>
where
    I: Iterator<Item = Result<f64, hound::Error>>,
{
    let channels = channels as usize;
    let mut mono = Vec::new();
    let mut frame_sum = 0.0;
    let mut in_frame = 0usize;
    for sample in samples {
        let v = sample.map_err(|e| decode_err(path, e.to_string()))?;
        frame_sum += v;
        in_frame += 1;
        if in_frame == channels {
            mono.push(frame_sum / channels as f64);
            frame_sum = 0.0;
            in_frame = 0;
        }
    }
    // A trailing partial frame means the file lied about its length.
    if in_frame != 0 {
        return Err(decode_err(path, "sample count is not a multiple of the channel count"));
    }
    if mono.is_empty() {
        return Err(decode_err(path, "no audio frames"));
    }
    Ok(mono)
}

/// Writes a mono 16-bit PCM file; samples are clamped to [-1, 1].
pub fn save_wav_mono16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), AudioError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let encode_err = |message: String| AudioError::Encode {
        path: path.display().to_string(),
        message,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| encode_err(e.to_string()))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| encode_err(e.to_string()))?;
    }
    writer.finalize().map_err(|e| encode_err(e.to_string()))
}
