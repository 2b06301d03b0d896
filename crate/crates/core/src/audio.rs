//! Multichannel WAV files: integer PCM or 32-bit float in, 32-bit float or
//! 16-bit PCM out.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("expected {expected} channels, file has {got}")]
    Channels { expected: usize, got: usize },
    #[error("expected {expected} Hz, file is {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("channels have different lengths")]
    Ragged,
    #[error("no channels to write")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Float32,
    Pcm16,
}

/// Deinterleaved audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFile {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

impl AudioFile {
    pub fn frames(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn expect(&self, channels: usize, sample_rate: u32) -> Result<(), AudioError> {
        if self.channels.len() != channels {
            return Err(AudioError::Channels {
                expected: channels,
                got: self.channels.len(),
            });
        }
        if self.sample_rate != sample_rate {
            return Err(AudioError::SampleRate {
                expected: sample_rate,
                got: self.sample_rate,
            });
        }
        Ok(())
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioFile, AudioError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch.max(1)); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, &v) in channels.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    Ok(AudioFile {
        sample_rate: spec.sample_rate,
        channels,
    })
}

pub fn write_wav(
    path: impl AsRef<Path>,
    sample_rate: u32,
    channels: &[&[f32]],
    format: OutputFormat,
) -> Result<(), AudioError> {
    let first = channels.first().ok_or(AudioError::Empty)?;
    if channels.iter().any(|c| c.len() != first.len()) {
        return Err(AudioError::Ragged);
    }
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: match format {
            OutputFormat::Float32 => 32,
            OutputFormat::Pcm16 => 16,
        },
        sample_format: match format {
            OutputFormat::Float32 => hound::SampleFormat::Float,
            OutputFormat::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..first.len() {
        for c in channels {
            match format {
                OutputFormat::Float32 => w.write_sample(c[i])?,
                OutputFormat::Pcm16 => {
                    w.write_sample((c[i].clamp(-1.0, 1.0) * 32767.0).round() as i16)?
                }
            }
        }
    }
    w.finalize()?;
    Ok(())
}
