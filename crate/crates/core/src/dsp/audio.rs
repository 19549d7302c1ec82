use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio in [-1, 1] with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio buffer has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns a copy with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }

    /// Reads a mono 16-bit integer or 32-bit float PCM WAV file.
    ///
    /// When `expected_rate` is given the file must match it; no resampling
    /// is ever performed.
    pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::Wav(other),
        })?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Format(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        if let Some(rate) = expected_rate {
            if spec.sample_rate != rate {
                return Err(Error::Config(format!(
                    "{}: sample rate {} does not match configured {}",
                    path.display(),
                    spec.sample_rate,
                    rate
                )));
            }
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()?,
            (fmt, bits) => {
                return Err(Error::Format(format!(
                    "{}: unsupported sample format {fmt:?}/{bits} bit",
                    path.display()
                )))
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes the buffer as mono 16-bit PCM, clipping to [-1, 1].
    pub fn write_wav16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(
            AudioBuffer::new(vec![], 16000),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            AudioBuffer::new(vec![0.0, f64::NAN], 16000),
            Err(Error::NonFinite(_))
        ));
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = std::env::temp_dir().join(format!("prosody-wav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.wav");
        let audio = AudioBuffer::new(vec![0.0, 0.5, -0.5, 0.25], 22050).unwrap();
        audio.write_wav16(&path).unwrap();
        let back = AudioBuffer::read_wav(&path, Some(22050)).unwrap();
        for (a, b) in audio.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(matches!(
            AudioBuffer::read_wav(&path, Some(16000)),
            Err(Error::Config(_))
        ));

        let stereo = dir.join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(
            AudioBuffer::read_wav(&stereo, None),
            Err(Error::Format(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
