use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

impl Window {
    /// Periodic window of `len` samples.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()
                })
                .collect(),
        }
    }
}

/// Framing parameters shared by every frame-level analysis.
///
/// Frames are non-centered and unpadded: frame `t` covers samples
/// `[t * hop_length, t * hop_length + frame_length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_length: 1024,
            hop_length: 256,
            fft_size: 1024,
            window: Window::Hann,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0
            || self.hop_length > self.frame_length
            || self.frame_length > self.fft_size
        {
            return Err(Error::Config(format!(
                "frame config requires 0 < hop ({}) <= frame ({}) <= fft ({})",
                self.hop_length, self.frame_length, self.fft_size
            )));
        }
        Ok(())
    }

    /// Number of whole frames in a signal of `n_samples`, or 0 if shorter
    /// than a single frame.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_length {
            0
        } else {
            1 + (n_samples - self.frame_length) / self.hop_length
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Center of frame `t` in seconds.
    pub fn frame_center_secs(&self, t: usize, sample_rate: u32) -> f64 {
        (t * self.hop_length) as f64 / sample_rate as f64
            + self.frame_length as f64 / 2.0 / sample_rate as f64
    }
}

/// Magnitude STFT, `T x (fft_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub config: FrameConfig,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.magnitudes.ncols()
    }
}

pub fn stft(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n_frames = cfg.frame_count(audio.len());
    if n_frames == 0 {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than one frame of {}",
            audio.len(),
            cfg.frame_length
        )));
    }
    let window = cfg.window.coefficients(cfg.frame_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.n_bins();
    let mut magnitudes = Array2::<f64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let samples = audio.samples();
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.frame_length {
                Complex::new(samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, m) in magnitudes.row_mut(t).iter_mut().enumerate() {
            *m = buf[k].norm();
        }
    }
    Ok(Spectrogram {
        magnitudes,
        config: *cfg,
        sample_rate: audio.sample_rate(),
    })
}

/// L2 norm of each magnitude frame.
pub fn frame_energy(spec: &Spectrogram) -> Vec<f64> {
    spec.magnitudes
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|m| m * m).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> AudioBuffer {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioBuffer::new(samples, sr).unwrap()
    }

    #[test]
    fn zero_audio_gives_zero_magnitudes() {
        let audio = AudioBuffer::new(vec![0.0; 22050], 22050).unwrap();
        let spec = stft(&audio, &FrameConfig::default()).unwrap();
        assert!(spec.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn frame_count_matches_formula() {
        let audio = AudioBuffer::new(vec![0.0; 22050], 22050).unwrap();
        let spec = stft(&audio, &FrameConfig::default()).unwrap();
        assert_eq!(spec.n_frames(), 83);
        assert_eq!(spec.n_bins(), 513);
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let cfg = FrameConfig::default();
        let k = 20;
        let freq = k as f64 * 22050.0 / cfg.fft_size as f64;
        let spec = stft(&sine(freq, 22050, 8000, 0.5), &cfg).unwrap();
        for row in spec.magnitudes.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn short_audio_is_an_error() {
        let audio = AudioBuffer::new(vec![0.1; 100], 22050).unwrap();
        assert!(matches!(
            stft(&audio, &FrameConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = FrameConfig {
            frame_length: 512,
            hop_length: 1024,
            fft_size: 1024,
            window: Window::Hann,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn energy_of_toy_frames() {
        let spec = Spectrogram {
            magnitudes: array![[3.0, 4.0], [0.0, 0.0]],
            config: FrameConfig::default(),
            sample_rate: 22050,
        };
        assert_eq!(frame_energy(&spec), vec![5.0, 0.0]);
    }

    #[test]
    fn energy_matches_elementwise_oracle() {
        // deterministic pseudo-random 5 x 9 matrix
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mags = Array2::from_shape_fn((5, 9), |_| next());
        let spec = Spectrogram {
            magnitudes: mags.clone(),
            config: FrameConfig::default(),
            sample_rate: 22050,
        };
        let energy = frame_energy(&spec);
        for t in 0..5 {
            let mut acc = 0.0;
            for k in 0..9 {
                acc += mags[[t, k]] * mags[[t, k]];
            }
            assert!((energy[t] - acc.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_scales_linearly() {
        let cfg = FrameConfig::default();
        let x = sine(330.0, 22050, 6000, 0.3);
        let e1 = frame_energy(&stft(&x, &cfg).unwrap());
        let e2 = frame_energy(&stft(&x.scaled(2.5).unwrap(), &cfg).unwrap());
        for (a, b) in e1.iter().zip(&e2) {
            assert!((b - 2.5 * a).abs() <= 1e-6 * b.abs().max(1e-12));
        }
    }
}
