use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{Error, Result};

/// Floor applied before log compression.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper edge in Hz; `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `T x n_mels`.
    pub frames: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank stored as an `n_mels x n_bins` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Array2<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, sample_rate: u32, fft_size: usize) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = cfg.fmax.unwrap_or(nyquist);
        if fmax > nyquist {
            return Err(Error::Config(format!(
                "mel fmax {fmax} Hz exceeds Nyquist {nyquist} Hz"
            )));
        }
        if cfg.n_mels == 0 || !(cfg.fmin >= 0.0 && cfg.fmin < fmax) {
            return Err(Error::Config(format!(
                "mel config needs n_mels > 0 and 0 <= fmin < fmax, got {cfg:?}"
            )));
        }
        let n_bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((cfg.n_mels, n_bins));
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / fft_size as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        Ok(Self { weights })
    }

    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "filterbank weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Applies the bank to every frame, optionally taking `ln(max(x, LOG_FLOOR))`.
    pub fn apply(&self, spec: &Spectrogram, cfg: &MelConfig) -> Result<MelSpectrogram> {
        if spec.n_bins() != self.weights.ncols() {
            return Err(Error::Mismatch(format!(
                "spectrogram has {} bins, filterbank expects {}",
                spec.n_bins(),
                self.weights.ncols()
            )));
        }
        let mut frames = spec.magnitudes.dot(&self.weights.t());
        if cfg.log {
            frames.mapv_inplace(|v| v.max(LOG_FLOOR).ln());
        }
        Ok(MelSpectrogram {
            frames,
            config: *cfg,
        })
    }
}

pub fn mel_spectrogram(spec: &Spectrogram, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let bank = MelFilterbank::new(cfg, spec.sample_rate, spec.config.fft_size)?;
    bank.apply(spec, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FrameConfig;
    use ndarray::array;

    fn spec_from(mags: Array2<f64>, fft_size: usize) -> Spectrogram {
        Spectrogram {
            magnitudes: mags,
            config: FrameConfig {
                frame_length: fft_size,
                hop_length: fft_size / 4,
                fft_size,
                ..FrameConfig::default()
            },
            sample_rate: 22050,
        }
    }

    #[test]
    fn zero_spectrogram_without_log_is_zero() {
        let spec = spec_from(Array2::zeros((4, 513)), 1024);
        let cfg = MelConfig {
            log: false,
            ..MelConfig::default()
        };
        let mel = mel_spectrogram(&spec, &cfg).unwrap();
        assert_eq!(mel.frames.dim(), (4, 80));
        assert!(mel.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_floor_applies_on_silence() {
        let spec = spec_from(Array2::zeros((2, 513)), 1024);
        let mel = mel_spectrogram(&spec, &MelConfig::default()).unwrap();
        assert!(mel.frames.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn impulse_only_excites_covering_filters() {
        let cfg = MelConfig {
            log: false,
            ..MelConfig::default()
        };
        let bank = MelFilterbank::new(&cfg, 22050, 1024).unwrap();
        let bin = 100;
        let mut mags = Array2::zeros((1, 513));
        mags[[0, bin]] = 1.0;
        let mel = bank.apply(&spec_from(mags, 1024), &cfg).unwrap();
        for m in 0..80 {
            let covers = bank.weights()[[m, bin]] > 0.0;
            assert_eq!(mel.frames[[0, m]] > 0.0, covers, "channel {m}");
        }
        assert!(mel.frames.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn hand_built_bank_matches_matrix_product() {
        let weights = array![[1.0, 0.5, 0.0], [0.0, 0.5, 1.0]];
        let bank = MelFilterbank::from_weights(weights.clone()).unwrap();
        let mags = array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0], [4.0, 0.0, 2.0]];
        let cfg = MelConfig {
            n_mels: 2,
            log: false,
            ..MelConfig::default()
        };
        let mel = bank.apply(&spec_from(mags.clone(), 4), &cfg).unwrap();
        for t in 0..3 {
            for m in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += mags[[t, k]] * weights[[m, k]];
                }
                assert!((mel.frames[[t, m]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fmax_above_nyquist_is_config_error() {
        let cfg = MelConfig {
            fmax: Some(12000.0),
            ..MelConfig::default()
        };
        assert!(matches!(
            MelFilterbank::new(&cfg, 22050, 1024),
            Err(Error::Config(_))
        ));
    }
}
