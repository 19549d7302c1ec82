//! Frame-level signal analysis: STFT magnitudes, mel-spectrograms, energy and F0.

mod audio;
mod f0;
mod mel;
mod stft;

pub use audio::AudioBuffer;
pub use f0::{estimate_f0, F0Config, PitchTrack};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram, LOG_FLOOR};
pub use stft::{frame_energy, stft, FrameConfig, Spectrogram, Window};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-frame F0 (Hz, 0 when unvoiced), voicing and STFT energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrack {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub energy: Vec<f64>,
}

impl FrameTrack {
    pub fn new(f0: Vec<f64>, voiced: Vec<bool>, energy: Vec<f64>) -> Result<Self> {
        if f0.len() != voiced.len() || f0.len() != energy.len() {
            return Err(Error::Mismatch(format!(
                "track series lengths differ: f0 {}, voiced {}, energy {}",
                f0.len(),
                voiced.len(),
                energy.len()
            )));
        }
        if let Some(t) = (0..f0.len()).find(|&t| (f0[t] > 0.0) != voiced[t]) {
            return Err(Error::Format(format!(
                "frame {t}: f0 {} inconsistent with voiced={}",
                f0[t], voiced[t]
            )));
        }
        if energy.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Format("energy must be finite and non-negative".into()));
        }
        Ok(Self { f0, voiced, energy })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }
}

/// Everything the rest of the toolkit needs from one utterance.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub spectrogram: Spectrogram,
    pub mel: MelSpectrogram,
    pub track: FrameTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AnalysisConfig {
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub f0: F0Config,
}

pub fn analyze(audio: &AudioBuffer, cfg: &AnalysisConfig) -> Result<Analysis> {
    let spectrogram = stft(audio, &cfg.frame)?;
    let mel = mel_spectrogram(&spectrogram, &cfg.mel)?;
    let energy = frame_energy(&spectrogram);
    let pitch = estimate_f0(audio, &cfg.frame, &cfg.f0)?;
    let track = FrameTrack::new(pitch.f0, pitch.voiced, energy)?;
    Ok(Analysis {
        spectrogram,
        mel,
        track,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_analyses_share_frame_count() {
        let samples: Vec<f64> = (0..15000)
            .map(|i| 0.3 * (i as f64 * 0.05).sin())
            .collect();
        let audio = AudioBuffer::new(samples, 22050).unwrap();
        let cfg = AnalysisConfig::default();
        let a = analyze(&audio, &cfg).unwrap();
        let t = cfg.frame.frame_count(15000);
        assert_eq!(a.spectrogram.n_frames(), t);
        assert_eq!(a.mel.n_frames(), t);
        assert_eq!(a.track.len(), t);
    }

    #[test]
    fn frame_track_rejects_inconsistent_voicing() {
        assert!(FrameTrack::new(vec![100.0, 0.0], vec![true, true], vec![1.0, 1.0]).is_err());
        assert!(FrameTrack::new(vec![100.0], vec![true], vec![1.0, 1.0]).is_err());
        assert!(FrameTrack::new(vec![100.0, 0.0], vec![true, false], vec![1.0, 0.0]).is_ok());
    }
}
