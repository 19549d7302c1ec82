//! DIO-style fundamental frequency estimation.
//!
//! The signal is low-passed by a bank of Nuttall-window filters whose cutoffs
//! are spaced `channels_in_octave` per octave between the F0 floor and ceiling.
//! In each band four event series are collected (negative- and positive-going
//! zero crossings, peaks and dips); each series yields an instantaneous
//! frequency from the interval between consecutive events. Where the band
//! holds a near-sinusoidal fundamental the four estimates agree, so their
//! relative dispersion is the band's score. Every frame takes the candidate
//! with the lowest dispersion.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioBuffer, FrameConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Config {
    pub f0_floor: f64,
    pub f0_ceil: f64,
    pub channels_in_octave: f64,
    /// Frames whose periodicity-stability score is below this are unvoiced.
    pub voicing_threshold: f64,
    /// Frames whose RMS is below this level (dBFS) are unvoiced.
    pub silence_dbfs: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            f0_floor: 71.0,
            f0_ceil: 800.0,
            channels_in_octave: 2.0,
            voicing_threshold: 0.1,
            silence_dbfs: -60.0,
        }
    }
}

impl F0Config {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f0_floor > 0.0 && self.f0_floor < self.f0_ceil && self.f0_ceil < nyquist) {
            return Err(Error::Config(format!(
                "F0 range must satisfy 0 < floor ({}) < ceil ({}) < Nyquist ({nyquist})",
                self.f0_floor, self.f0_ceil
            )));
        }
        if self.channels_in_octave <= 0.0 {
            return Err(Error::Config("channels_in_octave must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame F0 in Hz (0 where unvoiced) and voicing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    /// Periodicity-stability score of the chosen candidate, in [0, 1].
    pub stability: Vec<f64>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }
}

/// Maps relative dispersion of the four interval estimates to [0, 1]:
/// 1 for perfect agreement, 0 at 10 % dispersion or worse.
fn stability_from_dispersion(dispersion: f64) -> f64 {
    (1.0 - 10.0 * dispersion).clamp(0.0, 1.0)
}

fn nuttall(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| {
            let x = i as f64 / (len - 1) as f64;
            let tau = 2.0 * std::f64::consts::PI;
            0.355768 - 0.487396 * (tau * x).cos() + 0.144232 * (2.0 * tau * x).cos()
                - 0.012604 * (3.0 * tau * x).cos()
        })
        .collect()
}

/// Locations (s) and frequencies (Hz) from positive-to-non-positive crossings.
fn crossing_intervals(signal: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let mut edges = Vec::new();
    for i in 0..signal.len().saturating_sub(1) {
        let (a, b) = (signal[i], signal[i + 1]);
        if a > 0.0 && b <= 0.0 {
            edges.push(i as f64 + a / (a - b));
        }
    }
    let mut locations = Vec::with_capacity(edges.len().saturating_sub(1));
    let mut freqs = Vec::with_capacity(edges.len().saturating_sub(1));
    for w in edges.windows(2) {
        let period = w[1] - w[0];
        if period > 0.0 {
            freqs.push(fs / period);
            locations.push((w[0] + w[1]) / 2.0 / fs);
        }
    }
    (locations, freqs)
}

/// Piecewise-linear interpolation with constant extension past both ends.
fn interp(xs: &[f64], ys: &[f64], at: f64) -> f64 {
    debug_assert!(!xs.is_empty());
    if at <= xs[0] {
        return ys[0];
    }
    if at >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let hi = xs.partition_point(|&x| x <= at);
    let lo = hi - 1;
    let span = xs[hi] - xs[lo];
    if span <= 0.0 {
        return ys[lo];
    }
    ys[lo] + (ys[hi] - ys[lo]) * (at - xs[lo]) / span
}

struct Band {
    boundary: f64,
    half_len: usize,
}

fn band_layout(cfg: &F0Config, fs: f64) -> Vec<Band> {
    let n_bands = 1 + ((cfg.f0_ceil / cfg.f0_floor).log2() * cfg.channels_in_octave) as usize;
    (0..n_bands)
        .map(|i| {
            let boundary = cfg.f0_floor * 2f64.powf((i + 1) as f64 / cfg.channels_in_octave);
            let half_len = ((fs / boundary / 2.0).round() as usize).max(1);
            Band { boundary, half_len }
        })
        .collect()
}

/// Estimates one F0 value per frame of `frame_cfg`, at each frame's center.
///
/// Silent input is not an error; it yields an all-unvoiced track.
pub fn estimate_f0(
    audio: &AudioBuffer,
    frame_cfg: &FrameConfig,
    cfg: &F0Config,
) -> Result<PitchTrack> {
    frame_cfg.validate()?;
    cfg.validate(audio.sample_rate())?;
    let n_frames = frame_cfg.frame_count(audio.len());
    if n_frames == 0 {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than one frame of {}",
            audio.len(),
            frame_cfg.frame_length
        )));
    }
    let fs = audio.sample_rate() as f64;
    let samples = audio.samples();
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;

    let bands = band_layout(cfg, fs);
    let max_filter = bands.iter().map(|b| 4 * b.half_len).max().unwrap_or(4);
    let fft_size = (n + max_filter + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(fft_size);
    let inverse = planner.plan_fft_inverse(fft_size);

    let mut spectrum: Vec<Complex<f64>> = samples
        .iter()
        .map(|&s| Complex::new(s - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_size)
        .collect();
    forward.process(&mut spectrum);

    let times: Vec<f64> = (0..n_frames)
        .map(|t| frame_cfg.frame_center_secs(t, audio.sample_rate()))
        .collect();
    let mut best_f0 = vec![0.0; n_frames];
    let mut best_dispersion = vec![f64::INFINITY; n_frames];

    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for band in &bands {
        let window = nuttall(4 * band.half_len);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (slot, &w) in buf.iter_mut().zip(&window) {
            *slot = Complex::new(w, 0.0);
        }
        forward.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&spectrum) {
            *b *= *s;
        }
        inverse.process(&mut buf);
        let delay = 2 * band.half_len;
        let mut filtered: Vec<f64> = (0..n).map(|i| buf[i + delay].re).collect();

        let negatives = crossing_intervals(&filtered, fs);
        filtered.iter_mut().for_each(|v| *v = -*v);
        let positives = crossing_intervals(&filtered, fs);
        let mut diff: Vec<f64> = filtered.windows(2).map(|w| w[0] - w[1]).collect();
        let peaks = crossing_intervals(&diff, fs);
        diff.iter_mut().for_each(|v| *v = -*v);
        let dips = crossing_intervals(&diff, fs);

        let series = [&negatives, &positives, &peaks, &dips];
        if series.iter().any(|(loc, _)| loc.len() < 2) {
            continue;
        }
        for (t, &time) in times.iter().enumerate() {
            let est: Vec<f64> = series.iter().map(|(l, f)| interp(l, f, time)).collect();
            let candidate = est.iter().sum::<f64>() / 4.0;
            if candidate > band.boundary
                || candidate < band.boundary / 2.0
                || candidate > cfg.f0_ceil
                || candidate < cfg.f0_floor
            {
                continue;
            }
            let spread = (est.iter().map(|e| (e - candidate).powi(2)).sum::<f64>() / 3.0).sqrt();
            let dispersion = spread / candidate;
            if dispersion < best_dispersion[t] {
                best_dispersion[t] = dispersion;
                best_f0[t] = candidate;
            }
        }
    }

    let rms_floor = 10f64.powf(cfg.silence_dbfs / 20.0);
    let mut track = PitchTrack {
        f0: vec![0.0; n_frames],
        voiced: vec![false; n_frames],
        stability: vec![0.0; n_frames],
    };
    for t in 0..n_frames {
        let start = t * frame_cfg.hop_length;
        let frame = &samples[start..start + frame_cfg.frame_length];
        let rms = (frame.iter().map(|s| s * s).sum::<f64>() / frame.len() as f64).sqrt();
        let stability = if best_dispersion[t].is_finite() {
            stability_from_dispersion(best_dispersion[t])
        } else {
            0.0
        };
        track.stability[t] = stability;
        if rms >= rms_floor && best_f0[t] > 0.0 && stability >= cfg.voicing_threshold {
            track.f0[t] = best_f0[t];
            track.voiced[t] = true;
        }
    }
    Ok(track)
}
