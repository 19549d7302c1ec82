//! Objective prosody similarity between a reference and a test utterance:
//! DTW over mel frames, then pitch, voicing and energy errors on the aligned
//! frame tracks.

mod dtw;

pub use dtw::{dtw_align, AlignmentPath};

use serde::{Deserialize, Serialize};

use crate::dsp::FrameTrack;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Relative F0 deviation beyond which a co-voiced frame is a gross error.
    pub gpe_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { gpe_threshold: 0.2 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gpe_threshold > 0.0 && self.gpe_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "gpe_threshold must be positive, got {}",
                self.gpe_threshold
            )));
        }
        Ok(())
    }
}

/// Reference (`f`, `v`, `e`) and test (`f2`, `v2`, `e2`) series of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTrackPair {
    pub f: Vec<f64>,
    pub v: Vec<bool>,
    pub e: Vec<f64>,
    pub f2: Vec<f64>,
    pub v2: Vec<bool>,
    pub e2: Vec<f64>,
}

impl AlignedTrackPair {
    /// Pairs two already aligned tracks frame by frame.
    pub fn new(reference: &FrameTrack, test: &FrameTrack) -> Result<Self> {
        if reference.len() != test.len() {
            return Err(Error::Mismatch(format!(
                "aligned tracks differ in length: {} vs {}",
                reference.len(),
                test.len()
            )));
        }
        Ok(Self {
            f: reference.f0.clone(),
            v: reference.voiced.clone(),
            e: reference.energy.clone(),
            f2: test.f0.clone(),
            v2: test.voiced.clone(),
            e2: test.energy.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    fn co_voiced(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&t| self.v[t] && self.v2[t])
    }

    fn gross_errors(&self, cfg: &MetricConfig) -> usize {
        self.co_voiced()
            .filter(|&t| (self.f[t] - self.f2[t]).abs() > cfg.gpe_threshold * self.f[t])
            .count()
    }

    fn voicing_errors(&self) -> usize {
        (0..self.len()).filter(|&t| self.v[t] != self.v2[t]).count()
    }
}

/// Gathers `a` at each path `i` and `b` at each path `j`.
pub fn apply_alignment(
    path: &AlignmentPath,
    a: &FrameTrack,
    b: &FrameTrack,
) -> Result<AlignedTrackPair> {
    path.validate(a.len(), b.len())?;
    let gather = |t: &FrameTrack, idx: &mut dyn Iterator<Item = usize>| {
        let idx: Vec<usize> = idx.collect();
        (
            idx.iter().map(|&i| t.f0[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| t.voiced[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| t.energy[i]).collect::<Vec<_>>(),
        )
    };
    let (f, v, e) = gather(a, &mut path.steps.iter().map(|s| s.0));
    let (f2, v2, e2) = gather(b, &mut path.steps.iter().map(|s| s.1));
    Ok(AlignedTrackPair { f, v, e, f2, v2, e2 })
}

/// Fraction of co-voiced frames with a gross pitch error; `None` without
/// co-voiced frames.
pub fn gpe(pair: &AlignedTrackPair, cfg: &MetricConfig) -> Option<f64> {
    let n = pair.co_voiced().count();
    (n > 0).then(|| pair.gross_errors(cfg) as f64 / n as f64)
}

pub fn vde(pair: &AlignedTrackPair) -> Result<f64> {
    nonempty(pair)?;
    Ok(pair.voicing_errors() as f64 / pair.len() as f64)
}

pub fn ffe(pair: &AlignedTrackPair, cfg: &MetricConfig) -> Result<f64> {
    nonempty(pair)?;
    Ok((pair.voicing_errors() + pair.gross_errors(cfg)) as f64 / pair.len() as f64)
}

/// Mean |f - f2| over co-voiced frames; `None` without co-voiced frames.
pub fn f_mae(pair: &AlignedTrackPair) -> Option<f64> {
    let (sum, n) = pair
        .co_voiced()
        .fold((0.0, 0usize), |(s, n), t| (s + (pair.f[t] - pair.f2[t]).abs(), n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn e_mae(pair: &AlignedTrackPair) -> Result<f64> {
    nonempty(pair)?;
    let sum: f64 = pair.e.iter().zip(&pair.e2).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pair.len() as f64)
}

fn nonempty(pair: &AlignedTrackPair) -> Result<()> {
    if pair.is_empty() {
        return Err(Error::EmptyInput("aligned track pair has no frames".into()));
    }
    Ok(())
}

/// All metrics for one utterance pair. Undefined pitch metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gpe: Option<f64>,
    pub vde: f64,
    pub ffe: f64,
    pub f_mae: Option<f64>,
    pub e_mae: f64,
    pub co_voiced_frames: usize,
    pub frames: usize,
}

impl MetricReport {
    pub fn from_pair(pair: &AlignedTrackPair, cfg: &MetricConfig) -> Result<Self> {
        Ok(Self {
            gpe: gpe(pair, cfg),
            vde: vde(pair)?,
            ffe: ffe(pair, cfg)?,
            f_mae: f_mae(pair),
            e_mae: e_mae(pair)?,
            co_voiced_frames: pair.co_voiced().count(),
            frames: pair.len(),
        })
    }
}

/// Aligns two utterances on their mel frames and scores the aligned tracks.
pub fn evaluate_pair(
    reference_mel: ndarray::ArrayView2<f64>,
    reference: &FrameTrack,
    test_mel: ndarray::ArrayView2<f64>,
    test: &FrameTrack,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if reference_mel.nrows() != reference.len() || test_mel.nrows() != test.len() {
        return Err(Error::Mismatch(
            "each track must have one frame per mel frame".into(),
        ));
    }
    let path = dtw_align(reference_mel, test_mel)?;
    MetricReport::from_pair(&apply_alignment(&path, reference, test)?, cfg)
}

/// Mean of one metric over the pairs where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl MetricMean {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut defined, mut undefined) = (0.0, 0, 0);
        for v in values {
            match v {
                Some(v) => {
                    sum += v;
                    defined += 1;
                }
                None => undefined += 1,
            }
        }
        Self {
            mean: (defined > 0).then(|| sum / defined as f64),
            defined,
            undefined,
        }
    }
}

/// Corpus means in report column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pairs: usize,
    pub gpe: MetricMean,
    pub vde: MetricMean,
    pub ffe: MetricMean,
    pub f_mae: MetricMean,
    pub e_mae: MetricMean,
}

impl MetricSummary {
    pub fn of(reports: &[MetricReport]) -> Self {
        Self {
            pairs: reports.len(),
            gpe: MetricMean::of(reports.iter().map(|r| r.gpe)),
            vde: MetricMean::of(reports.iter().map(|r| Some(r.vde))),
            ffe: MetricMean::of(reports.iter().map(|r| Some(r.ffe))),
            f_mae: MetricMean::of(reports.iter().map(|r| r.f_mae)),
            e_mae: MetricMean::of(reports.iter().map(|r| Some(r.e_mae))),
        }
    }
}
