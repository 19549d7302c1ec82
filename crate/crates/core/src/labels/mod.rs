//! Token-level prosody labels: alignment ingestion, duration averaging,
//! quantization and the JSON-lines label format.

mod alignment;
mod quantizer;

pub use alignment::{
    parse_alignment, AlignmentDocument, Level, PhoneInterval, Phoneme, UtteranceAlignment, Word,
};
pub use quantizer::{Quantizer, Scale, DEFAULT_BINS};

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{analyze, AnalysisConfig, AudioBuffer, FrameTrack};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    F0,
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenValues {
    pub level: Level,
    pub channel: Channel,
    pub values: Vec<f64>,
}

/// Averages a frame series over each token's frames.
///
/// With a voicing mask only voiced frames count, and a token without any
/// voiced frame gets 0.
pub fn token_average(
    track: &[f64],
    voiced: Option<&[bool]>,
    alignment: &UtteranceAlignment,
    level: Level,
) -> Result<Vec<f64>> {
    let total = alignment.total_frames();
    if total != track.len() {
        return Err(Error::Mismatch(format!(
            "{}: alignment covers {total} frames but track has {}",
            alignment.utterance_id,
            track.len()
        )));
    }
    if let Some(mask) = voiced {
        if mask.len() != track.len() {
            return Err(Error::Mismatch(format!(
                "voicing mask has {} frames, track has {}",
                mask.len(),
                track.len()
            )));
        }
    }
    Ok(alignment
        .frame_spans(level)
        .into_iter()
        .map(|span| match voiced {
            None => track[span.clone()].iter().sum::<f64>() / span.len() as f64,
            Some(mask) => {
                let (sum, count) = span
                    .filter(|&t| mask[t])
                    .fold((0.0, 0usize), |(s, c), t| (s + track[t], c + 1));
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            }
        })
        .collect())
}

/// Token-averaged F0 (voiced frames only) and energy.
pub fn token_prosody(
    track: &FrameTrack,
    alignment: &UtteranceAlignment,
    level: Level,
) -> Result<(TokenValues, TokenValues)> {
    let f0 = token_average(&track.f0, Some(&track.voiced), alignment, level)?;
    let energy = token_average(&track.energy, None, alignment, level)?;
    Ok((
        TokenValues {
            level,
            channel: Channel::F0,
            values: f0,
        },
        TokenValues {
            level,
            channel: Channel::Energy,
            values: energy,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Rule,
    Neural,
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelKind::Rule => "rule",
            LabelKind::Neural => "neural",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenLabel {
    Rule {
        f0_bin: usize,
        energy_bin: usize,
    },
    /// `latent` holds the codeword vector the index refers to.
    Neural {
        codeword_index: usize,
        latent: [f64; 3],
    },
}

impl TokenLabel {
    pub fn kind(&self) -> LabelKind {
        match self {
            TokenLabel::Rule { .. } => LabelKind::Rule,
            TokenLabel::Neural { .. } => LabelKind::Neural,
        }
    }
}

/// Quantizers for the two rule-based channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleQuantizers {
    pub f0: Quantizer,
    pub energy: Quantizer,
}

impl RuleQuantizers {
    /// Fits both channels; F0 on a log scale, energy linearly.
    pub fn fit(f0_values: &[f64], energy_values: &[f64], n_bins: usize) -> Result<Self> {
        Ok(Self {
            f0: Quantizer::fit(f0_values, n_bins, Scale::Log)?,
            energy: Quantizer::fit(energy_values, n_bins, Scale::Linear)?,
        })
    }

    pub fn label(&self, f0: f64, energy: f64) -> Result<TokenLabel> {
        Ok(TokenLabel::Rule {
            f0_bin: self.f0.quantize(f0)?,
            energy_bin: self.energy.quantize(energy)?,
        })
    }

    /// Continuous (F0, energy) at the bin centers of a rule label.
    pub fn dequantize(&self, f0_bin: usize, energy_bin: usize) -> Result<[f64; 2]> {
        Ok([self.f0.dequantize(f0_bin)?, self.energy.dequantize(energy_bin)?])
    }
}

/// Labels of one utterance at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsodyLabelSet {
    pub utterance_id: String,
    pub kind: LabelKind,
    pub level: Level,
    pub labels: Vec<TokenLabel>,
}

impl ProsodyLabelSet {
    pub fn validate(&self, max_index: usize) -> Result<()> {
        for (i, l) in self.labels.iter().enumerate() {
            if l.kind() != self.kind {
                return Err(Error::Format(format!(
                    "{}: token {i} is {} but set is {}",
                    self.utterance_id,
                    l.kind(),
                    self.kind
                )));
            }
            let in_range = match l {
                TokenLabel::Rule { f0_bin, energy_bin } => {
                    *f0_bin < max_index && *energy_bin < max_index
                }
                TokenLabel::Neural {
                    codeword_index,
                    latent,
                } => *codeword_index < max_index && latent.iter().all(|v| v.is_finite()),
            };
            if !in_range {
                return Err(Error::Format(format!(
                    "{}: token {i} label out of range",
                    self.utterance_id
                )));
            }
        }
        Ok(())
    }

    pub fn check_alignment(&self, alignment: &UtteranceAlignment) -> Result<()> {
        let expected = alignment.token_count(self.level);
        if self.labels.len() != expected {
            return Err(Error::Mismatch(format!(
                "{}: {} labels but alignment has {expected} {}s",
                self.utterance_id,
                self.labels.len(),
                self.level
            )));
        }
        Ok(())
    }
}

pub fn rule_labels_from_track(
    track: &FrameTrack,
    alignment: &UtteranceAlignment,
    level: Level,
    quantizers: &RuleQuantizers,
) -> Result<ProsodyLabelSet> {
    let (f0, energy) = token_prosody(track, alignment, level)?;
    let labels = f0
        .values
        .iter()
        .zip(&energy.values)
        .map(|(&f, &e)| quantizers.label(f, e))
        .collect::<Result<_>>()?;
    Ok(ProsodyLabelSet {
        utterance_id: alignment.utterance_id.clone(),
        kind: LabelKind::Rule,
        level,
        labels,
    })
}

/// Full rule-based pipeline: F0/energy analysis, token averaging, quantization.
pub fn extract_rule_labels(
    audio: &AudioBuffer,
    alignment: &UtteranceAlignment,
    level: Level,
    quantizers: &RuleQuantizers,
    cfg: &AnalysisConfig,
) -> Result<ProsodyLabelSet> {
    let analysis = analyze(audio, cfg)?;
    rule_labels_from_track(&analysis.track, alignment, level, quantizers)
}

pub fn write_label_sets(path: impl AsRef<Path>, sets: &[ProsodyLabelSet]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for set in sets {
        serde_json::to_writer(&mut out, set)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_label_sets(path: impl AsRef<Path>) -> Result<Vec<ProsodyLabelSet>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let set: ProsodyLabelSet = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        sets.push(set);
    }
    Ok(sets)
}
