use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One phone interval as written by a forced aligner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneInterval {
    pub phone: String,
    pub start_s: f64,
    pub end_s: f64,
    pub word_index: usize,
}

/// On-disk alignment document, one per utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDocument {
    pub utterance_id: String,
    pub phones: Vec<PhoneInterval>,
    pub words: Vec<String>,
}

impl AlignmentDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Phoneme,
    Word,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Phoneme => "phoneme",
            Level::Word => "word",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phoneme {
    pub symbol: String,
    pub duration_frames: usize,
    pub word_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub phoneme_span: Range<usize>,
}

/// Phoneme and word segmentation with frame durations that sum to the
/// utterance's frame count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceAlignment {
    pub utterance_id: String,
    pub phonemes: Vec<Phoneme>,
    pub words: Vec<Word>,
}

impl UtteranceAlignment {
    /// Builds an alignment directly from frame durations, grouping phonemes
    /// into words by their `word_index`.
    pub fn from_frames(
        utterance_id: impl Into<String>,
        phonemes: Vec<Phoneme>,
        words: &[String],
    ) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(Error::Format("alignment has no phonemes".into()));
        }
        if let Some(p) = phonemes.iter().find(|p| p.duration_frames == 0) {
            return Err(Error::Format(format!(
                "phoneme `{}` has zero duration",
                p.symbol
            )));
        }
        let mut spans: Vec<Range<usize>> = Vec::with_capacity(words.len());
        for (i, p) in phonemes.iter().enumerate() {
            match spans.len().checked_sub(1) {
                Some(last) if last == p.word_index => spans[last].end = i + 1,
                _ if p.word_index == spans.len() => spans.push(i..i + 1),
                _ => {
                    return Err(Error::Format(format!(
                        "phoneme {i} (`{}`) has word_index {} out of order; words must be \
                         contiguous and each own at least one phoneme",
                        p.symbol, p.word_index
                    )))
                }
            }
        }
        if spans.len() != words.len() {
            return Err(Error::Format(format!(
                "{} words listed but phonemes cover {}; every word needs a phoneme",
                words.len(),
                spans.len()
            )));
        }
        if let Some(w) = words.iter().position(|w| w.trim().is_empty()) {
            return Err(Error::Format(format!("word {w} is empty")));
        }
        let words = words
            .iter()
            .zip(spans)
            .map(|(text, phoneme_span)| Word {
                text: text.clone(),
                phoneme_span,
            })
            .collect();
        Ok(Self {
            utterance_id: utterance_id.into(),
            phonemes,
            words,
        })
    }

    pub fn total_frames(&self) -> usize {
        self.phonemes.iter().map(|p| p.duration_frames).sum()
    }

    pub fn token_count(&self, level: Level) -> usize {
        match level {
            Level::Phoneme => self.phonemes.len(),
            Level::Word => self.words.len(),
        }
    }

    /// Frame durations of each token at `level`.
    pub fn durations(&self, level: Level) -> Vec<usize> {
        match level {
            Level::Phoneme => self.phonemes.iter().map(|p| p.duration_frames).collect(),
            Level::Word => self
                .words
                .iter()
                .map(|w| {
                    self.phonemes[w.phoneme_span.clone()]
                        .iter()
                        .map(|p| p.duration_frames)
                        .sum()
                })
                .collect(),
        }
    }

    /// Number of phonemes in each word.
    pub fn phones_per_word(&self) -> Vec<usize> {
        self.words.iter().map(|w| w.phoneme_span.len()).collect()
    }

    /// Frame ranges of each token at `level`.
    pub fn frame_spans(&self, level: Level) -> Vec<Range<usize>> {
        let mut start = 0;
        self.durations(level)
            .into_iter()
            .map(|d| {
                let span = start..start + d;
                start += d;
                span
            })
            .collect()
    }

    pub fn phoneme_symbols(&self) -> Vec<&str> {
        self.phonemes.iter().map(|p| p.symbol.as_str()).collect()
    }
}

/// Converts an aligner document into frame durations for an utterance of
/// `total_frames` frames.
///
/// Phone end times are mapped to frame boundaries with
/// `round(end_s * sample_rate / hop_length)`; every phoneme keeps at least one
/// frame and the final phoneme absorbs the remainder so durations sum to
/// `total_frames` exactly.
pub fn parse_alignment(
    doc: &AlignmentDocument,
    hop_length: usize,
    sample_rate: u32,
    total_frames: usize,
) -> Result<UtteranceAlignment> {
    if doc.phones.is_empty() {
        return Err(Error::Format(format!(
            "{}: alignment has no phones",
            doc.utterance_id
        )));
    }
    let mut prev_end = 0.0f64;
    for (i, p) in doc.phones.iter().enumerate() {
        if !(p.start_s.is_finite() && p.end_s.is_finite()) || p.start_s < 0.0 {
            return Err(Error::Format(format!(
                "{}: phone {i} has invalid times",
                doc.utterance_id
            )));
        }
        if p.end_s <= p.start_s {
            return Err(Error::Format(format!(
                "{}: phone {i} (`{}`) ends at {} before it starts at {}",
                doc.utterance_id, p.phone, p.end_s, p.start_s
            )));
        }
        if p.start_s < prev_end - 1e-9 {
            return Err(Error::Format(format!(
                "{}: phone {i} (`{}`) overlaps or precedes the previous phone",
                doc.utterance_id, p.phone
            )));
        }
        prev_end = p.end_s;
    }
    let n = doc.phones.len();
    if total_frames < n {
        return Err(Error::Mismatch(format!(
            "{}: {} frames cannot hold {} phones",
            doc.utterance_id, total_frames, n
        )));
    }
    let frames_per_sec = sample_rate as f64 / hop_length as f64;
    let mut boundaries = Vec::with_capacity(n);
    let mut prev = 0usize;
    for (i, p) in doc.phones.iter().enumerate() {
        let b = if i + 1 == n {
            total_frames
        } else {
            let raw = (p.end_s * frames_per_sec).round() as usize;
            // leave room for one frame per remaining phone
            raw.max(prev + 1).min(total_frames - (n - 1 - i))
        };
        if b <= prev {
            return Err(Error::Mismatch(format!(
                "{}: alignment runs past the {} available frames",
                doc.utterance_id, total_frames
            )));
        }
        boundaries.push(b);
        prev = b;
    }
    let mut start = 0;
    let phonemes = doc
        .phones
        .iter()
        .zip(&boundaries)
        .map(|(p, &end)| {
            let ph = Phoneme {
                symbol: p.phone.clone(),
                duration_frames: end - start,
                word_index: p.word_index,
            };
            start = end;
            ph
        })
        .collect();
    UtteranceAlignment::from_frames(doc.utterance_id.clone(), phonemes, &doc.words)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(phones: &[(&str, f64, f64, usize)], words: &[&str]) -> AlignmentDocument {
        AlignmentDocument {
            utterance_id: "u".into(),
            phones: phones
                .iter()
                .map(|&(phone, start_s, end_s, word_index)| PhoneInterval {
                    phone: phone.into(),
                    start_s,
                    end_s,
                    word_index,
                })
                .collect(),
            words: words.iter().map(|w| w.to_string()).collect(),
        }
    }

    #[test]
    fn two_phones_remainder_to_last() {
        let d = doc(&[("a", 0.0, 0.1, 0), ("b", 0.1, 0.2, 0)], &["ab"]);
        let a = parse_alignment(&d, 256, 22050, 17).unwrap();
        assert_eq!(a.durations(Level::Phoneme), vec![9, 8]);
        assert_eq!(a.total_frames(), 17);
    }

    #[test]
    fn single_phone_takes_everything() {
        let d = doc(&[("a", 0.0, 0.7, 0)], &["a"]);
        let a = parse_alignment(&d, 256, 22050, 57).unwrap();
        assert_eq!(a.durations(Level::Phoneme), vec![57]);
        assert_eq!(a.durations(Level::Word), vec![57]);
    }

    #[test]
    fn end_before_start_rejected() {
        let d = doc(&[("a", 0.3, 0.1, 0)], &["a"]);
        assert!(matches!(
            parse_alignment(&d, 256, 22050, 10),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn overlap_rejected() {
        let d = doc(&[("a", 0.0, 0.2, 0), ("b", 0.1, 0.3, 0)], &["ab"]);
        assert!(matches!(
            parse_alignment(&d, 256, 22050, 30),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn empty_word_rejected() {
        let d = doc(&[("a", 0.0, 0.2, 0), ("b", 0.2, 0.3, 2)], &["a", "x", "b"]);
        assert!(parse_alignment(&d, 256, 22050, 30).is_err());
        let d = doc(&[("a", 0.0, 0.2, 0)], &["a", "ghost"]);
        assert!(parse_alignment(&d, 256, 22050, 30).is_err());
        let d = doc(&[("a", 0.0, 0.2, 0)], &[" "]);
        assert!(parse_alignment(&d, 256, 22050, 30).is_err());
    }

    #[test]
    fn word_spans_partition_phonemes() {
        let d = doc(
            &[
                ("h", 0.0, 0.05, 0),
                ("i", 0.05, 0.15, 0),
                ("y", 0.15, 0.2, 1),
                ("o", 0.2, 0.3, 1),
                ("u", 0.3, 0.4, 1),
            ],
            &["hi", "you"],
        );
        let a = parse_alignment(&d, 256, 22050, 35).unwrap();
        assert_eq!(a.words[0].phoneme_span, 0..2);
        assert_eq!(a.words[1].phoneme_span, 2..5);
        assert_eq!(a.phones_per_word(), vec![2, 3]);
        let w: usize = a.durations(Level::Word).iter().sum();
        assert_eq!(w, 35);
        assert!(a.durations(Level::Phoneme).iter().all(|&d| d >= 1));
    }

    #[test]
    fn very_short_phones_keep_one_frame() {
        let d = doc(
            &[("a", 0.0, 0.001, 0), ("b", 0.001, 0.002, 0), ("c", 0.002, 0.5, 0)],
            &["abc"],
        );
        let a = parse_alignment(&d, 256, 22050, 40).unwrap();
        assert_eq!(a.durations(Level::Phoneme), vec![1, 1, 38]);
    }
}
