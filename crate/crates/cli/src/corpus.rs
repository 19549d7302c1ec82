use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use prosody_core::dsp::{analyze, Analysis, AudioBuffer};
use prosody_core::labels::{
    parse_alignment, read_label_sets, AlignmentDocument, LabelKind, Level, Phoneme,
    ProsodyLabelSet, UtteranceAlignment,
};
use serde::{Deserialize, Serialize};

use crate::config::Project;
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::ManifestBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Reads an id list: one id per line, blank lines and `#` comments ignored.
pub fn read_id_list(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// An utterance with its analysis and frame-level alignment.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub analysis: Analysis,
    pub alignment: UtteranceAlignment,
}

/// Text-side view of an alignment: symbols and word grouping, no timing.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSide {
    pub id: String,
    pub phonemes: Vec<String>,
    pub words: Vec<String>,
    pub phones_per_word: Vec<usize>,
}

impl Project {
    pub fn split_path(&self, split: Split) -> PathBuf {
        match split {
            Split::Train => self.path(&self.config.paths.train_split),
            Split::Test => self.path(&self.config.paths.test_split),
        }
    }

    pub fn split_ids(&self, split: Split, m: &mut ManifestBuilder) -> CliResult<Vec<String>> {
        let path = self.split_path(split);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "{} split file {} does not exist",
                split.name(),
                path.display()
            )));
        }
        m.input(&path);
        read_id_list(&path)
    }

    pub fn wav_path(&self, id: &str) -> PathBuf {
        self.path(&self.config.paths.corpus).join("wavs").join(format!("{id}.wav"))
    }

    pub fn alignment_path(&self, id: &str) -> PathBuf {
        self.path(&self.config.paths.corpus)
            .join("alignments")
            .join(format!("{id}.json"))
    }

    /// `None` when the WAV or alignment file is absent.
    pub fn load_utterance(&self, id: &str, m: &mut ManifestBuilder) -> CliResult<Option<Utterance>> {
        let (wav, ali) = (self.wav_path(id), self.alignment_path(id));
        if !wav.exists() || !ali.exists() {
            return Ok(None);
        }
        let audio = AudioBuffer::read_wav(&wav, Some(self.config.audio.sample_rate))?;
        let analysis = analyze(&audio, &self.config.audio.analysis())?;
        let doc = AlignmentDocument::read(&ali)?;
        if doc.utterance_id != id {
            return Err(CliError::Data(format!(
                "{}: utterance_id `{}` does not match file name",
                ali.display(),
                doc.utterance_id
            )));
        }
        let alignment = parse_alignment(
            &doc,
            self.config.audio.frame.hop_length,
            self.config.audio.sample_rate,
            analysis.mel.n_frames(),
        )?;
        m.input(&wav).input(&ali);
        Ok(Some(Utterance {
            id: id.to_string(),
            analysis,
            alignment,
        }))
    }

    /// `None` when the alignment file is absent.
    pub fn load_text_side(&self, id: &str, m: &mut ManifestBuilder) -> CliResult<Option<TextSide>> {
        let ali = self.alignment_path(id);
        if !ali.exists() {
            return Ok(None);
        }
        let doc = AlignmentDocument::read(&ali)?;
        m.input(&ali);
        // unit durations: only the symbol and word structure matter here
        let phonemes: Vec<Phoneme> = doc
            .phones
            .iter()
            .map(|p| Phoneme {
                symbol: p.phone.clone(),
                duration_frames: 1,
                word_index: p.word_index,
            })
            .collect();
        let a = UtteranceAlignment::from_frames(id, phonemes, &doc.words)?;
        Ok(Some(TextSide {
            id: id.to_string(),
            phonemes: a.phoneme_symbols().into_iter().map(str::to_string).collect(),
            words: a.words.iter().map(|w| w.text.clone()).collect(),
            phones_per_word: a.phones_per_word(),
        }))
    }

    pub fn labels_path(&self, kind: LabelKind, level: Level, split: Split) -> PathBuf {
        self.artifacts()
            .join("labels")
            .join(format!("{kind}-{level}.{}.jsonl", split.name()))
    }

    pub fn quantizers_path(&self, level: Level) -> PathBuf {
        self.artifacts()
            .join("labels")
            .join(format!("rule-{level}.quantizers.json"))
    }

    pub fn ref_encoder_path(&self) -> PathBuf {
        self.artifacts().join("models").join("ref-encoder.ckpt")
    }

    /// Label sets keyed by utterance id; a missing file is an actionable error.
    pub fn read_labels(
        &self,
        kind: LabelKind,
        level: Level,
        split: Split,
        m: &mut ManifestBuilder,
    ) -> CliResult<BTreeMap<String, ProsodyLabelSet>> {
        let path = self.labels_path(kind, level, split);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "{} not found; run `prosody extract --kind {kind} --level {level}` first",
                path.display()
            )));
        }
        m.input(&path);
        let mut out = BTreeMap::new();
        for set in read_label_sets(&path)? {
            if set.kind != kind || set.level != level {
                return Err(CliError::Data(format!(
                    "{}: `{}` holds {}-{} labels",
                    path.display(),
                    set.utterance_id,
                    set.kind,
                    set.level
                )));
            }
            out.insert(set.utterance_id.clone(), set);
        }
        Ok(out)
    }
}
