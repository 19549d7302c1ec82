//! Predictor checkpoints and the text-side example sets they train on.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use prosody_core::labels::{LabelKind, Level, ProsodyLabelSet, RuleQuantizers, TokenLabel};
use prosody_core::nn::{Checkpoint, Section};
use prosody_core::predictor::{
    FlatPredictor, HierarchicalPredictor, InputSpec, PhonemeVocab, PredictorExample,
    PredictorSpec, StageTrainer, TargetCodec, TokenPrediction, WordEmbeddings,
};
use prosody_core::vq::{Codebook, CODEBOOK_SECTION};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Project;
use crate::corpus::{Split, TextSide};
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::{sha256_file, ManifestBuilder};
use crate::target::ModelTarget;

const MODEL_SECTION: &str = "model";
const VOCAB_SECTION: &str = "vocab";

#[derive(Debug, Clone)]
pub enum Model {
    Flat(FlatPredictor),
    Hier(HierarchicalPredictor),
}

/// What a predictor checkpoint records about its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub target: String,
    pub word_source: Option<String>,
    pub embeddings_sha256: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub target: ModelTarget,
    pub meta: ModelMeta,
    pub vocab: PhonemeVocab,
    pub model: Model,
}

/// Loaded word vectors and the digest of the file they came from.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub source: String,
    pub vectors: WordEmbeddings,
    pub sha256: String,
}

pub fn channel_names(kind: LabelKind) -> Vec<String> {
    match kind {
        LabelKind::Rule => vec!["f0_hz".into(), "energy".into()],
        LabelKind::Neural => (0..3).map(|i| format!("z{i}")).collect(),
    }
}

pub fn model_path(project: &Project, slug: &str) -> std::path::PathBuf {
    project.artifacts().join("models").join(format!("{slug}.ckpt"))
}

pub fn load_embeddings(
    project: &Project,
    source: &str,
    m: &mut ManifestBuilder,
) -> CliResult<Embeddings> {
    let path = project.embedding_path(source)?;
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "embedding file for source `{source}` not found at {}",
            path.display()
        )));
    }
    m.input(&path);
    Ok(Embeddings {
        source: source.to_string(),
        vectors: WordEmbeddings::load(&path)?,
        sha256: sha256_file(&path)?,
    })
}

/// Text sides of a split in list order; missing alignments are skipped.
pub fn text_sides(
    project: &Project,
    split: Split,
    m: &mut ManifestBuilder,
) -> CliResult<(Vec<TextSide>, Vec<String>)> {
    let ids = project.split_ids(split, m)?;
    sides_for(project, &ids, m)
}

pub fn sides_for(
    project: &Project,
    ids: &[String],
    m: &mut ManifestBuilder,
) -> CliResult<(Vec<TextSide>, Vec<String>)> {
    let mut sides = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        match project.load_text_side(id, m)? {
            Some(s) => sides.push(s),
            None => {
                warn!("{id}: no alignment, skipped");
                skipped.push(id.clone());
            }
        }
    }
    Ok((sides, skipped))
}

/// Ground-truth labels per level for a split.
pub type LabelMaps = Vec<(Level, BTreeMap<String, ProsodyLabelSet>)>;

pub fn read_stage_labels(
    project: &Project,
    target: ModelTarget,
    split: Split,
    required: bool,
    m: &mut ManifestBuilder,
) -> CliResult<LabelMaps> {
    let mut out = Vec::new();
    for (level, kind) in target.stages() {
        if !required && !project.labels_path(kind, level, split).exists() {
            continue;
        }
        out.push((level, project.read_labels(kind, level, split, m)?));
    }
    Ok(out)
}

/// Builds examples in side order. With `strict`, utterances lacking any
/// level's labels are dropped with a warning; otherwise labels stay empty.
pub fn examples(
    sides: &[TextSide],
    vocab: &PhonemeVocab,
    embeddings: Option<&Embeddings>,
    labels: &LabelMaps,
    strict: bool,
) -> CliResult<(Vec<PredictorExample>, usize)> {
    let mut out = Vec::new();
    let mut oov = 0;
    'sides: for side in sides {
        let mut word_labels = Vec::new();
        let mut phoneme_labels = Vec::new();
        for (level, map) in labels {
            let Some(set) = map.get(&side.id) else {
                if strict {
                    warn!("{}: no {level} labels, skipped", side.id);
                    continue 'sides;
                }
                continue;
            };
            match level {
                Level::Word => word_labels = set.labels.clone(),
                Level::Phoneme => phoneme_labels = set.labels.clone(),
            }
        }
        let word_features = match embeddings {
            Some(e) => {
                let f = e.vectors.lookup(side.words.iter().map(String::as_str));
                oov += f.oov;
                f.features
            }
            None => Array2::zeros((side.words.len(), 0)),
        };
        let ex = PredictorExample {
            id: side.id.clone(),
            phoneme_ids: vocab.ids(side.phonemes.iter().map(String::as_str)),
            word_features,
            phones_per_word: side.phones_per_word.clone(),
            word_labels,
            phoneme_labels,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok((out, oov))
}

fn codebook(project: &Project, m: &mut ManifestBuilder) -> CliResult<Codebook> {
    let path = project.ref_encoder_path();
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; neural targets need `prosody train --target ref-encoder` first",
            path.display()
        )));
    }
    m.input(&path);
    Ok(Codebook::from_section(Checkpoint::read(&path)?.section(CODEBOOK_SECTION)?)?)
}

/// Target codec for one stage, with rule statistics fitted on `train`.
pub fn fit_codec(
    project: &Project,
    level: Level,
    kind: LabelKind,
    train: &[PredictorExample],
    m: &mut ManifestBuilder,
) -> CliResult<TargetCodec> {
    match kind {
        LabelKind::Rule => {
            let path = project.quantizers_path(level);
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "{} not found; run `prosody extract --kind rule --level {level}` first",
                    path.display()
                )));
            }
            m.input(&path);
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let q: RuleQuantizers = serde_json::from_str(&text)?;
            let labels: Vec<&TokenLabel> = train.iter().flat_map(|e| e.labels(level)).collect();
            Ok(TargetCodec::rule(q, labels)?)
        }
        LabelKind::Neural => Ok(TargetCodec::neural(codebook(project, m)?)),
    }
}

fn spec(project: &Project, level: Level, input: InputSpec, kind: LabelKind) -> PredictorSpec {
    let a = &project.config.predictor;
    PredictorSpec {
        channels: a.channels,
        kernel: a.kernel,
        dropout: a.dropout,
        conv_layers: a.conv_layers,
        ..PredictorSpec::new(level, input, kind)
    }
}

impl Bundle {
    /// Freshly initialized model; `codecs` follow `target.stages()`.
    pub fn init(
        project: &Project,
        target: ModelTarget,
        vocab: PhonemeVocab,
        embeddings: Option<&Embeddings>,
        mut codecs: Vec<TargetCodec>,
        rng: &mut ChaCha8Rng,
    ) -> CliResult<Self> {
        let phoneme_input = InputSpec::PhonemeTable {
            vocab: vocab.len(),
            dim: project.config.features.phoneme_dim,
        };
        let word_input = || -> CliResult<InputSpec> {
            let e = embeddings.ok_or_else(|| {
                CliError::Usage(format!("{target} needs word embeddings"))
            })?;
            Ok(InputSpec::External {
                dim: e.vectors.dim(),
            })
        };
        let model = match target {
            ModelTarget::Flat { level, kind } => {
                let input = match level {
                    Level::Phoneme => phoneme_input,
                    Level::Word => word_input()?,
                };
                let codec = codecs.remove(0);
                Model::Flat(FlatPredictor::new(spec(project, level, input, kind), codec, rng)?)
            }
            ModelTarget::Hier { word, phoneme } => {
                let (wc, pc) = (codecs.remove(0), codecs.remove(0));
                let w = FlatPredictor::new(spec(project, Level::Word, word_input()?, word), wc, rng)?;
                let p = FlatPredictor::new(spec(project, Level::Phoneme, phoneme_input, phoneme), pc, rng)?;
                Model::Hier(HierarchicalPredictor::new(
                    w,
                    p,
                    project.config.hierarchy.injection,
                    rng,
                )?)
            }
        };
        Ok(Self {
            target,
            meta: ModelMeta {
                target: target.to_string(),
                word_source: embeddings.map(|e| e.source.clone()),
                embeddings_sha256: embeddings.map(|e| e.sha256.clone()),
            },
            vocab,
            model,
        })
    }

    pub fn to_checkpoint(&self, trainers: &[StageTrainer]) -> CliResult<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert(MODEL_SECTION, Section::new(serde_json::to_value(&self.meta)?));
        ck.insert(VOCAB_SECTION, Section::new(serde_json::to_value(&self.vocab)?));
        match &self.model {
            Model::Flat(p) => p.write_sections(&mut ck, &p.level().to_string())?,
            Model::Hier(h) => h.write_sections(&mut ck)?,
        }
        for (t, (level, _)) in trainers.iter().zip(self.target.stages()) {
            t.write_sections(&mut ck, &format!("train.{level}"))?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> CliResult<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.section(MODEL_SECTION)?.meta.clone())?;
        let target: ModelTarget = meta.target.parse()?;
        let vocab: PhonemeVocab = serde_json::from_value(ck.section(VOCAB_SECTION)?.meta.clone())?;
        let model = match target {
            ModelTarget::Flat { level, .. } => {
                Model::Flat(FlatPredictor::read_sections(ck, &level.to_string())?)
            }
            ModelTarget::Hier { .. } => Model::Hier(HierarchicalPredictor::read_sections(ck)?),
        };
        Ok(Self {
            target,
            meta,
            vocab,
            model,
        })
    }

    /// Reads a trained model and re-opens the embeddings it was trained on.
    pub fn load(
        project: &Project,
        path: &Path,
        m: &mut ManifestBuilder,
    ) -> CliResult<(Self, Option<Embeddings>)> {
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "{} not found; train it with `prosody train` first",
                path.display()
            )));
        }
        m.input(path);
        let bundle = Self::from_checkpoint(&Checkpoint::read(path)?)?;
        let embeddings = match &bundle.meta.word_source {
            Some(source) => {
                let e = load_embeddings(project, source, m)?;
                if Some(&e.sha256) != bundle.meta.embeddings_sha256.as_ref() {
                    return Err(CliError::Data(format!(
                        "embeddings for `{source}` changed since {} was trained",
                        path.display()
                    )));
                }
                Some(e)
            }
            None => None,
        };
        Ok((bundle, embeddings))
    }

    pub fn codec(&self, level: Level) -> &TargetCodec {
        match &self.model {
            Model::Flat(p) => &p.codec,
            Model::Hier(h) => match level {
                Level::Word => &h.word.codec,
                Level::Phoneme => &h.phoneme.codec,
            },
        }
    }

    /// Inference-time predictions for every level the model emits.
    pub fn predict(&self, ex: &PredictorExample) -> CliResult<Vec<(Level, TokenPrediction)>> {
        use prosody_core::predictor::Features;
        Ok(match &self.model {
            Model::Flat(p) => {
                let input = match p.level() {
                    Level::Phoneme => Features::Ids(&ex.phoneme_ids),
                    Level::Word => Features::Vectors(&ex.word_features),
                };
                vec![(p.level(), p.predict(input)?)]
            }
            Model::Hier(h) => {
                let out = h.predict(
                    &ex.word_features,
                    Features::Ids(&ex.phoneme_ids),
                    &ex.phones_per_word,
                )?;
                vec![(Level::Word, out.word), (Level::Phoneme, out.phoneme)]
            }
        })
    }
}

/// Running per-channel absolute error in natural units.
#[derive(Debug, Clone, Default)]
pub struct MaeAccumulator {
    sums: Vec<f64>,
    pub tokens: usize,
}

impl MaeAccumulator {
    pub fn add(&mut self, codec: &TargetCodec, pred: &TokenPrediction, truth: &[TokenLabel]) -> CliResult<()> {
        let truth = codec.values(truth)?;
        if truth.nrows() != pred.values.nrows() {
            return Err(CliError::Data(format!(
                "{} predicted tokens but {} labels",
                pred.values.nrows(),
                truth.nrows()
            )));
        }
        self.sums.resize(codec.dim(), 0.0);
        for (p, t) in pred.values.rows().into_iter().zip(truth.rows()) {
            for c in 0..self.sums.len() {
                self.sums[c] += (p[c] - t[c]).abs();
            }
            self.tokens += 1;
        }
        Ok(())
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.tokens > 0).then(|| self.sums.iter().map(|s| s / self.tokens as f64).collect())
    }
}
