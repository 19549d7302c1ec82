use std::path::PathBuf;

use log::warn;
use prosody_core::labels::{write_label_sets, LabelKind, Level, ProsodyLabelSet};
use prosody_core::predictor::LossKind;
use serde::{Deserialize, Serialize};

use super::model::{
    channel_names, examples, model_path, read_stage_labels, sides_for, Bundle, LabelMaps,
    MaeAccumulator,
};
use crate::config::Project;
use crate::corpus::{read_id_list, Split};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, ManifestBuilder};
use crate::target::ModelTarget;

/// Which utterances to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdSource {
    Split(Split),
    /// A plain id list; ground truth is not looked up.
    File(PathBuf),
}

impl IdSource {
    fn name(&self) -> CliResult<String> {
        match self {
            IdSource::Split(s) => Ok(s.name().to_string()),
            IdSource::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Usage(format!("{} has no file name", p.display()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMeta {
    pub level: Level,
    pub kind: LabelKind,
    pub loss: LossKind,
    pub labels_path: String,
    pub channels: Vec<String>,
    /// Per-channel MAE against ground-truth labels, when available.
    pub natural_mae: Option<Vec<f64>>,
    pub tokens_scored: usize,
}

/// Run metadata written next to the prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub target: String,
    pub word_source: Option<String>,
    pub ids: String,
    pub utterances: usize,
    pub skipped: Vec<String>,
    pub oov_words: usize,
    pub config_hash: String,
    pub seed: u64,
    pub levels: Vec<LevelMeta>,
}

pub fn predict(
    project: &Project,
    target: ModelTarget,
    source: Option<&str>,
    ids: &IdSource,
) -> CliResult<PredictionMeta> {
    let source = if target.uses_words() {
        Some(project.word_source(source)?.to_string())
    } else {
        None
    };
    let slug = target.slug(source.as_deref());
    let name = ids.name()?;
    let mut m = ManifestBuilder::new(project, format!("predict --target predictor:{target} --ids {name}"));
    m.seed("seed", project.config.seed);
    let (bundle, embeddings) = Bundle::load(project, &model_path(project, &slug), &mut m)?;
    if bundle.target != target {
        return Err(CliError::Data(format!("{slug}.ckpt holds {} weights", bundle.target)));
    }
    let (list, truth): (Vec<String>, LabelMaps) = match ids {
        IdSource::Split(split) => (
            project.split_ids(*split, &mut m)?,
            read_stage_labels(project, target, *split, false, &mut m)?,
        ),
        IdSource::File(path) => {
            m.input(path);
            (read_id_list(path)?, Vec::new())
        }
    };
    let (sides, skipped) = sides_for(project, &list, &mut m)?;
    let (data, oov) = examples(&sides, &bundle.vocab, embeddings.as_ref(), &truth, false)?;

    let stages = target.stages();
    let mut sets: Vec<Vec<ProsodyLabelSet>> = vec![Vec::new(); stages.len()];
    let mut maes = vec![MaeAccumulator::default(); stages.len()];
    for ex in &data {
        for (i, (level, pred)) in bundle.predict(ex)?.into_iter().enumerate() {
            let truth = ex.labels(level);
            if !truth.is_empty() {
                maes[i].add(bundle.codec(level), &pred, truth)?;
            } else if matches!(ids, IdSource::Split(_)) {
                warn!("{}: no ground-truth {level} labels", ex.id);
            }
            sets[i].push(ProsodyLabelSet {
                utterance_id: ex.id.clone(),
                kind: stages[i].1,
                level,
                labels: pred.labels,
            });
        }
    }

    let mut levels = Vec::new();
    for (i, &(level, kind)) in stages.iter().enumerate() {
        let path = project.artifact(format!("predictions/{slug}.{name}.{level}.jsonl"))?;
        write_label_sets(&path, &sets[i])?;
        m.output(&path);
        levels.push(LevelMeta {
            level,
            kind,
            loss: LossKind::for_kind(kind),
            labels_path: path.file_name().unwrap().to_string_lossy().into_owned(),
            channels: channel_names(kind),
            natural_mae: maes[i].mean(),
            tokens_scored: maes[i].tokens,
        });
    }
    let meta = PredictionMeta {
        target: target.to_string(),
        word_source: source,
        ids: name.clone(),
        utterances: data.len(),
        skipped,
        oov_words: oov,
        config_hash: project.config_hash.clone(),
        seed: project.config.seed,
        levels,
    };
    let meta_path = project.artifact(format!("predictions/{slug}.{name}.meta.json"))?;
    write_json(&meta_path, &meta)?;
    m.output(&meta_path);
    m.finish(&project.artifact(format!("predictions/{slug}.{name}.manifest.json"))?)?;
    Ok(meta)
}
