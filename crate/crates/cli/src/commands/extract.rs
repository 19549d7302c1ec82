use std::collections::BTreeMap;

use log::{info, warn};
use prosody_core::labels::{
    token_prosody, write_label_sets, LabelKind, Level, ProsodyLabelSet, RuleQuantizers,
};
use prosody_core::vq::FrozenEncoder;
use serde::Serialize;

use crate::config::{prepared, Project};
use crate::corpus::Split;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, ManifestBuilder};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractSummary {
    pub kind: LabelKind,
    pub level: Level,
    /// Utterances written per split.
    pub written: BTreeMap<String, usize>,
    pub skipped: Vec<String>,
}

/// Token-averaged (F0, energy) of one utterance.
struct RuleValues {
    id: String,
    f0: Vec<f64>,
    energy: Vec<f64>,
}

/// Labels both splits. Rule quantizers are fitted on the train split only.
pub fn extract(project: &Project, kind: LabelKind, level: Level) -> CliResult<ExtractSummary> {
    let mut m = ManifestBuilder::new(project, format!("extract --kind {kind} --level {level}"));
    m.seed("seed", project.config.seed);
    let frozen = match kind {
        LabelKind::Rule => None,
        LabelKind::Neural => {
            let path = project.ref_encoder_path();
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "neural labels need a trained reference encoder at {}; run \
                     `prosody train --target ref-encoder` first",
                    path.display()
                )));
            }
            m.input(&path);
            Some(FrozenEncoder::load(&path)?)
        }
    };

    let mut total = 0usize;
    let mut skipped = Vec::new();
    let mut rule_values: Vec<(Split, Vec<RuleValues>)> = Vec::new();
    let mut neural_sets: Vec<(Split, Vec<ProsodyLabelSet>)> = Vec::new();
    for split in Split::ALL {
        let ids = project.split_ids(split, &mut m)?;
        total += ids.len();
        let (mut values, mut sets) = (Vec::new(), Vec::new());
        for id in ids {
            let Some(u) = project.load_utterance(&id, &mut m)? else {
                warn!("{id}: missing WAV or alignment, skipped");
                skipped.push(id);
                continue;
            };
            match &frozen {
                None => {
                    let (f0, energy) = token_prosody(&u.analysis.track, &u.alignment, level)?;
                    values.push(RuleValues {
                        id,
                        f0: f0.values,
                        energy: energy.values,
                    });
                }
                Some(enc) => sets.push(enc.labels(&u.analysis.mel, &u.alignment, level)?),
            }
        }
        rule_values.push((split, values));
        neural_sets.push((split, sets));
    }
    let limit = project.config.labels.max_skip_fraction;
    if total > 0 && skipped.len() as f64 > limit * total as f64 {
        return Err(CliError::Data(format!(
            "skipped {} of {total} utterances, above the {:.1}% limit: {skipped:?}",
            skipped.len(),
            100.0 * limit
        )));
    }

    let per_split: Vec<(Split, Vec<ProsodyLabelSet>)> = match kind {
        LabelKind::Neural => neural_sets,
        LabelKind::Rule => {
            let train = &rule_values[0].1;
            if train.is_empty() {
                return Err(CliError::Data("no usable training utterances to fit quantizers".into()));
            }
            let f0: Vec<f64> = train.iter().flat_map(|v| v.f0.iter().copied()).collect();
            let energy: Vec<f64> = train.iter().flat_map(|v| v.energy.iter().copied()).collect();
            let q = RuleQuantizers::fit(&f0, &energy, project.config.labels.n_bins)?;
            let qpath = prepared(project.quantizers_path(level))?;
            write_json(&qpath, &q)?;
            m.output(&qpath);
            rule_values
                .into_iter()
                .map(|(split, values)| {
                    let sets = values
                        .into_iter()
                        .map(|v| {
                            let labels = v
                                .f0
                                .iter()
                                .zip(&v.energy)
                                .map(|(&f, &e)| q.label(f, e))
                                .collect::<Result<_, _>>()?;
                            Ok(ProsodyLabelSet {
                                utterance_id: v.id,
                                kind,
                                level,
                                labels,
                            })
                        })
                        .collect::<CliResult<_>>()?;
                    Ok((split, sets))
                })
                .collect::<CliResult<_>>()?
        }
    };

    let mut written = BTreeMap::new();
    for (split, sets) in &per_split {
        let path = prepared(project.labels_path(kind, level, *split))?;
        write_label_sets(&path, sets)?;
        m.output(&path);
        written.insert(split.name().to_string(), sets.len());
        info!("{}: {} utterances", path.display(), sets.len());
    }
    m.finish(&project.artifact(format!("labels/{kind}-{level}.manifest.json"))?)?;
    Ok(ExtractSummary {
        kind,
        level,
        written,
        skipped,
    })
}
