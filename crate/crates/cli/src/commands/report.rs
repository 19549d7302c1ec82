use prosody_core::labels::{LabelKind, Level};
use serde::{Deserialize, Serialize};

use super::model::{examples, model_path, read_stage_labels, text_sides, Bundle, MaeAccumulator};
use crate::config::Project;
use crate::corpus::Split;
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::target::ModelTarget;

/// Feature-source name that selects the phoneme-table predictor.
pub const PHONEME_SOURCE: &str = "phoneme";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityRow {
    pub source: String,
    pub level: Level,
    pub model: String,
    pub f0_mae: f64,
    pub energy_mae: f64,
    pub tokens: usize,
}

fn model_for(source: &str) -> ModelTarget {
    let level = if source == PHONEME_SOURCE { Level::Phoneme } else { Level::Word };
    ModelTarget::Flat {
        level,
        kind: LabelKind::Rule,
    }
}

/// Held-out F0 and energy MAE of the rule-label predictor trained on each
/// feature source, scored at that predictor's own token level.
pub fn report_predictability(project: &Project, sources: &[String]) -> CliResult<Vec<PredictabilityRow>> {
    if sources.is_empty() {
        return Err(CliError::Usage(format!(
            "list at least one feature source (`{PHONEME_SOURCE}` or a configured embedding name)"
        )));
    }
    let mut m = ManifestBuilder::new(project, format!("report-predictability --sources {}", sources.join(",")));
    m.seed("seed", project.config.seed);
    let (sides, _) = text_sides(project, Split::Test, &mut m)?;
    let mut rows = Vec::new();
    for source in sources {
        let target = model_for(source);
        let slug = target.slug(Some(source));
        let path = model_path(project, &slug);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "no trained predictor for feature source `{source}`: expected {}; run \
                 `prosody train --target {target}{}` first",
                path.display(),
                if target.uses_words() { format!(" --features {source}") } else { String::new() }
            )));
        }
        let (bundle, embeddings) = Bundle::load(project, &path, &mut m)?;
        let labels = read_stage_labels(project, target, Split::Test, true, &mut m)?;
        let (data, _) = examples(&sides, &bundle.vocab, embeddings.as_ref(), &labels, true)?;
        let level = labels[0].0;
        let mut acc = MaeAccumulator::default();
        for ex in &data {
            let (_, pred) = bundle.predict(ex)?.remove(0);
            acc.add(bundle.codec(level), &pred, ex.labels(level))?;
        }
        let mae = acc
            .mean()
            .ok_or_else(|| CliError::Data("no held-out tokens to score".into()))?;
        rows.push(PredictabilityRow {
            source: source.clone(),
            level,
            model: slug,
            f0_mae: mae[0],
            energy_mae: mae[1],
            tokens: acc.tokens,
        });
    }
    let path = project.artifact("reports/predictability.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(crate::error::io_err(&path))?;
    m.output(&path);
    m.finish(&project.artifact("reports/predictability.manifest.json")?)?;
    Ok(rows)
}
