use std::path::{Path, PathBuf};

use log::warn;
use prosody_core::dsp::{analyze, Analysis, AudioBuffer};
use prosody_core::metrics::{evaluate_pair, MetricReport, MetricSummary};
use serde::{Deserialize, Serialize};

use crate::config::Project;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, ManifestBuilder, SCHEMA_VERSION};

#[derive(Debug, Clone, Deserialize)]
struct PairRow {
    test_path: PathBuf,
    reference_path: PathBuf,
}

/// One CSV row; metric columns follow GPE, VDE, FFE, F-MAE, E-MAE order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub gpe: Option<f64>,
    pub vde: Option<f64>,
    pub ffe: Option<f64>,
    pub f_mae: Option<f64>,
    pub e_mae: Option<f64>,
    pub co_voiced_frames: Option<usize>,
    pub frames: Option<usize>,
    /// `;`-separated notes: undefined metrics or why the pair failed.
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub gpe_threshold: f64,
    pub failures: usize,
    /// Means over the pairs that were scored.
    pub metrics: MetricSummary,
}

fn load(project: &Project, path: &Path) -> CliResult<Analysis> {
    let audio = AudioBuffer::read_wav(path, Some(project.config.audio.sample_rate))?;
    Ok(analyze(&audio, &project.config.audio.analysis())?)
}

fn row(id: String, r: &MetricReport) -> MetricRow {
    let mut flags = Vec::new();
    if r.gpe.is_none() {
        flags.push("gpe_undefined");
    }
    if r.f_mae.is_none() {
        flags.push("f_mae_undefined");
    }
    MetricRow {
        id,
        gpe: r.gpe,
        vde: Some(r.vde),
        ffe: Some(r.ffe),
        f_mae: r.f_mae,
        e_mae: Some(r.e_mae),
        co_voiced_frames: Some(r.co_voiced_frames),
        frames: Some(r.frames),
        flags: flags.join(";"),
    }
}

/// Scores each (test, reference) pair of the CSV at `pairs`. Relative paths
/// in it resolve against the CSV's directory.
pub fn evaluate(project: &Project, pairs: &Path) -> CliResult<(Vec<MetricRow>, EvaluateSummary)> {
    let stem = pairs
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("{} has no file name", pairs.display())))?;
    if !pairs.exists() {
        return Err(CliError::Usage(format!("pair manifest {} not found", pairs.display())));
    }
    let mut m = ManifestBuilder::new(project, format!("evaluate --pairs {stem}"));
    m.input(pairs);
    let base = pairs.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(pairs)?;
    let cfg = project.config.metrics;
    let (mut rows, mut reports, mut failures) = (Vec::new(), Vec::new(), 0usize);
    for record in reader.deserialize() {
        let pair: PairRow = record?;
        let (test, reference) = (base.join(&pair.test_path), base.join(&pair.reference_path));
        let id = test
            .file_stem()
            .map_or_else(|| test.display().to_string(), |s| s.to_string_lossy().into_owned());
        let scored = load(project, &test).and_then(|t| {
            let r = load(project, &reference)?;
            Ok(evaluate_pair(r.mel.frames.view(), &r.track, t.mel.frames.view(), &t.track, &cfg)?)
        });
        match scored {
            Ok(report) => {
                m.input(&test).input(&reference);
                rows.push(row(id, &report));
                reports.push(report);
            }
            Err(e) => {
                warn!("{id}: {e}");
                failures += 1;
                rows.push(MetricRow {
                    id,
                    gpe: None,
                    vde: None,
                    ffe: None,
                    f_mae: None,
                    e_mae: None,
                    co_voiced_frames: None,
                    frames: None,
                    flags: format!("failed: {e}"),
                });
            }
        }
    }
    let summary = EvaluateSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: project.config_hash.clone(),
        gpe_threshold: cfg.gpe_threshold,
        failures,
        metrics: MetricSummary::of(&reports),
    };
    let csv_path = project.artifact(format!("eval/{stem}.metrics.csv"))?;
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(crate::error::io_err(&csv_path))?;
    let json_path = project.artifact(format!("eval/{stem}.summary.json"))?;
    write_json(&json_path, &summary)?;
    m.output(&csv_path).output(&json_path);
    m.finish(&project.artifact(format!("eval/{stem}.manifest.json"))?)?;
    Ok((rows, summary))
}
