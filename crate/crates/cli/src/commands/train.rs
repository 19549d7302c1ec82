use std::path::{Path, PathBuf};

use log::{info, warn};
use prosody_core::labels::{LabelKind, Level};
use prosody_core::nn::{Checkpoint, TrainConfig};
use prosody_core::predictor::{
    Conditioning, LossKind, PhonemeVocab, PredictorStepRecord, Stage,
    StageTrainer,
};
use prosody_core::vq::{VqExample, VqStepRecord, VqTrainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    channel_names, examples, fit_codec, load_embeddings, model_path, read_stage_labels,
    text_sides, Bundle, Embeddings, Model,
};
use crate::config::Project;
use crate::corpus::Split;
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::{write_json, ManifestBuilder};
use crate::target::{ModelTarget, Target};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from an existing checkpoint instead of starting over.
    pub resume: bool,
    /// Stop after this many optimizer steps in this invocation.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub level: Level,
    pub kind: LabelKind,
    pub loss: LossKind,
    pub steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Eval-mode loss over the whole train split at the end.
    pub train_eval_loss: f64,
    pub channels: Vec<String>,
    /// Per-channel MAE in natural units.
    pub train_mae: Vec<f64>,
    pub test_mae: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub target: String,
    pub slug: String,
    pub word_source: Option<String>,
    pub conditioning: Option<Conditioning>,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub oov_words: usize,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps_done: u64,
    /// Predictor report; `None` for the reference encoder and for runs
    /// stopped before every stage reached its step budget.
    pub report: Option<TrainReport>,
    /// Written once training is complete.
    pub report_path: Option<PathBuf>,
}

pub fn train(
    project: &Project,
    target: Target,
    source: Option<&str>,
    opts: TrainOptions,
) -> CliResult<TrainOutcome> {
    match target {
        Target::RefEncoder => train_ref_encoder(project, opts),
        Target::Predictor(t) => train_predictor(project, t, source, opts),
    }
}

fn stage_config(project: &Project, level: Level) -> TrainConfig {
    match level {
        Level::Word => project.config.train.word.clone(),
        Level::Phoneme => project.config.train.phoneme.clone(),
    }
}

fn stage<'a>(model: &'a mut Model, level: Level, conditioning: Conditioning) -> Stage<'a> {
    match (model, level) {
        (Model::Flat(p), _) => Stage::Flat(p),
        (Model::Hier(h), Level::Word) => Stage::Flat(&mut h.word),
        (Model::Hier(h), Level::Phoneme) => Stage::HierPhoneme {
            model: h,
            conditioning,
        },
    }
}

fn write_loss_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct LossRow<'a> {
    stage: &'a str,
    step: u64,
    learning_rate: f64,
    loss: f64,
}

fn save_predictor(
    bundle: &Bundle,
    trainers: &[StageTrainer],
    ckpt: &Path,
    csv_path: &Path,
) -> CliResult<()> {
    bundle.to_checkpoint(trainers)?.write(ckpt)?;
    let stages = bundle.target.stages();
    let names: Vec<String> = stages.iter().map(|(l, _)| l.to_string()).collect();
    let rows = trainers.iter().zip(&names).flat_map(|(t, name)| {
        t.history.iter().map(move |r: &PredictorStepRecord| LossRow {
            stage: name,
            step: r.step,
            learning_rate: r.learning_rate,
            loss: r.loss,
        })
    });
    write_loss_csv(csv_path, rows)
}

fn train_predictor(
    project: &Project,
    target: ModelTarget,
    source: Option<&str>,
    opts: TrainOptions,
) -> CliResult<TrainOutcome> {
    let source = if target.uses_words() {
        Some(project.word_source(source)?.to_string())
    } else {
        None
    };
    let slug = target.slug(source.as_deref());
    let mut m = ManifestBuilder::new(project, format!("train --target predictor:{target}"));
    let embeddings: Option<Embeddings> = match &source {
        Some(s) => Some(load_embeddings(project, s, &mut m)?),
        None => None,
    };
    let ckpt = project.artifact(format!("models/{slug}.ckpt"))?;
    let csv_path = project.artifact(format!("models/{slug}.losses.csv"))?;
    let report_path = project.artifact(format!("models/{slug}.report.json"))?;

    let (train_sides, _) = text_sides(project, Split::Train, &mut m)?;
    let stages = target.stages();
    let resumed = if opts.resume && ckpt.exists() {
        let ck = Checkpoint::read(&ckpt)?;
        let bundle = Bundle::from_checkpoint(&ck)?;
        if bundle.target != target
            || bundle.meta.embeddings_sha256 != embeddings.as_ref().map(|e| e.sha256.clone())
        {
            return Err(CliError::Usage(format!(
                "{} was trained for a different target or embedding file; rerun without --resume",
                ckpt.display()
            )));
        }
        let trainers = stages
            .iter()
            .map(|&(level, _)| {
                StageTrainer::read_sections(&ck, &format!("train.{level}"), stage_config(project, level))
            })
            .collect::<Result<Vec<_>, _>>()?;
        info!("resuming {slug} at step {:?}", trainers.iter().map(StageTrainer::steps_done).collect::<Vec<_>>());
        Some((bundle, trainers))
    } else {
        if opts.resume {
            warn!("{} does not exist; starting from scratch", ckpt.display());
        }
        None
    };
    let vocab = match &resumed {
        Some((b, _)) => b.vocab.clone(),
        None => PhonemeVocab::new(train_sides.iter().flat_map(|s| s.phonemes.iter().cloned())),
    };
    let train_labels = read_stage_labels(project, target, Split::Train, true, &mut m)?;
    let (train, oov_train) = examples(&train_sides, &vocab, embeddings.as_ref(), &train_labels, true)?;
    if train.is_empty() {
        return Err(CliError::Data("no training utterances with labels".into()));
    }

    let (mut bundle, mut trainers) = match resumed {
        Some(r) => r,
        None => {
            let codecs = stages
                .iter()
                .map(|&(level, kind)| fit_codec(project, level, kind, &train, &mut m))
                .collect::<CliResult<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(project.config.seed);
            let bundle = Bundle::init(project, target, vocab, embeddings.as_ref(), codecs, &mut rng)?;
            let trainers = stages
                .iter()
                .map(|&(level, kind)| {
                    StageTrainer::new(stage_config(project, level), LossKind::for_kind(kind))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (bundle, trainers)
        }
    };
    m.seed("init", project.config.seed);
    for ((level, _), t) in stages.iter().zip(&trainers) {
        m.seed(&format!("train.{level}"), t.config().rng_seed);
    }

    let conditioning = project.config.hierarchy.conditioning;
    let every = project.config.train.checkpoint_every;
    let mut budget = opts.max_steps.unwrap_or(u64::MAX);
    for (i, &(level, _)) in stages.iter().enumerate() {
        while !trainers[i].is_done() && budget > 0 {
            let rec = trainers[i].step(&mut stage(&mut bundle.model, level, conditioning), &train)?;
            budget -= 1;
            if rec.step % every == 0 {
                save_predictor(&bundle, &trainers, &ckpt, &csv_path)?;
                info!("{slug} {level} step {}: loss {:.5}", rec.step, rec.loss);
            }
        }
    }
    save_predictor(&bundle, &trainers, &ckpt, &csv_path)?;
    m.output(&ckpt).output(&csv_path);
    let steps_done = trainers.iter().map(StageTrainer::steps_done).sum();
    if !trainers.iter().all(StageTrainer::is_done) {
        info!("{slug}: stopped after {steps_done} steps; continue with --resume");
        m.finish(&project.artifact(format!("models/{slug}.manifest.json"))?)?;
        return Ok(TrainOutcome {
            checkpoint: ckpt,
            steps_done,
            report: None,
            report_path: None,
        });
    }

    let (test_sides, _) = text_sides(project, Split::Test, &mut m)?;
    let test_labels = read_stage_labels(project, target, Split::Test, false, &mut m)?;
    let (test, oov_test) = if test_labels.len() == stages.len() {
        examples(&test_sides, &bundle.vocab, embeddings.as_ref(), &test_labels, true)?
    } else {
        (Vec::new(), 0)
    };
    let mut reports = Vec::new();
    for (i, &(level, kind)) in stages.iter().enumerate() {
        // the final eval scores the model as it runs at inference time
        let mut st = stage(&mut bundle.model, level, Conditioning::Predicted);
        let history = &trainers[i].history;
        reports.push(StageReport {
            level,
            kind,
            loss: trainers[i].loss(),
            steps: trainers[i].steps_done(),
            first_loss: history.first().map_or(f64::NAN, |r| r.loss),
            last_loss: history.last().map_or(f64::NAN, |r| r.loss),
            train_eval_loss: st.evaluate(&train)?,
            channels: channel_names(kind),
            train_mae: st.natural_mae(&train)?,
            test_mae: if test.is_empty() { None } else { Some(st.natural_mae(&test)?) },
        });
    }
    let report = TrainReport {
        target: target.to_string(),
        slug: slug.clone(),
        word_source: source,
        conditioning: matches!(target, ModelTarget::Hier { .. }).then_some(conditioning),
        train_utterances: train.len(),
        test_utterances: test.len(),
        oov_words: oov_train + oov_test,
        stages: reports,
    };
    write_json(&report_path, &report)?;
    m.output(&report_path);
    m.finish(&project.artifact(format!("models/{slug}.manifest.json"))?)?;
    debug_assert_eq!(model_path(project, &slug), ckpt);
    Ok(TrainOutcome {
        checkpoint: ckpt,
        steps_done,
        report: Some(report),
        report_path: Some(report_path),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEncoderReport {
    pub steps: u64,
    pub level: Level,
    pub train_utterances: usize,
    pub final_loss: f64,
    pub perplexity: f64,
    pub warnings: Vec<String>,
}

fn save_vq(trainer: &VqTrainer, ckpt: &Path, csv_path: &Path) -> CliResult<()> {
    trainer.to_checkpoint()?.write(ckpt)?;
    write_loss_csv(csv_path, trainer.history.iter().map(|r: &VqStepRecord| r))
}

fn train_ref_encoder(project: &Project, opts: TrainOptions) -> CliResult<TrainOutcome> {
    let mut m = ManifestBuilder::new(project, "train --target ref-encoder");
    let cfg = project.config.vq.trainer_config();
    if cfg.encoder.n_mels != project.config.audio.mel.n_mels {
        return Err(CliError::Usage(format!(
            "vq.encoder.n_mels is {} but audio.mel.n_mels is {}",
            cfg.encoder.n_mels, project.config.audio.mel.n_mels
        )));
    }
    let level = project.config.vq.level;
    let mut data = Vec::new();
    for id in project.split_ids(Split::Train, &mut m)? {
        match project.load_utterance(&id, &mut m)? {
            Some(u) => data.push(VqExample {
                spans: u.alignment.frame_spans(level),
                mel: u.analysis.mel.frames,
                id,
            }),
            None => warn!("{id}: missing WAV or alignment, skipped"),
        }
    }
    if data.is_empty() {
        return Err(CliError::Data("no usable training utterances".into()));
    }
    let ckpt = project.ref_encoder_path();
    project.artifact("models/ref-encoder.ckpt")?;
    let csv_path = project.artifact("models/ref-encoder.losses.csv")?;
    let mut trainer = if opts.resume && ckpt.exists() {
        VqTrainer::from_checkpoint(&Checkpoint::read(&ckpt)?, &cfg)?
    } else {
        VqTrainer::new(cfg.clone(), &data)?
    };
    m.seed("train", cfg.train.rng_seed);

    let every = project.config.train.checkpoint_every;
    let mut budget = opts.max_steps.unwrap_or(u64::MAX);
    while trainer.steps_done() < cfg.train.total_steps && budget > 0 {
        let rec = trainer.step(&data)?;
        budget -= 1;
        if rec.step % every == 0 {
            save_vq(&trainer, &ckpt, &csv_path)?;
            info!("ref-encoder step {}: loss {:.5}", rec.step, rec.loss);
        }
    }
    let done = trainer.steps_done() >= cfg.train.total_steps;
    let report = if done {
        let perplexity = trainer.finish(&data)?;
        for w in &trainer.warnings {
            warn!("{w}");
        }
        Some(RefEncoderReport {
            steps: trainer.steps_done(),
            level,
            train_utterances: data.len(),
            final_loss: trainer.evaluate_loss(&data)?,
            perplexity,
            warnings: trainer.warnings.clone(),
        })
    } else {
        None
    };
    save_vq(&trainer, &ckpt, &csv_path)?;
    m.output(&ckpt).output(&csv_path);
    let report_path = match &report {
        Some(r) => {
            let path = project.artifact("models/ref-encoder.report.json")?;
            write_json(&path, r)?;
            m.output(&path);
            Some(path)
        }
        None => None,
    };
    m.finish(&project.artifact("models/ref-encoder.manifest.json")?)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        steps_done: trainer.steps_done(),
        report: None,
        report_path,
    })
}
