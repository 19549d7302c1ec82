use std::path::Path;
use std::process::{Command, Output};

use prosody_cli::commands::{self, IdSource, TrainOptions};
use prosody_cli::corpus::Split;
use prosody_cli::synth::{synth_corpus, SynthConfig};
use prosody_cli::target::{ModelTarget, Target};
use prosody_cli::{CliError, Project};
use prosody_core::labels::{LabelKind, Level};

const W_R: ModelTarget = ModelTarget::Flat {
    level: Level::Word,
    kind: LabelKind::Rule,
};

fn overrides(steps: u64) -> Vec<String> {
    [
        "predictor.channels=32".to_string(),
        "predictor.dropout=0.1".into(),
        "features.phoneme_dim=32".into(),
        "train.word.schedule={kind=\"constant\",learning_rate=0.002}".into(),
        format!("train.word.total_steps={steps}"),
        format!("train.phoneme.total_steps={steps}"),
        "train.checkpoint_every=25".into(),
    ]
    .to_vec()
}

fn corpus(dir: &Path, utterances: usize) {
    let cfg = SynthConfig {
        utterances,
        seed: 3,
        ..SynthConfig::default()
    };
    synth_corpus(dir, &cfg).unwrap();
}

fn project(dir: &Path, extra: &[String]) -> Project {
    Project::load(&dir.join("prosody.toml"), extra).unwrap()
}

/// Corpus with rule labels at both levels.
fn labelled(dir: &Path, steps: u64) -> Project {
    corpus(dir, 20);
    let p = project(dir, &overrides(steps));
    for level in [Level::Word, Level::Phoneme] {
        commands::extract(&p, LabelKind::Rule, level).unwrap();
    }
    p
}

fn prosody(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(prosody(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(prosody(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn malformed_target_lists_the_grammar() {
    let dir = tempfile::tempdir().unwrap();
    let out = prosody(dir.path(), &["train", "--target", "predictor:Q+R"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("H(W+R,P+N)"), "{}", stderr(&out));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = prosody(dir.path(), &["extract", "--kind", "rule", "--level", "word"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 6);
    let out = prosody(dir.path(), &["--set", "predictor.channels=0", "verify"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn neural_extraction_without_encoder_names_the_fix() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 6);
    let out = prosody(dir.path(), &["extract", "--kind", "neural", "--level", "phoneme"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train --target ref-encoder"), "{}", stderr(&out));
}

#[test]
fn extraction_writes_both_splits_and_quantizers() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 10);
    let p = project(dir.path(), &[]);
    let s = commands::extract(&p, LabelKind::Rule, Level::Phoneme).unwrap();
    assert_eq!(s.written["train"], 8);
    assert_eq!(s.written["test"], 2);
    assert!(s.skipped.is_empty());
    assert!(p.quantizers_path(Level::Phoneme).exists());
    for split in Split::ALL {
        assert!(p.labels_path(LabelKind::Rule, Level::Phoneme, split).exists());
    }
}

#[test]
fn too_many_missing_wavs_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 10);
    let p = project(dir.path(), &[]);
    std::fs::remove_file(p.wav_path("utt0000")).unwrap();
    let err = commands::extract(&p, LabelKind::Rule, Level::Word).unwrap_err();
    assert!(matches!(err, CliError::Data(_)), "{err}");
    assert_eq!(err.exit_code(), 2);

    let lenient = project(dir.path(), &["labels.max_skip_fraction=0.2".into()]);
    let s = commands::extract(&lenient, LabelKind::Rule, Level::Word).unwrap();
    assert_eq!(s.skipped, vec!["utt0000".to_string()]);
}

#[test]
fn rerunning_extraction_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 8);
    let p = project(dir.path(), &[]);
    let path = p.labels_path(LabelKind::Rule, Level::Word, Split::Train);
    commands::extract(&p, LabelKind::Rule, Level::Word).unwrap();
    let first = std::fs::read(&path).unwrap();
    commands::extract(&p, LabelKind::Rule, Level::Word).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn interrupted_training_resumes_to_the_same_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = labelled(a.path(), 80);
    let pb = labelled(b.path(), 80);
    let full = commands::train(&pa, Target::Predictor(W_R), Some("ft"), TrainOptions::default()).unwrap();
    assert_eq!(full.steps_done, 80);

    let part = TrainOptions {
        resume: false,
        max_steps: Some(30),
    };
    let first = commands::train(&pb, Target::Predictor(W_R), Some("ft"), part).unwrap();
    assert_eq!(first.steps_done, 30);
    assert!(first.report.is_none());
    let rest = TrainOptions {
        resume: true,
        max_steps: None,
    };
    let second = commands::train(&pb, Target::Predictor(W_R), Some("ft"), rest).unwrap();
    assert_eq!(second.steps_done, 80);
    assert_eq!(
        std::fs::read(&full.checkpoint).unwrap(),
        std::fs::read(&second.checkpoint).unwrap()
    );
    assert_eq!(full.report, second.report);
}

#[test]
fn resume_with_other_embeddings_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = labelled(dir.path(), 40);
    let part = TrainOptions {
        resume: false,
        max_steps: Some(10),
    };
    commands::train(&p, Target::Predictor(W_R), Some("ft"), part).unwrap();
    let resume = TrainOptions {
        resume: true,
        max_steps: None,
    };
    // same slug, different vectors on disk
    let ft = p.embedding_path("ft").unwrap();
    std::fs::copy(p.embedding_path("bert").unwrap(), &ft).unwrap();
    let err = commands::train(&p, Target::Predictor(W_R), Some("ft"), resume).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn prediction_scores_match_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = labelled(dir.path(), 60);
    let out = commands::train(&p, Target::Predictor(W_R), Some("ft"), TrainOptions::default()).unwrap();
    let report = out.report.unwrap();
    let meta = commands::predict(&p, W_R, Some("ft"), &IdSource::Split(Split::Test)).unwrap();
    assert_eq!(meta.levels.len(), 1);
    assert_eq!(meta.levels[0].natural_mae, report.stages[0].test_mae);
    let jsonl = p.artifacts().join("predictions/w_r.ft.test.word.jsonl");
    assert_eq!(std::fs::read_to_string(jsonl).unwrap().lines().count(), meta.utterances);
}

#[test]
fn empty_id_list_predicts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = labelled(dir.path(), 10);
    commands::train(&p, Target::Predictor(W_R), Some("ft"), TrainOptions::default()).unwrap();
    let ids = dir.path().join("none.txt");
    std::fs::write(&ids, "").unwrap();
    let out = prosody(
        dir.path(),
        &["predict", "--target", "W+R", "--features", "ft", "--ids", "none.txt"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let jsonl = p.artifacts().join("predictions/w_r.ft.none.word.jsonl");
    assert_eq!(std::fs::read_to_string(jsonl).unwrap(), "");
}

#[test]
fn predictability_report_names_a_missing_source() {
    let dir = tempfile::tempdir().unwrap();
    let p = labelled(dir.path(), 10);
    let err = commands::report_predictability(&p, &["bert".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("`bert`"), "{err}");
    assert!(err.to_string().contains("--features bert"), "{err}");
}

#[test]
fn evaluation_of_identical_audio_is_zero_and_means_are_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 4);
    let p = project(dir.path(), &[]);
    let csv = dir.path().join("pairs.csv");
    std::fs::write(
        &csv,
        "test_path,reference_path\n\
         corpus/wavs/utt0000.wav,corpus/wavs/utt0000.wav\n\
         corpus/wavs/utt0001.wav,corpus/wavs/utt0002.wav\n",
    )
    .unwrap();
    let (rows, summary) = commands::evaluate(&p, &csv).unwrap();
    assert_eq!(rows.len(), 2);
    let own = &rows[0];
    for v in [own.gpe, own.vde, own.ffe, own.f_mae, own.e_mae] {
        assert_eq!(v, Some(0.0));
    }
    assert_eq!(summary.failures, 0);
    let mean = |a: Option<f64>, b: Option<f64>| (a.unwrap() + b.unwrap()) / 2.0;
    let close = |a: Option<f64>, b: f64| (a.unwrap() - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(close(summary.metrics.ffe.mean, mean(rows[0].ffe, rows[1].ffe)));
    assert!(close(summary.metrics.e_mae.mean, mean(rows[0].e_mae, rows[1].e_mae)));
    assert!(rows[1].e_mae.unwrap() > 0.0);
}

#[test]
fn unreadable_pair_is_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let p = project(dir.path(), &[]);
    let csv = dir.path().join("pairs.csv");
    std::fs::write(
        &csv,
        "test_path,reference_path\n\
         corpus/wavs/missing.wav,corpus/wavs/utt0000.wav\n\
         corpus/wavs/utt0001.wav,corpus/wavs/utt0001.wav\n",
    )
    .unwrap();
    let (rows, summary) = commands::evaluate(&p, &csv).unwrap();
    assert_eq!(summary.failures, 1);
    assert!(rows[0].flags.starts_with("failed"), "{}", rows[0].flags);
    assert_eq!(rows[0].ffe, None);
    assert_eq!(summary.metrics.pairs, 1);
}

#[test]
fn verify_catches_an_edited_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = labelled(dir.path(), 10);
    assert_eq!(prosody(dir.path(), &["verify"]).status.code(), Some(0));
    let q = p.quantizers_path(Level::Word);
    let mut text = std::fs::read_to_string(&q).unwrap();
    text.push(' ');
    std::fs::write(&q, text).unwrap();
    let out = prosody(dir.path(), &["verify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("rule-word.quantizers.json"), "{}", stderr(&out));
}
