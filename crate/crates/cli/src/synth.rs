//! Seeded toy corpus: harmonic "speech" whose F0 and loudness are set per
//! word, with homophone pairs that share phonemes but not prosody.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use prosody_core::dsp::AudioBuffer;
use prosody_core::labels::{AlignmentDocument, PhoneInterval};
use prosody_core::predictor::WordEmbeddings;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ProjectConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::write_json;

const PHONES: [&str; 10] = ["a", "e", "i", "o", "u", "k", "m", "n", "s", "t"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub utterances: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub hop_length: usize,
    pub vocab_words: usize,
    /// Pairs of words with identical phonemes and different prosody.
    pub homophone_pairs: usize,
    pub embedding_dim: usize,
    pub words_per_utterance: (usize, usize),
    pub frames_per_phone: (usize, usize),
    /// Relative per-utterance F0 jitter (standard deviation).
    pub f0_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            utterances: 50,
            test_fraction: 0.2,
            seed: 0,
            sample_rate: 22050,
            hop_length: 256,
            vocab_words: 12,
            homophone_pairs: 2,
            embedding_dim: 16,
            words_per_utterance: (3, 6),
            frames_per_phone: (5, 9),
            f0_jitter: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthWord {
    pub text: String,
    pub phones: Vec<String>,
    pub f0_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub lexicon: Vec<SynthWord>,
    pub embedding_sources: Vec<String>,
}

fn lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SynthWord> {
    let n = cfg.vocab_words;
    let mut f0s: Vec<f64> = (0..n)
        .map(|i| 110.0 + 150.0 * i as f64 / (n.max(2) - 1) as f64)
        .collect();
    f0s.shuffle(rng);
    let mut words: Vec<SynthWord> = (0..n)
        .map(|i| SynthWord {
            text: format!("w{i:02}"),
            phones: (0..rng.gen_range(2..=3))
                .map(|_| PHONES[rng.gen_range(0..PHONES.len())].to_string())
                .collect(),
            f0_hz: f0s[i],
            amplitude: rng.gen_range(0.15..0.6),
        })
        .collect();
    for p in 0..cfg.homophone_pairs.min(n / 2) {
        let (a, b) = (2 * p, 2 * p + 1);
        words[b].phones = words[a].phones.clone();
        // keep the pair's pitch clearly apart
        if (words[a].f0_hz - words[b].f0_hz).abs() < 60.0 {
            words[b].f0_hz = if words[a].f0_hz < 185.0 { words[a].f0_hz + 70.0 } else { words[a].f0_hz - 70.0 };
        }
    }
    words
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple to reason about
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn utterance(
    id: &str,
    lex: &[SynthWord],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (AudioBuffer, AlignmentDocument) {
    let sr = cfg.sample_rate as f64;
    let n_words = rng.gen_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1);
    let chosen: Vec<&SynthWord> = (0..n_words).map(|_| &lex[rng.gen_range(0..lex.len())]).collect();
    let mut samples = Vec::new();
    let mut phones = Vec::new();
    let mut phase = 0.0f64;
    for (wi, w) in chosen.iter().enumerate() {
        let f0 = w.f0_hz * (1.0 + cfg.f0_jitter * gaussian(rng));
        let amp = w.amplitude * (1.0 + 0.02 * gaussian(rng));
        for p in &w.phones {
            let frames = rng.gen_range(cfg.frames_per_phone.0..=cfg.frames_per_phone.1);
            let start = samples.len();
            for _ in 0..frames * cfg.hop_length {
                phase = (phase + TAU * f0 / sr) % TAU;
                let s = phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin();
                samples.push(amp * s / 1.75);
            }
            phones.push(PhoneInterval {
                phone: p.clone(),
                start_s: start as f64 / sr,
                end_s: samples.len() as f64 / sr,
                word_index: wi,
            });
        }
    }
    let audio = AudioBuffer::new(samples, cfg.sample_rate).expect("finite samples in range");
    let doc = AlignmentDocument {
        utterance_id: id.to_string(),
        phones,
        words: chosen.iter().map(|w| w.text.clone()).collect(),
    };
    (audio, doc)
}

fn embeddings(lex: &[SynthWord], dim: usize, rng: &mut ChaCha8Rng) -> WordEmbeddings {
    let vectors: HashMap<String, Vec<f64>> = lex
        .iter()
        .map(|w| {
            let v = (0..dim).map(|_| (gaussian(rng) * 1e4).round() / 1e4).collect();
            (w.text.clone(), v)
        })
        .collect();
    WordEmbeddings::from_vectors(dim, vectors).expect("consistent dims")
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes `wavs/`, `alignments/`, split lists, two embedding files and a
/// `prosody.toml` pointing at them under `out`.
pub fn synth_corpus(out: &Path, cfg: &SynthConfig) -> CliResult<SynthSummary> {
    if cfg.utterances == 0 || cfg.vocab_words < 2 || !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(CliError::Usage(
            "synthetic corpus needs utterances > 0, at least 2 words and test_fraction in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = lexicon(cfg, &mut rng);
    let corpus = out.join("corpus");
    let ids: Vec<String> = (0..cfg.utterances).map(|i| format!("utt{i:04}")).collect();
    for id in &ids {
        let (audio, doc) = utterance(id, &lex, cfg, &mut rng);
        let wav = corpus.join("wavs").join(format!("{id}.wav"));
        std::fs::create_dir_all(wav.parent().unwrap()).map_err(io_err(&wav))?;
        audio.write_wav16(&wav)?;
        let ali = corpus.join("alignments").join(format!("{id}.json"));
        std::fs::create_dir_all(ali.parent().unwrap()).map_err(io_err(&ali))?;
        write_json(&ali, &doc)?;
    }
    let n_test = ((cfg.utterances as f64) * cfg.test_fraction).round() as usize;
    let (train, test) = ids.split_at(cfg.utterances - n_test);
    write(&corpus.join("train.txt"), &(train.join("\n") + "\n"))?;
    write(&corpus.join("test.txt"), &(test.join("\n") + "\n"))?;

    let sources = vec!["ft".to_string(), "bert".to_string()];
    let mut config = ProjectConfig::default();
    config.audio.sample_rate = cfg.sample_rate;
    config.audio.frame.hop_length = cfg.hop_length;
    for s in &sources {
        let rel = PathBuf::from("embeddings").join(format!("{s}.txt"));
        write(&out.join(&rel), &embeddings(&lex, cfg.embedding_dim, &mut rng).to_text())?;
        config.features.embeddings.insert(s.clone(), rel);
    }
    config.features.word_source = sources[0].clone();
    let toml = toml::to_string(&config)
        .map_err(|e| CliError::Usage(format!("cannot render config: {e}")))?;
    write(&out.join("prosody.toml"), &toml)?;

    let summary = SynthSummary {
        seed: cfg.seed,
        train: train.to_vec(),
        test: test.to_vec(),
        lexicon: lex,
        embedding_sources: sources,
    };
    write_json(&out.join("corpus").join("lexicon.json"), &summary)?;
    Ok(summary)
}
