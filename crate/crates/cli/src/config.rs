use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prosody_core::dsp::{AnalysisConfig, F0Config, FrameConfig, MelConfig};
use prosody_core::labels::{Level, DEFAULT_BINS};
use prosody_core::metrics::MetricConfig;
use prosody_core::nn::{AdamConfig, Schedule, TrainConfig};
use prosody_core::predictor::{Conditioning, InjectionMode};
use prosody_core::vq::{RefEncoderConfig, VqTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

/// Everything a run depends on. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Seed for model initialization; training seeds live in each `train` block.
    pub seed: u64,
    pub paths: PathsConfig,
    pub audio: AudioConfig,
    pub labels: LabelConfig,
    pub features: FeatureConfig,
    pub predictor: ArchConfig,
    pub hierarchy: HierarchyConfig,
    pub vq: VqConfig,
    pub train: TrainSection,
    pub metrics: MetricConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            audio: AudioConfig::default(),
            labels: LabelConfig::default(),
            features: FeatureConfig::default(),
            predictor: ArchConfig::default(),
            hierarchy: HierarchyConfig::default(),
            vq: VqConfig::default(),
            train: TrainSection::default(),
            metrics: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Holds `wavs/<id>.wav` and `alignments/<id>.json`.
    pub corpus: PathBuf,
    pub artifacts: PathBuf,
    pub train_split: PathBuf,
    pub test_split: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            artifacts: "artifacts".into(),
            train_split: "corpus/train.txt".into(),
            test_split: "corpus/test.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub f0: F0Config,
}

impl Default for AudioConfig {
    fn default() -> Self {
        let a = AnalysisConfig::default();
        Self {
            sample_rate: 22050,
            frame: a.frame,
            mel: a.mel,
            f0: a.f0,
        }
    }
}

impl AudioConfig {
    pub fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            frame: self.frame,
            mel: self.mel,
            f0: self.f0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub n_bins: usize,
    /// Extraction fails once more than this fraction of utterances is skipped.
    pub max_skip_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            max_skip_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Named word-embedding files.
    pub embeddings: BTreeMap<String, PathBuf>,
    /// Source used by word-level and hierarchical predictors.
    pub word_source: String,
    /// Width of the learned phoneme table.
    pub phoneme_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            embeddings: BTreeMap::new(),
            word_source: String::new(),
            phoneme_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub conv_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            kernel: 3,
            dropout: 0.5,
            conv_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub injection: InjectionMode,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// Token level the reference encoder is trained on.
    pub level: Level,
    pub encoder: RefEncoderConfig,
    pub train: TrainConfig,
    pub codebook_size: usize,
    pub beta: f64,
    pub quantize_after: u64,
    pub reseed_every: u64,
    pub kmeans_iters: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        let d = VqTrainConfig::default();
        Self {
            level: Level::Phoneme,
            encoder: d.encoder,
            train: d.train,
            codebook_size: d.codebook_size,
            beta: d.beta,
            quantize_after: d.quantize_after,
            reseed_every: d.reseed_every,
            kmeans_iters: d.kmeans_iters,
        }
    }
}

impl VqConfig {
    pub fn trainer_config(&self) -> VqTrainConfig {
        VqTrainConfig {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            codebook_size: self.codebook_size,
            beta: self.beta,
            quantize_after: self.quantize_after,
            reseed_every: self.reseed_every,
            kmeans_iters: self.kmeans_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Word-level predictors: constant learning rate.
    pub word: TrainConfig,
    /// Phoneme-level predictors and the hierarchical phoneme stage.
    pub phoneme: TrainConfig,
    /// Steps between resumable checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            word: TrainConfig {
                optimizer: AdamConfig::default(),
                schedule: Schedule::Constant {
                    learning_rate: 1e-4,
                },
                batch_size: 16,
                total_steps: 2000,
                rng_seed: 1,
            },
            phoneme: TrainConfig {
                optimizer: AdamConfig::default(),
                schedule: Schedule::WarmupInverseSqrt {
                    model_dim: 256,
                    warmup_steps: 400,
                },
                batch_size: 16,
                total_steps: 2000,
                rng_seed: 2,
            },
            checkpoint_every: 250,
        }
    }
}

impl ProjectConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.audio.frame.validate()?;
        self.audio.f0.validate(self.audio.sample_rate)?;
        self.vq.trainer_config().validate()?;
        self.train.word.validate()?;
        self.train.phoneme.validate()?;
        self.metrics.validate()?;
        if self.train.checkpoint_every == 0 {
            return Err(CliError::Usage("train.checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.labels.max_skip_fraction) {
            return Err(CliError::Usage("labels.max_skip_fraction must be in [0, 1]".into()));
        }
        if self.features.phoneme_dim == 0 || self.predictor.channels == 0 {
            return Err(CliError::Usage("feature and channel widths must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

/// Creates the parent directories of `path`.
pub fn prepared(path: PathBuf) -> CliResult<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(path)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `key.path=value`; the value is read as TOML, or as a bare string
/// when it is not valid TOML.
fn parse_override(raw: &str) -> CliResult<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> CliResult<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Usage(format!("override `{}`: `{key}` is not a table", path.join(".")))
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Recursively overlays `over` on `base`; non-table values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Overlays the TOML text and then the overrides on the defaults, and
/// validates the result.
pub fn resolve(text: &str, overrides: &[String]) -> CliResult<ProjectConfig> {
    let file: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    let mut table = toml::Table::try_from(ProjectConfig::default())
        .map_err(|e| CliError::Usage(format!("config defaults: {e}")))?;
    merge(&mut table, file);
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut table, &path, value)?;
    }
    let cfg: ProjectConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A loaded config plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct Project {
    pub config: ProjectConfig,
    pub root: PathBuf,
    pub config_hash: String,
}

impl Project {
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config = resolve(&text, overrides)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self::new(config, root))
    }

    pub fn new(config: ProjectConfig, root: PathBuf) -> Self {
        let config_hash = config.hash();
        Self {
            config,
            root,
            config_hash,
        }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn artifacts(&self) -> PathBuf {
        self.path(&self.config.paths.artifacts)
    }

    /// `rel` under the artifact directory, with parent directories created.
    pub fn artifact(&self, rel: impl AsRef<Path>) -> CliResult<PathBuf> {
        prepared(self.artifacts().join(rel))
    }

    pub fn embedding_path(&self, source: &str) -> CliResult<PathBuf> {
        self.config
            .features
            .embeddings
            .get(source)
            .map(|p| self.path(p))
            .ok_or_else(|| {
                let known: Vec<&String> = self.config.features.embeddings.keys().collect();
                CliError::Usage(format!(
                    "no embedding source named `{source}` (configured: {known:?})"
                ))
            })
    }

    /// `source` or the configured default word source.
    pub fn word_source<'a>(&'a self, source: Option<&'a str>) -> CliResult<&'a str> {
        match source.unwrap_or(&self.config.features.word_source) {
            "" => Err(CliError::Usage(
                "no word-feature source: set features.word_source or pass --features".into(),
            )),
            s => Ok(s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(resolve("", &[]).unwrap(), ProjectConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = resolve(
            "seed = 3\n[paths]\ncorpus = \"c\"\n",
            &[
                "seed=9".into(),
                "train.word.total_steps=10".into(),
                "paths.corpus=elsewhere".into(),
                "hierarchy.injection=\"continuous\"".into(),
                "features.embeddings.ft=emb/ft.txt".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.word.total_steps, 10);
        assert_eq!(cfg.paths.corpus, PathBuf::from("elsewhere"));
        assert_eq!(cfg.hierarchy.injection, InjectionMode::Continuous);
        assert_eq!(cfg.features.embeddings["ft"], PathBuf::from("emb/ft.txt"));
        // untouched nested defaults survive a partial table
        assert_eq!(cfg.paths.artifacts, PathBuf::from("artifacts"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for (text, set) in [
            ("bogus = 1", vec![]),
            ("", vec!["paths.nope=1".to_string()]),
            ("", vec!["seed".to_string()]),
            ("", vec!["train.word.batch_size=0".to_string()]),
            ("seed = ", vec![]),
        ] {
            let e = resolve(text, &set).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text:?} {set:?}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ProjectConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ProjectConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(resolve(&text, &[]).unwrap(), cfg);
    }
}
