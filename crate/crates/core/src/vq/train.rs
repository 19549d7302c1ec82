use std::ops::Range;

use ndarray::{s, Array2, Axis, Ix2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{ENCODER_META_SECTION, ENCODER_SECTION};
use super::{
    kmeans, perplexity, vq_loss, vq_loss_grads, Codebook, FrozenEncoder, MelNorm, RefEncoder,
    RefEncoderConfig, CODEBOOK_SECTION, CODEBOOK_SIZE, LATENT_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{
    step_rng, Adam, AdamConfig, Checkpoint, Context, LayerSpec, Param, Schedule, Section,
    Sequential, TrainConfig,
};

const KMEANS_STREAM: u64 = 0x6b6d_6561_6e73;
const RESEED_STREAM: u64 = 0x7265_7365_6564;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqTrainConfig {
    pub encoder: RefEncoderConfig,
    pub train: TrainConfig,
    pub codebook_size: usize,
    /// Commitment weight.
    pub beta: f64,
    /// Steps trained without quantization before k-means initialization.
    pub quantize_after: u64,
    /// Unused codewords are reseeded at this interval.
    pub reseed_every: u64,
    pub kmeans_iters: usize,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            encoder: RefEncoderConfig::default(),
            train: TrainConfig {
                optimizer: AdamConfig::default(),
                schedule: Schedule::WarmupInverseSqrt {
                    model_dim: 256,
                    warmup_steps: 500,
                },
                batch_size: 8,
                total_steps: 2000,
                rng_seed: 0,
            },
            codebook_size: CODEBOOK_SIZE,
            beta: 0.25,
            quantize_after: 500,
            reseed_every: 500,
            kmeans_iters: 25,
        }
    }
}

impl VqTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.codebook_size == 0 || self.reseed_every == 0 || !(self.beta >= 0.0) {
            return Err(Error::Config(
                "codebook_size and reseed_every must be positive, beta non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One utterance: log-mel frames and the token spans they are pooled over.
#[derive(Debug, Clone, PartialEq)]
pub struct VqExample {
    pub id: String,
    pub mel: Array2<f64>,
    pub spans: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqStepRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub loss: f64,
    pub reconstruction: f64,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Reference encoder, proxy decoder and codebook trained together. The
/// decoder reconstructs each token's mean (normalized) mel vector from the
/// quantized latent.
#[derive(Debug, Clone)]
pub struct VqTrainer {
    cfg: VqTrainConfig,
    encoder: RefEncoder,
    decoder: Sequential,
    codebook: Param,
    opt_encoder: Adam,
    opt_decoder: Adam,
    opt_codebook: Adam,
    step: u64,
    quantizing: bool,
    usage_window: Vec<u64>,
    usage_epoch: Vec<u64>,
    pub history: Vec<VqStepRecord>,
    /// `(step, perplexity)` at the end of each epoch with quantization on.
    pub perplexities: Vec<(u64, f64)>,
    pub warnings: Vec<String>,
}

fn token_means(mel: &Array2<f64>, spans: &[Range<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros((spans.len(), mel.ncols()));
    for (r, span) in spans.iter().enumerate() {
        out.row_mut(r)
            .assign(&mel.slice(s![span.clone(), ..]).mean_axis(Axis(0)).expect("non-empty span"));
    }
    out
}

#[derive(Default)]
struct Losses {
    reconstruction: f64,
    codebook: f64,
    commitment: f64,
}

impl VqTrainer {
    pub fn new(cfg: VqTrainConfig, data: &[VqExample]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyInput("no training utterances".into()));
        }
        let norm = MelNorm::fit(data.iter().map(|e| &e.mel))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.rng_seed);
        let encoder = RefEncoder::new(cfg.encoder.clone(), norm, &mut rng)?;
        let decoder = Sequential::new(
            &[LayerSpec::Linear {
                in_features: LATENT_DIM,
                out_features: cfg.encoder.n_mels,
            }],
            &mut rng,
        )?;
        let k = cfg.codebook_size;
        let codebook = Param::new(
            Array2::from_shape_simple_fn((k, LATENT_DIM), || rng.gen_range(-1.0..1.0)).into_dyn(),
        );
        let adam = Adam::new(cfg.train.optimizer);
        Ok(Self {
            encoder,
            decoder,
            codebook,
            opt_encoder: adam.clone(),
            opt_decoder: adam.clone(),
            opt_codebook: adam,
            step: 0,
            quantizing: false,
            usage_window: vec![0; k],
            usage_epoch: vec![0; k],
            history: Vec::new(),
            perplexities: Vec::new(),
            warnings: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &VqTrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_quantizing(&self) -> bool {
        self.quantizing
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(self.codebook.value.clone().into_dimensionality::<Ix2>().unwrap())
            .expect("codebook stays finite")
    }

    fn all_latents(&self, data: &[VqExample], which: &[usize]) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for &i in which {
            let z = self.encoder.encode(&data[i].mel, &data[i].spans)?;
            rows.extend(z.iter().copied());
        }
        Ok(Array2::from_shape_vec((rows.len() / LATENT_DIM, LATENT_DIM), rows).unwrap())
    }

    fn init_codebook(&mut self, data: &[VqExample], step: u64) -> Result<()> {
        let all: Vec<usize> = (0..data.len()).collect();
        let z = self.all_latents(data, &all)?;
        let mut rng = step_rng(self.cfg.train.rng_seed ^ KMEANS_STREAM, step);
        let centers = kmeans(z.view(), self.cfg.codebook_size, self.cfg.kmeans_iters, &mut rng)?;
        self.codebook = Param::new(centers.into_dyn());
        self.quantizing = true;
        Ok(())
    }

    fn reseed_dead(&mut self, data: &[VqExample], step: u64) -> Result<()> {
        let dead: Vec<usize> = (0..self.usage_window.len())
            .filter(|&i| self.usage_window[i] == 0)
            .collect();
        if !dead.is_empty() {
            let mut rng = step_rng(self.cfg.train.rng_seed ^ RESEED_STREAM, step);
            let picks = sample(&mut rng, data.len(), data.len().min(16)).into_vec();
            let z = self.all_latents(data, &picks)?;
            let spread = z.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0).max(1e-6);
            let mut cw = self
                .codebook
                .value
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            for &d in &dead {
                let src = rng.gen_range(0..z.nrows());
                for j in 0..LATENT_DIM {
                    cw[[d, j]] = z[[src, j]] + rng.gen_range(-1e-2..1e-2) * spread;
                }
            }
        }
        self.usage_window.fill(0);
        Ok(())
    }

    /// Runs one optimization step over a seeded random batch.
    pub fn step(&mut self, data: &[VqExample]) -> Result<VqStepRecord> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no training utterances".into()));
        }
        let s = self.step + 1;
        if !self.quantizing && self.step >= self.cfg.quantize_after {
            self.init_codebook(data, s)?;
        }
        let lr = self.cfg.train.schedule.lr_at(s)?;
        let mut rng = step_rng(self.cfg.train.rng_seed, s);
        let batch: Vec<usize> = (0..self.cfg.train.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let total_tokens: usize = batch.iter().map(|&i| data[i].spans.len()).sum();
        let scale = 1.0 / total_tokens as f64;
        let n_mels = self.cfg.encoder.n_mels as f64;
        let beta = self.cfg.beta;

        self.encoder.net_mut().zero_grad();
        self.decoder.zero_grad();
        self.codebook.zero_grad();
        let mut ctx = Context::train_with(rng);
        let mut losses = Losses::default();
        for &i in &batch {
            let ex = &data[i];
            let z = self.encoder.forward(&ex.mel, &ex.spans, &mut ctx)?;
            let codebook = self.codebook();
            let assigned = if self.quantizing {
                Some(codebook.assign(z.view()))
            } else {
                None
            };
            let q = match &assigned {
                Some(idx) => {
                    let mut q = Array2::zeros(z.raw_dim());
                    for (r, &k) in idx.iter().enumerate() {
                        q.row_mut(r).assign(&codebook.codewords().row(k));
                    }
                    q
                }
                None => z.clone(),
            };
            let target = token_means(&self.encoder.norm().apply(&ex.mel), &ex.spans);
            let recon = self
                .decoder
                .forward(&q.into_dyn(), &mut ctx)?
                .into_dimensionality::<Ix2>()
                .unwrap();
            let diff = &recon - &target;
            losses.reconstruction += diff.iter().map(|d| d * d).sum::<f64>() / n_mels * scale;
            let drecon = diff.mapv(|d| 2.0 * d / n_mels * scale);
            // straight-through: the quantized output's gradient goes to z
            let mut dz = self
                .decoder
                .backward(&drecon.into_dyn())?
                .into_dimensionality::<Ix2>()
                .unwrap();
            if let Some(idx) = assigned {
                let mut cb_grad = self
                    .codebook
                    .grad
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                for (r, &k) in idx.iter().enumerate() {
                    let zr = z.row(r).to_vec();
                    let cr = codebook.codeword(k);
                    let terms = vq_loss(&zr, &cr, beta);
                    losses.codebook += terms.codebook_loss * scale;
                    losses.commitment += terms.commitment_loss * scale;
                    let (gz, gc) = vq_loss_grads(&zr, &cr, beta);
                    for j in 0..LATENT_DIM {
                        dz[[r, j]] += gz[j] * scale;
                        cb_grad[[k, j]] += gc[j] * scale;
                    }
                    self.usage_window[k] += 1;
                    self.usage_epoch[k] += 1;
                }
            }
            self.encoder.backward(&dz)?;
        }
        let loss = losses.reconstruction + losses.codebook + beta * losses.commitment;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "reference-encoder loss is {loss} at step {s} (reconstruction {}, codebook {}, commitment {})",
                losses.reconstruction, losses.codebook, losses.commitment
            )));
        }
        self.opt_encoder.step(self.encoder.net_mut().params_mut(), lr)?;
        self.opt_decoder.step(self.decoder.params_mut(), lr)?;
        if self.quantizing {
            self.opt_codebook.step([&mut self.codebook], lr)?;
            if s % self.cfg.reseed_every == 0 {
                self.reseed_dead(data, s)?;
            }
            let per_epoch = data.len().div_ceil(self.cfg.train.batch_size) as u64;
            if s % per_epoch == 0 {
                self.perplexities.push((s, perplexity(&self.usage_epoch)));
                self.usage_epoch.fill(0);
            }
        }
        self.step = s;
        let record = VqStepRecord {
            step: s,
            learning_rate: lr,
            loss,
            reconstruction: losses.reconstruction,
            codebook_loss: losses.codebook,
            commitment_loss: losses.commitment,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `total_steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &[VqExample],
        mut on_step: impl FnMut(&Self, &VqStepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.train.total_steps {
            let rec = self.step(data)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// Eval-mode objective over the whole set, token-averaged. Includes the
    /// VQ terms once quantization is on.
    pub fn evaluate_loss(&self, data: &[VqExample]) -> Result<f64> {
        let codebook = self.codebook();
        let (mut total, mut tokens) = (0.0, 0usize);
        for ex in data {
            let z = self.encoder.encode(&ex.mel, &ex.spans)?;
            let target = token_means(&self.encoder.norm().apply(&ex.mel), &ex.spans);
            let mut q = z.clone();
            if self.quantizing {
                for r in 0..z.nrows() {
                    let c = codebook.quantize(&z.row(r).to_vec());
                    total += vq_loss(&z.row(r).to_vec(), &c.codeword, self.cfg.beta).total();
                    q.row_mut(r).assign(&ndarray::aview1(&c.codeword));
                }
            }
            let recon = self
                .decoder
                .forward_eval(&q.into_dyn(), None)?
                .into_dimensionality::<Ix2>()
                .unwrap();
            total += (&recon - &target).iter().map(|d| d * d).sum::<f64>()
                / self.cfg.encoder.n_mels as f64;
            tokens += ex.spans.len();
        }
        Ok(total / tokens as f64)
    }

    /// Codeword-usage perplexity of eval-mode assignments over `data`.
    pub fn perplexity_on(&self, data: &[VqExample]) -> Result<f64> {
        let codebook = self.codebook();
        let mut counts = vec![0u64; codebook.size()];
        for ex in data {
            let z = self.encoder.encode(&ex.mel, &ex.spans)?;
            for k in codebook.assign(z.view()) {
                counts[k] += 1;
            }
        }
        Ok(perplexity(&counts))
    }

    /// Final perplexity check; records a collapse warning below 2.
    pub fn finish(&mut self, data: &[VqExample]) -> Result<f64> {
        let p = self.perplexity_on(data)?;
        if p < 2.0 {
            self.warnings.push(format!(
                "codebook collapse: final perplexity {p:.3} is below 2"
            ));
        }
        Ok(p)
    }

    pub fn freeze(&self) -> FrozenEncoder {
        FrozenEncoder::new(self.encoder.clone(), self.codebook())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.freeze().to_checkpoint()?;
        ck.insert("decoder", self.decoder.to_section()?);
        ck.insert("opt.encoder", self.opt_encoder.to_section()?);
        ck.insert("opt.decoder", self.opt_decoder.to_section()?);
        ck.insert("opt.codebook", self.opt_codebook.to_section()?);
        ck.insert(
            "train_state",
            Section::new(serde_json::json!({
                "config": self.cfg,
                "step": self.step,
                "quantizing": self.quantizing,
                "usage_window": self.usage_window,
                "usage_epoch": self.usage_epoch,
                "history": self.history,
                "perplexities": self.perplexities,
                "warnings": self.warnings,
            })),
        );
        Ok(ck)
    }

    /// Restores a trainer saved by [`VqTrainer::to_checkpoint`]; the stored
    /// config must equal `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &VqTrainConfig) -> Result<Self> {
        let state = &ck.section("train_state")?.meta;
        let stored: VqTrainConfig = serde_json::from_value(state["config"].clone())?;
        if &stored != cfg {
            return Err(Error::Config(
                "checkpoint was written with a different reference-encoder config".into(),
            ));
        }
        fn field<T: serde::de::DeserializeOwned>(state: &serde_json::Value, name: &str) -> Result<T> {
            Ok(serde_json::from_value(state[name].clone())?)
        }
        let encoder = RefEncoder::from_sections(
            ck.section(ENCODER_SECTION)?,
            ck.section(ENCODER_META_SECTION)?,
        )?;
        let codebook = Codebook::from_section(ck.section(CODEBOOK_SECTION)?)?;
        Ok(Self {
            cfg: stored,
            encoder,
            decoder: Sequential::from_section(ck.section("decoder")?)?,
            codebook: Param::new(codebook.codewords().clone().into_dyn()),
            opt_encoder: Adam::from_section(ck.section("opt.encoder")?)?,
            opt_decoder: Adam::from_section(ck.section("opt.decoder")?)?,
            opt_codebook: Adam::from_section(ck.section("opt.codebook")?)?,
            step: field(state, "step")?,
            quantizing: field(state, "quantizing")?,
            usage_window: field(state, "usage_window")?,
            usage_epoch: field(state, "usage_epoch")?,
            history: field(state, "history")?,
            perplexities: field(state, "perplexities")?,
            warnings: field(state, "warnings")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, n_mels: usize, seed: u64) -> Vec<VqExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|u| {
                let tokens = rng.gen_range(2..5);
                let mut spans = Vec::new();
                let mut rows = Vec::new();
                let mut t = 0;
                for _ in 0..tokens {
                    let len = rng.gen_range(2..5);
                    let level: f64 = rng.gen_range(-3.0..1.0);
                    let tilt: f64 = rng.gen_range(-1.0..1.0);
                    for _ in 0..len {
                        for m in 0..n_mels {
                            rows.push(level + tilt * m as f64 / n_mels as f64);
                        }
                    }
                    spans.push(t..t + len);
                    t += len;
                }
                VqExample {
                    id: format!("u{u}"),
                    mel: Array2::from_shape_vec((t, n_mels), rows).unwrap(),
                    spans,
                }
            })
            .collect()
    }

    fn small_cfg() -> VqTrainConfig {
        VqTrainConfig {
            encoder: RefEncoderConfig {
                n_mels: 6,
                conv_channels: 4,
                hidden: 8,
                ..Default::default()
            },
            train: TrainConfig {
                optimizer: AdamConfig::default(),
                schedule: Schedule::Constant {
                    learning_rate: 3e-3,
                },
                batch_size: 4,
                total_steps: 30,
                rng_seed: 5,
            },
            codebook_size: 16,
            quantize_after: 10,
            reseed_every: 10,
            ..Default::default()
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = toy(6, 6, 1);
        let cfg = small_cfg();
        let mut full = VqTrainer::new(cfg.clone(), &data).unwrap();
        full.run(&data, |_, _| Ok(())).unwrap();

        let mut part = VqTrainer::new(cfg.clone(), &data).unwrap();
        for _ in 0..17 {
            part.step(&data).unwrap();
        }
        let bytes = part.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut resumed =
            VqTrainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &cfg).unwrap();
        resumed.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.codebook(), full.codebook());
    }

    #[test]
    fn quantization_turns_on_and_perplexity_is_bounded() {
        let data = toy(8, 6, 2);
        let mut tr = VqTrainer::new(small_cfg(), &data).unwrap();
        tr.run(&data, |_, _| Ok(())).unwrap();
        assert!(tr.is_quantizing());
        assert!(tr.history[9].codebook_loss == 0.0 && tr.history[12].codebook_loss > 0.0);
        let p = tr.finish(&data).unwrap();
        assert!(p >= 1.0 && p <= 16.0);
        assert!(tr.perplexities.iter().all(|&(_, p)| p <= 16.0));
    }

    #[test]
    fn frozen_labels_are_reproducible() {
        let data = toy(4, 6, 3);
        let mut tr = VqTrainer::new(small_cfg(), &data).unwrap();
        tr.run(&data, |_, _| Ok(())).unwrap();
        let frozen = tr.freeze();
        let a = frozen.latents(&data[0].mel, &data[0].spans).unwrap();
        let b = frozen.clone().latents(&data[0].mel, &data[0].spans).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_resume_config_rejected() {
        let data = toy(3, 6, 4);
        let tr = VqTrainer::new(small_cfg(), &data).unwrap();
        let ck = tr.to_checkpoint().unwrap();
        let mut other = small_cfg();
        other.beta = 0.5;
        assert!(matches!(
            VqTrainer::from_checkpoint(&ck, &other),
            Err(Error::Config(_))
        ));
    }
}
