use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codec::{LossKind, TargetCodec};
use super::model::{
    Features, FlatPredictor, HierarchicalPredictor, InputSpec, WordCondition,
};
use crate::error::{Error, Result};
use crate::labels::{Level, TokenLabel};
use crate::nn::gradcheck::Differentiable;
use crate::nn::{step_rng, Adam, Checkpoint, Context, Param, Section, TrainConfig};

/// One utterance's text-side inputs and ground-truth labels. A label list
/// may be left empty when that level is not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorExample {
    pub id: String,
    pub phoneme_ids: Vec<usize>,
    pub word_features: Array2<f64>,
    pub phones_per_word: Vec<usize>,
    pub word_labels: Vec<TokenLabel>,
    pub phoneme_labels: Vec<TokenLabel>,
}

impl PredictorExample {
    pub fn validate(&self) -> Result<()> {
        let words = self.phones_per_word.len();
        let phones: usize = self.phones_per_word.iter().sum();
        if words == 0 {
            return Err(Error::EmptyInput(format!("{}: no words", self.id)));
        }
        let unset_or = |n: usize, want: usize| n == 0 || n == want;
        if self.word_features.nrows() != words || !unset_or(self.word_labels.len(), words) {
            return Err(Error::Mismatch(format!(
                "{}: {words} words but {} feature rows and {} word labels",
                self.id,
                self.word_features.nrows(),
                self.word_labels.len()
            )));
        }
        if self.phoneme_ids.len() != phones || !unset_or(self.phoneme_labels.len(), phones) {
            return Err(Error::Mismatch(format!(
                "{}: {phones} phonemes but {} ids and {} phoneme labels",
                self.id,
                self.phoneme_ids.len(),
                self.phoneme_labels.len()
            )));
        }
        Ok(())
    }

    pub fn labels(&self, level: Level) -> &[TokenLabel] {
        match level {
            Level::Word => &self.word_labels,
            Level::Phoneme => &self.phoneme_labels,
        }
    }
}

/// Word labels fed to the hierarchical phoneme stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Ground-truth word labels.
    #[default]
    TeacherForced,
    /// The trained word predictor's output.
    Predicted,
}

/// The trainable part of a model. The hierarchical phoneme stage updates the
/// phoneme predictor and the injection only; the word predictor is read-only.
#[derive(Debug)]
pub enum Stage<'a> {
    Flat(&'a mut FlatPredictor),
    HierPhoneme {
        model: &'a mut HierarchicalPredictor,
        conditioning: Conditioning,
    },
}

fn flat_input<'e>(p: &FlatPredictor, ex: &'e PredictorExample) -> Result<Features<'e>> {
    match (&p.predictor.spec().input, p.level()) {
        (InputSpec::PhonemeTable { .. }, Level::Phoneme) => Ok(Features::Ids(&ex.phoneme_ids)),
        (InputSpec::External { .. }, Level::Word) => Ok(Features::Vectors(&ex.word_features)),
        (input, level) => Err(Error::Config(format!(
            "no example features for a {level}-level predictor with input {input:?}"
        ))),
    }
}

impl Stage<'_> {
    pub fn codec(&self) -> &TargetCodec {
        match self {
            Stage::Flat(p) => &p.codec,
            Stage::HierPhoneme { model, .. } => &model.phoneme.codec,
        }
    }

    pub fn level(&self) -> Level {
        match self {
            Stage::Flat(p) => p.level(),
            Stage::HierPhoneme { .. } => Level::Phoneme,
        }
    }

    pub fn loss(&self) -> LossKind {
        self.codec().loss()
    }

    /// Ground-truth labels at this stage's level, checked against the token count.
    pub fn labels<'e>(&self, ex: &'e PredictorExample) -> Result<&'e [TokenLabel]> {
        let level = self.level();
        let labels = ex.labels(level);
        let want = match level {
            Level::Word => ex.phones_per_word.len(),
            Level::Phoneme => ex.phoneme_ids.len(),
        };
        if labels.len() != want {
            return Err(Error::Mismatch(format!(
                "{}: {} {level} labels for {want} {level}s",
                ex.id,
                labels.len()
            )));
        }
        Ok(labels)
    }

    pub fn targets(&self, ex: &PredictorExample) -> Result<Array2<f64>> {
        self.codec().targets(self.labels(ex)?)
    }

    fn condition(
        model: &HierarchicalPredictor,
        conditioning: Conditioning,
        ex: &PredictorExample,
    ) -> Result<WordCondition> {
        match conditioning {
            Conditioning::TeacherForced => WordCondition::from_labels(
                model.injection.mode(),
                &model.word.codec,
                &ex.word_labels,
            ),
            Conditioning::Predicted => Ok(model.predicted_condition(&ex.word_features)?.1),
        }
    }

    pub fn forward(&mut self, ex: &PredictorExample, ctx: &mut Context) -> Result<Array2<f64>> {
        match self {
            Stage::Flat(p) => {
                let input = flat_input(p, ex)?;
                p.predictor.forward(input, None, ctx)
            }
            Stage::HierPhoneme {
                model,
                conditioning,
            } => {
                let cond = Self::condition(model, *conditioning, ex)?;
                let extra = model.injection.forward(&cond, &ex.phones_per_word, ctx)?;
                model
                    .phoneme
                    .predictor
                    .forward(Features::Ids(&ex.phoneme_ids), Some(&extra), ctx)
            }
        }
    }

    pub fn backward(&mut self, ex: &PredictorExample, grad: &Array2<f64>) -> Result<()> {
        match self {
            Stage::Flat(p) => {
                p.predictor.backward(grad)?;
            }
            Stage::HierPhoneme { model, .. } => {
                let g = model.phoneme.predictor.backward(grad)?;
                model.injection.backward(&g, &ex.phones_per_word)?;
            }
        }
        Ok(())
    }

    /// Eval-mode output in normalized target space.
    pub fn predict(&self, ex: &PredictorExample) -> Result<Array2<f64>> {
        match self {
            Stage::Flat(p) => p.predictor.predict(flat_input(p, ex)?, None),
            Stage::HierPhoneme {
                model,
                conditioning,
            } => {
                let cond = Self::condition(model, *conditioning, ex)?;
                let extra = model.injection.eval(&cond, &ex.phones_per_word)?;
                model
                    .phoneme
                    .predictor
                    .predict(Features::Ids(&ex.phoneme_ids), Some(&extra))
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Stage::Flat(p) => p.predictor.params_mut(),
            Stage::HierPhoneme { model, .. } => {
                let mut ps = model.phoneme.predictor.params_mut();
                ps.extend(model.injection.params_mut());
                ps
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Summed loss over `batch`, divided by its total token-channel count,
    /// with gradients accumulated when `ctx` is given.
    fn batch_loss(
        &mut self,
        batch: &[&PredictorExample],
        mut ctx: Option<&mut Context>,
    ) -> Result<f64> {
        let loss = self.loss();
        let mut pairs = Vec::with_capacity(batch.len());
        for ex in batch {
            ex.validate()?;
            pairs.push(self.targets(ex)?);
        }
        let denom = pairs.iter().map(|t| t.len()).sum::<usize>() as f64;
        let mut total = 0.0;
        for (ex, target) in batch.iter().zip(&pairs) {
            let pred = match ctx.as_deref_mut() {
                Some(ctx) => self.forward(ex, ctx)?,
                None => self.predict(ex)?,
            };
            let (l, g) = loss.eval(&pred, target, denom);
            total += l;
            if ctx.is_some() {
                self.backward(ex, &g)?;
            }
        }
        Ok(total)
    }

    /// Eval-mode loss over `data` in normalized target space.
    pub fn evaluate(&mut self, data: &[PredictorExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no utterances to evaluate".into()));
        }
        let batch: Vec<&PredictorExample> = data.iter().collect();
        self.batch_loss(&batch, None)
    }

    /// Per-channel mean absolute error in natural units (Hz and energy for
    /// rule labels, latent coordinates for neural labels).
    pub fn natural_mae(&self, data: &[PredictorExample]) -> Result<Vec<f64>> {
        let codec = self.codec();
        let mut sums = vec![0.0; codec.dim()];
        let mut n = 0usize;
        for ex in data {
            ex.validate()?;
            let pred = codec.denormalize(&self.predict(ex)?);
            let truth = codec.values(self.labels(ex)?)?;
            for (p, t) in pred.rows().into_iter().zip(truth.rows()) {
                for c in 0..sums.len() {
                    sums[c] += (p[c] - t[c]).abs();
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyInput("no tokens to score".into()));
        }
        Ok(sums.into_iter().map(|s| s / n as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorStepRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub loss: f64,
}

/// Adam training loop for one [`Stage`]. Batches are drawn with replacement
/// from a per-step generator, so resumed runs replay the same trajectory.
#[derive(Debug, Clone)]
pub struct StageTrainer {
    cfg: TrainConfig,
    loss: LossKind,
    adam: Adam,
    pub history: Vec<PredictorStepRecord>,
}

impl StageTrainer {
    pub fn new(cfg: TrainConfig, loss: LossKind) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(cfg.optimizer),
            cfg,
            loss,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.steps_taken()
    }

    pub fn is_done(&self) -> bool {
        self.steps_done() >= self.cfg.total_steps
    }

    fn check_stage(&self, stage: &Stage) -> Result<()> {
        if stage.loss() != self.loss {
            return Err(Error::Config(format!(
                "trainer set up for {} but the stage's labels use {}",
                self.loss,
                stage.loss()
            )));
        }
        Ok(())
    }

    pub fn step(&mut self, stage: &mut Stage, data: &[PredictorExample]) -> Result<PredictorStepRecord> {
        self.check_stage(stage)?;
        if data.is_empty() {
            return Err(Error::EmptyInput("no training utterances".into()));
        }
        let s = self.steps_done() + 1;
        let lr = self.cfg.schedule.lr_at(s)?;
        let mut rng = step_rng(self.cfg.rng_seed, s);
        let batch: Vec<&PredictorExample> = (0..self.cfg.batch_size)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        stage.zero_grad();
        let mut ctx = Context::train_with(rng);
        let loss = stage.batch_loss(&batch, Some(&mut ctx))?;
        if !loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
            return Err(Error::NonFinite(format!(
                "{} loss is {loss} at step {s} (lr {lr:e}, batch {ids:?})",
                self.loss
            )));
        }
        self.adam.step(stage.params_mut(), lr)?;
        let record = PredictorStepRecord {
            step: s,
            learning_rate: lr,
            loss,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Steps until `total_steps` or until `on_step` returns `false`.
    pub fn run(
        &mut self,
        stage: &mut Stage,
        data: &[PredictorExample],
        mut on_step: impl FnMut(&mut Stage, &PredictorStepRecord) -> Result<bool>,
    ) -> Result<()> {
        while !self.is_done() {
            let record = self.step(stage, data)?;
            if !on_step(stage, &record)? {
                break;
            }
        }
        Ok(())
    }

    pub fn write_sections(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert(format!("{prefix}.opt"), self.adam.to_section()?);
        ck.insert(
            format!("{prefix}.train_state"),
            Section::new(serde_json::json!({
                "config": self.cfg,
                "loss": self.loss,
                "history": self.history,
            })),
        );
        Ok(())
    }

    /// Restores optimizer state and history. The stored config must match
    /// `cfg` except for `total_steps`, which may be extended.
    pub fn read_sections(ck: &Checkpoint, prefix: &str, cfg: TrainConfig) -> Result<Self> {
        let meta = &ck.section(&format!("{prefix}.train_state"))?.meta;
        let stored: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let comparable = TrainConfig {
            total_steps: cfg.total_steps,
            ..stored.clone()
        };
        if comparable != cfg {
            return Err(Error::Config(format!(
                "{prefix}: checkpoint was trained with {stored:?}, not {cfg:?}"
            )));
        }
        let loss: LossKind = serde_json::from_value(meta["loss"].clone())?;
        let history: Vec<PredictorStepRecord> = serde_json::from_value(meta["history"].clone())?;
        let adam = Adam::from_section(ck.section(&format!("{prefix}.opt"))?)?;
        if adam.steps_taken() != history.len() as u64 {
            return Err(Error::Format(format!(
                "{prefix}: optimizer at step {} but {} history rows",
                adam.steps_taken(),
                history.len()
            )));
        }
        cfg.validate()?;
        Ok(Self {
            cfg,
            loss,
            adam,
            history,
        })
    }
}

/// A model that owns its data, for finite-difference gradient checks of a
/// training stage.
#[derive(Debug, Clone)]
pub enum StageProbe {
    Flat(FlatPredictor, Vec<PredictorExample>),
    HierPhoneme(HierarchicalPredictor, Conditioning, Vec<PredictorExample>),
}

impl StageProbe {
    fn split(&mut self) -> (Stage<'_>, &[PredictorExample]) {
        match self {
            StageProbe::Flat(p, data) => (Stage::Flat(p), data),
            StageProbe::HierPhoneme(model, conditioning, data) => (
                Stage::HierPhoneme {
                    model,
                    conditioning: *conditioning,
                },
                data,
            ),
        }
    }
}

impl Differentiable for StageProbe {
    fn objective(&mut self, seed: u64, backward: bool) -> Result<f64> {
        let (mut stage, data) = self.split();
        let batch: Vec<&PredictorExample> = data.iter().collect();
        let mut ctx = Context::train(seed);
        if backward {
            return stage.batch_loss(&batch, Some(&mut ctx));
        }
        // forward only: same dropout masks, no gradient accumulation
        let loss = stage.loss();
        let denom = batch
            .iter()
            .map(|ex| stage.targets(ex).map(|t| t.len()))
            .sum::<Result<usize>>()? as f64;
        let mut total = 0.0;
        for ex in &batch {
            let pred = stage.forward(ex, &mut ctx)?;
            total += loss.eval(&pred, &stage.targets(ex)?, denom).0;
        }
        Ok(total)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            StageProbe::Flat(p, _) => p.predictor.params_mut(),
            StageProbe::HierPhoneme(model, ..) => {
                let mut ps = model.phoneme.predictor.params_mut();
                ps.extend(model.injection.params_mut());
                ps
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{LabelKind, Quantizer, RuleQuantizers, Scale};
    use crate::nn::gradcheck::{check, GradCheckConfig};
    use crate::nn::Schedule;
    use crate::predictor::{InjectionMode, PredictorSpec};
    use crate::vq::Codebook;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantizers() -> RuleQuantizers {
        RuleQuantizers {
            f0: Quantizer::new(256, Scale::Log, 80.0, 400.0).unwrap(),
            energy: Quantizer::new(256, Scale::Linear, 0.0, 50.0).unwrap(),
        }
    }

    fn codebook(rng: &mut ChaCha8Rng) -> Codebook {
        Codebook::new(Array2::from_shape_simple_fn((8, 3), || rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn label(kind: LabelKind, rng: &mut ChaCha8Rng, cb: &Codebook) -> TokenLabel {
        match kind {
            LabelKind::Rule => TokenLabel::Rule {
                f0_bin: rng.gen_range(0..256),
                energy_bin: rng.gen_range(0..256),
            },
            LabelKind::Neural => {
                let k = rng.gen_range(0..cb.size());
                let c = cb.codeword(k);
                TokenLabel::Neural {
                    codeword_index: k,
                    latent: [c[0], c[1], c[2]],
                }
            }
        }
    }

    fn toy(n: usize, wk: LabelKind, pk: LabelKind, rng: &mut ChaCha8Rng, cb: &Codebook) -> Vec<PredictorExample> {
        (0..n)
            .map(|u| {
                let words = rng.gen_range(1..4);
                let ppw: Vec<usize> = (0..words).map(|_| rng.gen_range(1..4)).collect();
                let phones = ppw.iter().sum();
                PredictorExample {
                    id: format!("u{u}"),
                    phoneme_ids: (0..phones).map(|_| rng.gen_range(0..6)).collect(),
                    word_features: Array2::from_shape_simple_fn((words, 4), || rng.gen_range(-1.0..1.0)),
                    word_labels: (0..words).map(|_| label(wk, rng, cb)).collect(),
                    phoneme_labels: (0..phones).map(|_| label(pk, rng, cb)).collect(),
                    phones_per_word: ppw,
                }
            })
            .collect()
    }

    fn codec(kind: LabelKind, level: Level, data: &[PredictorExample], cb: &Codebook) -> TargetCodec {
        match kind {
            LabelKind::Rule => {
                TargetCodec::rule(quantizers(), data.iter().flat_map(|e| e.labels(level))).unwrap()
            }
            LabelKind::Neural => TargetCodec::neural(cb.clone()),
        }
    }

    fn small(mut spec: PredictorSpec, channels: usize) -> PredictorSpec {
        spec.channels = channels;
        if let InputSpec::PhonemeTable { dim, .. } = &mut spec.input {
            *dim = channels;
        }
        spec
    }

    fn flat(level: Level, kind: LabelKind, data: &[PredictorExample], cb: &Codebook, ch: usize, rng: &mut ChaCha8Rng) -> FlatPredictor {
        let spec = match level {
            Level::Word => PredictorSpec::word(4, kind),
            Level::Phoneme => PredictorSpec::phoneme(6, kind),
        };
        FlatPredictor::new(small(spec, ch), codec(kind, level, data, cb), rng).unwrap()
    }

    fn cfg(lr: f64, steps: u64) -> TrainConfig {
        TrainConfig {
            optimizer: Default::default(),
            schedule: Schedule::Constant { learning_rate: lr },
            batch_size: 4,
            total_steps: steps,
            rng_seed: 11,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = codebook(&mut rng);
        for (wk, pk) in [(LabelKind::Rule, LabelKind::Neural), (LabelKind::Neural, LabelKind::Rule)] {
            let data = toy(2, wk, pk, &mut rng, &cb);
            let w = flat(Level::Word, wk, &data, &cb, 5, &mut rng);
            let p = flat(Level::Phoneme, pk, &data, &cb, 5, &mut rng);
            let mut probes = vec![
                StageProbe::Flat(w.clone(), data.clone()),
                StageProbe::Flat(p.clone(), data.clone()),
            ];
            for mode in [InjectionMode::Embed, InjectionMode::Continuous] {
                let h = HierarchicalPredictor::new(w.clone(), p.clone(), mode, &mut rng).unwrap();
                probes.push(StageProbe::HierPhoneme(h, Conditioning::TeacherForced, data.clone()));
            }
            for (i, mut probe) in probes.into_iter().enumerate() {
                let r = check(&mut probe, GradCheckConfig::default()).unwrap();
                assert!(r.max_rel_error <= 1e-4, "probe {i}: {r:?}");
            }
        }
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = codebook(&mut rng);
        let mut data = toy(6, LabelKind::Rule, LabelKind::Rule, &mut rng, &cb);
        for ex in &mut data {
            ex.word_labels.fill(TokenLabel::Rule { f0_bin: 120, energy_bin: 40 });
        }
        let mut model = flat(Level::Word, LabelKind::Rule, &data, &cb, 16, &mut rng);
        let mut trainer = StageTrainer::new(cfg(3e-3, 400), LossKind::Mae).unwrap();
        let mut stage = Stage::Flat(&mut model);
        trainer.run(&mut stage, &data, |_, _| Ok(true)).unwrap();
        assert!(stage.evaluate(&data).unwrap() < 0.05);
        let want = quantizers().dequantize(120, 40).unwrap();
        let got = model.predict(Features::Vectors(&data[0].word_features)).unwrap();
        for row in got.values.rows() {
            assert!((row[0] - want[0]).abs() < 0.1 && (row[1] - want[1]).abs() < 0.1, "{row} vs {want:?}");
        }
    }

    #[test]
    fn word_stage_overfits_twenty_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = codebook(&mut rng);
        let mut data = toy(20, LabelKind::Rule, LabelKind::Rule, &mut rng, &cb);
        for ex in &mut data {
            ex.word_features = Array2::from_shape_simple_fn((ex.word_labels.len(), 4), || rng.gen_range(-1.0..1.0));
        }
        let mut spec = small(PredictorSpec::word(4, LabelKind::Rule), 64);
        // memorization test: light dropout so the eval-mode fit is not noise-bound
        spec.dropout = 0.1;
        let codec = codec(LabelKind::Rule, Level::Word, &data, &cb);
        let mut model = FlatPredictor::new(spec, codec, &mut rng).unwrap();
        let mut trainer = StageTrainer::new(cfg(2e-3, 4000), LossKind::Mae).unwrap();
        let mut stage = Stage::Flat(&mut model);
        let start = stage.evaluate(&data).unwrap();
        trainer
            .run(&mut stage, &data, |s, r| Ok(r.step % 100 != 0 || s.evaluate(&data)? >= 0.05))
            .unwrap();
        let end = stage.evaluate(&data).unwrap();
        assert!(end < 0.05, "start {start} end {end}");
    }

    #[test]
    fn loss_kind_follows_label_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = codebook(&mut rng);
        let data = toy(2, LabelKind::Rule, LabelKind::Neural, &mut rng, &cb);
        let mut w = flat(Level::Word, LabelKind::Rule, &data, &cb, 4, &mut rng);
        let mut p = flat(Level::Phoneme, LabelKind::Neural, &data, &cb, 4, &mut rng);
        assert_eq!(Stage::Flat(&mut w).loss(), LossKind::Mae);
        assert_eq!(Stage::Flat(&mut p).loss(), LossKind::Mse);
        let mut t = StageTrainer::new(cfg(1e-3, 1), LossKind::Mae).unwrap();
        assert!(matches!(t.step(&mut Stage::Flat(&mut p), &data), Err(Error::Config(_))));
    }

    #[test]
    fn word_stage_leaves_phoneme_stage_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = codebook(&mut rng);
        let data = toy(4, LabelKind::Neural, LabelKind::Rule, &mut rng, &cb);
        let w = flat(Level::Word, LabelKind::Neural, &data, &cb, 4, &mut rng);
        let p = flat(Level::Phoneme, LabelKind::Rule, &data, &cb, 4, &mut rng);
        let mut h = HierarchicalPredictor::new(w, p, InjectionMode::Embed, &mut rng).unwrap();
        let snapshot = |h: &HierarchicalPredictor| {
            let mut ck = Checkpoint::new();
            h.phoneme.write_sections(&mut ck, "phoneme").unwrap();
            ck.insert("injection", h.injection.to_section().unwrap());
            ck.to_bytes().unwrap()
        };
        let before = snapshot(&h);
        let mut t = StageTrainer::new(cfg(1e-3, 20), LossKind::Mse).unwrap();
        t.run(&mut Stage::Flat(&mut h.word), &data, |_, _| Ok(true)).unwrap();
        assert_eq!(snapshot(&h), before);

        let word_before = {
            let mut ck = Checkpoint::new();
            h.word.write_sections(&mut ck, "word").unwrap();
            ck.to_bytes().unwrap()
        };
        let mut t = StageTrainer::new(cfg(1e-3, 5), LossKind::Mae).unwrap();
        let mut stage = Stage::HierPhoneme {
            model: &mut h,
            conditioning: Conditioning::Predicted,
        };
        t.run(&mut stage, &data, |_, _| Ok(true)).unwrap();
        let mut ck = Checkpoint::new();
        h.word.write_sections(&mut ck, "word").unwrap();
        assert_eq!(ck.to_bytes().unwrap(), word_before);
        assert_ne!(snapshot(&h), before);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = codebook(&mut rng);
        let data = toy(5, LabelKind::Neural, LabelKind::Neural, &mut rng, &cb);
        let init = flat(Level::Phoneme, LabelKind::Neural, &data, &cb, 6, &mut rng);

        let mut full = init.clone();
        let mut t = StageTrainer::new(cfg(1e-3, 10), LossKind::Mse).unwrap();
        t.run(&mut Stage::Flat(&mut full), &data, |_, _| Ok(true)).unwrap();

        let mut half = init;
        let mut t = StageTrainer::new(cfg(1e-3, 4), LossKind::Mse).unwrap();
        t.run(&mut Stage::Flat(&mut half), &data, |_, _| Ok(true)).unwrap();
        let mut ck = Checkpoint::new();
        half.write_sections(&mut ck, "p").unwrap();
        t.write_sections(&mut ck, "p").unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut resumed = FlatPredictor::read_sections(&ck, "p").unwrap();
        let mut t2 = StageTrainer::read_sections(&ck, "p", cfg(1e-3, 10)).unwrap();
        t2.run(&mut Stage::Flat(&mut resumed), &data, |_, _| Ok(true)).unwrap();
        assert_eq!(t2.history, t.history[..4].iter().cloned().chain(t2.history[4..].iter().cloned()).collect::<Vec<_>>());
        let mut a = Checkpoint::new();
        full.write_sections(&mut a, "p").unwrap();
        let mut b = Checkpoint::new();
        resumed.write_sections(&mut b, "p").unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(StageTrainer::read_sections(&ck, "p", cfg(2e-3, 10)).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cb = codebook(&mut rng);
        let mut data = toy(2, LabelKind::Rule, LabelKind::Rule, &mut rng, &cb);
        for ex in &mut data {
            ex.word_features.fill(f64::NAN);
        }
        let mut model = flat(Level::Word, LabelKind::Rule, &data, &cb, 4, &mut rng);
        let mut t = StageTrainer::new(cfg(1e-3, 3), LossKind::Mae).unwrap();
        match t.step(&mut Stage::Flat(&mut model), &data) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("step 1"), "{msg}"),
            other => panic!("expected a numerical error, got {other:?}"),
        }
        assert_eq!(t.steps_done(), 0);
    }

    #[test]
    fn mismatched_example_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cb = codebook(&mut rng);
        let mut data = toy(1, LabelKind::Rule, LabelKind::Rule, &mut rng, &cb);
        data[0].phoneme_labels.pop();
        assert!(matches!(data[0].validate(), Err(Error::Mismatch(_))));
    }
}
