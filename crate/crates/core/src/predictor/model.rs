use ndarray::{Array1, Array2, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{labels_from_prediction, TargetCodec};
use super::features::{length_regulate, length_regulate_adjoint};
use crate::error::{Error, Result};
use crate::labels::{LabelKind, Level, TokenLabel};
use crate::nn::{Checkpoint, Context, Layer, LayerSpec, Param, Section, Sequential, Tensor};

/// Where a predictor's token features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSpec {
    /// Learned per-symbol embedding over phoneme ids.
    PhonemeTable { vocab: usize, dim: usize },
    /// Precomputed vectors, e.g. static word embeddings.
    External { dim: usize },
}

impl InputSpec {
    pub fn dim(&self) -> usize {
        match *self {
            InputSpec::PhonemeTable { dim, .. } | InputSpec::External { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub level: Level,
    pub input: InputSpec,
    pub kind: LabelKind,
    pub channels: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub conv_layers: usize,
}

impl PredictorSpec {
    pub fn new(level: Level, input: InputSpec, kind: LabelKind) -> Self {
        Self {
            level,
            input,
            kind,
            channels: 256,
            kernel: 3,
            dropout: 0.5,
            conv_layers: 2,
        }
    }

    /// Phoneme-level predictor over a learned 256-dim symbol table.
    pub fn phoneme(vocab: usize, kind: LabelKind) -> Self {
        Self::new(Level::Phoneme, InputSpec::PhonemeTable { vocab, dim: 256 }, kind)
    }

    /// Word-level predictor over external vectors of width `dim`.
    pub fn word(dim: usize, kind: LabelKind) -> Self {
        Self::new(Level::Word, InputSpec::External { dim }, kind)
    }

    pub fn d_out(&self) -> usize {
        match self.kind {
            LabelKind::Rule => 2,
            LabelKind::Neural => 3,
        }
    }

    /// `conv_layers` x (conv1d, relu, layer norm, dropout), then a linear head.
    pub fn body_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = self.input.dim();
        for _ in 0..self.conv_layers {
            specs.extend([
                LayerSpec::Conv1d {
                    in_channels: width,
                    out_channels: self.channels,
                    kernel: self.kernel,
                },
                LayerSpec::Relu,
                LayerSpec::LayerNorm {
                    features: self.channels,
                    eps: 1e-5,
                },
                LayerSpec::Dropout { rate: self.dropout },
            ]);
            width = self.channels;
        }
        specs.push(LayerSpec::Linear {
            in_features: width,
            out_features: self.d_out(),
        });
        specs
    }
}

/// Token features handed to a predictor.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a> {
    Ids(&'a [usize]),
    Vectors(&'a Array2<f64>),
}

impl Features<'_> {
    pub fn len(&self) -> usize {
        match self {
            Features::Ids(ids) => ids.len(),
            Features::Vectors(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convolutional prosody predictor; outputs are in normalized target space.
#[derive(Debug, Clone)]
pub struct Predictor {
    spec: PredictorSpec,
    front: Option<Layer>,
    body: Sequential,
}

fn to2(t: Tensor) -> Array2<f64> {
    t.into_dimensionality::<Ix2>().expect("2-D activations")
}

impl Predictor {
    pub fn new(spec: PredictorSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let front = match spec.input {
            InputSpec::PhonemeTable { vocab, dim } => Some(Layer::new(
                LayerSpec::EmbeddingLookup { vocab, dim },
                rng,
            )?),
            InputSpec::External { .. } => None,
        };
        let body = Sequential::new(&spec.body_specs(), rng)?;
        Ok(Self { spec, front, body })
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    fn ids_tensor(ids: &[usize]) -> Tensor {
        Array1::from_iter(ids.iter().map(|&i| i as f64)).into_dyn()
    }

    fn check_input(&self, input: &Features) -> Result<()> {
        if input.is_empty() {
            return Err(Error::EmptyInput("predictor input has no tokens".into()));
        }
        match (&self.spec.input, input) {
            (InputSpec::PhonemeTable { .. }, Features::Ids(_)) => Ok(()),
            (InputSpec::External { dim }, Features::Vectors(v)) if v.ncols() == *dim => Ok(()),
            (InputSpec::External { dim }, Features::Vectors(v)) => Err(Error::shape(
                "predictor input",
                format!("expected {dim}-dim features, got {}", v.ncols()),
            )),
            (InputSpec::PhonemeTable { .. }, _) => Err(Error::Config(
                "this predictor embeds phoneme ids; vectors were given".into(),
            )),
            (InputSpec::External { .. }, _) => Err(Error::Config(
                "this predictor takes feature vectors; ids were given".into(),
            )),
        }
    }

    fn add_extra(features: Tensor, extra: Option<&Array2<f64>>) -> Result<Tensor> {
        match extra {
            None => Ok(features),
            Some(e) if e.shape() == features.shape() => Ok(features + &e.view().into_dyn()),
            Some(e) => Err(Error::Mismatch(format!(
                "conditioning shape {:?} does not match features {:?}",
                e.shape(),
                features.shape()
            ))),
        }
    }

    /// Training forward; `extra` is added to the token features.
    pub fn forward(
        &mut self,
        input: Features,
        extra: Option<&Array2<f64>>,
        ctx: &mut Context,
    ) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let x = match (&mut self.front, input) {
            (Some(front), Features::Ids(ids)) => front.forward(&Self::ids_tensor(ids), ctx)?,
            (_, Features::Vectors(v)) => v.clone().into_dyn(),
            _ => unreachable!("checked above"),
        };
        let x = Self::add_extra(x, extra)?;
        Ok(to2(self.body.forward(&x, ctx)?))
    }

    /// Backward through the body and embedding table; returns the gradient
    /// w.r.t. the (conditioned) token features.
    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        let g = self.body.backward(&grad.clone().into_dyn())?;
        if let Some(front) = &mut self.front {
            front.backward(&g)?;
        }
        Ok(to2(g))
    }

    /// Eval-mode prediction in normalized target space.
    pub fn predict(&self, input: Features, extra: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let x = match (&self.front, input) {
            (Some(front), Features::Ids(ids)) => front.forward_eval(&Self::ids_tensor(ids), None)?,
            (_, Features::Vectors(v)) => v.clone().into_dyn(),
            _ => unreachable!("checked above"),
        };
        let x = Self::add_extra(x, extra)?;
        Ok(to2(self.body.forward_eval(&x, None)?))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps: Vec<&Param> = self.front.iter().flat_map(|f| f.params()).collect();
        ps.extend(self.body.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = self
            .front
            .iter_mut()
            .flat_map(|f| f.params_mut().iter_mut())
            .collect();
        ps.extend(self.body.params_mut());
        ps
    }

    /// Sets the output head to zero, making every prediction zero.
    pub fn zero_output_head(&mut self) {
        if let Some(head) = self.body.layers_mut().last_mut() {
            head.params_mut().iter_mut().for_each(|p| p.value.fill(0.0));
        }
    }

    pub fn write_sections(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert(
            format!("{prefix}.spec"),
            Section::new(serde_json::to_value(&self.spec)?),
        );
        ck.insert(format!("{prefix}.body"), self.body.to_section()?);
        if let Some(front) = &self.front {
            let net = Sequential::from_layers(vec![front.clone()]);
            ck.insert(format!("{prefix}.front"), net.to_section()?);
        }
        Ok(())
    }

    pub fn read_sections(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let spec: PredictorSpec =
            serde_json::from_value(ck.section(&format!("{prefix}.spec"))?.meta.clone())?;
        let body = Sequential::from_section(ck.section(&format!("{prefix}.body"))?)?;
        if body.specs() != spec.body_specs() {
            return Err(Error::Format(format!("{prefix}: stored layers do not match spec")));
        }
        let front = match spec.input {
            InputSpec::PhonemeTable { .. } => {
                let net = Sequential::from_section(ck.section(&format!("{prefix}.front"))?)?;
                Some(net.layers()[0].clone())
            }
            InputSpec::External { .. } => None,
        };
        Ok(Self { spec, front, body })
    }
}

/// A predictor paired with the codec that interprets its outputs.
#[derive(Debug, Clone)]
pub struct FlatPredictor {
    pub predictor: Predictor,
    pub codec: TargetCodec,
}

/// Predictions in natural units plus their discretized labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPrediction {
    pub values: Array2<f64>,
    pub labels: Vec<TokenLabel>,
}

impl FlatPredictor {
    pub fn new(spec: PredictorSpec, codec: TargetCodec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.kind != codec.kind() {
            return Err(Error::Config(format!(
                "{} predictor paired with {} targets",
                spec.kind,
                codec.kind()
            )));
        }
        Ok(Self {
            predictor: Predictor::new(spec, rng)?,
            codec,
        })
    }

    pub fn level(&self) -> Level {
        self.predictor.spec().level
    }

    pub fn predict(&self, input: Features) -> Result<TokenPrediction> {
        decode(&self.codec, &self.predictor.predict(input, None)?)
    }

    pub fn write_sections(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        self.predictor.write_sections(ck, prefix)?;
        ck.insert(format!("{prefix}.codec"), self.codec.to_section());
        Ok(())
    }

    pub fn read_sections(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            predictor: Predictor::read_sections(ck, prefix)?,
            codec: TargetCodec::from_section(ck.section(&format!("{prefix}.codec"))?)?,
        })
    }
}

fn decode(codec: &TargetCodec, normalized: &Array2<f64>) -> Result<TokenPrediction> {
    let values = codec.denormalize(normalized);
    let labels = labels_from_prediction(values.view(), codec)?;
    Ok(TokenPrediction { values, labels })
}

/// How word-level prosody enters the phoneme predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Discretized word labels looked up in learned tables (summed).
    #[default]
    Embed,
    /// Linear projection of the continuous word prediction.
    Continuous,
}

/// Word-level conditioning, one entry per word.
#[derive(Debug, Clone, PartialEq)]
pub enum WordCondition {
    Discrete(Vec<Vec<usize>>),
    Continuous(Array2<f64>),
}

impl WordCondition {
    /// Conditioning from word labels; continuous mode uses normalized targets.
    pub fn from_labels(mode: InjectionMode, codec: &TargetCodec, labels: &[TokenLabel]) -> Result<Self> {
        Ok(match mode {
            InjectionMode::Embed => {
                WordCondition::Discrete(labels.iter().map(TargetCodec::discrete_ids).collect())
            }
            InjectionMode::Continuous => WordCondition::Continuous(codec.targets(labels)?),
        })
    }

    fn words(&self) -> usize {
        match self {
            WordCondition::Discrete(v) => v.len(),
            WordCondition::Continuous(a) => a.nrows(),
        }
    }
}

/// Maps word prosody to phoneme-feature-sized vectors and expands them to
/// phoneme length.
#[derive(Debug, Clone)]
pub struct WordInjection {
    mode: InjectionMode,
    layers: Vec<Layer>,
}

impl WordInjection {
    pub fn new(
        mode: InjectionMode,
        word_codec: &TargetCodec,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = match mode {
            InjectionMode::Embed => word_codec
                .vocab_sizes()
                .into_iter()
                .map(|vocab| Layer::new(LayerSpec::EmbeddingLookup { vocab, dim }, rng))
                .collect::<Result<_>>()?,
            InjectionMode::Continuous => vec![Layer::new(
                LayerSpec::Linear {
                    in_features: word_codec.dim(),
                    out_features: dim,
                },
                rng,
            )?],
        };
        Ok(Self { mode, layers })
    }

    pub fn mode(&self) -> InjectionMode {
        self.mode
    }

    fn word_vectors(
        &mut self,
        cond: &WordCondition,
        mut ctx: Option<&mut Context>,
    ) -> Result<Tensor> {
        let mut run = |layer: &mut Layer, x: &Tensor| match ctx.as_deref_mut() {
            Some(ctx) => layer.forward(x, ctx),
            None => layer.forward_eval(x, None),
        };
        match (self.mode, cond) {
            (InjectionMode::Embed, WordCondition::Discrete(ids)) => {
                let mut total: Option<Tensor> = None;
                for (k, layer) in self.layers.iter_mut().enumerate() {
                    let col = ids
                        .iter()
                        .map(|row| {
                            row.get(k).map(|&i| i as f64).ok_or_else(|| {
                                Error::Mismatch("word label has too few ids".into())
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    let y = run(layer, &Array1::from(col).into_dyn())?;
                    total = Some(match total {
                        Some(t) => t + &y,
                        None => y,
                    });
                }
                Ok(total.expect("at least one table"))
            }
            (InjectionMode::Continuous, WordCondition::Continuous(v)) => {
                run(&mut self.layers[0], &v.clone().into_dyn())
            }
            _ => Err(Error::Config(
                "word conditioning does not match the injection mode".into(),
            )),
        }
    }

    fn check(cond: &WordCondition, counts: &[usize]) -> Result<()> {
        if cond.words() != counts.len() {
            return Err(Error::Mismatch(format!(
                "{} word labels but {} words in the alignment",
                cond.words(),
                counts.len()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &mut self,
        cond: &WordCondition,
        counts: &[usize],
        ctx: &mut Context,
    ) -> Result<Array2<f64>> {
        Self::check(cond, counts)?;
        let w = to2(self.word_vectors(cond, Some(ctx))?);
        length_regulate(w.view(), counts)
    }

    pub fn backward(&mut self, grad: &Array2<f64>, counts: &[usize]) -> Result<()> {
        let gw = length_regulate_adjoint(grad.view(), counts)?.into_dyn();
        for layer in &mut self.layers {
            layer.backward(&gw)?;
        }
        Ok(())
    }

    pub fn eval(&self, cond: &WordCondition, counts: &[usize]) -> Result<Array2<f64>> {
        Self::check(cond, counts)?;
        // eval path never records state, so a scratch clone is not needed
        let mut this = Self {
            mode: self.mode,
            layers: self.layers.clone(),
        };
        let w = to2(this.word_vectors(cond, None)?);
        length_regulate(w.view(), counts)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut().iter_mut())
            .collect()
    }

    pub fn zero(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.value.fill(0.0));
    }

    pub fn to_section(&self) -> Result<Section> {
        let mut s = Sequential::from_layers(self.layers.clone()).to_section()?;
        s.meta = serde_json::json!({ "mode": self.mode, "layers": s.meta });
        Ok(s)
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let mode: InjectionMode = serde_json::from_value(section.meta["mode"].clone())?;
        let mut inner = section.clone();
        inner.meta = section.meta["layers"].clone();
        let layers = Sequential::from_section(&inner)?.layers().to_vec();
        Ok(Self { mode, layers })
    }
}

/// Word predictor feeding a phoneme predictor through a [`WordInjection`].
#[derive(Debug, Clone)]
pub struct HierarchicalPredictor {
    pub word: FlatPredictor,
    pub phoneme: FlatPredictor,
    pub injection: WordInjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalPrediction {
    pub word: TokenPrediction,
    pub phoneme: TokenPrediction,
}

impl HierarchicalPredictor {
    pub fn new(
        word: FlatPredictor,
        phoneme: FlatPredictor,
        mode: InjectionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if word.level() != Level::Word || phoneme.level() != Level::Phoneme {
            return Err(Error::Config(
                "hierarchical model needs a word-level and a phoneme-level predictor".into(),
            ));
        }
        let dim = phoneme.predictor.spec().input.dim();
        let injection = WordInjection::new(mode, &word.codec, dim, rng)?;
        Ok(Self {
            word,
            phoneme,
            injection,
        })
    }

    /// Conditioning derived from the word predictor's own output.
    pub fn predicted_condition(&self, word_features: &Array2<f64>) -> Result<(TokenPrediction, WordCondition)> {
        let normalized = self.word.predictor.predict(Features::Vectors(word_features), None)?;
        let word = decode(&self.word.codec, &normalized)?;
        let cond = match self.injection.mode() {
            InjectionMode::Embed => {
                WordCondition::Discrete(word.labels.iter().map(TargetCodec::discrete_ids).collect())
            }
            InjectionMode::Continuous => WordCondition::Continuous(normalized),
        };
        Ok((word, cond))
    }

    pub fn predict(
        &self,
        word_features: &Array2<f64>,
        phoneme_input: Features,
        phones_per_word: &[usize],
    ) -> Result<HierarchicalPrediction> {
        let (word, cond) = self.predicted_condition(word_features)?;
        let extra = self.injection.eval(&cond, phones_per_word)?;
        let normalized = self.phoneme.predictor.predict(phoneme_input, Some(&extra))?;
        Ok(HierarchicalPrediction {
            word,
            phoneme: decode(&self.phoneme.codec, &normalized)?,
        })
    }

    pub fn write_sections(&self, ck: &mut Checkpoint) -> Result<()> {
        self.word.write_sections(ck, "word")?;
        self.phoneme.write_sections(ck, "phoneme")?;
        ck.insert("injection", self.injection.to_section()?);
        Ok(())
    }

    pub fn read_sections(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            word: FlatPredictor::read_sections(ck, "word")?,
            phoneme: FlatPredictor::read_sections(ck, "phoneme")?,
            injection: WordInjection::from_section(ck.section("injection")?)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Quantizer, RuleQuantizers, Scale};
    use crate::vq::Codebook;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn rule_codec() -> TargetCodec {
        let q = RuleQuantizers {
            f0: Quantizer::new(256, Scale::Log, 80.0, 400.0).unwrap(),
            energy: Quantizer::new(256, Scale::Linear, 0.0, 50.0).unwrap(),
        };
        TargetCodec::rule(
            q,
            &[
                TokenLabel::Rule { f0_bin: 10, energy_bin: 20 },
                TokenLabel::Rule { f0_bin: 200, energy_bin: 100 },
            ],
        )
        .unwrap()
    }

    fn neural_codec(rng: &mut ChaCha8Rng) -> TargetCodec {
        TargetCodec::neural(
            Codebook::new(Array2::from_shape_simple_fn((16, 3), || rng.gen_range(-1.0..1.0))).unwrap(),
        )
    }

    fn small(mut spec: PredictorSpec) -> PredictorSpec {
        spec.channels = 8;
        spec
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Predictor::new(PredictorSpec::word(4, LabelKind::Rule), &mut rng).unwrap();
        p.zero_output_head();
        let x = Array2::from_shape_simple_fn((5, 4), || rng.gen_range(-1.0..1.0));
        assert!(p.predict(Features::Vectors(&x), None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_input_same_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Predictor::new(small(PredictorSpec::phoneme(6, LabelKind::Neural)), &mut rng).unwrap();
        let ids = [1, 2, 3, 1, 2, 3];
        let y = p.predict(Features::Ids(&ids), None).unwrap();
        assert_eq!(y.dim(), (6, 3));
        assert_eq!(y, p.predict(Features::Ids(&ids), None).unwrap());
        // a repeated symbol gives identical rows away from the edges
        // rows beyond the receptive field of the padding see identical context
        let ids = [4; 9];
        let y = p.predict(Features::Ids(&ids), None).unwrap();
        for r in 3..7 {
            assert_eq!(y.row(r), y.row(2));
        }
    }

    #[test]
    fn wrong_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Predictor::new(small(PredictorSpec::word(4, LabelKind::Rule)), &mut rng).unwrap();
        assert!(p.predict(Features::Vectors(&Array2::zeros((3, 5))), None).is_err());
        assert!(p.predict(Features::Ids(&[1, 2]), None).is_err());
        assert!(p.predict(Features::Vectors(&Array2::zeros((0, 4))), None).is_err());
    }

    #[test]
    fn zero_injection_reduces_to_phoneme_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let word = FlatPredictor::new(small(PredictorSpec::word(4, LabelKind::Rule)), rule_codec(), &mut rng).unwrap();
        let ncodec = neural_codec(&mut rng);
        let phoneme = FlatPredictor::new(small(PredictorSpec::phoneme(6, LabelKind::Neural)), ncodec, &mut rng).unwrap();
        let plain = phoneme.predictor.clone();
        let mut h = HierarchicalPredictor::new(word, phoneme, InjectionMode::Embed, &mut rng).unwrap();
        h.injection.zero();
        let wf = Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-1.0..1.0));
        let ids = [1, 2, 3, 4, 5];
        let out = h.predict(&wf, Features::Ids(&ids), &[2, 3]).unwrap();
        let direct = plain.predict(Features::Ids(&ids), None).unwrap();
        assert_eq!(out.phoneme.values, h.phoneme.codec.denormalize(&direct));
        assert_eq!(out.word.labels.len(), 2);
        assert_eq!(out.phoneme.labels.len(), 5);
    }

    #[test]
    fn single_word_broadcasts_one_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let codec = rule_codec();
        let inj = WordInjection::new(InjectionMode::Embed, &codec, 3, &mut rng).unwrap();
        let cond = WordCondition::Discrete(vec![vec![5, 9]]);
        let e = inj.eval(&cond, &[4]).unwrap();
        assert_eq!(e.nrows(), 4);
        for r in 1..4 {
            assert_eq!(e.row(r), e.row(0));
        }
        assert!(inj.eval(&cond, &[2, 2]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let word = FlatPredictor::new(small(PredictorSpec::word(4, LabelKind::Neural)), neural_codec(&mut rng), &mut rng).unwrap();
        let phoneme = FlatPredictor::new(small(PredictorSpec::phoneme(6, LabelKind::Rule)), rule_codec(), &mut rng).unwrap();
        let h = HierarchicalPredictor::new(word, phoneme, InjectionMode::Continuous, &mut rng).unwrap();
        let mut ck = Checkpoint::new();
        h.write_sections(&mut ck).unwrap();
        let back = HierarchicalPredictor::read_sections(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        let wf = array![[0.1, 0.2, 0.3, 0.4], [0.5, -0.1, 0.0, 1.0]];
        let ids = [1, 2, 3];
        assert_eq!(
            back.predict(&wf, Features::Ids(&ids), &[1, 2]).unwrap(),
            h.predict(&wf, Features::Ids(&ids), &[1, 2]).unwrap()
        );
    }
}
