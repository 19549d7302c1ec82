use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Codebook, CODEBOOK_SECTION, LATENT_DIM};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::labels::{Level, LabelKind, ProsodyLabelSet, TokenLabel, UtteranceAlignment};
use crate::nn::{Checkpoint, Context, LayerSpec, Section, Sequential, Tensor};

pub(crate) const ENCODER_SECTION: &str = "encoder";
pub(crate) const ENCODER_META_SECTION: &str = "encoder_config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEncoderConfig {
    pub n_mels: usize,
    pub conv_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub dropout: f64,
    /// Width of the first linear projection.
    pub hidden: usize,
}

impl Default for RefEncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            conv_channels: 32,
            kernel: [3, 3],
            stride: [1, 1],
            dropout: 0.2,
            hidden: 64,
        }
    }
}

impl RefEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride[0] != 1 {
            return Err(Error::Config(
                "reference encoder needs unit time stride so frames stay aligned to tokens".into(),
            ));
        }
        if self.n_mels == 0 || self.hidden == 0 {
            return Err(Error::Config("n_mels and hidden must be positive".into()));
        }
        Ok(())
    }

    fn mel_width(&self, n: usize) -> usize {
        let pad = self.kernel[1] / 2;
        (n + 2 * pad - self.kernel[1]) / self.stride[1] + 1
    }

    /// conv2d, relu, dropout (x2), flatten, token mean pool, linear, relu,
    /// dropout, linear to the latent.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let conv = |cin| LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: self.conv_channels,
            kernel: self.kernel,
            stride: self.stride,
        };
        let drop = LayerSpec::Dropout { rate: self.dropout };
        let width = self.mel_width(self.mel_width(self.n_mels));
        vec![
            conv(1),
            LayerSpec::Relu,
            drop.clone(),
            conv(self.conv_channels),
            LayerSpec::Relu,
            drop.clone(),
            LayerSpec::Flatten,
            LayerSpec::TokenMeanPool,
            LayerSpec::Linear {
                in_features: width * self.conv_channels,
                out_features: self.hidden,
            },
            LayerSpec::Relu,
            drop,
            LayerSpec::Linear {
                in_features: self.hidden,
                out_features: LATENT_DIM,
            },
        ]
    }
}

/// Global affine normalization applied to log-mel input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: f64,
    pub std: f64,
}

impl MelNorm {
    pub const IDENTITY: MelNorm = MelNorm {
        mean: 0.0,
        std: 1.0,
    };

    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for m in mels {
            n += m.len();
            sum += m.sum();
            sq += m.iter().map(|v| v * v).sum::<f64>();
        }
        if n == 0 {
            return Err(Error::EmptyInput("no mel frames to normalize".into()));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
        Ok(Self { mean, std })
    }

    pub fn apply(&self, mel: &Array2<f64>) -> Array2<f64> {
        mel.mapv(|v| (v - self.mean) / self.std)
    }
}

/// Mel-spectrogram to one latent per token.
#[derive(Debug, Clone)]
pub struct RefEncoder {
    config: RefEncoderConfig,
    norm: MelNorm,
    net: Sequential,
}

fn check_spans(mel: &Array2<f64>, spans: &[Range<usize>]) -> Result<()> {
    match spans.last() {
        Some(last) if last.end == mel.nrows() => Ok(()),
        _ => Err(Error::Mismatch(format!(
            "token spans cover {} frames but the mel has {}",
            spans.last().map_or(0, |s| s.end),
            mel.nrows()
        ))),
    }
}

impl RefEncoder {
    pub fn new(config: RefEncoderConfig, norm: MelNorm, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let net = Sequential::new(&config.layer_specs(), rng)?;
        Ok(Self { config, norm, net })
    }

    pub fn config(&self) -> &RefEncoderConfig {
        &self.config
    }

    pub fn norm(&self) -> MelNorm {
        self.norm
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    fn input(&self, mel: &Array2<f64>) -> Result<Tensor> {
        if mel.ncols() != self.config.n_mels {
            return Err(Error::shape(
                "reference encoder",
                format!("expected {} mel bins, got {}", self.config.n_mels, mel.ncols()),
            ));
        }
        let (t, m) = mel.dim();
        Ok(self
            .norm
            .apply(mel)
            .into_shape((t, m, 1))
            .expect("contiguous mel")
            .into_dyn())
    }

    fn as_latents(y: Tensor) -> Array2<f64> {
        y.into_dimensionality::<Ix2>().expect("2-D encoder output")
    }

    /// Eval-mode latents, `[tokens, 3]`. The last span must end at the final
    /// frame; spans need not be contiguous.
    pub fn encode(&self, mel: &Array2<f64>, spans: &[Range<usize>]) -> Result<Array2<f64>> {
        check_spans(mel, spans)?;
        let y = self.net.forward_eval(&self.input(mel)?, Some(spans))?;
        Ok(Self::as_latents(y))
    }

    /// Training forward pass recording state for [`RefEncoder::backward`].
    pub fn forward(
        &mut self,
        mel: &Array2<f64>,
        spans: &[Range<usize>],
        ctx: &mut Context,
    ) -> Result<Array2<f64>> {
        check_spans(mel, spans)?;
        let x = self.input(mel)?;
        ctx.spans = Some(spans.to_vec());
        let y = self.net.forward(&x, ctx);
        ctx.spans = None;
        Ok(Self::as_latents(y?))
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<()> {
        self.net.backward(&grad.clone().into_dyn()).map(|_| ())
    }

    pub fn to_sections(&self) -> Result<(Section, Section)> {
        let meta = Section::new(serde_json::json!({
            "config": self.config,
            "norm": self.norm,
        }));
        Ok((self.net.to_section()?, meta))
    }

    pub fn from_sections(net: &Section, meta: &Section) -> Result<Self> {
        let config: RefEncoderConfig = serde_json::from_value(meta.meta["config"].clone())?;
        let norm: MelNorm = serde_json::from_value(meta.meta["norm"].clone())?;
        config.validate()?;
        let net = Sequential::from_section(net)?;
        if net.specs() != config.layer_specs() {
            return Err(Error::Format(
                "stored encoder layers do not match its config".into(),
            ));
        }
        Ok(Self { config, norm, net })
    }
}

struct Frozen {
    encoder: RefEncoder,
    codebook: Codebook,
}

/// Read-only trained encoder and codebook. Cloning shares the same weights;
/// no API hands out mutable access, so parameters stay fixed once frozen.
#[derive(Clone)]
pub struct FrozenEncoder {
    inner: Arc<Frozen>,
}

impl std::fmt::Debug for FrozenEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenEncoder")
            .field("config", self.inner.encoder.config())
            .field("codebook_size", &self.inner.codebook.size())
            .finish()
    }
}

impl FrozenEncoder {
    pub fn new(encoder: RefEncoder, codebook: Codebook) -> Self {
        let mut encoder = encoder;
        encoder.net_mut().clear_cache();
        Self {
            inner: Arc::new(Frozen { encoder, codebook }),
        }
    }

    pub fn encoder(&self) -> &RefEncoder {
        &self.inner.encoder
    }

    pub fn codebook(&self) -> &Codebook {
        &self.inner.codebook
    }

    pub fn latents(&self, mel: &Array2<f64>, spans: &[Range<usize>]) -> Result<Array2<f64>> {
        self.inner.encoder.encode(mel, spans)
    }

    /// Neural labels: each token's latent snapped to its nearest codeword.
    pub fn labels(
        &self,
        mel: &MelSpectrogram,
        alignment: &UtteranceAlignment,
        level: Level,
    ) -> Result<ProsodyLabelSet> {
        let z = reference_encode(mel, alignment, level, self)?;
        let labels = z
            .axis_iter(Axis(0))
            .map(|row| {
                let q = self.codebook().quantize(&row.to_vec());
                TokenLabel::Neural {
                    codeword_index: q.index,
                    latent: q.codeword,
                }
            })
            .collect();
        Ok(ProsodyLabelSet {
            utterance_id: alignment.utterance_id.clone(),
            kind: LabelKind::Neural,
            level,
            labels,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (net, meta) = self.inner.encoder.to_sections()?;
        let mut ck = Checkpoint::new();
        ck.insert(ENCODER_SECTION, net);
        ck.insert(ENCODER_META_SECTION, meta);
        ck.insert(CODEBOOK_SECTION, self.inner.codebook.to_section());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = RefEncoder::from_sections(
            ck.section(ENCODER_SECTION)?,
            ck.section(ENCODER_META_SECTION)?,
        )?;
        let codebook = Codebook::from_section(ck.section(CODEBOOK_SECTION)?)?;
        Ok(Self::new(encoder, codebook))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Per-token latents of an utterance at `level`.
pub fn reference_encode(
    mel: &MelSpectrogram,
    alignment: &UtteranceAlignment,
    level: Level,
    frozen: &FrozenEncoder,
) -> Result<Array2<f64>> {
    let total = alignment.total_frames();
    if total != mel.n_frames() {
        return Err(Error::Mismatch(format!(
            "{}: alignment covers {total} frames, mel has {}",
            alignment.utterance_id,
            mel.n_frames()
        )));
    }
    frozen.latents(&mel.frames, &alignment.frame_spans(level))
}
