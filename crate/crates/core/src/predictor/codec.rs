use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelKind, RuleQuantizers, TokenLabel};
use crate::nn::Section;
use crate::vq::{Codebook, LATENT_DIM};

/// Regression loss used for a label kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Mse,
}

impl LossKind {
    /// Rule labels regress with MAE, neural labels with MSE.
    pub fn for_kind(kind: LabelKind) -> Self {
        match kind {
            LabelKind::Rule => LossKind::Mae,
            LabelKind::Neural => LossKind::Mse,
        }
    }

    /// Summed loss and its gradient w.r.t. `pred`, both divided by `denom`.
    pub fn eval(&self, pred: &Array2<f64>, target: &Array2<f64>, denom: f64) -> (f64, Array2<f64>) {
        let diff = pred - target;
        match self {
            LossKind::Mae => (
                diff.iter().map(|d| d.abs()).sum::<f64>() / denom,
                diff.mapv(|d| {
                    if d > 0.0 {
                        1.0 / denom
                    } else if d < 0.0 {
                        -1.0 / denom
                    } else {
                        0.0
                    }
                }),
            ),
            LossKind::Mse => (
                diff.iter().map(|d| d * d).sum::<f64>() / denom,
                diff.mapv(|d| 2.0 * d / denom),
            ),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        })
    }
}

/// Maps labels to regression targets and predictions back to labels.
///
/// Rule targets are the dequantized (F0 Hz, energy) pair standardized with
/// training-set statistics; neural targets are codeword vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetCodec {
    Rule {
        quantizers: RuleQuantizers,
        mean: [f64; 2],
        std: [f64; 2],
    },
    Neural {
        codebook: Codebook,
    },
}

impl TargetCodec {
    pub fn rule<'a>(
        quantizers: RuleQuantizers,
        labels: impl IntoIterator<Item = &'a TokenLabel>,
    ) -> Result<Self> {
        let mut values = Vec::new();
        for l in labels {
            match *l {
                TokenLabel::Rule { f0_bin, energy_bin } => {
                    values.push(quantizers.dequantize(f0_bin, energy_bin)?)
                }
                TokenLabel::Neural { .. } => {
                    return Err(Error::Format("neural label in a rule-based set".into()))
                }
            }
        }
        if values.is_empty() {
            return Err(Error::EmptyInput("no labels to fit target statistics".into()));
        }
        let n = values.len() as f64;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for c in 0..2 {
            mean[c] = values.iter().map(|v| v[c]).sum::<f64>() / n;
            let var = values.iter().map(|v| (v[c] - mean[c]).powi(2)).sum::<f64>() / n;
            // constant channels keep unit scale
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self::Rule {
            quantizers,
            mean,
            std,
        })
    }

    pub fn neural(codebook: Codebook) -> Self {
        Self::Neural { codebook }
    }

    pub fn kind(&self) -> LabelKind {
        match self {
            TargetCodec::Rule { .. } => LabelKind::Rule,
            TargetCodec::Neural { .. } => LabelKind::Neural,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetCodec::Rule { .. } => 2,
            TargetCodec::Neural { .. } => LATENT_DIM,
        }
    }

    pub fn loss(&self) -> LossKind {
        LossKind::for_kind(self.kind())
    }

    /// Continuous label values in natural units.
    pub fn values(&self, labels: &[TokenLabel]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((labels.len(), self.dim()));
        for (r, l) in labels.iter().enumerate() {
            match (self, l) {
                (TargetCodec::Rule { quantizers, .. }, &TokenLabel::Rule { f0_bin, energy_bin }) => {
                    let v = quantizers.dequantize(f0_bin, energy_bin)?;
                    out[[r, 0]] = v[0];
                    out[[r, 1]] = v[1];
                }
                (TargetCodec::Neural { .. }, TokenLabel::Neural { latent, .. }) => {
                    for j in 0..LATENT_DIM {
                        out[[r, j]] = latent[j];
                    }
                }
                _ => {
                    return Err(Error::Format(format!(
                        "{} label given to a {} model",
                        l.kind(),
                        self.kind()
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, values: &Array2<f64>) -> Array2<f64> {
        match self {
            TargetCodec::Rule { mean, std, .. } => {
                let mut v = values.clone();
                for mut row in v.rows_mut() {
                    for c in 0..2 {
                        row[c] = (row[c] - mean[c]) / std[c];
                    }
                }
                v
            }
            TargetCodec::Neural { .. } => values.clone(),
        }
    }

    pub fn denormalize(&self, normalized: &Array2<f64>) -> Array2<f64> {
        match self {
            TargetCodec::Rule { mean, std, .. } => {
                let mut v = normalized.clone();
                for mut row in v.rows_mut() {
                    for c in 0..2 {
                        row[c] = row[c] * std[c] + mean[c];
                    }
                }
                v
            }
            TargetCodec::Neural { .. } => normalized.clone(),
        }
    }

    /// Normalized regression targets.
    pub fn targets(&self, labels: &[TokenLabel]) -> Result<Array2<f64>> {
        Ok(self.normalize(&self.values(labels)?))
    }

    /// Discrete ids used for label-embedding lookups: `[f0_bin, energy_bin]`
    /// or `[codeword_index]`.
    pub fn discrete_ids(label: &TokenLabel) -> Vec<usize> {
        match *label {
            TokenLabel::Rule { f0_bin, energy_bin } => vec![f0_bin, energy_bin],
            TokenLabel::Neural { codeword_index, .. } => vec![codeword_index],
        }
    }

    /// Table sizes for the discrete ids of this kind.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        match self {
            TargetCodec::Rule { quantizers, .. } => {
                vec![quantizers.f0.n_bins, quantizers.energy.n_bins]
            }
            TargetCodec::Neural { codebook } => vec![codebook.size()],
        }
    }

    pub fn to_section(&self) -> Section {
        match self {
            TargetCodec::Rule {
                quantizers,
                mean,
                std,
            } => Section::new(serde_json::json!({
                "kind": "rule",
                "quantizers": quantizers,
                "mean": mean,
                "std": std,
            })),
            TargetCodec::Neural { codebook } => {
                let mut s = codebook.to_section();
                s.meta["kind"] = serde_json::json!("neural");
                s
            }
        }
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        match section.meta["kind"].as_str() {
            Some("rule") => Ok(TargetCodec::Rule {
                quantizers: serde_json::from_value(section.meta["quantizers"].clone())?,
                mean: serde_json::from_value(section.meta["mean"].clone())?,
                std: serde_json::from_value(section.meta["std"].clone())?,
            }),
            Some("neural") => Ok(TargetCodec::Neural {
                codebook: Codebook::from_section(section)?,
            }),
            other => Err(Error::Format(format!("unknown target codec kind {other:?}"))),
        }
    }
}

/// Discretizes continuous predictions given in natural units: rule values are
/// quantized per channel, neural latents snap to their nearest codeword.
pub fn labels_from_prediction(prediction: ArrayView2<f64>, codec: &TargetCodec) -> Result<Vec<TokenLabel>> {
    if prediction.ncols() != codec.dim() {
        return Err(Error::Mismatch(format!(
            "prediction has {} columns, {} labels need {}",
            prediction.ncols(),
            codec.kind(),
            codec.dim()
        )));
    }
    prediction
        .rows()
        .into_iter()
        .map(|row| match codec {
            TargetCodec::Rule { quantizers, .. } => quantizers.label(row[0], row[1]),
            TargetCodec::Neural { codebook } => {
                let q = codebook.quantize(&row.to_vec());
                Ok(TokenLabel::Neural {
                    codeword_index: q.index,
                    latent: q.codeword,
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Quantizer, Scale};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quantizers() -> RuleQuantizers {
        RuleQuantizers {
            f0: Quantizer::new(256, Scale::Log, 80.0, 400.0).unwrap(),
            energy: Quantizer::new(256, Scale::Linear, 0.0, 50.0).unwrap(),
        }
    }

    #[test]
    fn bin_center_prediction_returns_its_bin() {
        let q = quantizers();
        let codec = TargetCodec::rule(q, &[TokenLabel::Rule { f0_bin: 3, energy_bin: 9 }]).unwrap();
        let p = array![[q.f0.dequantize(17).unwrap(), q.energy.dequantize(200).unwrap()]];
        assert_eq!(
            labels_from_prediction(p.view(), &codec).unwrap(),
            vec![TokenLabel::Rule {
                f0_bin: 17,
                energy_bin: 200
            }]
        );
    }

    #[test]
    fn codeword_prediction_returns_its_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::new(Array2::from_shape_simple_fn((256, 3), || rng.gen_range(-1.0..1.0))).unwrap();
        let codec = TargetCodec::neural(cb.clone());
        let p = Array2::from_shape_vec((1, 3), cb.codeword(7).to_vec()).unwrap();
        match labels_from_prediction(p.view(), &codec).unwrap()[0] {
            TokenLabel::Neural { codeword_index, .. } => assert_eq!(codeword_index, 7),
            _ => unreachable!(),
        }
    }

    #[test]
    fn snapping_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Codebook::new(Array2::from_shape_simple_fn((256, 3), || rng.gen_range(-1.0..1.0))).unwrap();
        let codec = TargetCodec::neural(cb.clone());
        let preds = Array2::from_shape_simple_fn((100, 3), || rng.gen_range(-1.5..1.5));
        let labels = labels_from_prediction(preds.view(), &codec).unwrap();
        for (row, label) in preds.rows().into_iter().zip(labels) {
            let dist = |i: usize| -> f64 {
                (0..3).map(|j| (row[j] - cb.codewords()[[i, j]]).powi(2)).sum()
            };
            let best = (0..256).fold(0, |b, i| if dist(i) < dist(b) { i } else { b });
            match label {
                TokenLabel::Neural { codeword_index, .. } => assert_eq!(codeword_index, best),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn normalization_round_trips() {
        let q = quantizers();
        let labels = [
            TokenLabel::Rule { f0_bin: 10, energy_bin: 40 },
            TokenLabel::Rule { f0_bin: 200, energy_bin: 90 },
        ];
        let codec = TargetCodec::rule(q, &labels).unwrap();
        let t = codec.targets(&labels).unwrap();
        assert!((t.column(0).sum()).abs() < 1e-12);
        let back = codec.denormalize(&t);
        let v = codec.values(&labels).unwrap();
        assert!((&back - &v).iter().all(|d| d.abs() < 1e-9));
        let s = codec.to_section();
        assert_eq!(TargetCodec::from_section(&s).unwrap(), codec);
    }

    #[test]
    fn loss_kinds() {
        assert_eq!(LossKind::for_kind(LabelKind::Rule), LossKind::Mae);
        assert_eq!(LossKind::for_kind(LabelKind::Neural), LossKind::Mse);
        let (l, g) = LossKind::Mae.eval(&array![[1.0, -1.0]], &array![[0.0, 0.0]], 2.0);
        assert_eq!((l, g), (1.0, array![[0.5, -0.5]]));
        let (l, g) = LossKind::Mse.eval(&array![[3.0]], &array![[1.0]], 1.0);
        assert_eq!((l, g), (4.0, array![[4.0]]));
    }
}
