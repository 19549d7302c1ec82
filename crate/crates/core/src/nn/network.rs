use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use super::{Context, Layer, LayerSpec, Param, Section, Tensor};
use crate::error::{Error, Result};

/// Layers applied in order.
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<Layer>,
}

fn locate(i: usize, err: Error) -> Error {
    match err {
        Error::Shape { layer, msg } => Error::Shape {
            layer: format!("#{i} {layer}"),
            msg,
        },
        other => other,
    }
}

impl Sequential {
    pub fn new(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::new(s.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, ctx).map_err(|e| locate(i, e))?;
        }
        Ok(h)
    }

    pub fn forward_eval(&self, x: &Tensor, spans: Option<&[Range<usize>]>) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_eval(&h, spans).map_err(|e| locate(i, e))?;
        }
        Ok(h)
    }

    /// Returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&g).map_err(|e| locate(i, e))?;
        }
        Ok(g)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params().iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    /// Layer specs in the metadata, one tensor per parameter.
    pub fn to_section(&self) -> Result<Section> {
        let mut section = Section::new(serde_json::to_value(self.specs())?);
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, p) in layer.params().iter().enumerate() {
                section.push(format!("{i}.{j}"), p.value.clone());
            }
        }
        Ok(section)
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let specs: Vec<LayerSpec> = serde_json::from_value(section.meta.clone())?;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let mut values = Vec::new();
            let mut j = 0;
            while let Some(t) = section.tensor(&format!("{i}.{j}")) {
                values.push(t.clone());
                j += 1;
            }
            layers.push(Layer::from_parts(spec, values)?);
        }
        Ok(Self { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, IxDyn};
    use rand::SeedableRng;

    fn small() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1d {
                in_channels: 3,
                out_channels: 5,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::LayerNorm {
                features: 5,
                eps: 1e-5,
            },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Linear {
                in_features: 5,
                out_features: 2,
            },
        ]
    }

    fn input() -> Tensor {
        Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin()).into_dyn()
    }

    #[test]
    fn seeded_init_and_masks_are_deterministic() {
        let a = Sequential::new(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut b = a.clone();
        let mut a = a;
        let ya = a.forward(&input(), &mut Context::train(9)).unwrap();
        let yb = b.forward(&input(), &mut Context::train(9)).unwrap();
        assert_eq!(ya, yb);
        let c = Sequential::new(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(a.params().zip(c.params()).all(|(p, q)| p.value == q.value));
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = Sequential::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(
            net.forward_eval(&input(), None).unwrap(),
            net.forward_eval(&input(), None).unwrap()
        );
    }

    #[test]
    fn shape_error_reports_layer_position() {
        let net = Sequential::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = net
            .forward_eval(&Tensor::zeros(IxDyn(&[4, 2])), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("#0 conv1d"), "{err}");
    }

    #[test]
    fn section_round_trip() {
        let net = Sequential::new(&small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let back = Sequential::from_section(&net.to_section().unwrap()).unwrap();
        assert_eq!(back.specs(), net.specs());
        assert!(back.params().zip(net.params()).all(|(p, q)| p.value == q.value));
    }
}
