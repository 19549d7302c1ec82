//! Central finite-difference checks of analytic gradients.
//!
//! The checker only evaluates the objective; it never looks at how the
//! gradient was produced, so it is an independent oracle for backward.

use std::ops::Range;

use ndarray::{Array, IxDyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Context, LayerSpec, Param, Sequential, Tensor};
use crate::error::Result;

/// A scalar objective over fixed inputs.
pub trait Differentiable {
    /// Evaluates the objective with dropout masks drawn from `seed`. With
    /// `backward`, parameter gradients are accumulated as well.
    fn objective(&mut self, seed: u64, backward: bool) -> Result<f64>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub samples_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 24,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check<M: Differentiable>(model: &mut M, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let dropout_seed = cfg.seed ^ 0x5eed;
    model.zero_grad();
    model.objective(dropout_seed, true)?;
    let analytic: Vec<Tensor> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    for (k, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let indices: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut pick, n, cfg.samples_per_tensor).into_vec()
        };
        for i in indices {
            let original = flat(&mut model.params_mut()[k].value)[i];
            flat(&mut model.params_mut()[k].value)[i] = original + cfg.step;
            let plus = model.objective(dropout_seed, false)?;
            flat(&mut model.params_mut()[k].value)[i] = original - cfg.step;
            let minus = model.objective(dropout_seed, false)?;
            flat(&mut model.params_mut()[k].value)[i] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.as_slice_memory_order().expect("contiguous gradient")[i];
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

fn flat(t: &mut Tensor) -> &mut [f64] {
    t.as_slice_memory_order_mut().expect("contiguous parameter")
}

/// A network on a fixed input, scored as `sum(weights * output)`.
#[derive(Debug, Clone)]
pub struct SequentialProbe {
    pub net: Sequential,
    /// Differentiable inputs are checked as an extra tensor.
    pub input: Param,
    pub input_differentiable: bool,
    pub weights: Tensor,
    pub spans: Option<Vec<Range<usize>>>,
}

impl SequentialProbe {
    pub fn new(
        net: Sequential,
        input: Tensor,
        input_differentiable: bool,
        spans: Option<Vec<Range<usize>>>,
        seed: u64,
    ) -> Result<Self> {
        let y = net.forward_eval(&input, spans.as_deref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array::from_shape_simple_fn(y.raw_dim(), || rng.gen_range(-1.0..1.0));
        Ok(Self {
            net,
            input: Param::new(input),
            input_differentiable,
            weights,
            spans,
        })
    }
}

impl Differentiable for SequentialProbe {
    fn objective(&mut self, seed: u64, backward: bool) -> Result<f64> {
        let mut ctx = Context::train(seed);
        ctx.spans = self.spans.clone();
        let y = self.net.forward(&self.input.value, &mut ctx)?;
        let loss = (&y * &self.weights).sum();
        if backward {
            let dx = self.net.backward(&self.weights)?;
            if self.input_differentiable {
                self.input.grad += &dx;
            }
        } else {
            self.net.clear_cache();
        }
        Ok(loss)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = self.net.params_mut().collect();
        if self.input_differentiable {
            ps.push(&mut self.input);
        }
        ps
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

/// One representative probe per layer kind, on random inputs and parameters.
pub fn layer_probes(seed: u64) -> Result<Vec<(LayerSpec, SequentialProbe)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 7;
    let cases: Vec<(LayerSpec, Tensor, bool, Option<Vec<Range<usize>>>)> = vec![
        (
            LayerSpec::Conv1d {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
            },
            random(&[t, 3], &mut rng),
            true,
            None,
        ),
        (
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 3],
                stride: [1, 1],
            },
            random(&[5, 4, 2], &mut rng),
            true,
            None,
        ),
        (
            LayerSpec::Linear {
                in_features: 5,
                out_features: 3,
            },
            random(&[4, 5], &mut rng),
            true,
            None,
        ),
        (
            LayerSpec::LayerNorm {
                features: 6,
                eps: 1e-5,
            },
            random(&[4, 6], &mut rng),
            true,
            None,
        ),
        (LayerSpec::Relu, random(&[5, 3], &mut rng), true, None),
        (
            LayerSpec::Dropout { rate: 0.4 },
            random(&[6, 3], &mut rng),
            true,
            None,
        ),
        (
            LayerSpec::EmbeddingLookup { vocab: 5, dim: 4 },
            Tensor::from_shape_vec(IxDyn(&[6]), vec![0.0, 3.0, 3.0, 1.0, 4.0, 0.0]).unwrap(),
            false,
            None,
        ),
        (
            LayerSpec::TokenMeanPool,
            random(&[t, 3], &mut rng),
            true,
            Some(vec![0..2, 2..3, 3..7]),
        ),
        (LayerSpec::Flatten, random(&[3, 4, 2], &mut rng), true, None),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (spec, input, diff, spans))| {
            let net = Sequential::new(std::slice::from_ref(&spec), &mut rng)?;
            let probe = SequentialProbe::new(net, input, diff, spans, seed + i as u64)?;
            Ok((spec, probe))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes() {
        for (spec, mut probe) in layer_probes(11).unwrap() {
            let r = check(&mut probe, GradCheckConfig::default()).unwrap();
            assert!(r.checked > 0);
            assert!(r.max_rel_error <= 1e-4, "{}: {r:?}", spec.name());
        }
    }

    #[test]
    fn small_stack_passes() {
        let specs = [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
                kernel: [3, 3],
                stride: [1, 1],
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Flatten,
            LayerSpec::TokenMeanPool,
            LayerSpec::LayerNorm {
                features: 12,
                eps: 1e-5,
            },
            LayerSpec::Linear {
                in_features: 12,
                out_features: 2,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Sequential::new(&specs, &mut rng).unwrap();
        let input = random(&[6, 4, 1], &mut rng);
        let mut probe = SequentialProbe::new(net, input, true, Some(vec![0..3, 3..6]), 4).unwrap();
        let r = check(&mut probe, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        struct Wrong(Param);
        impl Differentiable for Wrong {
            fn objective(&mut self, _: u64, backward: bool) -> Result<f64> {
                let x = self.0.value[[0]];
                if backward {
                    self.0.grad[[0]] += 2.0 * x + 0.01;
                }
                Ok(x * x)
            }
            fn params_mut(&mut self) -> Vec<&mut Param> {
                vec![&mut self.0]
            }
        }
        let mut w = Wrong(Param::new(Tensor::from_elem(IxDyn(&[1]), 1.5)));
        let r = check(&mut w, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error > 1e-3);
    }
}
