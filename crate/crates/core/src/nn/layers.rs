use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Context, Mode, Param, Tensor};
use crate::error::{Error, Result};

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[T, in] -> [T, out]`, "same" zero padding, odd kernel, unit stride.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// `[H, W, in] -> [H', W', out]` with "same" padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Normalizes over the last axis.
    LayerNorm { features: usize, eps: f64 },
    Relu,
    Dropout { rate: f64 },
    /// `[N]` integer ids -> `[N, dim]`.
    EmbeddingLookup { vocab: usize, dim: usize },
    /// `[T, F]` frames -> `[N, F]` token means over the context's spans.
    TokenMeanPool,
    /// `[d0, d1, ...] -> [d0, d1 * ...]`.
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::EmbeddingLookup { .. } => "embedding_lookup",
            LayerSpec::TokenMeanPool => "token_mean_pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || kernel % 2 == 0 {
                    return bad(format!(
                        "needs positive channels and an odd kernel, got {in_channels}->{out_channels} k={kernel}"
                    ));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0
                    || out_channels == 0
                    || kernel.iter().any(|&k| k == 0 || k % 2 == 0)
                    || stride.iter().any(|&s| s == 0)
                {
                    return bad(format!(
                        "needs positive channels/stride and odd kernels, got {kernel:?} stride {stride:?}"
                    ));
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad("features must be positive".into());
                }
            }
            LayerSpec::LayerNorm { features, eps } => {
                if features == 0 || !(eps > 0.0) {
                    return bad("features and eps must be positive".into());
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("rate {rate} outside [0, 1)"));
                }
            }
            LayerSpec::EmbeddingLookup { vocab, dim } => {
                if vocab == 0 || dim == 0 {
                    return bad("vocab and dim must be positive".into());
                }
            }
            LayerSpec::Relu | LayerSpec::TokenMeanPool | LayerSpec::Flatten => {}
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..=bound))
}

fn kaiming(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
enum Cache {
    Columns(Array2<f64>, Vec<usize>),
    Input(Tensor),
    Norm { normed: Array2<f64>, inv_std: Array1<f64> },
    Mask(Tensor),
    Ids(Vec<usize>),
    Spans(Vec<Range<usize>>, usize),
    Shape(Vec<usize>),
}

/// A layer with its parameters and, after a training forward, the values
/// needed for backward.
#[derive(Debug, Clone)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<Param>,
    cache: Option<Cache>,
}

fn as2<'a>(x: &'a Tensor, layer: &str) -> Result<ndarray::ArrayView2<'a, f64>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(layer, format!("expected a 2-D input, got {:?}", x.shape())))
}

/// Rows of `[T, C]` gathered into `[T, k * C]` windows with zero padding.
fn im2col_1d(x: ndarray::ArrayView2<f64>, kernel: usize) -> Array2<f64> {
    let (t_len, c) = x.dim();
    let pad = kernel / 2;
    let mut cols = Array2::zeros((t_len, kernel * c));
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src >= 0 && (src as usize) < t_len {
                cols.slice_mut(s![t, j * c..(j + 1) * c])
                    .assign(&x.row(src as usize));
            }
        }
    }
    cols
}

fn col2im_1d(cols: &Array2<f64>, t_len: usize, c: usize, kernel: usize) -> Array2<f64> {
    let pad = kernel / 2;
    let mut x = Array2::zeros((t_len, c));
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src >= 0 && (src as usize) < t_len {
                let mut row = x.row_mut(src as usize);
                row += &cols.slice(s![t, j * c..(j + 1) * c]);
            }
        }
    }
    x
}

fn conv2d_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

fn im2col_2d(
    x: ndarray::ArrayView3<'_, f64>,
    kernel: [usize; 2],
    stride: [usize; 2],
) -> (Array2<f64>, usize, usize) {
    let (h, w, c) = x.dim();
    let (oh, ow) = (
        conv2d_out(h, kernel[0], stride[0]),
        conv2d_out(w, kernel[1], stride[1]),
    );
    let (ph, pw) = (kernel[0] / 2, kernel[1] / 2);
    let mut cols = Array2::zeros((oh * ow, kernel[0] * kernel[1] * c));
    for i in 0..oh {
        for j in 0..ow {
            let row = i * ow + j;
            for ki in 0..kernel[0] {
                let si = (i * stride[0] + ki) as isize - ph as isize;
                if si < 0 || si as usize >= h {
                    continue;
                }
                for kj in 0..kernel[1] {
                    let sj = (j * stride[1] + kj) as isize - pw as isize;
                    if sj < 0 || sj as usize >= w {
                        continue;
                    }
                    let off = (ki * kernel[1] + kj) * c;
                    cols.slice_mut(s![row, off..off + c])
                        .assign(&x.slice(s![si as usize, sj as usize, ..]));
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im_2d(
    cols: &Array2<f64>,
    in_shape: (usize, usize, usize),
    kernel: [usize; 2],
    stride: [usize; 2],
) -> ndarray::Array3<f64> {
    let (h, w, c) = in_shape;
    let (oh, ow) = (
        conv2d_out(h, kernel[0], stride[0]),
        conv2d_out(w, kernel[1], stride[1]),
    );
    let (ph, pw) = (kernel[0] / 2, kernel[1] / 2);
    let mut x = ndarray::Array3::zeros((h, w, c));
    for i in 0..oh {
        for j in 0..ow {
            let row = i * ow + j;
            for ki in 0..kernel[0] {
                let si = (i * stride[0] + ki) as isize - ph as isize;
                if si < 0 || si as usize >= h {
                    continue;
                }
                for kj in 0..kernel[1] {
                    let sj = (j * stride[1] + kj) as isize - pw as isize;
                    if sj < 0 || sj as usize >= w {
                        continue;
                    }
                    let off = (ki * kernel[1] + kj) * c;
                    let mut dst = x.slice_mut(s![si as usize, sj as usize, ..]);
                    dst += &cols.slice(s![row, off..off + c]);
                }
            }
        }
    }
    x
}

fn accumulate(param: &mut Param, delta: ArrayD<f64>) {
    param.grad += &delta;
}

impl Layer {
    /// Builds a layer with freshly initialized parameters.
    pub fn new(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let fan_in = in_channels * kernel;
                vec![
                    Param::new(uniform(&[fan_in, out_channels], kaiming(fan_in), rng)),
                    Param::new(ArrayD::zeros(IxDyn(&[out_channels]))),
                ]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel[0] * kernel[1];
                vec![
                    Param::new(uniform(&[fan_in, out_channels], kaiming(fan_in), rng)),
                    Param::new(ArrayD::zeros(IxDyn(&[out_channels]))),
                ]
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                Param::new(uniform(
                    &[in_features, out_features],
                    kaiming(in_features),
                    rng,
                )),
                Param::new(ArrayD::zeros(IxDyn(&[out_features]))),
            ],
            LayerSpec::LayerNorm { features, .. } => vec![
                Param::new(ArrayD::ones(IxDyn(&[features]))),
                Param::new(ArrayD::zeros(IxDyn(&[features]))),
            ],
            LayerSpec::EmbeddingLookup { vocab, dim } => {
                vec![Param::new(uniform(&[vocab, dim], 1.0, rng))]
            }
            LayerSpec::Relu
            | LayerSpec::Dropout { .. }
            | LayerSpec::TokenMeanPool
            | LayerSpec::Flatten => vec![],
        };
        Ok(Self {
            spec,
            params,
            cache: None,
        })
    }

    /// Rebuilds a layer from stored parameter values.
    pub fn from_parts(spec: LayerSpec, values: Vec<ArrayD<f64>>) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut layer = Self::new(spec, &mut rng)?;
        if values.len() != layer.params.len() {
            return Err(Error::Format(format!(
                "{} expects {} parameter tensors, got {}",
                layer.spec.name(),
                layer.params.len(),
                values.len()
            )));
        }
        for (p, v) in layer.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "{} parameter shape {:?} does not match stored {:?}",
                    layer.spec.name(),
                    p.value.shape(),
                    v.shape()
                )));
            }
            *p = Param::new(v);
        }
        Ok(layer)
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Forward pass without recording anything; always eval behaviour.
    pub fn forward_eval(&self, x: &Tensor, spans: Option<&[Range<usize>]>) -> Result<Tensor> {
        self.compute(x, Mode::Eval, None, spans).map(|(y, _)| y)
    }

    /// Forward pass that records what backward needs.
    pub fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Result<Tensor> {
        let mode = ctx.mode;
        let spans = ctx.spans.clone();
        let (y, cache) = self.compute(x, mode, Some(&mut ctx.rng), spans.as_deref())?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn compute(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        spans: Option<&[Range<usize>]>,
    ) -> Result<(Tensor, Cache)> {
        let name = self.spec.name();
        match self.spec {
            LayerSpec::Conv1d {
                in_channels,
                kernel,
                ..
            } => {
                let x2 = as2(x, name)?;
                if x2.ncols() != in_channels {
                    return Err(Error::shape(
                        name,
                        format!("expected {in_channels} input channels, got {}", x2.ncols()),
                    ));
                }
                let cols = im2col_1d(x2, kernel);
                let w = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                let b = self.params[1].value.view().into_dimensionality::<Ix1>().unwrap();
                let y = cols.dot(&w) + &b;
                Ok((y.into_dyn(), Cache::Columns(cols, x.shape().to_vec())))
            }
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                stride,
                out_channels,
            } => {
                let x3 = x.view().into_dimensionality::<Ix3>().map_err(|_| {
                    Error::shape(name, format!("expected [H, W, C], got {:?}", x.shape()))
                })?;
                if x3.dim().2 != in_channels {
                    return Err(Error::shape(
                        name,
                        format!("expected {in_channels} input channels, got {}", x3.dim().2),
                    ));
                }
                let (cols, oh, ow) = im2col_2d(x3, kernel, stride);
                let w = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                let b = self.params[1].value.view().into_dimensionality::<Ix1>().unwrap();
                let y = (cols.dot(&w) + &b)
                    .into_shape((oh, ow, out_channels))
                    .expect("contiguous conv output");
                Ok((y.into_dyn(), Cache::Columns(cols, x.shape().to_vec())))
            }
            LayerSpec::Linear { in_features, .. } => {
                let x2 = as2(x, name)?;
                if x2.ncols() != in_features {
                    return Err(Error::shape(
                        name,
                        format!("expected {in_features} features, got {}", x2.ncols()),
                    ));
                }
                let w = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                let b = self.params[1].value.view().into_dimensionality::<Ix1>().unwrap();
                let y = x2.dot(&w) + &b;
                Ok((y.into_dyn(), Cache::Input(x.clone())))
            }
            LayerSpec::LayerNorm { features, eps } => {
                let x2 = as2(x, name)?;
                if x2.ncols() != features {
                    return Err(Error::shape(
                        name,
                        format!("expected {features} features, got {}", x2.ncols()),
                    ));
                }
                let n = features as f64;
                let mut normed = x2.to_owned();
                let mut inv_std = Array1::zeros(x2.nrows());
                for (mut row, inv) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
                    let mean = row.sum() / n;
                    row.mapv_inplace(|v| v - mean);
                    let var = row.iter().map(|v| v * v).sum::<f64>() / n;
                    *inv = 1.0 / (var + eps).sqrt();
                    let k = *inv;
                    row.mapv_inplace(|v| v * k);
                }
                let g = self.params[0].value.view().into_dimensionality::<Ix1>().unwrap();
                let b = self.params[1].value.view().into_dimensionality::<Ix1>().unwrap();
                let y = &normed * &g + &b;
                Ok((y.into_dyn(), Cache::Norm { normed, inv_std }))
            }
            LayerSpec::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::Dropout { rate } => match (mode, rng) {
                (Mode::Train, Some(rng)) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask =
                        x.mapv(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
                    Ok((x * &mask, Cache::Mask(mask)))
                }
                _ => Ok((x.clone(), Cache::Mask(ArrayD::ones(x.raw_dim())))),
            },
            LayerSpec::EmbeddingLookup { vocab, dim } => {
                let ids = x.view().into_dimensionality::<Ix1>().map_err(|_| {
                    Error::shape(name, format!("expected a 1-D id sequence, got {:?}", x.shape()))
                })?;
                let mut idx = Vec::with_capacity(ids.len());
                for &v in ids.iter() {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= vocab {
                        return Err(Error::shape(
                            name,
                            format!("id {v} is not an integer in [0, {vocab})"),
                        ));
                    }
                    idx.push(v as usize);
                }
                let table = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut y = Array2::zeros((idx.len(), dim));
                for (r, &i) in idx.iter().enumerate() {
                    y.row_mut(r).assign(&table.row(i));
                }
                Ok((y.into_dyn(), Cache::Ids(idx)))
            }
            LayerSpec::TokenMeanPool => {
                let x2 = as2(x, name)?;
                let spans = spans.ok_or_else(|| {
                    Error::shape(name, "token spans missing from the forward context")
                })?;
                let t_len = x2.nrows();
                if spans.iter().any(|s| s.is_empty() || s.end > t_len) {
                    return Err(Error::shape(
                        name,
                        format!("token spans must be non-empty and within {t_len} frames"),
                    ));
                }
                let mut y = Array2::zeros((spans.len(), x2.ncols()));
                for (r, span) in spans.iter().enumerate() {
                    let mean = x2
                        .slice(s![span.clone(), ..])
                        .mean_axis(Axis(0))
                        .expect("non-empty span");
                    y.row_mut(r).assign(&mean);
                }
                Ok((y.into_dyn(), Cache::Spans(spans.to_vec(), t_len)))
            }
            LayerSpec::Flatten => {
                if x.ndim() < 2 {
                    return Err(Error::shape(name, "needs at least 2 dimensions"));
                }
                let d0 = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape(IxDyn(&[d0, rest]))
                    .expect("standard layout reshape");
                Ok((y, Cache::Shape(x.shape().to_vec())))
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// layer input. Consumes the recorded forward state.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let name = self.spec.name();
        let cache = self.cache.take().ok_or_else(|| {
            Error::State(format!("{name}: backward called without a recorded forward pass"))
        })?;
        match (&self.spec, cache) {
            (LayerSpec::Conv1d { in_channels, kernel, .. }, Cache::Columns(cols, in_shape)) => {
                let g = as2(grad, name)?;
                accumulate(&mut self.params[0], cols.t().dot(&g).into_dyn());
                accumulate(&mut self.params[1], g.sum_axis(Axis(0)).into_dyn());
                let w = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                let dcols = g.dot(&w.t());
                Ok(col2im_1d(&dcols, in_shape[0], *in_channels, *kernel).into_dyn())
            }
            (
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    out_channels,
                    ..
                },
                Cache::Columns(cols, in_shape),
            ) => {
                let rows = cols.nrows();
                let g = grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape((rows, *out_channels))
                    .map_err(|_| Error::shape(name, "gradient shape does not match output"))?;
                accumulate(&mut self.params[0], cols.t().dot(&g).into_dyn());
                accumulate(&mut self.params[1], g.sum_axis(Axis(0)).into_dyn());
                let w = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                let dcols = g.dot(&w.t());
                let shape = (in_shape[0], in_shape[1], in_shape[2]);
                Ok(col2im_2d(&dcols, shape, *kernel, *stride).into_dyn())
            }
            (LayerSpec::Linear { .. }, Cache::Input(x)) => {
                let g = as2(grad, name)?;
                let x2 = as2(&x, name)?;
                accumulate(&mut self.params[0], x2.t().dot(&g).into_dyn());
                accumulate(&mut self.params[1], g.sum_axis(Axis(0)).into_dyn());
                let w = self.params[0].value.view().into_dimensionality::<Ix2>().unwrap();
                Ok(g.dot(&w.t()).into_dyn())
            }
            (LayerSpec::LayerNorm { features, .. }, Cache::Norm { normed, inv_std }) => {
                let g = as2(grad, name)?;
                accumulate(&mut self.params[0], (&g * &normed).sum_axis(Axis(0)).into_dyn());
                accumulate(&mut self.params[1], g.sum_axis(Axis(0)).into_dyn());
                let gamma = self.params[0].value.view().into_dimensionality::<Ix1>().unwrap();
                let dnorm = &g * &gamma;
                let n = *features as f64;
                let mut dx = Array2::zeros(g.raw_dim());
                for r in 0..g.nrows() {
                    let dn = dnorm.row(r);
                    let xh = normed.row(r);
                    let sum_dn = dn.sum();
                    let sum_dn_xh = (&dn * &xh).sum();
                    let k = inv_std[r] / n;
                    for c in 0..g.ncols() {
                        dx[[r, c]] = k * (n * dn[c] - sum_dn - xh[c] * sum_dn_xh);
                    }
                }
                Ok(dx.into_dyn())
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                Ok(ndarray::Zip::from(grad)
                    .and(&x)
                    .map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 }))
            }
            (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => Ok(grad * &mask),
            (LayerSpec::EmbeddingLookup { dim, .. }, Cache::Ids(ids)) => {
                let g = as2(grad, name)?;
                if g.dim() != (ids.len(), *dim) {
                    return Err(Error::shape(name, "gradient shape does not match output"));
                }
                let mut table_grad = self.params[0]
                    .grad
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                for (r, &i) in ids.iter().enumerate() {
                    let mut row = table_grad.row_mut(i);
                    row += &g.row(r);
                }
                Ok(ArrayD::zeros(IxDyn(&[ids.len()])))
            }
            (LayerSpec::TokenMeanPool, Cache::Spans(spans, t_len)) => {
                let g = as2(grad, name)?;
                let mut dx = Array2::zeros((t_len, g.ncols()));
                for (r, span) in spans.iter().enumerate() {
                    let share = &g.row(r) / span.len() as f64;
                    for t in span.clone() {
                        let mut row = dx.row_mut(t);
                        row += &share;
                    }
                }
                Ok(dx.into_dyn())
            }
            (LayerSpec::Flatten, Cache::Shape(shape)) => Ok(grad
                .as_standard_layout()
                .into_owned()
                .into_shape(IxDyn(&shape))
                .map_err(|_| Error::shape(name, "gradient shape does not match output"))?),
            _ => Err(Error::State(format!("{name}: cache does not match layer"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_linear_is_identity() {
        let eye = Array2::<f64>::eye(3).into_dyn();
        let layer = Layer::from_parts(
            LayerSpec::Linear {
                in_features: 3,
                out_features: 3,
            },
            vec![eye, ArrayD::zeros(IxDyn(&[3]))],
        )
        .unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, 1.0]].into_dyn();
        assert_eq!(layer.forward_eval(&x, None).unwrap(), x);
    }

    #[test]
    fn relu_definition() {
        let layer = Layer::new(LayerSpec::Relu, &mut rng()).unwrap();
        let x = array![-1.0, 0.0, 2.0].into_dyn();
        assert_eq!(
            layer.forward_eval(&x, None).unwrap(),
            array![0.0, 0.0, 2.0].into_dyn()
        );
    }

    #[test]
    fn conv1d_shift_kernel() {
        // taps [1, 0, 0] read x[t - 1] under same padding
        let w = array![[1.0], [0.0], [0.0]].into_dyn();
        let layer = Layer::from_parts(
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
            },
            vec![w, ArrayD::zeros(IxDyn(&[1]))],
        )
        .unwrap();
        let x = array![[1.0], [2.0], [3.0], [4.0]].into_dyn();
        assert_eq!(
            layer.forward_eval(&x, None).unwrap(),
            array![[0.0], [1.0], [2.0], [3.0]].into_dyn()
        );
    }

    #[test]
    fn conv2d_same_padding_preserves_size() {
        let layer = Layer::new(
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: [3, 3],
                stride: [1, 1],
            },
            &mut rng(),
        )
        .unwrap();
        let x = Array::from_shape_fn((5, 6, 1), |(i, j, _)| (i * 6 + j) as f64).into_dyn();
        assert_eq!(layer.forward_eval(&x, None).unwrap().shape(), &[5, 6, 4]);
    }

    #[test]
    fn sum_loss_linear_gradient_is_outer_product() {
        let mut layer = Layer::new(
            LayerSpec::Linear {
                in_features: 3,
                out_features: 2,
            },
            &mut rng(),
        )
        .unwrap();
        let x = array![[0.5, -1.0, 2.0]].into_dyn();
        let mut ctx = Context::train(0);
        let y = layer.forward(&x, &mut ctx).unwrap();
        layer.backward(&ArrayD::ones(y.raw_dim())).unwrap();
        let expected = array![[0.5, 0.5], [-1.0, -1.0], [2.0, 2.0]].into_dyn();
        assert_eq!(layer.params()[0].grad, expected);
        assert_eq!(layer.params()[1].grad, array![1.0, 1.0].into_dyn());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut layer = Layer::new(
            LayerSpec::Conv1d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
            },
            &mut rng(),
        )
        .unwrap();
        let x = Array::from_shape_fn((4, 2), |(i, j)| (i + j) as f64).into_dyn();
        let mut ctx = Context::train(0);
        let y = layer.forward(&x, &mut ctx).unwrap();
        let dx = layer.backward(&ArrayD::zeros(y.raw_dim())).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(layer.params().iter().all(|p| p.grad.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut layer = Layer::new(LayerSpec::Relu, &mut rng()).unwrap();
        assert!(matches!(
            layer.backward(&array![1.0].into_dyn()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let layer = Layer::new(
            LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            },
            &mut rng(),
        )
        .unwrap();
        let err = layer
            .forward_eval(&Array2::<f64>::zeros((2, 3)).into_dyn(), None)
            .unwrap_err();
        assert!(err.to_string().contains("linear"), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2
        }
        .validate()
        .is_err());
        assert!(LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: [3, 3],
            stride: [0, 1]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let layer = Layer::new(LayerSpec::Dropout { rate: 0.5 }, &mut rng()).unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0]].into_dyn();
        assert_eq!(layer.forward_eval(&x, None).unwrap(), x);
    }

    #[test]
    fn dropout_mean_converges_to_eval_output() {
        let mut layer = Layer::new(LayerSpec::Dropout { rate: 0.3 }, &mut rng()).unwrap();
        let x = array![[1.0, -2.0, 0.5, 3.0]].into_dyn();
        let mut acc = ArrayD::zeros(x.raw_dim());
        let masks = 10_000;
        for seed in 0..masks {
            let mut ctx = Context::train(seed);
            acc += &layer.forward(&x, &mut ctx).unwrap();
        }
        acc /= masks as f64;
        for (m, e) in acc.iter().zip(x.iter()) {
            assert!((m - e).abs() <= 0.02 * e.abs(), "{m} vs {e}");
        }
    }

    #[test]
    fn token_mean_pool_averages_spans() {
        let mut layer = Layer::new(LayerSpec::TokenMeanPool, &mut rng()).unwrap();
        let x = array![[1.0], [3.0], [10.0]].into_dyn();
        let mut ctx = Context::eval().with_spans(vec![0..2, 2..3]);
        let y = layer.forward(&x, &mut ctx).unwrap();
        assert_eq!(y, array![[2.0], [10.0]].into_dyn());
        let dx = layer.backward(&array![[1.0], [1.0]].into_dyn()).unwrap();
        assert_eq!(dx, array![[0.5], [0.5], [1.0]].into_dyn());
    }

    #[test]
    fn embedding_rejects_bad_ids() {
        let layer = Layer::new(LayerSpec::EmbeddingLookup { vocab: 3, dim: 2 }, &mut rng()).unwrap();
        assert!(layer.forward_eval(&array![0.0, 3.0].into_dyn(), None).is_err());
        assert!(layer.forward_eval(&array![0.5].into_dyn(), None).is_err());
        assert_eq!(
            layer.forward_eval(&array![2.0, 0.0].into_dyn(), None).unwrap().shape(),
            &[2, 2]
        );
    }
}
