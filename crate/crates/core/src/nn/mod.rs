//! Small reverse-mode layer set, Adam and a checkpoint container.
//!
//! Layers record what they need for backward during a training forward pass;
//! [`Layer::forward_eval`] and [`Sequential::forward_eval`] take `&self` and
//! are safe to share across threads.

mod checkpoint;
pub mod gradcheck;
mod layers;
mod network;
mod optim;

use std::ops::Range;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Section, CHECKPOINT_VERSION};
pub use layers::{Layer, LayerSpec};
pub use network::Sequential;
pub use optim::{Adam, AdamConfig, Schedule, TrainConfig};

pub type Tensor = ArrayD<f64>;

/// A trainable tensor with its accumulated gradient (same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, dropout randomness and token spans for pooling.
#[derive(Debug, Clone)]
pub struct Context {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub spans: Option<Vec<Range<usize>>>,
}

impl Context {
    pub fn train(seed: u64) -> Self {
        Self::train_with(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn train_with(rng: ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng,
            spans: None,
        }
    }

    /// Eval mode records backward state too, but dropout is inactive.
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            spans: None,
        }
    }

    pub fn with_spans(mut self, spans: Vec<Range<usize>>) -> Self {
        self.spans = Some(spans);
        self
    }
}

/// Generator for training step `step`; independent of how many draws earlier
/// steps made, so resumed runs reproduce the same masks.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}
