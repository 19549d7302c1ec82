use serde::{Deserialize, Serialize};

use super::{Param, Section, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "adam needs beta1, beta2 in (0, 1) and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `model_dim^-0.5 * min(step^-0.5, step * warmup_steps^-1.5)`.
    WarmupInverseSqrt { model_dim: usize, warmup_steps: u64 },
    Constant { learning_rate: f64 },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::WarmupInverseSqrt {
                model_dim,
                warmup_steps,
            } => model_dim > 0 && warmup_steps > 0,
            Schedule::Constant { learning_rate } => learning_rate > 0.0 && learning_rate.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("schedule parameters must be positive: {self:?}")))
        }
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::Config("learning-rate steps are 1-based; got step 0".into()));
        }
        Ok(match *self {
            Schedule::WarmupInverseSqrt {
                model_dim,
                warmup_steps,
            } => {
                let s = step as f64;
                (model_dim as f64).powf(-0.5)
                    * s.powf(-0.5).min(s * (warmup_steps as f64).powf(-1.5))
            }
            Schedule::Constant { learning_rate } => learning_rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub total_steps: u64,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config(
                "batch_size and total_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and matched to parameters by position.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// changes, so a non-finite gradient leaves the model untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        lr: f64,
    ) -> Result<()> {
        let mut params: Vec<&mut Param> = params.into_iter().collect();
        for (i, p) in params.iter().enumerate() {
            if let Some(bad) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} (shape {:?}) at element {bad} is {} before step {}",
                    p.grad.shape(),
                    p.grad.iter().nth(bad).unwrap(),
                    self.step + 1
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(&params).any(|(m, p)| m.shape() != p.value.shape())
        {
            return Err(Error::State(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                });
        }
        Ok(())
    }

    pub fn to_section(&self) -> Result<Section> {
        let meta = serde_json::json!({ "config": self.config, "step": self.step });
        let mut section = Section::new(meta);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            section.push(format!("m.{i}"), m.clone());
            section.push(format!("v.{i}"), v.clone());
        }
        Ok(section)
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let config: AdamConfig = serde_json::from_value(section.meta["config"].clone())?;
        let step = section.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Format("optimizer section lacks a step counter".into()))?;
        let mut adam = Self::new(config);
        adam.step = step;
        let mut i = 0;
        while let (Some(m), Some(v)) = (
            section.tensor(&format!("m.{i}")),
            section.tensor(&format!("v.{i}")),
        ) {
            adam.m.push(m.clone());
            adam.v.push(v.clone());
            i += 1;
        }
        Ok(adam)
    }
}
