//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::nn::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    /// Only used by SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err("learning_rate must be positive".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch; cosine decays per epoch to zero at `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-parameter optimizer state, in the order of [`crate::model::ModelBundle::params_mut`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    state: OptimizerState,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            state: OptimizerState {
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
        }
    }

    pub fn with_state(config: OptimConfig, state: OptimizerState) -> Self {
        Self { config, state }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// One update with the given learning rate; weight decay is added to the gradient.
    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.state.first.len() != params.len() {
            self.state.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.state.second = match self.config.algorithm {
                Algorithm::Adam => params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
                Algorithm::SgdMomentum => Vec::new(),
            };
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let wd = self.config.weight_decay;
        match self.config.algorithm {
            Algorithm::Adam => {
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                for (i, p) in params.into_iter().enumerate() {
                    let m = &mut self.state.first[i];
                    let v = &mut self.state.second[i];
                    for j in 0..p.value.len() {
                        let w = p.value[j].as_f64();
                        let g = p.grad[j].as_f64() + wd * w;
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                        let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                        p.value[j] = T::from_f64_lossy(w - update);
                    }
                }
            }
            Algorithm::SgdMomentum => {
                let mu = self.config.momentum;
                for (i, p) in params.into_iter().enumerate() {
                    let buf = &mut self.state.first[i];
                    for j in 0..p.value.len() {
                        let w = p.value[j].as_f64();
                        let g = p.grad[j].as_f64() + wd * w;
                        buf[j] = mu * buf[j] + g;
                        p.value[j] = T::from_f64_lossy(w - lr * buf[j]);
                    }
                }
            }
        }
    }
}
