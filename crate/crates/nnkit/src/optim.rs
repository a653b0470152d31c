use serde::{Deserialize, Serialize};

use crate::{Gradients, Network, NnError, Real, Result};

/// How the L1 penalty `l1_coefficient * sum|w|` enters each SGD step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Scaling {
    /// Added in full to every mini-batch mean loss.
    #[default]
    PerBatch,
    /// Added once to the loss summed over the training set, so a step on
    /// the mean loss carries `l1_coefficient / n_train` of it.
    PerDataset,
}

/// Hyperparameters for mini-batch SGD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l1_coefficient: f64,
    pub l1_scaling: L1Scaling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 64,
            l1_coefficient: 0.0,
            l1_scaling: L1Scaling::PerBatch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.l1_coefficient.is_finite() && self.l1_coefficient >= 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "l1_coefficient must be nonnegative, got {}",
                self.l1_coefficient
            )));
        }
        Ok(())
    }

    /// Coefficient applied to `sum|w|` on a mean-loss step over `n_train` samples.
    pub fn effective_l1(&self, n_train: usize) -> f64 {
        match self.l1_scaling {
            L1Scaling::PerBatch => self.l1_coefficient,
            L1Scaling::PerDataset => self.l1_coefficient / n_train.max(1) as f64,
        }
    }
}

/// One SGD update: `w <- w - learning_rate * g`. Non-finite gradients abort
/// without touching the parameters.
pub fn sgd_step<T: Real>(
    net: &mut Network<T>,
    gradients: &Gradients<T>,
    config: &TrainConfig,
) -> Result<()> {
    net.apply_gradients(gradients, T::from_f64_lossy(config.learning_rate))
}
