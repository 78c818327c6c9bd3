use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub optimizer: AdamWConfig,
    /// Backward work as a multiple of forward work in the cost model.
    pub backward_factor: f64,
    /// Record per-iteration wall time. Off makes reports reproducible
    /// byte-for-byte.
    pub timing: bool,
    /// Leading iterations excluded from timing statistics.
    pub warmup_discard: usize,
    /// Background batch-preparation workers; 0 prepares batches inline.
    pub threads: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 500,
            seed: 0,
            precision: Precision::F64,
            optimizer: AdamWConfig::default(),
            backward_factor: 2.0,
            timing: true,
            warmup_discard: 10,
            threads: 0,
        }
    }
}

impl TrainerConfig {
    /// Base rate after the linear batch-size rule.
    pub fn effective_lr(&self, base_lr: f64) -> f64 {
        base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("trainer.steps", "must be at least 1"));
        }
        if self.precision != Precision::F64 {
            return Err(Error::config(
                "trainer.precision",
                "only \"f64\" is supported by this build",
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("trainer.optimizer.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("trainer.optimizer.eps", "must be > 0"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config("trainer.optimizer.weight_decay", "must be ≥ 0"));
        }
        if !(self.backward_factor >= 0.0) {
            return Err(Error::config("trainer.backward_factor", "must be ≥ 0"));
        }
        Ok(())
    }
}
