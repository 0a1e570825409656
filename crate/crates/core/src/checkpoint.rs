//! Self-describing JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RnaError};
use crate::model::{ModelBundle, ModelConfig};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::training::DiagnosticsSeries;

pub const FORMAT: &str = "rna-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    /// Completed epochs.
    pub epoch: usize,
    pub model: ModelConfig,
    pub prior: Vec<f64>,
    /// Parameter values in [`ModelBundle::params`] order.
    pub params: Vec<Vec<f64>>,
    pub batch_norms: Vec<BnStats>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub series: Option<DiagnosticsSeries>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn copy_into<T: Scalar>(dst: &mut [T], src: &[f64], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(RnaError::CheckpointMismatch(format!(
            "{what}: checkpoint has {} values, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = T::from_f64_lossy(s);
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &ModelBundle<T>,
        config_digest: &str,
        epoch: usize,
        optimizer: Option<&OptimizerState>,
        series: Option<&DiagnosticsSeries>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config_digest: config_digest.into(),
            epoch,
            model: model.config.clone(),
            prior: model.prior().to_vec(),
            params: model.params().iter().map(|p| to_f64(&p.value)).collect(),
            batch_norms: model
                .batch_norms()
                .iter()
                .map(|bn| BnStats {
                    running_mean: to_f64(&bn.running_mean),
                    running_var: to_f64(&bn.running_var),
                })
                .collect(),
            optimizer: optimizer.cloned(),
            series: series.cloned(),
        }
    }

    /// Rebuilds the model. With `expected_digest`, a different digest is an error.
    pub fn restore<T: Scalar>(&self, expected_digest: Option<&str>) -> Result<ModelBundle<T>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(RnaError::CheckpointMismatch(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if let Some(d) = expected_digest {
            if d != self.config_digest {
                return Err(RnaError::CheckpointMismatch(format!(
                    "config digest {d} does not match checkpoint digest {}",
                    self.config_digest
                )));
            }
        }
        let mut model = ModelBundle::new(self.model.clone(), self.prior.clone(), 0)?;
        let params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(RnaError::CheckpointMismatch(format!(
                "checkpoint has {} parameter tensors, architecture has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (i, (p, src)) in params.into_iter().zip(&self.params).enumerate() {
            copy_into(&mut p.value, src, &format!("parameter {i}"))?;
        }
        let bns = model.batch_norms_mut();
        if bns.len() != self.batch_norms.len() {
            return Err(RnaError::CheckpointMismatch(format!(
                "checkpoint has {} batch norms, architecture has {}",
                self.batch_norms.len(),
                bns.len()
            )));
        }
        for (i, (bn, s)) in bns.into_iter().zip(&self.batch_norms).enumerate() {
            copy_into(&mut bn.running_mean, &s.running_mean, &format!("batch norm {i} mean"))?;
            copy_into(&mut bn.running_var, &s.running_var, &format!("batch norm {i} variance"))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RnaError::CheckpointMismatch(format!("unreadable checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
