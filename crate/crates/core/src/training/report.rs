//! Per-epoch training history.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::models::{ModelSpec, ResponsibilityModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's batches, taken before each update.
    pub loss: f64,
    pub wall_ms: f64,
    /// Mean wall time per gradient step.
    pub step_ms: f64,
    /// Allocation after the epoch, for constant models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
}

/// Model allocations at the probe contexts after a given epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub epoch: usize,
    pub gamma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<ProbeSnapshot>,
    pub final_params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_gamma: Option<Vec<f64>>,
    pub diverged: bool,
}

impl TrainReport {
    pub(super) fn new(config: TrainConfig, model: &ResponsibilityModel) -> Self {
        Self {
            config,
            model: model.spec().clone(),
            epochs: Vec::new(),
            snapshots: Vec::new(),
            final_params: model.params().to_vec(),
            final_gamma: None,
            diverged: false,
        }
    }

    pub(super) fn push_epoch(&mut self, record: EpochRecord) {
        self.epochs.push(record);
    }

    pub(super) fn push_snapshot(
        &mut self,
        epoch: usize,
        model: &ResponsibilityModel,
        probes: &[Vec<f64>],
    ) -> Result<(), crate::Error> {
        let gamma = probes
            .iter()
            .map(|c| model.eval(c))
            .collect::<Result<_, _>>()?;
        self.snapshots.push(ProbeSnapshot { epoch, gamma });
        Ok(())
    }

    pub(super) fn finish(&mut self, model: &ResponsibilityModel) {
        self.final_params = model.params().to_vec();
        self.final_gamma = self.epochs.last().and_then(|e| e.gamma.clone());
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Copy with all wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.epochs {
            e.wall_ms = 0.0;
            e.step_ms = 0.0;
        }
        out
    }

    /// One row per epoch: `epoch, loss, wall_ms, step_ms` and, for constant
    /// models, `gamma_1 … gamma_N`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let n_gamma = self
            .epochs
            .first()
            .and_then(|e| e.gamma.as_ref())
            .map_or(0, Vec::len);
        let mut columns: Vec<String> = ["epoch", "loss", "wall_ms", "step_ms"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        columns.extend((1..=n_gamma).map(|i| format!("gamma_{i}")));
        w.write_record(&columns)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.loss.to_string(),
                e.wall_ms.to_string(),
                e.step_ms.to_string(),
            ];
            if let Some(g) = &e.gamma {
                row.extend(g.iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
