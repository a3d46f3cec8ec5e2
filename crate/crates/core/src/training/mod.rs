//! The bi-level learner: fit a responsibility model so that the filter,
//! evaluated with the model's allocation, reproduces observed controls.
//!
//! For each sample the loss is `Δ(u_data, ũ(γ))`, where `ũ` solves the filter
//! at the sample's state with `γ = model(context)`. Gradients chain
//! `∂Δ/∂ũ · ∂ũ/∂γ · ∂γ/∂θ`, the middle factor coming from implicit
//! differentiation of the filter.

mod bench;
mod optim;
mod report;

pub use bench::{doubling_sizes, scaling_exponent, time_loss_gradient, BenchPoint};
pub use optim::{Optimizer, OptimizerKind};
pub use report::{EpochRecord, ProbeSnapshot, TrainReport};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::InteractionSample;
use crate::filter::{differentiate_filter, solve_filter, FilterProblem, FilterWeights};
use crate::models::{ModelSpec, ResponsibilityModel};
use crate::setup::FilterSetup;

/// Batches at least this large are solved in parallel.
const PARALLEL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMetric {
    Huber,
    L2,
    L1,
}

impl LossMetric {
    /// Per-sample loss summed over control coordinates, and its derivative
    /// with respect to the filtered controls.
    pub fn eval(&self, predicted: &[f64], observed: &[f64], delta: f64) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(predicted.len());
        for (p, o) in predicted.iter().zip(observed) {
            let r = p - o;
            let (value, slope) = match self {
                LossMetric::Huber => {
                    if r.abs() <= delta {
                        (0.5 * r * r, r)
                    } else {
                        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
                    }
                }
                LossMetric::L2 => (r * r, 2.0 * r),
                LossMetric::L1 => (r.abs(), if r == 0.0 { 0.0 } else { r.signum() }),
            };
            total += value;
            grad.push(slope);
        }
        (total, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossMetric,
    pub huber_delta: f64,
    /// Overrides the filter's regularization weights when set.
    pub weights: Option<FilterWeights>,
    pub seed: u64,
    pub shuffle: bool,
    /// Abort once an epoch's mean loss exceeds this.
    pub divergence_threshold: f64,
    /// Contexts at which non-constant models are snapshotted.
    pub probes: Vec<Vec<f64>>,
    /// Snapshot period in epochs; the final epoch is always recorded.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss: LossMetric::Huber,
            huber_delta: 1.0,
            weights: None,
            seed: 0,
            shuffle: true,
            divergence_threshold: 1e6,
            probes: Vec::new(),
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    /// Plain SGD with the given step size and mini-batch size.
    pub fn sgd(step: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate: step,
            optimizer: OptimizerKind::Sgd,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(
                "epochs, batch size and learning rate must be positive".into(),
            ));
        }
        if !(self.huber_delta > 0.0) {
            return Err(TrainError::Config("Huber threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {index} has no desired controls")]
    MissingDesired { index: usize },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: crate::Error,
    },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize, report: Box<TrainReport> },
    #[error("loss {loss:.3e} exceeded the divergence threshold at epoch {epoch}")]
    Diverged {
        epoch: usize,
        loss: f64,
        report: Box<TrainReport>,
    },
    #[error(transparent)]
    Other(#[from] crate::Error),
}

impl TrainError {
    /// Report accumulated before an abort, if any.
    pub fn partial_report(&self) -> Option<&TrainReport> {
        match self {
            TrainError::NonFinite { report, .. } | TrainError::Diverged { report, .. } => Some(report),
            _ => None,
        }
    }
}

/// A sample with its filter constraint and model context precomputed.
#[derive(Debug, Clone)]
struct PreparedSample {
    coeffs: Vec<f64>,
    offset: f64,
    desired: Vec<f64>,
    observed: Vec<f64>,
    context: Vec<f64>,
}

/// Samples ready for repeated loss and gradient evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    samples: Vec<PreparedSample>,
    control_dims: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    weights: FilterWeights,
}

impl PreparedData {
    /// Assembles every sample's constraint once. Contexts are extracted for
    /// `model`'s context kind.
    pub fn new(
        samples: &[InteractionSample],
        setup: &FilterSetup,
        model: &ResponsibilityModel,
        weights: Option<FilterWeights>,
    ) -> Result<Self, TrainError> {
        let weights = weights.unwrap_or(setup.config().weights);
        weights.validate().map_err(crate::Error::from)?;
        if model.n_agents() != setup.n_agents() {
            return Err(TrainError::Config(format!(
                "model has {} agents, filter has {}",
                model.n_agents(),
                setup.n_agents()
            )));
        }
        let prepared = samples
            .iter()
            .enumerate()
            .map(|(index, s)| {
                let wrap = |source: crate::Error| TrainError::Sample { index, source };
                let desired = s
                    .stacked_u_des()
                    .ok_or(TrainError::MissingDesired { index })?;
                let constraint = setup.constraint(&s.x).map_err(wrap)?;
                let context = model
                    .context_from_state(&s.x)
                    .map_err(|e| wrap(e.into()))?;
                let observed = s.stacked_u();
                if observed.len() != desired.len() || desired.len() != constraint.stacked().len() {
                    return Err(wrap(crate::Error::Config(
                        "control dimensions do not match the filter".into(),
                    )));
                }
                Ok(PreparedSample {
                    coeffs: constraint.stacked(),
                    offset: constraint.offset,
                    desired,
                    observed,
                    context,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            samples: prepared,
            control_dims: setup.control_dims(),
            lower: setup.agents().iter().flat_map(|a| a.control_lower.clone()).collect(),
            upper: setup.agents().iter().flat_map(|a| a.control_upper.clone()).collect(),
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn context(&self, index: usize) -> &[f64] {
        &self.samples[index].context
    }

    fn problem(&self, index: usize, gamma: Vec<f64>) -> Result<FilterProblem, crate::Error> {
        let s = &self.samples[index];
        Ok(FilterProblem::from_parts(
            self.control_dims.clone(),
            s.desired.clone(),
            gamma,
            self.weights,
            s.coeffs.clone(),
            s.offset,
            self.lower.clone(),
            self.upper.clone(),
        )?)
    }

    /// Filtered controls at sample `index` under the model's allocation.
    pub fn predict(&self, model: &ResponsibilityModel, index: usize) -> Result<Vec<f64>, crate::Error> {
        let gamma = model.eval(&self.samples[index].context)?;
        Ok(solve_filter(&self.problem(index, gamma)?)?.controls)
    }

    fn sample_loss(
        &self,
        model: &ResponsibilityModel,
        index: usize,
        config: &TrainConfig,
        with_gradient: bool,
    ) -> Result<(f64, Option<Vec<f64>>), TrainError> {
        let wrap = |source: crate::Error| TrainError::Sample { index, source };
        let s = &self.samples[index];
        let gamma = model.eval(&s.context).map_err(|e| wrap(e.into()))?;
        let problem = self.problem(index, gamma).map_err(wrap)?;
        let solution = solve_filter(&problem).map_err(|e| wrap(e.into()))?;
        let (loss, dl_du) = config
            .loss
            .eval(&solution.controls, &s.observed, config.huber_delta);
        if !with_gradient {
            return Ok((loss, None));
        }
        let jac = differentiate_filter(&problem, &solution);
        let dl_dgamma: Vec<f64> = (0..model.n_agents())
            .map(|i| (0..dl_du.len()).map(|j| jac.du_dgamma[(j, i)] * dl_du[j]).sum())
            .collect();
        let (_, grad) = model
            .vjp(&s.context, &dl_dgamma)
            .map_err(|e| wrap(e.into()))?;
        Ok((loss, Some(grad)))
    }

    /// Mean loss over `indices`.
    pub fn loss(
        &self,
        model: &ResponsibilityModel,
        indices: &[usize],
        config: &TrainConfig,
    ) -> Result<f64, TrainError> {
        let (loss, _) = self.evaluate(model, indices, config, false, indices.len() >= PARALLEL_BATCH)?;
        Ok(loss)
    }

    /// Mean loss over `indices` and its gradient with respect to the model
    /// parameters.
    pub fn loss_and_gradient(
        &self,
        model: &ResponsibilityModel,
        indices: &[usize],
        config: &TrainConfig,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        self.evaluate(model, indices, config, true, indices.len() >= PARALLEL_BATCH)
    }

    /// As [`Self::loss_and_gradient`], on the calling thread only.
    pub fn loss_and_gradient_sequential(
        &self,
        model: &ResponsibilityModel,
        indices: &[usize],
        config: &TrainConfig,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        self.evaluate(model, indices, config, true, false)
    }

    fn evaluate(
        &self,
        model: &ResponsibilityModel,
        indices: &[usize],
        config: &TrainConfig,
        with_gradient: bool,
        parallel: bool,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        if indices.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let per_sample: Vec<(f64, Option<Vec<f64>>)> = if parallel {
            indices
                .par_iter()
                .map(|&k| self.sample_loss(model, k, config, with_gradient))
                .collect::<Result<_, _>>()?
        } else {
            indices
                .iter()
                .map(|&k| self.sample_loss(model, k, config, with_gradient))
                .collect::<Result<_, _>>()?
        };
        let n = indices.len() as f64;
        let losses: Vec<f64> = per_sample.iter().map(|(l, _)| *l).collect();
        let loss = pairwise_sum(&losses) / n;
        let grad = if with_gradient {
            let grads: Vec<Vec<f64>> = per_sample.into_iter().filter_map(|(_, g)| g).collect();
            pairwise_sum_vectors(&grads, model.n_params())
                .into_iter()
                .map(|g| g / n)
                .collect()
        } else {
            Vec::new()
        };
        Ok((loss, grad))
    }
}

/// Sum in a fixed binary-tree order, independent of thread scheduling.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

fn pairwise_sum_vectors(values: &[Vec<f64>], dim: usize) -> Vec<f64> {
    match values.len() {
        0 => vec![0.0; dim],
        1 => values[0].clone(),
        n => {
            let mut left = pairwise_sum_vectors(&values[..n / 2], dim);
            let right = pairwise_sum_vectors(&values[n / 2..], dim);
            for (l, r) in left.iter_mut().zip(right) {
                *l += r;
            }
            left
        }
    }
}

/// One optimizer update on the batch `indices`; returns the batch loss
/// evaluated before the update.
pub fn gradient_step(
    model: &mut ResponsibilityModel,
    optimizer: &mut Optimizer,
    data: &PreparedData,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let (loss, grad) = data.loss_and_gradient(model, indices, config)?;
    optimizer.step(model.params_mut(), &grad);
    Ok(loss)
}

/// Trains `model` in place with shuffled mini-batches for `config.epochs`
/// epochs. Divergence and non-finite losses abort with the partial report.
pub fn fit(
    model: &mut ResponsibilityModel,
    data: &PreparedData,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.n_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::new(config.clone(), model);
    let is_constant = matches!(model.spec(), ModelSpec::Constant { .. });

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let start = Instant::now();
        let mut weighted = 0.0;
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            let loss = gradient_step(model, &mut optimizer, data, batch, config)?;
            weighted += loss * batch.len() as f64;
            steps += 1;
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let loss = weighted / data.len() as f64;
        let gamma = if is_constant {
            Some(model.eval(&[]).map_err(crate::Error::from)?)
        } else {
            None
        };
        report.push_epoch(EpochRecord {
            epoch,
            loss,
            wall_ms,
            step_ms: wall_ms / steps as f64,
            gamma,
        });
        let last = epoch + 1 == config.epochs;
        if !config.probes.is_empty()
            && (last || (config.snapshot_every > 0 && epoch % config.snapshot_every == 0))
        {
            report.push_snapshot(epoch, model, &config.probes)?;
        }
        if !loss.is_finite() {
            report.diverged = true;
            report.finish(model);
            return Err(TrainError::NonFinite {
                epoch,
                report: Box::new(report),
            });
        }
        if loss > config.divergence_threshold {
            report.diverged = true;
            report.finish(model);
            return Err(TrainError::Diverged {
                epoch,
                loss,
                report: Box::new(report),
            });
        }
    }
    report.finish(model);
    Ok(report)
}

/// Constant allocation estimated on one contiguous window of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimate {
    /// Index of the window's first sample in time order.
    pub start: usize,
    /// One past the window's last sample.
    pub end: usize,
    pub gamma: Vec<f64>,
    pub final_loss: f64,
}

/// Fits a fresh constant allocation on each consecutive window of
/// `window` samples (in time order), tracking allocations that change over
/// the dataset.
pub fn fit_windowed(
    samples: &[InteractionSample],
    setup: &FilterSetup,
    config: &TrainConfig,
    window: usize,
) -> Result<Vec<WindowEstimate>, TrainError> {
    if window == 0 {
        return Err(TrainError::Config("window length must be positive".into()));
    }
    let mut ordered: Vec<&InteractionSample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.t.unwrap_or(0.0).total_cmp(&b.t.unwrap_or(0.0)));
    let spec = ModelSpec::Constant {
        n_agents: setup.n_agents(),
    };
    ordered
        .chunks(window)
        .enumerate()
        .map(|(w, chunk)| {
            let owned: Vec<InteractionSample> = chunk.iter().map(|s| (*s).clone()).collect();
            let mut model = ResponsibilityModel::init(spec.clone(), config.seed).map_err(crate::Error::from)?;
            let data = PreparedData::new(&owned, setup, &model, config.weights)?;
            let report = fit(&mut model, &data, config)?;
            Ok(WindowEstimate {
                start: w * window,
                end: w * window + chunk.len(),
                gamma: model.eval(&[]).map_err(crate::Error::from)?,
                final_loss: report.final_loss().unwrap_or(f64::NAN),
            })
        })
        .collect()
}
