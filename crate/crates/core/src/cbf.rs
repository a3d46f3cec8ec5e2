//! Barrier functions and the linear-in-control CBF inequality.
//!
//! For a relative-degree-1 system the inequality is
//! `∇b(x)ᵀ[f̃(x) + Σ gᵢ(x)uᵢ] + α(b(x)) ≥ −ε`. For relative degree 2 with linear
//! class-𝒦∞ gains `k₁, k₂` it becomes `b̈ + (k₁+k₂)ḃ + k₁k₂b ≥ −ε`. Either way
//! it is stored as `Σ aᵢᵀuᵢ + c ≥ −ε`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlAffine, PositionLayout};

#[derive(Debug, Error, PartialEq)]
pub enum CbfError {
    #[error("barrier margin must be positive, got {0}")]
    NonPositiveMargin(f64),
    #[error("ellipse semi-axes must be positive, got ({0}, {1})")]
    NonPositiveAxes(f64, f64),
    #[error("class-K gain must be positive, got {0}")]
    NonPositiveGain(f64),
    #[error("soft-min temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("distance barrier needs at least two agents")]
    TooFewAgents,
    #[error("system has relative degree {system}, but {chain} class-K functions were given")]
    DegreeMismatch { system: usize, chain: usize },
    #[error("high-order constraint needs the barrier Hessian")]
    MissingHessian,
    #[error("barrier depends on agent {agent}'s control directly; not relative degree 2")]
    NotRelativeDegreeTwo { agent: usize },
    #[error("state has length {got}, system expects {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("barrier {what} disagrees with finite differences (relative error {error:.3e})")]
    FiniteDifferenceMismatch { what: &'static str, error: f64 },
}

/// A scalar safety measure `b(x)` with safe set `{b ≥ 0}`.
pub trait Barrier: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Required only for relative-degree-2 assembly.
    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>>;
}

/// How pairwise barriers are combined when more than two agents interact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairAggregation {
    /// `−(1/τ) log Σ exp(−τ b_pq)`, smooth everywhere.
    SoftMin { temperature: f64 },
    /// Exact minimum over pairs; the gradient is that of the minimizing pair.
    HardMin,
}

impl Default for PairAggregation {
    fn default() -> Self {
        PairAggregation::SoftMin { temperature: 10.0 }
    }
}

/// `‖p_i − p_j‖² − margin²` over the closest pair of agents.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDistanceBarrier {
    layout: PositionLayout,
    margin: f64,
    aggregation: PairAggregation,
    pairs: Vec<(usize, usize)>,
}

pub fn make_pairwise_distance_barrier(
    layout: PositionLayout,
    margin: f64,
    aggregation: PairAggregation,
) -> Result<PairwiseDistanceBarrier, CbfError> {
    if !(margin > 0.0) {
        return Err(CbfError::NonPositiveMargin(margin));
    }
    if layout.n_agents < 2 {
        return Err(CbfError::TooFewAgents);
    }
    if let PairAggregation::SoftMin { temperature } = aggregation {
        if !(temperature > 0.0) {
            return Err(CbfError::NonPositiveTemperature(temperature));
        }
    }
    let n = layout.n_agents;
    let pairs = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    Ok(PairwiseDistanceBarrier {
        layout,
        margin,
        aggregation,
        pairs,
    })
}

impl PairwiseDistanceBarrier {
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn aggregation(&self) -> PairAggregation {
        self.aggregation
    }

    /// Same pairs and margin, different aggregation.
    pub fn with_aggregation(&self, aggregation: PairAggregation) -> Self {
        Self {
            aggregation,
            ..self.clone()
        }
    }

    fn pair_value(&self, x: &DVector<f64>, (i, j): (usize, usize)) -> f64 {
        let mut d2 = 0.0;
        for k in 0..self.layout.position_dim {
            let d = x[self.layout.position_index(i, k)] - x[self.layout.position_index(j, k)];
            d2 += d * d;
        }
        d2 - self.margin * self.margin
    }

    fn pair_gradient(&self, x: &DVector<f64>, (i, j): (usize, usize)) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        for k in 0..self.layout.position_dim {
            let (pi, pj) = (
                self.layout.position_index(i, k),
                self.layout.position_index(j, k),
            );
            let d = x[pi] - x[pj];
            g[pi] = 2.0 * d;
            g[pj] = -2.0 * d;
        }
        g
    }

    fn pair_hessian(&self, n: usize, (i, j): (usize, usize)) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(n, n);
        for k in 0..self.layout.position_dim {
            let (pi, pj) = (
                self.layout.position_index(i, k),
                self.layout.position_index(j, k),
            );
            h[(pi, pi)] = 2.0;
            h[(pj, pj)] = 2.0;
            h[(pi, pj)] = -2.0;
            h[(pj, pi)] = -2.0;
        }
        h
    }

    /// Soft-min weights per pair (they sum to one), with the aggregated value.
    fn soft_weights(&self, x: &DVector<f64>, temperature: f64) -> (Vec<f64>, f64) {
        let values: Vec<f64> = self.pairs.iter().map(|&p| self.pair_value(x, p)).collect();
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let exps: Vec<f64> = values
            .iter()
            .map(|v| (-temperature * (v - min)).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        let value = min - total.ln() / temperature;
        (exps.into_iter().map(|e| e / total).collect(), value)
    }

    fn closest_pair(&self, x: &DVector<f64>) -> (usize, usize) {
        let mut best = self.pairs[0];
        let mut best_value = f64::INFINITY;
        for &p in &self.pairs {
            let v = self.pair_value(x, p);
            if v < best_value {
                best_value = v;
                best = p;
            }
        }
        best
    }
}

impl Barrier for PairwiseDistanceBarrier {
    fn value(&self, x: &DVector<f64>) -> f64 {
        if self.pairs.len() == 1 {
            return self.pair_value(x, self.pairs[0]);
        }
        match self.aggregation {
            PairAggregation::SoftMin { temperature } => self.soft_weights(x, temperature).1,
            PairAggregation::HardMin => self.pair_value(x, self.closest_pair(x)),
        }
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.pairs.len() == 1 {
            return self.pair_gradient(x, self.pairs[0]);
        }
        match self.aggregation {
            PairAggregation::SoftMin { temperature } => {
                let (weights, _) = self.soft_weights(x, temperature);
                let mut g = DVector::zeros(x.len());
                for (&p, w) in self.pairs.iter().zip(weights) {
                    g += self.pair_gradient(x, p) * w;
                }
                g
            }
            PairAggregation::HardMin => self.pair_gradient(x, self.closest_pair(x)),
        }
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = x.len();
        if self.pairs.len() == 1 {
            return Some(self.pair_hessian(n, self.pairs[0]));
        }
        Some(match self.aggregation {
            PairAggregation::SoftMin { temperature } => {
                // Σ w_k H_k − τ (Σ w_k g_k g_kᵀ − ḡ ḡᵀ)
                let (weights, _) = self.soft_weights(x, temperature);
                let mut h = DMatrix::zeros(n, n);
                let mut mean_grad = DVector::zeros(n);
                for (&p, &w) in self.pairs.iter().zip(&weights) {
                    let g = self.pair_gradient(x, p);
                    h += self.pair_hessian(n, p) * w;
                    h -= (&g * g.transpose()) * (temperature * w);
                    mean_grad += g * w;
                }
                h += (&mean_grad * mean_grad.transpose()) * temperature;
                h
            }
            PairAggregation::HardMin => self.pair_hessian(n, self.closest_pair(x)),
        })
    }
}

/// `r_lon²/a₁² + r_lat²/a₂² − 1` over the first two coordinates of a relative state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseBarrier {
    a1: f64,
    a2: f64,
}

pub fn make_ellipse_barrier(a1: f64, a2: f64) -> Result<EllipseBarrier, CbfError> {
    if !(a1 > 0.0 && a2 > 0.0) {
        return Err(CbfError::NonPositiveAxes(a1, a2));
    }
    Ok(EllipseBarrier { a1, a2 })
}

impl EllipseBarrier {
    pub fn axes(&self) -> (f64, f64) {
        (self.a1, self.a2)
    }
}

impl Barrier for EllipseBarrier {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (x[0] / self.a1).powi(2) + (x[1] / self.a2).powi(2) - 1.0
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[0] = 2.0 * x[0] / (self.a1 * self.a1);
        g[1] = 2.0 * x[1] / (self.a2 * self.a2);
        g
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(x.len(), x.len());
        h[(0, 0)] = 2.0 / (self.a1 * self.a1);
        h[(1, 1)] = 2.0 / (self.a2 * self.a2);
        Some(h)
    }
}

/// Linear class-𝒦∞ function `α(s) = k·s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassKappaLinear {
    gain: f64,
}

impl ClassKappaLinear {
    pub fn new(gain: f64) -> Result<Self, CbfError> {
        if !(gain > 0.0) {
            return Err(CbfError::NonPositiveGain(gain));
        }
        Ok(Self { gain })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn apply(&self, s: f64) -> f64 {
        self.gain * s
    }
}

/// One class-𝒦 function per derivative order of the barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaChain(Vec<ClassKappaLinear>);

impl AlphaChain {
    pub fn first_order(k: f64) -> Result<Self, CbfError> {
        Ok(Self(vec![ClassKappaLinear::new(k)?]))
    }

    pub fn second_order(k1: f64, k2: f64) -> Result<Self, CbfError> {
        Ok(Self(vec![
            ClassKappaLinear::new(k1)?,
            ClassKappaLinear::new(k2)?,
        ]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.0.iter().map(|k| k.gain()).collect()
    }
}

/// `Σᵢ aᵢᵀuᵢ + c ≥ −ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfLinearConstraint {
    pub coeffs: Vec<DVector<f64>>,
    pub offset: f64,
}

impl CbfLinearConstraint {
    /// Left-hand side `Σ aᵢᵀuᵢ + c` for per-agent controls.
    pub fn evaluate(&self, controls: &[DVector<f64>]) -> f64 {
        self.offset
            + self
                .coeffs
                .iter()
                .zip(controls)
                .map(|(a, u)| a.dot(u))
                .sum::<f64>()
    }

    /// Coefficients stacked in agent order.
    pub fn stacked(&self) -> Vec<f64> {
        self.coeffs
            .iter()
            .flat_map(|a| a.iter().copied())
            .collect()
    }

    pub fn control_dims(&self) -> Vec<usize> {
        self.coeffs.iter().map(|a| a.len()).collect()
    }
}

/// Linearizes the (possibly high-order) CBF inequality at `x`.
pub fn assemble_constraint(
    system: &dyn ControlAffine,
    barrier: &dyn Barrier,
    alpha: &AlphaChain,
    x: &DVector<f64>,
) -> Result<CbfLinearConstraint, CbfError> {
    if x.len() != system.state_dim() {
        return Err(CbfError::StateLength {
            expected: system.state_dim(),
            got: x.len(),
        });
    }
    let degree = system.relative_degree();
    if alpha.len() != degree {
        return Err(CbfError::DegreeMismatch {
            system: degree,
            chain: alpha.len(),
        });
    }
    let b = barrier.value(x);
    let grad = barrier.gradient(x);
    let drift = system.drift(x);
    let n_agents = system.n_agents();

    match degree {
        1 => {
            let coeffs = (0..n_agents)
                .map(|i| system.actuation(i, x).transpose() * &grad)
                .collect();
            Ok(CbfLinearConstraint {
                coeffs,
                offset: grad.dot(&drift) + alpha.0[0].apply(b),
            })
        }
        _ => {
            let hess = barrier.hessian(x).ok_or(CbfError::MissingHessian)?;
            let scale = grad.amax().max(1.0);
            for i in 0..n_agents {
                let direct = system.actuation(i, x).transpose() * &grad;
                if direct.amax() > 1e-12 * scale {
                    return Err(CbfError::NotRelativeDegreeTwo { agent: i });
                }
            }
            let (k1, k2) = (alpha.0[0].gain(), alpha.0[1].gain());
            // ∇ḃ = ∇²b f̃ + J_f̃ᵀ ∇b, since ∇b is orthogonal to every gᵢ.
            let grad_bdot = &hess * &drift + system.drift_jacobian(x).transpose() * &grad;
            let bdot = grad.dot(&drift);
            let coeffs = (0..n_agents)
                .map(|i| system.actuation(i, x).transpose() * &grad_bdot)
                .collect();
            Ok(CbfLinearConstraint {
                coeffs,
                offset: grad_bdot.dot(&drift) + (k1 + k2) * bdot + k1 * k2 * b,
            })
        }
    }
}

/// Registration gate for user-supplied barriers: the closed-form gradient
/// (and Hessian, when provided) must match central finite differences.
pub fn validate_barrier(
    barrier: &dyn Barrier,
    states: &[DVector<f64>],
    rel_tol: f64,
) -> Result<(), CbfError> {
    const STEP: f64 = 1e-6;
    for x in states {
        let n = x.len();
        let grad = barrier.gradient(x);
        let mut fd = DVector::zeros(n);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += STEP;
            xm[k] -= STEP;
            fd[k] = (barrier.value(&xp) - barrier.value(&xm)) / (2.0 * STEP);
        }
        let error = relative_error(&grad, &fd);
        if error > rel_tol {
            return Err(CbfError::FiniteDifferenceMismatch {
                what: "gradient",
                error,
            });
        }
        if let Some(hess) = barrier.hessian(x) {
            let mut fd = DMatrix::zeros(n, n);
            for k in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += STEP;
                xm[k] -= STEP;
                let col = (barrier.gradient(&xp) - barrier.gradient(&xm)) / (2.0 * STEP);
                fd.set_column(k, &col);
            }
            let diff = (&hess - &fd).amax();
            let error = diff / hess.amax().max(fd.amax()).max(1.0);
            if error > rel_tol {
                return Err(CbfError::FiniteDifferenceMismatch {
                    what: "Hessian",
                    error,
                });
            }
        }
    }
    Ok(())
}

fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1.0)
}
