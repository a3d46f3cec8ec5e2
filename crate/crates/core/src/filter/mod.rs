//! The responsibility-weighted multi-agent safety filter.
//!
//! Solves
//!
//! ```text
//! min_{u, ε}  Σᵢ γᵢ‖uᵢ − uᵢᵈᵉˢ‖² + β₁‖uᵢ‖²  +  β₂ε²
//! s.t.        Σᵢ aᵢᵀuᵢ + c ≥ −ε,   lᵢ ≤ uᵢ ≤ hᵢ,   ε ≥ 0
//! ```
//!
//! The Hessian is diagonal and there is a single general inequality, so the
//! optimum is characterised by one scalar multiplier `λ ≥ 0` on the CBF row:
//! every control coordinate is the clamp of its unconstrained minimiser shifted
//! along the row, and the row residual is nondecreasing and piecewise linear in
//! `λ`. The active-set method below walks the sorted box-bound breakpoints of
//! that residual; each breakpoint crossed is one active-set pivot.

mod diff;

pub use diff::{differentiate_filter, FilterJacobians};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::CbfLinearConstraint;
use crate::dynamics::AgentSpec;

/// Active-set pivot cap.
pub const MAX_PIVOTS: usize = 100;
/// KKT residual tolerance used when classifying constraints.
pub const KKT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("responsibility vector has {got} entries, expected {expected}")]
    GammaLength { expected: usize, got: usize },
    #[error("responsibility entries must lie in [0, 1] and sum to 1 (sum {sum})")]
    GammaNotOnSimplex { sum: f64 },
    #[error("β₁ must be nonnegative and β₂ positive (got β₁ = {beta1}, β₂ = {beta2})")]
    BadWeights { beta1: f64, beta2: f64 },
    #[error("agent {agent} has γ + β₁ = 0; the filter has no unique solution")]
    DegenerateAgent { agent: usize },
    #[error("control box is infeasible in coordinate {index} ({lower} > {upper})")]
    Infeasible { index: usize, lower: f64, upper: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("active-set method exceeded {0} pivots")]
    NonConvergence(usize),
}

/// Regularization on control magnitude (β₁) and on the slack (β₂).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl FilterWeights {
    pub fn validate(self) -> Result<(), FilterError> {
        if self.beta1 >= 0.0 && self.beta2 > 0.0 && self.beta1.is_finite() && self.beta2.is_finite() {
            Ok(())
        } else {
            Err(FilterError::BadWeights {
                beta1: self.beta1,
                beta2: self.beta2,
            })
        }
    }
}

impl Default for FilterWeights {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 600.0,
        }
    }
}

/// One instance of the safety-filter QP. Controls are stacked in agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterProblem {
    control_dims: Vec<usize>,
    desired: Vec<f64>,
    gamma: Vec<f64>,
    weights: FilterWeights,
    cbf_coeffs: Vec<f64>,
    cbf_offset: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl FilterProblem {
    pub fn new(
        constraint: &CbfLinearConstraint,
        desired: &[f64],
        gamma: &[f64],
        weights: FilterWeights,
        agents: &[AgentSpec],
    ) -> Result<Self, FilterError> {
        let control_dims = constraint.control_dims();
        if agents.len() != control_dims.len()
            || agents
                .iter()
                .zip(&control_dims)
                .any(|(a, &d)| a.control_dim != d)
        {
            return Err(FilterError::Dimension(
                "agent specs do not match constraint".into(),
            ));
        }
        let lower = agents
            .iter()
            .flat_map(|a| a.control_lower.iter().copied())
            .collect();
        let upper = agents
            .iter()
            .flat_map(|a| a.control_upper.iter().copied())
            .collect();
        Self::from_parts(
            control_dims,
            desired.to_vec(),
            gamma.to_vec(),
            weights,
            constraint.stacked(),
            constraint.offset,
            lower,
            upper,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        control_dims: Vec<usize>,
        desired: Vec<f64>,
        gamma: Vec<f64>,
        weights: FilterWeights,
        cbf_coeffs: Vec<f64>,
        cbf_offset: f64,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, FilterError> {
        let m: usize = control_dims.iter().sum();
        for (name, len) in [
            ("desired controls", desired.len()),
            ("CBF coefficients", cbf_coeffs.len()),
            ("lower bounds", lower.len()),
            ("upper bounds", upper.len()),
        ] {
            if len != m {
                return Err(FilterError::Dimension(format!(
                    "{name} have length {len}, expected {m}"
                )));
            }
        }
        if gamma.len() != control_dims.len() {
            return Err(FilterError::GammaLength {
                expected: control_dims.len(),
                got: gamma.len(),
            });
        }
        if desired.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("desired controls"));
        }
        if cbf_coeffs.iter().any(|v| !v.is_finite()) || !cbf_offset.is_finite() {
            return Err(FilterError::NonFinite("CBF constraint"));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("responsibility vector"));
        }
        let sum: f64 = gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || gamma.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
            return Err(FilterError::GammaNotOnSimplex { sum });
        }
        weights.validate()?;
        for (agent, &g) in gamma.iter().enumerate() {
            if g + weights.beta1 <= 0.0 {
                return Err(FilterError::DegenerateAgent { agent });
            }
        }
        for (index, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo <= hi) {
                return Err(FilterError::Infeasible {
                    index,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self {
            control_dims,
            desired,
            gamma,
            weights,
            cbf_coeffs,
            cbf_offset,
            lower,
            upper,
        })
    }

    pub fn control_dims(&self) -> &[usize] {
        &self.control_dims
    }

    pub fn n_agents(&self) -> usize {
        self.control_dims.len()
    }

    pub fn n_controls(&self) -> usize {
        self.desired.len()
    }

    pub fn desired(&self) -> &[f64] {
        &self.desired
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn weights(&self) -> FilterWeights {
        self.weights
    }

    pub fn cbf_coeffs(&self) -> &[f64] {
        &self.cbf_coeffs
    }

    pub fn cbf_offset(&self) -> f64 {
        self.cbf_offset
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Agent index owning each stacked control coordinate.
    pub fn owners(&self) -> Vec<usize> {
        self.control_dims
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect()
    }

    /// Same problem with a different responsibility vector.
    pub fn with_gamma(&self, gamma: &[f64]) -> Result<Self, FilterError> {
        Self::from_parts(
            self.control_dims.clone(),
            self.desired.clone(),
            gamma.to_vec(),
            self.weights,
            self.cbf_coeffs.clone(),
            self.cbf_offset,
            self.lower.clone(),
            self.upper.clone(),
        )
    }

    /// Same problem with different desired controls.
    pub fn with_desired(&self, desired: &[f64]) -> Result<Self, FilterError> {
        Self::from_parts(
            self.control_dims.clone(),
            desired.to_vec(),
            self.gamma.clone(),
            self.weights,
            self.cbf_coeffs.clone(),
            self.cbf_offset,
            self.lower.clone(),
            self.upper.clone(),
        )
    }

    /// Objective value at stacked controls `u` and slack `eps`.
    pub fn objective(&self, u: &[f64], eps: f64) -> f64 {
        let owners = self.owners();
        let mut total = self.weights.beta2 * eps * eps;
        for (j, &uj) in u.iter().enumerate() {
            let g = self.gamma[owners[j]];
            let d = uj - self.desired[j];
            total += g * d * d + self.weights.beta1 * uj * uj;
        }
        total
    }

    /// `Σ aᵢᵀuᵢ + c`.
    pub fn constraint_value(&self, u: &[f64]) -> f64 {
        self.cbf_offset
            + self
                .cbf_coeffs
                .iter()
                .zip(u)
                .map(|(a, x)| a * x)
                .sum::<f64>()
    }

    /// Per-coordinate curvature `γ + β₁` (half the objective Hessian diagonal).
    fn curvature(&self, owners: &[usize]) -> Vec<f64> {
        owners
            .iter()
            .map(|&i| self.gamma[i] + self.weights.beta1)
            .collect()
    }
}

/// Where each stacked control coordinate sits relative to its box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundState {
    Free,
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    /// CBF row active with a strictly positive multiplier.
    pub cbf: bool,
    /// Bound status per control coordinate; weakly active bounds are `Free`.
    pub bounds: Vec<BoundState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSolution {
    pub controls: Vec<f64>,
    pub slack: f64,
    pub active: ActiveSet,
    /// Multiplier of the CBF row (`λ ≥ 0`).
    pub cbf_multiplier: f64,
    /// Multipliers of `u ≥ l`, per coordinate.
    pub lower_multipliers: Vec<f64>,
    /// Multipliers of `u ≤ h`, per coordinate.
    pub upper_multipliers: Vec<f64>,
    /// Multiplier of `ε ≥ 0`.
    pub slack_multiplier: f64,
    pub pivots: usize,
}

impl FilterSolution {
    pub fn control(&self, problem: &FilterProblem, agent: usize) -> &[f64] {
        let start: usize = problem.control_dims[..agent].iter().sum();
        &self.controls[start..start + problem.control_dims[agent]]
    }

    /// Largest violation among the four KKT condition groups.
    pub fn kkt_residual(&self, problem: &FilterProblem) -> KktResidual {
        let owners = problem.owners();
        let w = problem.weights;
        let lambda = self.cbf_multiplier;
        let mut stationarity: f64 = 0.0;
        let mut primal: f64 = 0.0;
        let mut dual: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        for (j, &u) in self.controls.iter().enumerate() {
            let g = problem.gamma[owners[j]];
            let grad = 2.0 * (g + w.beta1) * u - 2.0 * g * problem.desired[j];
            let r = grad - lambda * problem.cbf_coeffs[j] - self.lower_multipliers[j]
                + self.upper_multipliers[j];
            stationarity = stationarity.max(r.abs());
            primal = primal
                .max(problem.lower[j] - u)
                .max(u - problem.upper[j]);
            dual = dual
                .max(-self.lower_multipliers[j])
                .max(-self.upper_multipliers[j]);
            complementarity = complementarity
                .max((self.lower_multipliers[j] * (u - problem.lower[j])).abs())
                .max((self.upper_multipliers[j] * (problem.upper[j] - u)).abs());
        }
        let slack_stat = 2.0 * w.beta2 * self.slack - lambda - self.slack_multiplier;
        stationarity = stationarity.max(slack_stat.abs());
        let row = problem.constraint_value(&self.controls) + self.slack;
        primal = primal.max(-row).max(-self.slack);
        dual = dual.max(-lambda).max(-self.slack_multiplier);
        complementarity = complementarity
            .max((lambda * row).abs())
            .max((self.slack_multiplier * self.slack).abs());
        KktResidual {
            stationarity,
            primal,
            dual,
            complementarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Controls and slack as functions of the CBF multiplier.
struct MultiplierPath<'a> {
    problem: &'a FilterProblem,
    curvature: Vec<f64>,
    /// Unconstrained minimiser per coordinate, before clamping.
    base: Vec<f64>,
}

impl<'a> MultiplierPath<'a> {
    fn new(problem: &'a FilterProblem) -> Self {
        let owners = problem.owners();
        let curvature = problem.curvature(&owners);
        let base = owners
            .iter()
            .enumerate()
            .map(|(j, &i)| problem.gamma[i] * problem.desired[j] / curvature[j])
            .collect();
        Self {
            problem,
            curvature,
            base,
        }
    }

    fn unclamped(&self, j: usize, lambda: f64) -> f64 {
        self.base[j] + lambda * self.problem.cbf_coeffs[j] / (2.0 * self.curvature[j])
    }

    fn control(&self, j: usize, lambda: f64) -> f64 {
        self.unclamped(j, lambda)
            .clamp(self.problem.lower[j], self.problem.upper[j])
    }

    /// Row residual `Σ aⱼuⱼ(λ) + c + ε(λ)`; nondecreasing in λ.
    fn residual(&self, lambda: f64) -> f64 {
        let p = self.problem;
        let mut total = p.cbf_offset + lambda / (2.0 * p.weights.beta2);
        for j in 0..self.base.len() {
            total += p.cbf_coeffs[j] * self.control(j, lambda);
        }
        total
    }

    /// λ values where some coordinate enters or leaves its box.
    fn breakpoints(&self) -> Vec<f64> {
        let p = self.problem;
        let mut points = Vec::new();
        for j in 0..self.base.len() {
            let a = p.cbf_coeffs[j];
            if a == 0.0 {
                continue;
            }
            for bound in [p.lower[j], p.upper[j]] {
                if bound.is_finite() {
                    let t = 2.0 * self.curvature[j] * (bound - self.base[j]) / a;
                    if t > 0.0 && t.is_finite() {
                        points.push(t);
                    }
                }
            }
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        points
    }

    /// Solves the row equation exactly on a segment whose free set is that of `probe`.
    fn segment_root(&self, probe: f64) -> f64 {
        let p = self.problem;
        let mut fixed = p.cbf_offset;
        let mut slope = 1.0 / (2.0 * p.weights.beta2);
        for j in 0..self.base.len() {
            let a = p.cbf_coeffs[j];
            let raw = self.unclamped(j, probe);
            if raw <= p.lower[j] {
                fixed += a * p.lower[j];
            } else if raw >= p.upper[j] {
                fixed += a * p.upper[j];
            } else {
                fixed += a * self.base[j];
                slope += a * a / (2.0 * self.curvature[j]);
            }
        }
        -fixed / slope
    }
}

/// Solves the safety-filter QP.
pub fn solve_filter(problem: &FilterProblem) -> Result<FilterSolution, FilterError> {
    let path = MultiplierPath::new(problem);
    let mut pivots = 0;
    let lambda = if path.residual(0.0) >= 0.0 {
        0.0
    } else {
        let points = path.breakpoints();
        let mut left = 0.0;
        let mut found = None;
        for right in points.iter().copied().chain(std::iter::once(f64::INFINITY)) {
            let probe = if right.is_finite() {
                0.5 * (left + right)
            } else {
                left + 1.0
            };
            let root = path.segment_root(probe);
            if root <= right || !right.is_finite() {
                found = Some(root.clamp(left, right));
                break;
            }
            pivots += 1;
            if pivots > MAX_PIVOTS {
                return Err(FilterError::NonConvergence(MAX_PIVOTS));
            }
            left = right;
        }
        found.ok_or(FilterError::NonConvergence(MAX_PIVOTS))?
    };

    let owners = problem.owners();
    let n = problem.n_controls();
    let mut controls = Vec::with_capacity(n);
    let mut lower_multipliers = vec![0.0; n];
    let mut upper_multipliers = vec![0.0; n];
    let mut bounds = Vec::with_capacity(n);
    for j in 0..n {
        let raw = path.unclamped(j, lambda);
        let u = path.control(j, lambda);
        let h = path.curvature[j];
        let g = problem.gamma[owners[j]];
        // From 2h·u − 2γ·uᵈᵉˢ − λa − μ_lo + μ_hi = 0 at the bound.
        let state = if raw > problem.upper[j] {
            upper_multipliers[j] =
                2.0 * g * problem.desired[j] + lambda * problem.cbf_coeffs[j] - 2.0 * h * u;
            strong(upper_multipliers[j], BoundState::AtUpper)
        } else if raw < problem.lower[j] {
            lower_multipliers[j] =
                2.0 * h * u - 2.0 * g * problem.desired[j] - lambda * problem.cbf_coeffs[j];
            strong(lower_multipliers[j], BoundState::AtLower)
        } else {
            BoundState::Free
        };
        controls.push(u);
        bounds.push(state);
    }
    let slack = lambda / (2.0 * problem.weights.beta2);
    Ok(FilterSolution {
        controls,
        slack,
        active: ActiveSet {
            cbf: lambda > KKT_TOLERANCE,
            bounds,
        },
        cbf_multiplier: lambda,
        lower_multipliers,
        upper_multipliers,
        slack_multiplier: 0.0,
        pivots,
    })
}

fn strong(multiplier: f64, state: BoundState) -> BoundState {
    if multiplier > KKT_TOLERANCE {
        state
    } else {
        BoundState::Free
    }
}

/// Solves each problem independently; results come back in input order and a
/// failing element does not affect the others.
pub fn solve_filter_batch(problems: &[FilterProblem]) -> Vec<Result<FilterSolution, FilterError>> {
    problems.par_iter().map(solve_filter).collect()
}
