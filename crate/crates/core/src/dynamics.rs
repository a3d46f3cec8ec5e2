//! Multi-agent control-affine systems.
//!
//! Every system here has the form `ẋ = f̃(x) + Σᵢ gᵢ(x) uᵢ`, where `x` stacks
//! the per-agent states and each agent owns a box-bounded control `uᵢ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Control bound used when a scenario does not specify one.
pub const DEFAULT_CONTROL_BOUND: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("agent dimensions must be positive (state {state_dim}, control {control_dim})")]
    ZeroDimension { state_dim: usize, control_dim: usize },
    #[error("control bound length {got} does not match control dimension {expected}")]
    BoundLength { expected: usize, got: usize },
    #[error("control lower bound {lower} exceeds upper bound {upper} in dimension {dim}")]
    InvertedBounds { dim: usize, lower: f64, upper: f64 },
    #[error("at least one agent is required")]
    NoAgents,
    #[error("state has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("joint state of length {len} is not a nonempty multiple of agent dimension {agent_dim}")]
    RaggedJointState { agent_dim: usize, len: usize },
    #[error("control for agent {agent} has length {got}, expected {expected}")]
    ControlLength {
        agent: usize,
        expected: usize,
        got: usize,
    },
}

/// Dimensions and control box of a single agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
}

impl AgentSpec {
    /// Agent with the default symmetric control box.
    pub fn new(state_dim: usize, control_dim: usize) -> Result<Self, DynamicsError> {
        Self::with_bounds(
            state_dim,
            control_dim,
            vec![-DEFAULT_CONTROL_BOUND; control_dim],
            vec![DEFAULT_CONTROL_BOUND; control_dim],
        )
    }

    pub fn with_bounds(
        state_dim: usize,
        control_dim: usize,
        control_lower: Vec<f64>,
        control_upper: Vec<f64>,
    ) -> Result<Self, DynamicsError> {
        if state_dim == 0 || control_dim == 0 {
            return Err(DynamicsError::ZeroDimension {
                state_dim,
                control_dim,
            });
        }
        for bound in [&control_lower, &control_upper] {
            if bound.len() != control_dim {
                return Err(DynamicsError::BoundLength {
                    expected: control_dim,
                    got: bound.len(),
                });
            }
        }
        for (dim, (&lower, &upper)) in control_lower.iter().zip(&control_upper).enumerate() {
            // NaN bounds fail this comparison too.
            if !(lower <= upper) {
                return Err(DynamicsError::InvertedBounds { dim, lower, upper });
            }
        }
        Ok(Self {
            state_dim,
            control_dim,
            control_lower,
            control_upper,
        })
    }

    /// Same agent with a symmetric box `[-bound, bound]` in every dimension.
    pub fn with_symmetric_bound(self, bound: f64) -> Result<Self, DynamicsError> {
        let n = self.control_dim;
        Self::with_bounds(self.state_dim, n, vec![-bound; n], vec![bound; n])
    }
}

/// Stacked states of `n_agents` agents that share a per-agent state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    values: Vec<f64>,
    agent_dim: usize,
}

impl JointState {
    pub fn new(values: Vec<f64>, agent_dim: usize) -> Result<Self, DynamicsError> {
        if agent_dim == 0 || values.is_empty() || values.len() % agent_dim != 0 {
            return Err(DynamicsError::RaggedJointState {
                agent_dim,
                len: values.len(),
            });
        }
        Ok(Self { values, agent_dim })
    }

    pub fn n_agents(&self) -> usize {
        self.values.len() / self.agent_dim
    }

    pub fn agent_dim(&self) -> usize {
        self.agent_dim
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.values[i * self.agent_dim..(i + 1) * self.agent_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Reorders agent blocks: block `k` of the result is block `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.n_agents());
        let mut values = Vec::with_capacity(self.values.len());
        for &src in order {
            values.extend_from_slice(self.agent(src));
        }
        Self {
            values,
            agent_dim: self.agent_dim,
        }
    }

    pub fn swapped(&self, i: usize, j: usize) -> Self {
        let mut order: Vec<usize> = (0..self.n_agents()).collect();
        order.swap(i, j);
        self.permuted(&order)
    }
}

/// Two-agent relative state `r = x₂ − x₁` in lateral/longitudinal coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    pub r_lon: f64,
    pub r_lat: f64,
    pub v_lon: f64,
    pub v_lat: f64,
}

impl RelativeState {
    pub fn from_array(r: [f64; 4]) -> Self {
        Self {
            r_lon: r[0],
            r_lat: r[1],
            v_lon: r[2],
            v_lat: r[3],
        }
    }

    /// Relative state of agent 2 with respect to agent 1, each stored as
    /// `[x_lon, x_lat, ẋ_lon, ẋ_lat]`.
    pub fn between(agent1: &[f64], agent2: &[f64]) -> Self {
        Self::from_array([
            agent2[0] - agent1[0],
            agent2[1] - agent1[1],
            agent2[2] - agent1[2],
            agent2[3] - agent1[3],
        ])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r_lon, self.r_lat, self.v_lon, self.v_lat]
    }

    /// Relabelling the two agents negates the relative state.
    pub fn negated(self) -> Self {
        Self::from_array(self.to_array().map(|v| -v))
    }
}

/// Which coordinates of a state vector are positions, used by distance barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionLayout {
    pub n_agents: usize,
    pub agent_state_dim: usize,
    pub position_dim: usize,
}

impl PositionLayout {
    pub fn position_index(&self, agent: usize, axis: usize) -> usize {
        agent * self.agent_state_dim + axis
    }
}

/// A multi-agent control-affine system `ẋ = f̃(x) + Σᵢ gᵢ(x) uᵢ`.
pub trait ControlAffine: Send + Sync {
    fn agents(&self) -> &[AgentSpec];

    /// Number of time derivatives before the controls appear in a position-only barrier.
    fn relative_degree(&self) -> usize;

    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of the drift, needed for high-order barrier constraints.
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Actuation matrix of agent `agent`, shape `state_dim × control_dim(agent)`.
    fn actuation(&self, agent: usize, x: &DVector<f64>) -> DMatrix<f64>;

    fn n_agents(&self) -> usize {
        self.agents().len()
    }

    fn state_dim(&self) -> usize;

    fn control_dims(&self) -> Vec<usize> {
        self.agents().iter().map(|a| a.control_dim).collect()
    }

    fn total_control_dim(&self) -> usize {
        self.agents().iter().map(|a| a.control_dim).sum()
    }

    /// `ẋ` for per-agent controls.
    fn state_derivative(
        &self,
        x: &DVector<f64>,
        controls: &[DVector<f64>],
    ) -> Result<DVector<f64>, DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::StateLength {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        let mut xdot = self.drift(x);
        for (i, (spec, u)) in self.agents().iter().zip(controls).enumerate() {
            if u.len() != spec.control_dim {
                return Err(DynamicsError::ControlLength {
                    agent: i,
                    expected: spec.control_dim,
                    got: u.len(),
                });
            }
            xdot += self.actuation(i, x) * u;
        }
        Ok(xdot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorKind {
    /// `ẋᵢ = uᵢ` with scalar state per agent.
    SingleIntegrator1d,
    /// Per agent `[p; v]` in the plane with `ṗ = v`, `v̇ = u`.
    DoubleIntegrator2d,
    /// Two planar double integrators expressed through `r = x₂ − x₁`.
    RelativeDoubleIntegrator,
}

/// The integrator families used throughout the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSystem {
    kind: IntegratorKind,
    agents: Vec<AgentSpec>,
    state_dim: usize,
}

pub fn make_single_integrator_1d(n_agents: usize) -> Result<IntegratorSystem, DynamicsError> {
    if n_agents == 0 {
        return Err(DynamicsError::NoAgents);
    }
    let agents = (0..n_agents)
        .map(|_| AgentSpec::new(1, 1))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IntegratorSystem {
        kind: IntegratorKind::SingleIntegrator1d,
        agents,
        state_dim: n_agents,
    })
}

pub fn make_double_integrator_2d(n_agents: usize) -> Result<IntegratorSystem, DynamicsError> {
    if n_agents == 0 {
        return Err(DynamicsError::NoAgents);
    }
    let agents = (0..n_agents)
        .map(|_| AgentSpec::new(4, 2))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IntegratorSystem {
        kind: IntegratorKind::DoubleIntegrator2d,
        agents,
        state_dim: 4 * n_agents,
    })
}

pub fn make_relative_double_integrator() -> IntegratorSystem {
    // The relative state is shared; each agent still owns a 2D control.
    let agent = AgentSpec::new(4, 2).expect("static dimensions");
    IntegratorSystem {
        kind: IntegratorKind::RelativeDoubleIntegrator,
        agents: vec![agent.clone(), agent],
        state_dim: 4,
    }
}

impl IntegratorSystem {
    pub fn kind(&self) -> IntegratorKind {
        self.kind
    }

    /// Replaces every agent's control box with `[-bound, bound]`.
    pub fn with_control_bound(mut self, bound: f64) -> Result<Self, DynamicsError> {
        self.agents = self
            .agents
            .into_iter()
            .map(|a| a.with_symmetric_bound(bound))
            .collect::<Result<_, _>>()?;
        Ok(self)
    }

    pub fn with_agent_specs(mut self, agents: Vec<AgentSpec>) -> Result<Self, DynamicsError> {
        if agents.len() != self.agents.len() {
            return Err(DynamicsError::NoAgents);
        }
        for (old, new) in self.agents.iter().zip(&agents) {
            if old.state_dim != new.state_dim || old.control_dim != new.control_dim {
                return Err(DynamicsError::ControlLength {
                    agent: 0,
                    expected: old.control_dim,
                    got: new.control_dim,
                });
            }
        }
        self.agents = agents;
        Ok(self)
    }

    pub fn position_layout(&self) -> PositionLayout {
        match self.kind {
            IntegratorKind::SingleIntegrator1d => PositionLayout {
                n_agents: self.agents.len(),
                agent_state_dim: 1,
                position_dim: 1,
            },
            IntegratorKind::DoubleIntegrator2d => PositionLayout {
                n_agents: self.agents.len(),
                agent_state_dim: 4,
                position_dim: 2,
            },
            IntegratorKind::RelativeDoubleIntegrator => PositionLayout {
                n_agents: 1,
                agent_state_dim: 4,
                position_dim: 2,
            },
        }
    }
}

impl ControlAffine for IntegratorSystem {
    fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    fn relative_degree(&self) -> usize {
        match self.kind {
            IntegratorKind::SingleIntegrator1d => 1,
            _ => 2,
        }
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.drift_jacobian(x) * x
    }

    fn drift_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim;
        let mut jac = DMatrix::zeros(n, n);
        match self.kind {
            IntegratorKind::SingleIntegrator1d => {}
            IntegratorKind::DoubleIntegrator2d | IntegratorKind::RelativeDoubleIntegrator => {
                for block in 0..n / 4 {
                    let o = 4 * block;
                    jac[(o, o + 2)] = 1.0;
                    jac[(o + 1, o + 3)] = 1.0;
                }
            }
        }
        jac
    }

    fn actuation(&self, agent: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim;
        match self.kind {
            IntegratorKind::SingleIntegrator1d => {
                let mut g = DMatrix::zeros(n, 1);
                g[(agent, 0)] = 1.0;
                g
            }
            IntegratorKind::DoubleIntegrator2d => {
                let mut g = DMatrix::zeros(n, 2);
                g[(4 * agent + 2, 0)] = 1.0;
                g[(4 * agent + 3, 1)] = 1.0;
                g
            }
            IntegratorKind::RelativeDoubleIntegrator => {
                let sign = if agent == 0 { -1.0 } else { 1.0 };
                let mut g = DMatrix::zeros(4, 2);
                g[(2, 0)] = sign;
                g[(3, 1)] = sign;
                g
            }
        }
    }
}

/// One explicit-Euler step of length `dt`.
pub fn euler_step(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    controls: &[DVector<f64>],
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    Ok(x + system.state_derivative(x, controls)? * dt)
}

/// Splits a stacked control vector into per-agent vectors.
pub fn split_controls(stacked: &[f64], dims: &[usize]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in dims {
        out.push(DVector::from_column_slice(&stacked[offset..offset + d]));
        offset += d;
    }
    out
}
