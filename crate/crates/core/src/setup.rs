//! Serializable description of a complete filter (system, barrier, class-𝒦
//! gains, weights) and the runtime object built from it.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cbf::{
    assemble_constraint, make_ellipse_barrier, make_pairwise_distance_barrier, AlphaChain, Barrier,
    CbfLinearConstraint, PairAggregation,
};
use crate::dynamics::{
    make_double_integrator_2d, make_relative_double_integrator, make_single_integrator_1d,
    AgentSpec, ControlAffine, IntegratorSystem, DEFAULT_CONTROL_BOUND,
};
use crate::filter::{solve_filter, FilterProblem, FilterSolution, FilterWeights};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SystemConfig {
    SingleIntegrator1d { n_agents: usize },
    DoubleIntegrator2d { n_agents: usize },
    /// Two planar double integrators; samples store both agents' states and
    /// the filter runs on their difference.
    RelativeDoubleIntegrator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BarrierConfig {
    PairwiseDistance {
        margin: f64,
        #[serde(default)]
        aggregation: PairAggregation,
    },
    Ellipse {
        a1: f64,
        a2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSetupConfig {
    pub system: SystemConfig,
    pub barrier: BarrierConfig,
    /// One linear class-𝒦 gain per derivative order of the barrier.
    pub alpha_gains: Vec<f64>,
    pub weights: FilterWeights,
    pub control_bound: f64,
}

impl FilterSetupConfig {
    /// Two 1D single integrators kept at least one unit apart, `α(s) = s`.
    pub fn two_agent_line() -> Self {
        Self {
            system: SystemConfig::SingleIntegrator1d { n_agents: 2 },
            barrier: BarrierConfig::PairwiseDistance {
                margin: 1.0,
                aggregation: PairAggregation::default(),
            },
            alpha_gains: vec![1.0],
            weights: FilterWeights::default(),
            control_bound: DEFAULT_CONTROL_BOUND,
        }
    }

    /// `n` planar double integrators with a soft-min pairwise distance
    /// barrier and a second-order constraint.
    pub fn planar_swarm(n_agents: usize) -> Self {
        Self {
            system: SystemConfig::DoubleIntegrator2d { n_agents },
            barrier: BarrierConfig::PairwiseDistance {
                margin: 1.0,
                aggregation: PairAggregation::default(),
            },
            alpha_gains: vec![1.0, 1.0],
            weights: FilterWeights::default(),
            control_bound: DEFAULT_CONTROL_BOUND,
        }
    }

    /// Two cars in relative coordinates with the vehicle-sized ellipse.
    pub fn weaving() -> Self {
        Self {
            system: SystemConfig::RelativeDoubleIntegrator,
            barrier: BarrierConfig::Ellipse { a1: 9.22, a2: 1.76 },
            alpha_gains: vec![1.0, 1.0],
            weights: FilterWeights::default(),
            control_bound: DEFAULT_CONTROL_BOUND,
        }
    }
}

/// A ready-to-use filter: maps a stored sample state to a QP instance.
pub struct FilterSetup {
    config: FilterSetupConfig,
    system: IntegratorSystem,
    barrier: Box<dyn Barrier>,
    alpha: AlphaChain,
}

impl std::fmt::Debug for FilterSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterSetup")
            .field("config", &self.config)
            .finish()
    }
}

impl FilterSetup {
    pub fn new(config: FilterSetupConfig) -> Result<Self, Error> {
        let system = match config.system {
            SystemConfig::SingleIntegrator1d { n_agents } => make_single_integrator_1d(n_agents)?,
            SystemConfig::DoubleIntegrator2d { n_agents } => make_double_integrator_2d(n_agents)?,
            SystemConfig::RelativeDoubleIntegrator => make_relative_double_integrator(),
        }
        .with_control_bound(config.control_bound)?;
        let barrier: Box<dyn Barrier> = match config.barrier {
            BarrierConfig::PairwiseDistance {
                margin,
                aggregation,
            } => {
                if config.system == SystemConfig::RelativeDoubleIntegrator {
                    return Err(Error::Config(
                        "relative system uses the ellipse barrier".into(),
                    ));
                }
                Box::new(make_pairwise_distance_barrier(
                    system.position_layout(),
                    margin,
                    aggregation,
                )?)
            }
            BarrierConfig::Ellipse { a1, a2 } => {
                if config.system != SystemConfig::RelativeDoubleIntegrator {
                    return Err(Error::Config(
                        "ellipse barrier needs the relative system".into(),
                    ));
                }
                Box::new(make_ellipse_barrier(a1, a2)?)
            }
        };
        let alpha = match config.alpha_gains.as_slice() {
            [k] => AlphaChain::first_order(*k)?,
            [k1, k2] => AlphaChain::second_order(*k1, *k2)?,
            other => {
                return Err(Error::Config(format!(
                    "expected one or two class-K gains, got {}",
                    other.len()
                )))
            }
        };
        if alpha.len() != system.relative_degree() {
            return Err(Error::Config(format!(
                "system has relative degree {} but {} class-K gains were given",
                system.relative_degree(),
                alpha.len()
            )));
        }
        FilterWeights::validate(config.weights)?;
        Ok(Self {
            config,
            system,
            barrier,
            alpha,
        })
    }

    /// Same filter with different regularization weights.
    pub fn with_weights(&self, weights: FilterWeights) -> Result<Self, Error> {
        Self::new(FilterSetupConfig {
            weights,
            ..self.config.clone()
        })
    }

    pub fn config(&self) -> &FilterSetupConfig {
        &self.config
    }

    pub fn system(&self) -> &IntegratorSystem {
        &self.system
    }

    pub fn barrier(&self) -> &dyn Barrier {
        self.barrier.as_ref()
    }

    pub fn agents(&self) -> &[AgentSpec] {
        self.system.agents()
    }

    pub fn n_agents(&self) -> usize {
        self.system.n_agents()
    }

    pub fn control_dims(&self) -> Vec<usize> {
        self.system.control_dims()
    }

    /// State dimension of a single agent as stored in samples.
    pub fn agent_state_dim(&self) -> usize {
        match self.config.system {
            SystemConfig::SingleIntegrator1d { .. } => 1,
            _ => 4,
        }
    }

    /// Length of the stacked joint state stored in samples.
    pub fn sample_state_dim(&self) -> usize {
        self.agent_state_dim() * self.n_agents()
    }

    /// State the filter operates on: the joint state itself, or `x₂ − x₁`.
    pub fn filter_state(&self, x: &[f64]) -> Result<DVector<f64>, Error> {
        if x.len() != self.sample_state_dim() {
            return Err(Error::Config(format!(
                "state has length {}, expected {}",
                x.len(),
                self.sample_state_dim()
            )));
        }
        Ok(match self.config.system {
            SystemConfig::RelativeDoubleIntegrator => {
                DVector::from_iterator(4, (0..4).map(|k| x[4 + k] - x[k]))
            }
            _ => DVector::from_column_slice(x),
        })
    }

    pub fn barrier_value(&self, x: &[f64]) -> Result<f64, Error> {
        Ok(self.barrier.value(&self.filter_state(x)?))
    }

    pub fn constraint(&self, x: &[f64]) -> Result<CbfLinearConstraint, Error> {
        let s = self.filter_state(x)?;
        Ok(assemble_constraint(
            &self.system,
            self.barrier.as_ref(),
            &self.alpha,
            &s,
        )?)
    }

    pub fn problem(&self, x: &[f64], desired: &[f64], gamma: &[f64]) -> Result<FilterProblem, Error> {
        Ok(FilterProblem::new(
            &self.constraint(x)?,
            desired,
            gamma,
            self.config.weights,
            self.system.agents(),
        )?)
    }

    pub fn solve(&self, x: &[f64], desired: &[f64], gamma: &[f64]) -> Result<FilterSolution, Error> {
        Ok(solve_filter(&self.problem(x, desired, gamma)?)?)
    }
}
