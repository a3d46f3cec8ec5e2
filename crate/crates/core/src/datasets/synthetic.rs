//! Independent state/desired-control draws projected through a known filter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use super::{GammaTruth, InteractionSample};
use crate::setup::{FilterSetup, SystemConfig};

/// Uniform sampling ranges. Single integrators draw only a position per
/// agent; double integrators draw a planar position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub desired: [f64; 2],
}

impl SamplingBox {
    /// Boxes that place most samples near the safe-set boundary so that the
    /// constraint is active for a large share of them.
    pub fn for_system(system: &SystemConfig) -> Self {
        match system {
            SystemConfig::SingleIntegrator1d { .. } => Self {
                position: [-1.0, 1.0],
                velocity: [0.0, 0.0],
                desired: [-2.0, 2.0],
            },
            SystemConfig::DoubleIntegrator2d { n_agents } => {
                let half = 0.9 * (*n_agents as f64).sqrt();
                Self {
                    position: [-half, half],
                    velocity: [-1.0, 1.0],
                    desired: [-2.0, 2.0],
                }
            }
            SystemConfig::RelativeDoubleIntegrator => Self {
                position: [-6.0, 6.0],
                velocity: [-2.0, 2.0],
                desired: [-2.0, 2.0],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian noise added to each control coordinate.
    pub noise_std: f64,
    pub sampling: SamplingBox,
}

impl SyntheticConfig {
    /// Noise variance 0.1 per control dimension and the system's default box.
    pub fn new(system: &SystemConfig, n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            noise_std: 0.1f64.sqrt(),
            sampling: SamplingBox::for_system(system),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] < range[1] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Draws `n_samples` states and desired controls, filters them with
/// `truth`'s allocation and adds noise to the filtered controls. Sample `k`
/// carries `t = k` so schedules can be recovered by windowing.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    setup: &FilterSetup,
    truth: &GammaTruth,
) -> Result<Vec<InteractionSample>, crate::Error> {
    if config.n_samples == 0 {
        return Err(crate::Error::Config("sample count must be positive".into()));
    }
    if !(config.noise_std >= 0.0) {
        return Err(crate::Error::Config("noise must be nonnegative".into()));
    }
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| crate::Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = setup.control_dims();
    let n_agents = setup.n_agents();
    let agent_dim = setup.agent_state_dim();
    let b = config.sampling;

    let mut samples = Vec::with_capacity(config.n_samples);
    for k in 0..config.n_samples {
        let mut x = Vec::with_capacity(n_agents * agent_dim);
        for _ in 0..n_agents {
            if agent_dim == 1 {
                x.push(uniform(&mut rng, b.position));
            } else {
                x.push(uniform(&mut rng, b.position));
                x.push(uniform(&mut rng, b.position));
                x.push(uniform(&mut rng, b.velocity));
                x.push(uniform(&mut rng, b.velocity));
            }
        }
        let desired: Vec<f64> = (0..dims.iter().sum::<usize>())
            .map(|_| uniform(&mut rng, b.desired))
            .collect();
        let gamma = truth.gamma(k, &x)?;
        let solution = setup.solve(&x, &desired, &gamma)?;
        let observed: Vec<f64> = solution
            .controls
            .iter()
            .map(|u| u + noise.sample(&mut rng))
            .collect();
        samples.push(InteractionSample {
            trajectory_id: None,
            t: Some(k as f64),
            x,
            u: split(&observed, &dims),
            u_des: Some(split(&desired, &dims)),
            tag: Some("synthetic".into()),
        });
    }
    Ok(samples)
}

/// Allocation drawn uniformly from the probability simplex.
pub fn random_simplex_allocation(n_agents: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..n_agents).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

pub(crate) fn split(stacked: &[f64], dims: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in dims {
        out.push(stacked[offset..offset + d].to_vec());
        offset += d;
    }
    out
}
