//! Closed-loop two-car lane-swap rollouts.
//!
//! Agent 1 starts in the upper lane and wants the lower one; agent 2 does the
//! opposite. Each step both cars compute their desired controls, the shared
//! filter projects them with the ground-truth allocation, and the joint state
//! advances by one Euler step of two planar double integrators.

use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{desired_lateral_control, desired_longitudinal_control, DesiredPolicyParams};
use super::synthetic::split;
use super::{DatasetError, GammaTruth, InteractionSample};
use crate::dynamics::{euler_step, make_double_integrator_2d, split_controls};
use crate::models::{ModelSpec, ResponsibilityModel};
use crate::setup::{FilterSetup, SystemConfig};

/// Lateral offset of each lane center from the divider (lane width 3.7 m).
pub const LANE_CENTER: f64 = 1.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeavingScenario {
    /// One rear-overtake rollout; the requested count is ignored.
    Single,
    /// Equal speeds, nearly equal longitudinal positions.
    SideBySide,
    /// One car starts behind and faster.
    RearOvertake,
    /// Each trajectory is side-by-side or rear-overtake with equal odds.
    Mixed,
}

impl WeavingScenario {
    pub fn name(&self) -> &'static str {
        match self {
            WeavingScenario::Single => "single",
            WeavingScenario::SideBySide => "side_by_side",
            WeavingScenario::RearOvertake => "rear_overtake",
            WeavingScenario::Mixed => "mixed",
        }
    }
}

impl FromStr for WeavingScenario {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "single" => Ok(Self::Single),
            "side_by_side" => Ok(Self::SideBySide),
            "rear_overtake" => Ok(Self::RearOvertake),
            "mixed" => Ok(Self::Mixed),
            _ => Err(DatasetError::UnknownScenario(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeavingConfig {
    pub count: usize,
    pub seed: u64,
    pub steps: usize,
    pub dt: f64,
    pub noise_std: f64,
    pub policy: DesiredPolicyParams,
    /// Extra `−k·ẋ_lat` term in the desired lateral control so lane changes settle.
    pub lateral_damping: f64,
    /// Initial longitudinal speed range (m/s).
    pub speed_range: [f64; 2],
    /// Initial longitudinal offset of the trailing car in rear-overtake runs (m).
    pub overtake_gap: f64,
    /// Initial speed advantage of the trailing car in rear-overtake runs (m/s).
    pub overtake_speed_gain: f64,
    /// Half-width of the uniform jitter on initial offsets (m) and speed gaps (m/s).
    pub jitter: f64,
}

impl Default for WeavingConfig {
    fn default() -> Self {
        Self {
            count: 20,
            seed: 0,
            steps: 160,
            dt: 0.1,
            noise_std: 0.0,
            policy: DesiredPolicyParams::default(),
            lateral_damping: 4.0,
            speed_range: [8.0, 12.0],
            overtake_gap: 3.0,
            overtake_speed_gain: 2.0,
            jitter: 0.5,
        }
    }
}

/// Ground truth where the faster car bears less responsibility:
/// `γ₁ = ½(1 + tanh(−gain · ṙ_lon))` with `ṙ_lon = ẋ_lon,2 − ẋ_lon,1`.
pub fn weaving_truth_model(gain: f64) -> ResponsibilityModel {
    let spec = ModelSpec::RelativeSymmetric {
        agent_dim: 4,
        hidden: Vec::new(),
    };
    // φ(r) = −(gain/2)·ṙ_lon, so φ(r) − φ(−r) = −gain·ṙ_lon.
    ResponsibilityModel::from_parts(spec, vec![0.0, 0.0, -gain / 2.0, 0.0, 0.0], 0, None)
        .expect("static architecture")
}

/// Rolls out `config.count` trajectories (one for [`WeavingScenario::Single`]).
/// Trajectory `j` uses its own RNG stream, so results do not depend on
/// scheduling.
pub fn generate_weaving_trajectories(
    scenario: WeavingScenario,
    config: &WeavingConfig,
    setup: &FilterSetup,
    truth: &GammaTruth,
) -> Result<Vec<InteractionSample>, crate::Error> {
    if setup.config().system != SystemConfig::RelativeDoubleIntegrator {
        return Err(crate::Error::Config(
            "weaving rollouts need the relative double-integrator filter".into(),
        ));
    }
    let count = match scenario {
        WeavingScenario::Single => 1,
        _ => config.count,
    };
    if count == 0 || config.steps == 0 || !(config.dt > 0.0) || !(config.noise_std >= 0.0) {
        return Err(crate::Error::Config(
            "count, steps and dt must be positive and noise nonnegative".into(),
        ));
    }
    if !config.policy.is_finite() {
        return Err(crate::Error::Config("non-finite policy parameters".into()));
    }
    let trajectories: Vec<Vec<InteractionSample>> = (0..count as u64)
        .into_par_iter()
        .map(|id| rollout(scenario, config, setup, truth, id))
        .collect::<Result<_, _>>()?;
    Ok(trajectories.into_iter().flatten().collect())
}

fn rollout(
    scenario: WeavingScenario,
    config: &WeavingConfig,
    setup: &FilterSetup,
    truth: &GammaTruth,
    id: u64,
) -> Result<Vec<InteractionSample>, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id);
    let kind = match scenario {
        WeavingScenario::Single => WeavingScenario::RearOvertake,
        WeavingScenario::Mixed => {
            if rng.random_bool(0.5) {
                WeavingScenario::SideBySide
            } else {
                WeavingScenario::RearOvertake
            }
        }
        other => other,
    };
    let jitter = |rng: &mut ChaCha8Rng| {
        if config.jitter > 0.0 {
            rng.random_range(-config.jitter..config.jitter)
        } else {
            0.0
        }
    };
    let (lo, hi) = (config.speed_range[0], config.speed_range[1]);
    let base_speed = if lo < hi { rng.random_range(lo..hi) } else { lo };
    // Longitudinal position and speed of agents 1 and 2.
    let (lon, speed) = match kind {
        WeavingScenario::SideBySide => ([0.0, jitter(&mut rng)], [base_speed, base_speed]),
        _ => {
            let gap = config.overtake_gap + jitter(&mut rng);
            let fast = base_speed + config.overtake_speed_gain + 0.2 * jitter(&mut rng);
            if rng.random_bool(0.5) {
                ([-gap, 0.0], [fast, base_speed])
            } else {
                ([0.0, -gap], [base_speed, fast])
            }
        }
    };
    let mut x = DVector::from_vec(vec![
        lon[0],
        LANE_CENTER,
        speed[0],
        0.0,
        lon[1],
        -LANE_CENTER,
        speed[1],
        0.0,
    ]);

    let plant = make_double_integrator_2d(2)?;
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| crate::Error::Config(e.to_string()))?;
    let dims = setup.control_dims();
    let mut samples = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let state = x.as_slice().to_vec();
        let desired = weaving_desired_controls(&state, &config.policy, config.lateral_damping);
        let gamma = truth.gamma(step, &state)?;
        let solution = setup.solve(&state, &desired, &gamma)?;
        let observed: Vec<f64> = solution
            .controls
            .iter()
            .map(|u| u + noise.sample(&mut rng))
            .collect();
        x = euler_step(&plant, &x, &split_controls(&observed, &dims), config.dt)?;
        samples.push(InteractionSample {
            trajectory_id: Some(id),
            t: Some(step as f64 * config.dt),
            x: state,
            u: split(&observed, &dims),
            u_des: Some(split(&desired, &dims)),
            tag: Some(kind.name().to_string()),
        });
    }
    Ok(samples)
}

/// Stacked `[lon₁, lat₁, lon₂, lat₂]` desired accelerations at joint state
/// `x`, with agent 1 heading for the lower lane and agent 2 for the upper.
pub fn weaving_desired_controls(x: &[f64], policy: &DesiredPolicyParams, lateral_damping: f64) -> Vec<f64> {
    let targets = [-LANE_CENTER, LANE_CENTER];
    let mut out = Vec::with_capacity(4);
    for (agent, target) in targets.iter().enumerate() {
        let me = &x[4 * agent..4 * agent + 4];
        let other = &x[4 * (1 - agent)..4 * (1 - agent) + 4];
        out.push(desired_longitudinal_control(
            other[0] - me[0],
            other[2] - me[2],
            policy,
        ));
        out.push(
            desired_lateral_control(me[0], me[1], *target, policy) - lateral_damping * me[3],
        );
    }
    out
}
