//! Interaction data: generators, desired-control policies, augmentations and
//! the trajectory file format.

mod io;
mod policy;
mod synthetic;
mod weaving;

pub use io::{
    load_trajectories, read_trajectories, save_trajectories, write_csv, write_trajectories,
    DatasetHeader, DATASET_VERSION,
};
pub use policy::{desired_lateral_control, desired_longitudinal_control, DesiredPolicyParams};
pub use synthetic::{generate_synthetic, random_simplex_allocation, SamplingBox, SyntheticConfig};
pub use weaving::{
    generate_weaving_trajectories, weaving_desired_controls, weaving_truth_model, WeavingConfig,
    WeavingScenario, LANE_CENTER,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ResponsibilityModel;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {record} (line {line}): {message}")]
    Schema {
        record: usize,
        line: usize,
        message: String,
    },
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("augmentation not applicable: {0}")]
    Incompatible(String),
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One observation: the joint state, every agent's applied control and,
/// when known, their desired controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    pub x: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_des: Option<Vec<Vec<f64>>>,
    /// Free-form label such as the generating scenario or applied augmentations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl InteractionSample {
    pub fn n_agents(&self) -> usize {
        self.u.len()
    }

    pub fn stacked_u(&self) -> Vec<f64> {
        self.u.iter().flatten().copied().collect()
    }

    pub fn stacked_u_des(&self) -> Option<Vec<f64>> {
        self.u_des
            .as_ref()
            .map(|d| d.iter().flatten().copied().collect())
    }

    fn with_tag_suffix(mut self, suffix: &str) -> Self {
        self.tag = Some(match self.tag.take() {
            Some(t) => format!("{t}+{suffix}"),
            None => suffix.to_string(),
        });
        self
    }
}

/// Responsibility allocation used to generate data.
#[derive(Debug, Clone)]
pub enum GammaTruth {
    Constant(Vec<f64>),
    /// Piecewise-constant in the sample index: segment `k` applies from
    /// `start` up to the next segment's start.
    Schedule(Vec<ScheduleSegment>),
    Model(Box<ResponsibilityModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub start: usize,
    pub gamma: Vec<f64>,
}

impl GammaTruth {
    /// Allocation for the `index`-th sample at joint state `x`.
    pub fn gamma(&self, index: usize, x: &[f64]) -> Result<Vec<f64>, crate::Error> {
        match self {
            GammaTruth::Constant(g) => Ok(g.clone()),
            GammaTruth::Schedule(segments) => segments
                .iter()
                .rev()
                .find(|s| s.start <= index)
                .or(segments.first())
                .map(|s| s.gamma.clone())
                .ok_or_else(|| crate::Error::Config("empty γ schedule".into())),
            GammaTruth::Model(model) => Ok(model.eval(&model.context_from_state(x)?)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    /// Mirror lateral positions, velocities and controls across the lane divider.
    A1,
    /// Swap the two agents' labels (negates the relative state).
    A2,
}

/// Returns `samples` followed by their transformed copies. Both kinds need
/// two agents with `[x_lon, x_lat, ẋ_lon, ẋ_lat]` states and `[lon, lat]`
/// controls.
pub fn augment(
    samples: &[InteractionSample],
    kind: Augmentation,
) -> Result<Vec<InteractionSample>, DatasetError> {
    for (k, s) in samples.iter().enumerate() {
        let controls_ok = s.u.iter().all(|u| u.len() == 2)
            && s
                .u_des
                .as_ref()
                .is_none_or(|d| d.len() == 2 && d.iter().all(|u| u.len() == 2));
        if s.n_agents() != 2 || s.x.len() != 8 || !controls_ok {
            return Err(DatasetError::Incompatible(format!(
                "sample {k} is not a two-agent lateral-longitudinal sample"
            )));
        }
    }
    let mut out = samples.to_vec();
    out.extend(samples.iter().map(|s| match kind {
        Augmentation::A1 => mirror_lateral(s),
        Augmentation::A2 => swap_agents(s),
    }));
    Ok(out)
}

fn mirror_lateral(s: &InteractionSample) -> InteractionSample {
    let mut m = s.clone();
    for agent in 0..2 {
        m.x[4 * agent + 1] = -m.x[4 * agent + 1];
        m.x[4 * agent + 3] = -m.x[4 * agent + 3];
        m.u[agent][1] = -m.u[agent][1];
        if let Some(d) = m.u_des.as_mut() {
            d[agent][1] = -d[agent][1];
        }
    }
    m.with_tag_suffix("a1")
}

fn swap_agents(s: &InteractionSample) -> InteractionSample {
    let mut m = s.clone();
    m.x = s.x[4..].iter().chain(&s.x[..4]).copied().collect();
    m.u.swap(0, 1);
    if let Some(d) = m.u_des.as_mut() {
        d.swap(0, 1);
    }
    m.with_tag_suffix("a2")
}

/// Samples grouped by trajectory id, each group in time order.
pub fn group_by_trajectory(samples: &[InteractionSample]) -> BTreeMap<Option<u64>, Vec<&InteractionSample>> {
    let mut groups: BTreeMap<Option<u64>, Vec<&InteractionSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.trajectory_id).or_default().push(s);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.t.unwrap_or(0.0).total_cmp(&b.t.unwrap_or(0.0)));
    }
    groups
}

/// Samples whose tag starts with `prefix`, e.g. one scenario out of a mixed corpus.
pub fn filter_by_tag(samples: &[InteractionSample], prefix: &str) -> Vec<InteractionSample> {
    samples
        .iter()
        .filter(|s| s.tag.as_deref().is_some_and(|t| t.starts_with(prefix)))
        .cloned()
        .collect()
}

/// Samples belonging to the given trajectories.
pub fn select_trajectories(samples: &[InteractionSample], ids: &[u64]) -> Vec<InteractionSample> {
    samples
        .iter()
        .filter(|s| s.trajectory_id.is_some_and(|id| ids.contains(&id)))
        .cloned()
        .collect()
}
