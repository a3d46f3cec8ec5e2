//! Plot-ready evaluations of a trained model: allocation landscapes over a
//! two-axis slice of relative state, and per-timestep traces along a
//! recorded trajectory.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{weaving_desired_controls, DesiredPolicyParams, InteractionSample};
use crate::models::{ContextKind, ModelSpec, ResponsibilityModel};
use crate::setup::{FilterSetup, SystemConfig};
use crate::Error;

/// Tolerance for deciding that the filter returned the shrunk desired control.
const INACTIVE_TOL: f64 = 1e-9;

/// Coordinate of the relative state `r = x₂ − x₁`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeAxis {
    RLon,
    RLat,
    VLon,
    VLat,
}

impl RelativeAxis {
    pub fn index(&self) -> usize {
        match self {
            RelativeAxis::RLon => 0,
            RelativeAxis::RLat => 1,
            RelativeAxis::VLon => 2,
            RelativeAxis::VLat => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RelativeAxis::RLon => "r_lon",
            RelativeAxis::RLat => "r_lat",
            RelativeAxis::VLon => "v_lon",
            RelativeAxis::VLat => "v_lat",
        }
    }
}

impl FromStr for RelativeAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "r_lon" => Ok(Self::RLon),
            "r_lat" => Ok(Self::RLat),
            "v_lon" => Ok(Self::VLon),
            "v_lat" => Ok(Self::VLat),
            _ => Err(Error::Config(format!(
                "unknown axis {s:?} (expected r_lon, r_lat, v_lon or v_lat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub axis: RelativeAxis,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.n - 1) as f64;
        (0..self.n).map(|k| self.min + step * k as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub axes: [GridAxis; 2],
    /// Relative state used for the coordinates not on a grid axis.
    pub fixed: [f64; 4],
    /// Midpoint of the two agents' states; agent 1 sits at `reference − r/2`
    /// and agent 2 at `reference + r/2`.
    pub reference: [f64; 4],
    pub policy: DesiredPolicyParams,
    pub lateral_damping: f64,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            axes: [
                GridAxis {
                    axis: RelativeAxis::RLon,
                    min: -15.0,
                    max: 15.0,
                    n: 50,
                },
                GridAxis {
                    axis: RelativeAxis::VLon,
                    min: -4.0,
                    max: 4.0,
                    n: 50,
                },
            ],
            fixed: [0.0, -1.85, 0.0, 0.0],
            reference: [0.0, 0.0, 10.0, 0.0],
            policy: DesiredPolicyParams::default(),
            lateral_damping: 4.0,
        }
    }
}

impl LandscapeSpec {
    fn validate(&self, model: &ResponsibilityModel) -> Result<(), Error> {
        if self.axes[0].axis == self.axes[1].axis {
            return Err(Error::Config("landscape axes must differ".into()));
        }
        for a in &self.axes {
            if a.n < 2 {
                return Err(Error::Config(format!("axis {} needs at least 2 points", a.axis.name())));
            }
            if !(a.min.is_finite() && a.max.is_finite() && a.min < a.max) {
                return Err(Error::Config(format!("axis {} has an empty range", a.axis.name())));
            }
        }
        let relative_layout = match model.spec() {
            ModelSpec::Constant { .. } => false,
            ModelSpec::RelativeSymmetric { agent_dim, .. } => *agent_dim == 4,
            ModelSpec::Symmetric { n_agents, agent_dim, .. } => *n_agents == 2 && *agent_dim == 4,
            ModelSpec::Mlp { context, .. } => match context {
                ContextKind::Relative { agent_dim } => *agent_dim == 4,
                ContextKind::Joint { n_agents, agent_dim } => *n_agents == 2 && *agent_dim == 4,
            },
        };
        if !relative_layout {
            return Err(Error::Config(
                "model context has no planar relative-state axes".into(),
            ));
        }
        Ok(())
    }

    /// Relative state of grid cell `(a, b)`.
    pub fn relative_state(&self, a: f64, b: f64) -> [f64; 4] {
        let mut r = self.fixed;
        r[self.axes[0].axis.index()] = a;
        r[self.axes[1].axis.index()] = b;
        r
    }

    /// Joint state placing the pair symmetrically about the reference.
    pub fn joint_state(&self, r: &[f64; 4]) -> Vec<f64> {
        let mut x = vec![0.0; 8];
        for k in 0..4 {
            x[k] = self.reference[k] - 0.5 * r[k];
            x[4 + k] = self.reference[k] + 0.5 * r[k];
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub a: f64,
    pub b: f64,
    pub gamma: Vec<f64>,
    /// The filter leaves the (shrunk) desired control untouched here.
    pub inactive: bool,
}

/// Evaluates `model` on the grid. The inactivity mask solves the filter at
/// each cell with the model's allocation and the weaving desired controls.
pub fn compute_landscape(
    model: &ResponsibilityModel,
    setup: &FilterSetup,
    spec: &LandscapeSpec,
) -> Result<Vec<LandscapeCell>, Error> {
    spec.validate(model)?;
    if setup.config().system != SystemConfig::RelativeDoubleIntegrator {
        return Err(Error::Config("landscapes need the relative double-integrator filter".into()));
    }
    let mut cells = Vec::with_capacity(spec.axes[0].n * spec.axes[1].n);
    for a in spec.axes[0].values() {
        for b in spec.axes[1].values() {
            let x = spec.joint_state(&spec.relative_state(a, b));
            let gamma = model.eval(&model.context_from_state(&x)?)?;
            let desired = weaving_desired_controls(&x, &spec.policy, spec.lateral_damping);
            let problem = setup.problem(&x, &desired, &gamma)?;
            let solution = crate::filter::solve_filter(&problem)?;
            let shrunk = shrunk_desired(&problem);
            let inactive = solution.slack <= INACTIVE_TOL
                && solution
                    .controls
                    .iter()
                    .zip(&shrunk)
                    .all(|(u, s)| (u - s).abs() <= INACTIVE_TOL * (1.0 + s.abs()));
            cells.push(LandscapeCell { a, b, gamma, inactive });
        }
    }
    Ok(cells)
}

/// Minimizer of the filter objective without the barrier row: each
/// coordinate `γᵢdᵢ/(γᵢ+β₁)` clipped to its box.
pub fn shrunk_desired(problem: &crate::filter::FilterProblem) -> Vec<f64> {
    let w = problem.weights();
    problem
        .owners()
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let g = problem.gamma()[i];
            let d = problem.desired()[j];
            let v = if g + w.beta1 > 0.0 { g * d / (g + w.beta1) } else { 0.0 };
            v.clamp(problem.lower()[j], problem.upper()[j])
        })
        .collect()
}

pub fn write_landscape_csv<W: Write>(
    spec: &LandscapeSpec,
    cells: &[LandscapeCell],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([spec.axes[0].axis.name(), spec.axes[1].axis.name(), "gamma_1", "inactive"])?;
    for c in cells {
        w.write_record([
            c.a.to_string(),
            c.b.to_string(),
            c.gamma[0].to_string(),
            c.inactive.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean `|γ₁ − γ₁'|` over two landscapes on the same grid.
pub fn mean_abs_difference(a: &[LandscapeCell], b: &[LandscapeCell]) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(p, q)| (p.gamma[0] - q.gamma[0]).abs()).sum();
    total / a.len().max(1) as f64
}

/// Largest `|γ₁(r) + γ₁(−r) − 1|` over the grid: how far the model is from
/// treating the two agents' labels as interchangeable.
pub fn max_swap_violation(model: &ResponsibilityModel, spec: &LandscapeSpec) -> Result<f64, Error> {
    spec.validate(model)?;
    let mut worst: f64 = 0.0;
    for a in spec.axes[0].values() {
        for b in spec.axes[1].values() {
            let r = spec.relative_state(a, b);
            let neg = r.map(|v| -v);
            let g = model.eval(&model.context_from_state(&spec.joint_state(&r))?)?[0];
            let h = model.eval(&model.context_from_state(&spec.joint_state(&neg))?)?[0];
            worst = worst.max((g + h - 1.0).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub gamma: Vec<f64>,
    pub u_des: Vec<f64>,
    /// Recorded controls.
    pub u: Vec<f64>,
    /// Filter output under the model's allocation.
    pub u_filtered: Vec<f64>,
    pub barrier: f64,
}

/// One row per sample of a recorded trajectory, in the given order.
pub fn compute_trace(
    model: &ResponsibilityModel,
    setup: &FilterSetup,
    samples: &[InteractionSample],
) -> Result<Vec<TraceRow>, Error> {
    if model.n_agents() != setup.n_agents() {
        return Err(Error::Config(format!(
            "model has {} agents, filter has {}",
            model.n_agents(),
            setup.n_agents()
        )));
    }
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let u_des = s
                .stacked_u_des()
                .ok_or_else(|| Error::Config(format!("sample {k} has no desired controls")))?;
            let gamma = model.eval(&model.context_from_state(&s.x)?)?;
            let solution = setup.solve(&s.x, &u_des, &gamma)?;
            Ok(TraceRow {
                t: s.t.unwrap_or(k as f64),
                gamma,
                u_des,
                u: s.stacked_u(),
                u_filtered: solution.controls,
                barrier: setup.barrier_value(&s.x)?,
            })
        })
        .collect()
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = rows.first() else {
        w.write_record(["t", "barrier"])?;
        w.flush()?;
        return Ok(());
    };
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=first.gamma.len()).map(|i| format!("gamma_{i}")));
    for prefix in ["u_des", "u", "u_filtered"] {
        columns.extend((0..first.u.len()).map(|j| format!("{prefix}_{j}")));
    }
    columns.push("barrier".into());
    w.write_record(&columns)?;
    for r in rows {
        let mut row = vec![r.t.to_string()];
        for v in r.gamma.iter().chain(&r.u_des).chain(&r.u).chain(&r.u_filtered) {
            row.push(v.to_string());
        }
        row.push(r.barrier.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Number of times `series` crosses `level`.
pub fn crossings(series: &[f64], level: f64) -> usize {
    series
        .windows(2)
        .filter(|w| (w[0] - level) * (w[1] - level) < 0.0)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_weaving_trajectories, weaving_truth_model, GammaTruth, WeavingConfig, WeavingScenario};
    use crate::models::init_model;
    use crate::setup::FilterSetupConfig;

    fn setup() -> FilterSetup {
        FilterSetup::new(FilterSetupConfig::weaving()).unwrap()
    }

    fn small_spec(n: usize) -> LandscapeSpec {
        let mut spec = LandscapeSpec::default();
        spec.axes[0].n = n;
        spec.axes[1].n = n;
        spec
    }

    #[test]
    fn grid_has_one_cell_per_point() {
        let m = weaving_truth_model(1.0);
        let cells = compute_landscape(&m, &setup(), &LandscapeSpec::default()).unwrap();
        assert_eq!(cells.len(), 2500);
        let mut buf = Vec::new();
        write_landscape_csv(&LandscapeSpec::default(), &cells, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2501);
    }

    #[test]
    fn symmetric_landscape_is_complementary_under_negation() {
        let m = init_model(ModelSpec::RelativeSymmetric { agent_dim: 4, hidden: vec![8, 8] }, 3).unwrap();
        let spec = small_spec(12);
        let cells = compute_landscape(&m, &setup(), &spec).unwrap();
        let mut neg = spec.clone();
        neg.fixed = spec.fixed.map(|v| -v);
        for a in neg.axes.iter_mut() {
            let (lo, hi) = (a.min, a.max);
            a.min = -hi;
            a.max = -lo;
        }
        let neg_cells = compute_landscape(&m, &setup(), &neg).unwrap();
        let n = spec.axes[1].n;
        for (k, c) in cells.iter().enumerate() {
            let (i, j) = (k / n, k % n);
            let mirror = &neg_cells[(n - 1 - i) * n + (n - 1 - j)];
            assert!((c.gamma[0] + mirror.gamma[0] - 1.0).abs() <= 1e-12);
        }
        assert!(max_swap_violation(&m, &spec).unwrap() <= 1e-12);
    }

    #[test]
    fn mask_matches_barrier_row_at_shrunk_control() {
        let m = weaving_truth_model(1.0);
        let s = setup();
        let mut spec = small_spec(20);
        spec.axes[0].min = -12.0;
        spec.axes[0].max = 12.0;
        spec.fixed = [0.0, -1.5, 0.0, 0.5];
        let cells = compute_landscape(&m, &s, &spec).unwrap();
        let (mut on, mut off) = (0, 0);
        for c in &cells {
            let x = spec.joint_state(&spec.relative_state(c.a, c.b));
            let d = weaving_desired_controls(&x, &spec.policy, spec.lateral_damping);
            let p = s.problem(&x, &d, &c.gamma).unwrap();
            let shrunk = shrunk_desired(&p);
            let feasible = p.constraint_value(&shrunk) >= 1e-9;
            if feasible {
                assert!(c.inactive, "{c:?}");
                on += 1;
            } else if p.constraint_value(&shrunk) < -1e-9 {
                assert!(!c.inactive, "{c:?}");
                off += 1;
            }
        }
        assert!(on > 0 && off > 0, "{on} {off}");
    }

    #[test]
    fn default_slice_shows_both_filter_regimes() {
        let cells = compute_landscape(&weaving_truth_model(1.0), &setup(), &LandscapeSpec::default()).unwrap();
        let inactive = cells.iter().filter(|c| c.inactive).count();
        assert!(inactive > 0 && inactive < cells.len(), "{inactive}");
    }

    #[test]
    fn rejects_axes_outside_the_context() {
        let s = setup();
        let constant = init_model(ModelSpec::Constant { n_agents: 2 }, 0).unwrap();
        assert!(compute_landscape(&constant, &s, &LandscapeSpec::default()).is_err());
        let m = weaving_truth_model(1.0);
        let mut spec = LandscapeSpec::default();
        spec.axes[1].axis = RelativeAxis::RLon;
        assert!(compute_landscape(&m, &s, &spec).is_err());
        let mut spec = LandscapeSpec::default();
        spec.axes[0].n = 1;
        assert!(compute_landscape(&m, &s, &spec).is_err());
        assert!("yaw".parse::<RelativeAxis>().is_err());
        assert_eq!("v-lat".parse::<RelativeAxis>().unwrap(), RelativeAxis::VLat);
    }

    #[test]
    fn truth_trace_reproduces_the_generator_allocation() {
        let s = setup();
        let truth = weaving_truth_model(1.0);
        let samples = generate_weaving_trajectories(
            WeavingScenario::Single,
            &WeavingConfig::default(),
            &s,
            &GammaTruth::Model(Box::new(truth.clone())),
        )
        .unwrap();
        let rows = compute_trace(&truth, &s, &samples).unwrap();
        assert_eq!(rows.len(), samples.len());
        let gt = GammaTruth::Model(Box::new(truth));
        for (k, (r, smp)) in rows.iter().zip(&samples).enumerate() {
            assert_eq!(r.gamma, gt.gamma(k, &smp.x).unwrap());
            assert_eq!(r.u_filtered, r.u);
        }
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), samples.len() + 1);
        assert!(text.lines().next().unwrap().ends_with("barrier"));
    }

    #[test]
    fn crossing_count() {
        assert_eq!(crossings(&[0.2, 0.6, 0.7, 0.4, 0.5, 0.6], 0.5), 2);
        assert_eq!(crossings(&[], 0.5), 0);
    }
}
