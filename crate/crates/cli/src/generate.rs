//! `generate`: synthetic samples or weaving rollouts written as a dataset file.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use respalloc::datasets::{
    generate_synthetic, generate_weaving_trajectories, group_by_trajectory, random_simplex_allocation, weaving_truth_model,
    write_csv, write_trajectories, DatasetHeader, GammaTruth, InteractionSample, ScheduleSegment, SyntheticConfig,
    WeavingConfig, WeavingScenario,
};
use respalloc::models::{Checkpoint, ModelSpec, ResponsibilityModel};
use respalloc::setup::{FilterSetup, FilterSetupConfig};

use crate::output::{check_output, invalid, load_config, write_atomic, write_csv_with_meta, write_json};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON file with generation settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// synthetic-2agent, synthetic-6agent, weaving-single, weaving-side-by-side,
    /// weaving-rear-overtake or weaving-mixed.
    #[arg(long)]
    scenario: Option<String>,
    /// Number of synthetic samples.
    #[arg(long = "n")]
    n_samples: Option<usize>,
    /// Number of weaving trajectories.
    #[arg(long)]
    count: Option<usize>,
    /// Constant allocation: one value for two agents, or one per agent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    gamma: Option<Vec<f64>>,
    /// Piecewise-constant two-agent schedule as `start:gamma_1,...`.
    #[arg(long)]
    schedule: Option<String>,
    /// Variance of the Gaussian noise added to each control coordinate.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Time steps per weaving trajectory.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Steepness of the weaving ground-truth allocation.
    #[arg(long)]
    truth_gain: Option<f64>,
    /// Dataset file to write.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also export the samples as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the ground-truth allocation as a model checkpoint.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub scenario: String,
    pub n_samples: usize,
    pub count: usize,
    pub gamma: Option<Vec<f64>>,
    pub schedule: Option<Vec<ScheduleSegment>>,
    /// Defaults to 0.1 for synthetic data and 0 for weaving rollouts.
    pub noise_variance: Option<f64>,
    pub seed: u64,
    pub steps: usize,
    pub dt: f64,
    pub truth_gain: f64,
    /// Replaces the scenario's default filter.
    pub filter: Option<FilterSetupConfig>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub truth_out: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let weaving = WeavingConfig::default();
        Self {
            scenario: "synthetic-2agent".into(),
            n_samples: 128,
            count: weaving.count,
            gamma: None,
            schedule: None,
            noise_variance: None,
            seed: 0,
            steps: weaving.steps,
            dt: weaving.dt,
            truth_gain: 1.0,
            filter: None,
            out: None,
            csv: None,
            truth_out: None,
        }
    }
}

impl GenerateArgs {
    fn resolve(self) -> anyhow::Result<GenerateConfig> {
        let mut c: GenerateConfig = load_config(self.config.as_deref())?;
        if let Some(v) = self.scenario {
            c.scenario = v;
        }
        if let Some(v) = self.n_samples {
            c.n_samples = v;
        }
        if let Some(v) = self.count {
            c.count = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = Some(v);
        }
        if let Some(v) = self.schedule {
            c.schedule = Some(parse_schedule(&v)?);
        }
        if let Some(v) = self.noise {
            c.noise_variance = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.dt {
            c.dt = v;
        }
        if let Some(v) = self.truth_gain {
            c.truth_gain = v;
        }
        if let Some(v) = self.out {
            c.out = Some(v);
        }
        if let Some(v) = self.csv {
            c.csv = Some(v);
        }
        if let Some(v) = self.truth_out {
            c.truth_out = Some(v);
        }
        Ok(c)
    }
}

fn parse_schedule(text: &str) -> anyhow::Result<Vec<ScheduleSegment>> {
    text.split(',')
        .map(|part| {
            let (start, g) = part
                .split_once(':')
                .ok_or_else(|| invalid(format!("schedule entry {part:?} is not start:gamma")))?;
            let start: usize = start
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad schedule start {start:?}")))?;
            let g: f64 = g
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad schedule gamma {g:?}")))?;
            Ok(ScheduleSegment {
                start,
                gamma: vec![g, 1.0 - g],
            })
        })
        .collect()
}

enum Scenario {
    Synthetic { n_agents: usize },
    Weaving(WeavingScenario),
}

fn parse_scenario(name: &str) -> anyhow::Result<Scenario> {
    let name = name.replace('_', "-");
    match name.as_str() {
        "synthetic-2agent" => Ok(Scenario::Synthetic { n_agents: 2 }),
        "synthetic-6agent" => Ok(Scenario::Synthetic { n_agents: 6 }),
        _ => match name.strip_prefix("weaving-") {
            Some(kind) => Ok(Scenario::Weaving(kind.parse().map_err(|e| invalid(format!("{e}")))?)),
            None => Err(invalid(format!("unknown scenario {name:?}"))),
        },
    }
}

fn noise_std(variance: Option<f64>, default: f64) -> anyhow::Result<f64> {
    let v = variance.unwrap_or(default);
    if !(v >= 0.0) || !v.is_finite() {
        return Err(invalid(format!("noise variance must be nonnegative, got {v}")));
    }
    Ok(v.sqrt())
}

fn constant_truth(c: &GenerateConfig, n_agents: usize) -> anyhow::Result<GammaTruth> {
    if let Some(schedule) = &c.schedule {
        if c.gamma.is_some() {
            return Err(invalid("give either a constant gamma or a schedule, not both"));
        }
        if n_agents != 2 {
            return Err(invalid("schedules are supported for two agents only"));
        }
        return Ok(GammaTruth::Schedule(schedule.clone()));
    }
    let gamma = match c.gamma.as_deref() {
        None if n_agents == 2 => vec![0.3, 0.7],
        None => random_simplex_allocation(n_agents, c.seed),
        Some([g]) if n_agents == 2 => vec![*g, 1.0 - g],
        Some(g) if g.len() == n_agents => g.to_vec(),
        Some(g) => {
            return Err(invalid(format!(
                "expected {n_agents} gamma values, got {}",
                g.len()
            )))
        }
    };
    let sum: f64 = gamma.iter().sum();
    if gamma.iter().any(|g| !(*g >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("gamma {gamma:?} is not on the simplex")));
    }
    Ok(GammaTruth::Constant(gamma))
}

fn truth_model(truth: &GammaTruth) -> anyhow::Result<ResponsibilityModel> {
    match truth {
        GammaTruth::Model(m) => Ok((**m).clone()),
        GammaTruth::Constant(g) => {
            if g.iter().any(|v| *v <= 0.0) {
                return Err(invalid("a constant truth with zero entries has no finite logits"));
            }
            let logits: Vec<f64> = g.iter().map(|v| v.ln()).collect();
            Ok(ResponsibilityModel::from_parts(
                ModelSpec::Constant { n_agents: g.len() },
                logits,
                0,
                None,
            )?)
        }
        GammaTruth::Schedule(_) => Err(invalid("a schedule truth cannot be written as a checkpoint")),
    }
}

fn active_fraction(setup: &FilterSetup, samples: &[InteractionSample], truth: &GammaTruth) -> anyhow::Result<f64> {
    let mut active = 0;
    for (k, s) in samples.iter().enumerate() {
        let desired = s.stacked_u_des().unwrap_or_default();
        let gamma = truth.gamma(k, &s.x)?;
        active += setup.solve(&s.x, &desired, &gamma)?.active.cbf as usize;
    }
    Ok(active as f64 / samples.len().max(1) as f64)
}

pub fn run(args: GenerateArgs) -> anyhow::Result<()> {
    let c = args.resolve()?;
    let out = c.out.clone().ok_or_else(|| invalid("no output path given (--out)"))?;
    for p in [Some(&out), c.csv.as_ref(), c.truth_out.as_ref()].into_iter().flatten() {
        check_output(p)?;
    }
    let scenario = parse_scenario(&c.scenario)?;
    let filter = match (&c.filter, &scenario) {
        (Some(f), _) => f.clone(),
        (None, Scenario::Synthetic { n_agents: 2 }) => FilterSetupConfig::two_agent_line(),
        (None, Scenario::Synthetic { n_agents }) => FilterSetupConfig::planar_swarm(*n_agents),
        (None, Scenario::Weaving(_)) => FilterSetupConfig::weaving(),
    };
    let setup = FilterSetup::new(filter.clone())?;

    let (samples, truth, name) = match scenario {
        Scenario::Synthetic { n_agents } => {
            if setup.n_agents() != n_agents {
                return Err(invalid("filter agent count does not match the scenario"));
            }
            let truth = constant_truth(&c, n_agents)?;
            let mut config = SyntheticConfig::new(&filter.system, c.n_samples, c.seed);
            config.noise_std = noise_std(c.noise_variance, 0.1)?;
            let samples = generate_synthetic(&config, &setup, &truth)?;
            (samples, truth, c.scenario.clone())
        }
        Scenario::Weaving(kind) => {
            if c.gamma.is_some() || c.schedule.is_some() {
                return Err(invalid("weaving scenarios use the speed-dependent ground truth"));
            }
            let truth = GammaTruth::Model(Box::new(weaving_truth_model(c.truth_gain)));
            let config = WeavingConfig {
                count: c.count,
                seed: c.seed,
                steps: c.steps,
                dt: c.dt,
                noise_std: noise_std(c.noise_variance, 0.0)?,
                ..WeavingConfig::default()
            };
            let samples = generate_weaving_trajectories(kind, &config, &setup, &truth)?;
            (samples, truth, format!("weaving-{}", kind.name().replace('_', "-")))
        }
    };

    let effective = serde_json::to_value(&c)?;
    let mut header = DatasetHeader::new(
        setup.n_agents(),
        setup.agent_state_dim(),
        setup.control_dims()[0],
        &name,
    );
    header.filter = Some(filter.clone());
    header.config = Some(effective.clone());
    let mut buf = Vec::new();
    write_trajectories(&header, &samples, &mut buf)?;
    write_atomic(&out, &buf)?;
    if let Some(path) = &c.csv {
        let mut buf = Vec::new();
        write_csv(&header, &samples, &mut buf)?;
        write_csv_with_meta(path, &buf, &effective)?;
    }
    if let Some(path) = &c.truth_out {
        let ckpt = Checkpoint::from_model(&truth_model(&truth)?, Some(filter));
        write_json(path, &ckpt)?;
    }
    let trajectories = group_by_trajectory(&samples)
        .keys()
        .filter(|k| k.is_some())
        .count();
    println!(
        "wrote {} samples ({} trajectories) to {}; barrier row active in {:.1}% of samples",
        samples.len(),
        trajectories,
        out.display(),
        100.0 * active_fraction(&setup, &samples, &truth)?
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parsing() {
        let s = parse_schedule("0:0.2, 128:0.7").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].start, 128);
        assert!((s[1].gamma[1] - 0.3).abs() < 1e-12);
        assert!(parse_schedule("0-0.2").is_err());
    }

    #[test]
    fn scenario_names() {
        assert!(matches!(parse_scenario("synthetic-6agent").unwrap(), Scenario::Synthetic { n_agents: 6 }));
        assert!(matches!(
            parse_scenario("weaving-side-by-side").unwrap(),
            Scenario::Weaving(WeavingScenario::SideBySide)
        ));
        assert!(parse_scenario("weaving-zigzag").is_err());
        assert!(parse_scenario("traffic").is_err());
    }

    #[test]
    fn gamma_forms() {
        let c = GenerateConfig {
            gamma: Some(vec![0.25]),
            ..GenerateConfig::default()
        };
        assert!(matches!(constant_truth(&c, 2).unwrap(), GammaTruth::Constant(g) if g == vec![0.25, 0.75]));
        let c = GenerateConfig {
            gamma: Some(vec![0.5, 0.6]),
            ..GenerateConfig::default()
        };
        assert!(constant_truth(&c, 2).is_err());
        let c = GenerateConfig::default();
        assert!(matches!(constant_truth(&c, 6).unwrap(), GammaTruth::Constant(g) if g.len() == 6));
    }
}
