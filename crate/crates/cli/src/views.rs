//! `landscape` and `trace`: tabular views of a trained model.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use respalloc::analysis::{
    compute_landscape, compute_trace, crossings, write_landscape_csv, write_trace_csv, LandscapeSpec, RelativeAxis,
};
use respalloc::datasets::{group_by_trajectory, load_trajectories, InteractionSample};
use respalloc::models::{load_checkpoint, Checkpoint, ResponsibilityModel};
use respalloc::setup::{FilterSetup, FilterSetupConfig};

use crate::output::{check_output, invalid, load_config, require_input, write_csv_with_meta};

fn load_model(path: &Path) -> anyhow::Result<(Checkpoint, ResponsibilityModel)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn parse_pair(values: &[f64], what: &str) -> anyhow::Result<[f64; 2]> {
    <[f64; 2]>::try_from(values).map_err(|_| invalid(format!("{what} needs two values, got {}", values.len())))
}

fn parse_quad(values: &[f64], what: &str) -> anyhow::Result<[f64; 4]> {
    <[f64; 4]>::try_from(values).map_err(|_| invalid(format!("{what} needs four values, got {}", values.len())))
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// JSON file with landscape settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Grid CSV to write.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// First axis: r_lon, r_lat, v_lon or v_lat.
    #[arg(long)]
    x_axis: Option<String>,
    /// First axis range as `min,max`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_range: Option<Vec<f64>>,
    #[arg(long)]
    y_axis: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y_range: Option<Vec<f64>>,
    /// Grid points per axis.
    #[arg(long)]
    resolution: Option<usize>,
    /// Relative state `r_lon,r_lat,v_lon,v_lat` for the coordinates off the grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    fixed: Option<Vec<f64>>,
    /// Midpoint state of the pair, `lon,lat,v_lon,v_lat`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub grid: LandscapeSpec,
}

impl LandscapeArgs {
    fn resolve(self) -> anyhow::Result<LandscapeRunConfig> {
        let mut c: LandscapeRunConfig = load_config(self.config.as_deref())?;
        if let Some(v) = self.checkpoint {
            c.checkpoint = Some(v);
        }
        if let Some(v) = self.out {
            c.out = Some(v);
        }
        let g = &mut c.grid;
        if let Some(v) = self.x_axis {
            g.axes[0].axis = v.parse::<RelativeAxis>()?;
        }
        if let Some(v) = self.y_axis {
            g.axes[1].axis = v.parse::<RelativeAxis>()?;
        }
        if let Some(v) = self.x_range {
            [g.axes[0].min, g.axes[0].max] = parse_pair(&v, "--x-range")?;
        }
        if let Some(v) = self.y_range {
            [g.axes[1].min, g.axes[1].max] = parse_pair(&v, "--y-range")?;
        }
        if let Some(n) = self.resolution {
            g.axes[0].n = n;
            g.axes[1].n = n;
        }
        if let Some(v) = self.fixed {
            g.fixed = parse_quad(&v, "--fixed")?;
        }
        if let Some(v) = self.reference {
            g.reference = parse_quad(&v, "--reference")?;
        }
        Ok(c)
    }
}

fn filter_of(ckpt: &Checkpoint, fallback: Option<&FilterSetupConfig>) -> anyhow::Result<FilterSetup> {
    let config = ckpt
        .filter
        .clone()
        .or_else(|| fallback.cloned())
        .ok_or_else(|| invalid("checkpoint has no filter configuration"))?;
    Ok(FilterSetup::new(config)?)
}

pub fn run_landscape(args: LandscapeArgs) -> anyhow::Result<()> {
    let c = args.resolve()?;
    let ckpt_path = require_input(&c.checkpoint, "checkpoint")?;
    let out = c.out.clone().ok_or_else(|| invalid("no output path given (--out)"))?;
    check_output(&out)?;
    let (ckpt, model) = load_model(&ckpt_path)?;
    let setup = filter_of(&ckpt, None)?;
    let cells = compute_landscape(&model, &setup, &c.grid)?;
    let mut buf = Vec::new();
    write_landscape_csv(&c.grid, &cells, &mut buf)?;
    write_csv_with_meta(&out, &buf, &c)?;
    let inactive = cells.iter().filter(|c| c.inactive).count();
    println!(
        "wrote {} grid cells to {}; filter inactive in {inactive}",
        cells.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// JSON file with trace settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset file holding the trajectory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trajectory id; required when the file holds several.
    #[arg(long)]
    trajectory: Option<u64>,
    /// Trace CSV to write.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TraceRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub trajectory: Option<u64>,
    pub out: Option<PathBuf>,
}

impl TraceArgs {
    fn resolve(self) -> anyhow::Result<TraceRunConfig> {
        let mut c: TraceRunConfig = load_config(self.config.as_deref())?;
        if let Some(v) = self.checkpoint {
            c.checkpoint = Some(v);
        }
        if let Some(v) = self.data {
            c.data = Some(v);
        }
        if let Some(v) = self.trajectory {
            c.trajectory = Some(v);
        }
        if let Some(v) = self.out {
            c.out = Some(v);
        }
        Ok(c)
    }
}

fn pick_trajectory(samples: &[InteractionSample], id: Option<u64>) -> anyhow::Result<Vec<InteractionSample>> {
    let groups = group_by_trajectory(samples);
    let key = match id {
        Some(id) => Some(id),
        None if groups.len() == 1 => *groups.keys().next().unwrap(),
        None => {
            return Err(invalid(format!(
                "dataset holds {} trajectories; choose one with --trajectory",
                groups.len()
            )))
        }
    };
    let picked = groups
        .get(&key)
        .ok_or_else(|| invalid(format!("no trajectory with id {}", key.map_or("none".into(), |k| k.to_string()))))?;
    let mut out: Vec<InteractionSample> = picked.iter().map(|s| (*s).clone()).collect();
    out.sort_by(|a, b| a.t.unwrap_or(0.0).total_cmp(&b.t.unwrap_or(0.0)));
    Ok(out)
}

pub fn run_trace(args: TraceArgs) -> anyhow::Result<()> {
    let c = args.resolve()?;
    let ckpt_path = require_input(&c.checkpoint, "checkpoint")?;
    let data_path = require_input(&c.data, "dataset")?;
    let out = c.out.clone().ok_or_else(|| invalid("no output path given (--out)"))?;
    check_output(&out)?;
    let (ckpt, model) = load_model(&ckpt_path)?;
    let (header, samples) = load_trajectories(&data_path)?;
    let setup = filter_of(&ckpt, header.filter.as_ref())?;
    if header.n_agents != model.n_agents() || header.n_agents * header.state_dim != setup.sample_state_dim() {
        return Err(invalid(format!(
            "trajectory has {} agents with state dimension {}, which does not match the model and filter",
            header.n_agents, header.state_dim
        )));
    }
    let trajectory = pick_trajectory(&samples, c.trajectory)?;
    let rows = compute_trace(&model, &setup, &trajectory)?;
    let mut buf = Vec::new();
    write_trace_csv(&rows, &mut buf)?;
    write_csv_with_meta(&out, &buf, &c)?;
    let gamma: Vec<f64> = rows.iter().map(|r| r.gamma[0]).collect();
    println!(
        "wrote {} timesteps to {}; gamma_1 crosses 0.5 {} times",
        rows.len(),
        out.display(),
        crossings(&gamma, 0.5)
    );
    Ok(())
}
