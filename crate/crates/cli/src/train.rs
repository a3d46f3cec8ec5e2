//! `train`: fit a responsibility model to a dataset file.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use respalloc::datasets::{augment, filter_by_tag, load_trajectories, select_trajectories, Augmentation};
use respalloc::filter::FilterWeights;
use respalloc::models::{init_model, Checkpoint, ContextKind, ModelSpec, DEFAULT_HIDDEN};
use respalloc::setup::FilterSetup;
use respalloc::training::{fit, fit_windowed, LossMetric, OptimizerKind, PreparedData, TrainConfig, TrainReport, WindowEstimate};

use crate::output::{check_output, invalid, load_config, require_input, write_csv_with_meta, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Constant,
    Mlp,
    Symmetric,
    RelativeSymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ContextChoice {
    /// Stacked joint state.
    Joint,
    /// Difference of the two agents' states.
    Relative,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file produced by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Input of a plain network model.
    #[arg(long, value_enum)]
    context: Option<ContextChoice>,
    /// Hidden layer widths, e.g. `16,16,16`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Control-magnitude weight of the filter objective.
    #[arg(long)]
    beta1: Option<f64>,
    /// Slack weight of the filter objective.
    #[arg(long)]
    beta2: Option<f64>,
    /// Augmentations appended to the data, e.g. `a1,a2`.
    #[arg(long, value_delimiter = ',', value_enum)]
    augment: Option<Vec<AugmentArg>>,
    /// Keep only samples whose tag starts with this prefix.
    #[arg(long)]
    tag: Option<String>,
    /// Keep only these trajectory ids.
    #[arg(long, value_delimiter = ',')]
    trajectories: Option<Vec<u64>>,
    /// Fit a separate constant allocation on each window of this many samples.
    #[arg(long)]
    window: Option<usize>,
    /// Divide network inputs by their per-coordinate spread in the data.
    #[arg(long)]
    standardize: bool,
    /// Record model allocations at the probe contexts every this many epochs.
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-epoch loss trace (CSV).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Huber,
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AugmentArg {
    A1,
    A2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    pub model: ModelKind,
    pub context: ContextChoice,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub augment: Vec<Augmentation>,
    pub tag: Option<String>,
    pub trajectories: Option<Vec<u64>>,
    pub window: Option<usize>,
    pub standardize: bool,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: ModelKind::Constant,
            context: ContextChoice::Joint,
            hidden: DEFAULT_HIDDEN.to_vec(),
            train: TrainConfig::default(),
            augment: Vec::new(),
            tag: None,
            trajectories: None,
            window: None,
            standardize: false,
            out: None,
            report: None,
            loss_csv: None,
        }
    }
}

impl TrainArgs {
    fn resolve(self) -> anyhow::Result<TrainRunConfig> {
        let mut c: TrainRunConfig = load_config(self.config.as_deref())?;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            model => c.model,
            context => c.context,
            hidden => c.hidden,
            epochs => c.train.epochs,
            batch_size => c.train.batch_size,
            lr => c.train.learning_rate,
            huber_delta => c.train.huber_delta,
            seed => c.train.seed,
            snapshot_every => c.train.snapshot_every,
        );
        if let Some(v) = self.data {
            c.data = Some(v);
        }
        if let Some(v) = self.optimizer {
            c.train.optimizer = match v {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            };
        }
        if let Some(v) = self.loss {
            c.train.loss = match v {
                LossArg::Huber => LossMetric::Huber,
                LossArg::L2 => LossMetric::L2,
                LossArg::L1 => LossMetric::L1,
            };
        }
        if self.beta1.is_some() || self.beta2.is_some() {
            let base = c.train.weights.unwrap_or_default();
            c.train.weights = Some(FilterWeights {
                beta1: self.beta1.unwrap_or(base.beta1),
                beta2: self.beta2.unwrap_or(base.beta2),
            });
        }
        if let Some(v) = self.augment {
            c.augment = v
                .into_iter()
                .map(|a| match a {
                    AugmentArg::A1 => Augmentation::A1,
                    AugmentArg::A2 => Augmentation::A2,
                })
                .collect();
        }
        if let Some(v) = self.tag {
            c.tag = Some(v);
        }
        if let Some(v) = self.trajectories {
            c.trajectories = Some(v);
        }
        if let Some(v) = self.window {
            c.window = Some(v);
        }
        c.standardize |= self.standardize;
        if let Some(v) = self.out {
            c.out = Some(v);
        }
        if let Some(v) = self.report {
            c.report = Some(v);
        }
        if let Some(v) = self.loss_csv {
            c.loss_csv = Some(v);
        }
        Ok(c)
    }
}

fn model_spec(c: &TrainRunConfig, n_agents: usize, agent_dim: usize) -> ModelSpec {
    match c.model {
        ModelKind::Constant => ModelSpec::Constant { n_agents },
        ModelKind::Mlp => ModelSpec::Mlp {
            n_agents,
            context: match c.context {
                ContextChoice::Joint => ContextKind::Joint { n_agents, agent_dim },
                ContextChoice::Relative => ContextKind::Relative { agent_dim },
            },
            hidden: c.hidden.clone(),
        },
        ModelKind::Symmetric => ModelSpec::Symmetric {
            n_agents,
            agent_dim,
            hidden: c.hidden.clone(),
        },
        ModelKind::RelativeSymmetric => ModelSpec::RelativeSymmetric {
            agent_dim,
            hidden: c.hidden.clone(),
        },
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    run: &'a TrainRunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<&'a TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    windows: Option<&'a [WindowEstimate]>,
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let c = args.resolve()?;
    let data_path = require_input(&c.data, "dataset")?;
    for p in [c.out.as_ref(), c.report.as_ref(), c.loss_csv.as_ref()].into_iter().flatten() {
        check_output(p)?;
    }
    let (header, mut samples) = load_trajectories(&data_path)?;
    let filter = header
        .filter
        .clone()
        .ok_or_else(|| invalid("dataset header has no filter configuration"))?;
    if let Some(prefix) = &c.tag {
        samples = filter_by_tag(&samples, prefix);
    }
    if let Some(ids) = &c.trajectories {
        samples = select_trajectories(&samples, ids);
    }
    for kind in &c.augment {
        samples = augment(&samples, *kind)?;
    }
    if samples.is_empty() {
        return Err(invalid("no samples left after selection"));
    }
    let mut filter = filter;
    if let Some(w) = c.train.weights {
        filter.weights = w;
    }
    let setup = FilterSetup::new(filter.clone())?;

    if let Some(window) = c.window {
        if c.model != ModelKind::Constant {
            return Err(invalid("windowed fitting uses the constant model"));
        }
        if c.out.is_some() {
            return Err(invalid("windowed fitting writes a report only; drop --out"));
        }
        let estimates = fit_windowed(&samples, &setup, &c.train, window)?;
        for e in &estimates {
            println!("samples {}..{}: gamma {:.4?}", e.start, e.end, e.gamma);
        }
        if let Some(path) = &c.report {
            write_json(path, &ReportFile { run: &c, report: None, windows: Some(&estimates) })?;
        }
        return Ok(());
    }

    let spec = model_spec(&c, header.n_agents, header.state_dim);
    let mut model = init_model(spec, c.train.seed)?;
    if c.standardize && model.network().is_some() {
        let contexts = samples
            .iter()
            .map(|s| model.context_from_state(&s.x))
            .collect::<Result<Vec<_>, _>>()?;
        model.fit_input_scale(&contexts)?;
    }
    let data = PreparedData::new(&samples, &setup, &model, c.train.weights)?;
    let result = fit(&mut model, &data, &c.train);
    if let Err(e) = &result {
        if e.partial_report().is_none() {
            return Err(result.unwrap_err().into());
        }
    }
    let report = match &result {
        Ok(r) => r,
        Err(e) => e.partial_report().expect("checked above"),
    };
    if let Some(path) = &c.report {
        write_json(path, &ReportFile { run: &c, report: Some(report), windows: None })?;
    }
    if let Some(path) = &c.loss_csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_csv_with_meta(path, &buf, &c)?;
    }
    if let Err(e) = result {
        return Err(anyhow::Error::new(e).context("training aborted; partial report written"));
    }
    if let Some(path) = &c.out {
        write_json(path, &Checkpoint::from_model(&model, Some(filter)))?;
    }
    let final_loss = report.final_loss().unwrap_or(f64::NAN);
    match &report.final_gamma {
        Some(g) => println!("trained {} epochs on {} samples: loss {final_loss:.6e}, gamma {g:.4?}", report.epochs.len(), samples.len()),
        None => println!("trained {} epochs on {} samples: loss {final_loss:.6e}", report.epochs.len(), samples.len()),
    }
    Ok(())
}
