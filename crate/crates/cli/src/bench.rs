//! `bench`: loss-and-gradient cost versus batch size.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use respalloc::datasets::{generate_synthetic, GammaTruth, SyntheticConfig};
use respalloc::models::{init_model, ModelSpec};
use respalloc::setup::{FilterSetup, FilterSetupConfig};
use respalloc::training::{doubling_sizes, scaling_exponent, time_loss_gradient, PreparedData, TrainConfig};

use crate::output::{check_output, invalid, load_config, write_csv_with_meta};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON file with benchmark settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_batch: Option<usize>,
    #[arg(long)]
    max_batch: Option<usize>,
    /// Timing repeats per batch size.
    #[arg(long)]
    repeats: Option<usize>,
    /// Minimum number of sample evaluations per repeat.
    #[arg(long)]
    min_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Timing CSV to write.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub min_batch: usize,
    pub max_batch: usize,
    pub repeats: usize,
    pub min_samples: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            min_batch: 8,
            max_batch: 512,
            repeats: 10,
            min_samples: 2048,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct BenchMeta<'a> {
    config: &'a BenchConfig,
    exponent: f64,
    repeats_ms: Vec<(usize, Vec<f64>)>,
}

pub fn run(args: BenchArgs) -> anyhow::Result<()> {
    let mut c: BenchConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.min_batch {
        c.min_batch = v;
    }
    if let Some(v) = args.max_batch {
        c.max_batch = v;
    }
    if let Some(v) = args.repeats {
        c.repeats = v;
    }
    if let Some(v) = args.min_samples {
        c.min_samples = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.out {
        c.out = Some(v);
    }
    if c.min_batch == 0 || c.min_batch > c.max_batch || c.repeats == 0 {
        return Err(invalid("need 0 < min batch <= max batch and at least one repeat"));
    }
    if let Some(out) = &c.out {
        check_output(out)?;
    }

    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line())?;
    let data_config = SyntheticConfig::new(&setup.config().system, c.max_batch, c.seed);
    let samples = generate_synthetic(&data_config, &setup, &GammaTruth::Constant(vec![0.3, 0.7]))?;
    let model = init_model(ModelSpec::Constant { n_agents: 2 }, c.seed)?;
    let data = PreparedData::new(&samples, &setup, &model, None)?;
    let sizes = doubling_sizes(c.min_batch, c.max_batch);
    let points = time_loss_gradient(&data, &model, &TrainConfig::default(), &sizes, c.repeats, c.min_samples)?;
    let exponent = if points.len() >= 2 { scaling_exponent(&points) } else { f64::NAN };

    for p in &points {
        println!("batch {:>5}: {:.4} ms", p.batch_size, p.loss_grad_ms);
    }
    println!("fitted exponent {exponent:.3}");
    if let Some(out) = &c.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["batch_size", "loss_grad_ms"])?;
        for p in &points {
            w.write_record([p.batch_size.to_string(), p.loss_grad_ms.to_string()])?;
        }
        let buf = w.into_inner()?;
        let meta = BenchMeta {
            config: &c,
            exponent,
            repeats_ms: points.iter().map(|p| (p.batch_size, p.repeats_ms.clone())).collect(),
        };
        write_csv_with_meta(out, &buf, &meta)?;
    }
    Ok(())
}
