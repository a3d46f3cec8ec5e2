//! Wall-clock cost of one loss-and-gradient evaluation versus batch size.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{PreparedData, TrainConfig, TrainError};
use crate::models::ResponsibilityModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub batch_size: usize,
    /// Median over repeats of the mean time per evaluation.
    pub loss_grad_ms: f64,
    /// Per-repeat mean times, in run order.
    pub repeats_ms: Vec<f64>,
}

/// Times single-threaded loss-and-gradient evaluation on the first
/// `batch_size` samples for each size. Each repeat averages enough calls to
/// cover about `min_samples` sample evaluations.
pub fn time_loss_gradient(
    data: &PreparedData,
    model: &ResponsibilityModel,
    config: &TrainConfig,
    sizes: &[usize],
    repeats: usize,
    min_samples: usize,
) -> Result<Vec<BenchPoint>, TrainError> {
    if repeats == 0 {
        return Err(TrainError::Config("repeat count must be positive".into()));
    }
    sizes
        .iter()
        .map(|&b| {
            if b == 0 || b > data.len() {
                return Err(TrainError::Config(format!(
                    "batch size {b} outside 1..={}",
                    data.len()
                )));
            }
            let idx: Vec<usize> = (0..b).collect();
            let calls = min_samples.div_ceil(b).max(1);
            data.loss_and_gradient_sequential(model, &idx, config)?;
            let repeats_ms = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    for _ in 0..calls {
                        std::hint::black_box(data.loss_and_gradient_sequential(model, &idx, config)?);
                    }
                    Ok(start.elapsed().as_secs_f64() * 1e3 / calls as f64)
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mut sorted = repeats_ms.clone();
            sorted.sort_by(f64::total_cmp);
            Ok(BenchPoint {
                batch_size: b,
                loss_grad_ms: sorted[sorted.len() / 2],
                repeats_ms,
            })
        })
        .collect()
}

/// Least-squares slope of `log(time)` against `log(batch size)`.
pub fn scaling_exponent(points: &[BenchPoint]) -> f64 {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| ((p.batch_size as f64).ln(), p.loss_grad_ms.ln()))
        .collect();
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Doubling sweep from `min` up to and including `max` when reachable.
pub fn doubling_sizes(min: usize, max: usize) -> Vec<usize> {
    std::iter::successors(Some(min.max(1)), |&b| b.checked_mul(2))
        .take_while(|&b| b <= max)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(b: usize, ms: f64) -> BenchPoint {
        BenchPoint {
            batch_size: b,
            loss_grad_ms: ms,
            repeats_ms: vec![ms],
        }
    }

    #[test]
    fn exponent_of_exact_power_law() {
        let pts: Vec<_> = doubling_sizes(8, 512).into_iter().map(|b| point(b, 0.01 * (b as f64).powf(1.1))).collect();
        assert_eq!(pts.len(), 7);
        assert!((scaling_exponent(&pts) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn single_sample_timing_is_stable() {
        use crate::datasets::{generate_synthetic, GammaTruth, SyntheticConfig};
        use crate::models::{init_model, ModelSpec};
        use crate::setup::{FilterSetup, FilterSetupConfig};
        let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
        let config = SyntheticConfig::new(&setup.config().system, 4, 0);
        let samples = generate_synthetic(&config, &setup, &GammaTruth::Constant(vec![0.3, 0.7])).unwrap();
        let model = init_model(ModelSpec::Constant { n_agents: 2 }, 0).unwrap();
        let data = PreparedData::new(&samples, &setup, &model, None).unwrap();
        let pts = time_loss_gradient(&data, &model, &TrainConfig::default(), &[1], 10, 20_000).unwrap();
        let r = &pts[0].repeats_ms;
        let (lo, hi) = r.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert_eq!(r.len(), 10);
        assert!(hi <= 3.0 * lo, "{r:?}");
    }

    #[test]
    fn doubling_sweep() {
        assert_eq!(doubling_sizes(8, 512), vec![8, 16, 32, 64, 128, 256, 512]);
        assert_eq!(doubling_sizes(3, 20), vec![3, 6, 12]);
    }
}
