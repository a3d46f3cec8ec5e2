//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! Run with `cargo test -p respalloc --test acceptance -- --nocapture`.

use std::time::Instant;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use respalloc::analysis::{compute_landscape, max_swap_violation, mean_abs_difference, GridAxis, LandscapeSpec, RelativeAxis};
use respalloc::datasets::{
    augment, generate_synthetic, random_simplex_allocation, generate_weaving_trajectories, weaving_truth_model, Augmentation, GammaTruth,
    InteractionSample, ScheduleSegment, SyntheticConfig, WeavingConfig, WeavingScenario,
};
use respalloc::filter::{differentiate_filter, solve_filter, FilterProblem, FilterWeights};
use respalloc::models::{init_model, ContextKind, ModelSpec, ResponsibilityModel};
use respalloc::setup::{FilterSetup, FilterSetupConfig};
use respalloc::training::{
    doubling_sizes, fit, fit_windowed, scaling_exponent, time_loss_gradient, OptimizerKind, PreparedData, TrainConfig,
};

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn constant_fit(setup: &FilterSetup, samples: &[InteractionSample], config: &TrainConfig) -> Vec<f64> {
    let spec = ModelSpec::Constant {
        n_agents: setup.n_agents(),
    };
    let mut model = init_model(spec, 0).unwrap();
    let data = PreparedData::new(samples, setup, &model, None).unwrap();
    let report = fit(&mut model, &data, config).unwrap();
    report.final_gamma.unwrap()
}

#[test]
fn synthetic_recovery_two_agents() {
    let start = Instant::now();
    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
    let truth = GammaTruth::Constant(vec![0.3, 0.7]);
    let data_config = SyntheticConfig::new(&setup.config().system, 128, 1);
    let samples = generate_synthetic(&data_config, &setup, &truth).unwrap();
    let gamma = constant_fit(&setup, &samples, &TrainConfig::sgd(0.005, 8, 3000));
    let err = (gamma[0] - 0.3).abs();
    verdict(
        "synthetic_recovery_two_agents",
        err <= 0.05,
        format!("gamma_1 = {:.4}, error {err:.4} (tol 0.05), {:.1}s", gamma[0], start.elapsed().as_secs_f64()),
    );
}

#[test]
fn synthetic_recovery_six_agents() {
    let start = Instant::now();
    let setup = FilterSetup::new(FilterSetupConfig::planar_swarm(6)).unwrap();
    let target = random_simplex_allocation(6, 6);
    let truth = GammaTruth::Constant(target.clone());
    let data_config = SyntheticConfig::new(&setup.config().system, 128, 2);
    let samples = generate_synthetic(&data_config, &setup, &truth).unwrap();
    let gamma = constant_fit(&setup, &samples, &TrainConfig::sgd(0.05, 8, 3000));
    let err = gamma
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        "synthetic_recovery_six_agents",
        err <= 0.05,
        format!(
            "truth {target:.3?}, estimate {gamma:.3?}, max error {err:.4} (tol 0.05), {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn time_varying_tracking() {
    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
    let window = 128;
    let schedule = [0.2, 0.7, 0.4, 0.85];
    let truth = GammaTruth::Schedule(
        schedule
            .iter()
            .enumerate()
            .map(|(k, &g)| ScheduleSegment {
                start: k * window,
                gamma: vec![g, 1.0 - g],
            })
            .collect(),
    );
    let data_config = SyntheticConfig::new(&setup.config().system, window * schedule.len(), 3);
    let samples = generate_synthetic(&data_config, &setup, &truth).unwrap();
    let estimates = fit_windowed(&samples, &setup, &TrainConfig::sgd(0.005, 8, 3000), window).unwrap();
    let errors: Vec<f64> = estimates
        .iter()
        .zip(&schedule)
        .map(|(e, g)| (e.gamma[0] - g).abs())
        .collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    verdict(
        "time_varying_tracking",
        estimates.len() == schedule.len() && worst <= 0.1,
        format!(
            "schedule {schedule:?}, estimates {:.3?}, worst error {worst:.4} (tol 0.1)",
            estimates.iter().map(|e| e.gamma[0]).collect::<Vec<_>>()
        ),
    );
}

/// Objective with the slack eliminated at its optimum for fixed controls.
fn reduced_objective(p: &FilterProblem, u: &[f64]) -> f64 {
    let eps = (-p.constraint_value(u)).max(0.0);
    p.objective(u, eps)
}

/// Coarse-to-fine grid search over the control box; the final pass has
/// spacing `1e-3`.
fn grid_minimizer(p: &FilterProblem) -> Vec<f64> {
    let (lo, hi) = (p.lower().to_vec(), p.upper().to_vec());
    let mut center = vec![0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let mut half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])];
    for step in [0.05, 1e-3] {
        let axis = |k: usize| {
            let a = (center[k] - half[k]).max(lo[k]);
            let b = (center[k] + half[k]).min(hi[k]);
            let n = ((b - a) / step).round() as usize;
            (0..=n).map(move |i| (a + step * i as f64).min(b))
        };
        let best = axis(0)
            .cartesian_product(axis(1).collect::<Vec<_>>())
            .map(|(u1, u2)| (reduced_objective(p, &[u1, u2]), u1, u2))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        center = vec![best.1, best.2];
        half = [3.0 * step, 3.0 * step];
    }
    center
}

#[test]
fn qp_matches_grid_search() {
    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_u, mut worst_kkt, mut active) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let scale = if rng.random_bool(0.2) { 12.0 } else { 2.5 };
        let desired = [rng.random_range(-scale..scale), rng.random_range(-scale..scale)];
        let g = rng.random_range(0.0..1.0);
        let p = setup.problem(&x, &desired, &[g, 1.0 - g]).unwrap();
        let s = solve_filter(&p).unwrap();
        active += s.active.cbf as usize;
        let grid = grid_minimizer(&p);
        for (a, b) in s.controls.iter().zip(&grid) {
            worst_u = worst_u.max((a - b).abs());
        }
        worst_kkt = worst_kkt.max(s.kkt_residual(&p).max());
    }
    verdict(
        "qp_matches_grid_search",
        worst_u <= 2e-3 && worst_kkt <= 1e-7,
        format!("200 instances ({active} with active barrier row), max |u - u_grid| {worst_u:.2e} (tol 2e-3), max KKT residual {worst_kkt:.2e} (tol 1e-7)"),
    );
}

#[test]
fn responsibility_shifts_monotonically() {
    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
    let x = [0.0, 1.5];
    let desired = [1.0, -1.0];
    let deviations: Vec<(f64, f64)> = (0..=10)
        .map(|k| {
            let g = k as f64 / 10.0;
            let s = setup.solve(&x, &desired, &[g, 1.0 - g]).unwrap();
            assert!(s.active.cbf);
            ((s.controls[0] - desired[0]).abs(), (s.controls[1] - desired[1]).abs())
        })
        .collect();
    let monotone = deviations
        .windows(2)
        .all(|w| w[1].0 <= w[0].0 + 1e-12 && w[1].1 >= w[0].1 - 1e-12);
    let share = |d: (f64, f64)| d.0 / (d.0 + d.1);
    let (first, last) = (share(deviations[0]), share(deviations[10]));

    let sharp = setup
        .with_weights(FilterWeights {
            beta1: 1e-7,
            beta2: 1e9,
        })
        .unwrap();
    let end0 = sharp.solve(&x, &desired, &[0.0, 1.0]).unwrap().controls;
    let end1 = sharp.solve(&x, &desired, &[1.0, 0.0]).unwrap().controls;
    let endpoints = (end0[1] + 1.0).abs() <= 1e-4 && (end1[0] - 1.0).abs() <= 1e-4;
    verdict(
        "responsibility_shifts_monotonically",
        monotone && first >= 0.9 && last <= 0.1 && endpoints,
        format!(
            "agent 1 share of deviation {first:.3} at gamma_1 = 0 and {last:.3} at gamma_1 = 1; \
             near-unregularized endpoints u(0,1) = {end0:.4?}, u(1,0) = {end1:.4?}"
        ),
    );
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn differentiation_matches_finite_differences() {
    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
    let data_config = SyntheticConfig::new(&setup.config().system, 400, 5);
    let samples = generate_synthetic(&data_config, &setup, &GammaTruth::Constant(vec![0.3, 0.7])).unwrap();
    let model = init_model(
        ModelSpec::Mlp {
            n_agents: 2,
            context: ContextKind::Joint { n_agents: 2, agent_dim: 1 },
            hidden: vec![8, 8],
        },
        5,
    )
    .unwrap();
    let data = PreparedData::new(&samples, &setup, &model, None).unwrap();
    let config = TrainConfig::default();
    let is_active = |k: usize| {
        let s = &samples[k];
        let g = model.eval(&model.context_from_state(&s.x).unwrap()).unwrap();
        setup.solve(&s.x, &s.stacked_u_des().unwrap(), &g).unwrap().active.cbf
    };
    let (on, off): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&k| is_active(k));
    let batches: Vec<Vec<usize>> = on.chunks(4).take(10).chain(off.chunks(4).take(10)).map(|c| c.to_vec()).collect();
    assert_eq!(batches.len(), 20);
    let h = 1e-6;
    let mut worst_chain = 0.0f64;
    for batch in &batches {
        let (_, grad) = data.loss_and_gradient(&model, batch, &config).unwrap();
        let fd: Vec<f64> = (0..model.n_params())
            .map(|k| {
                let mut m = model.clone();
                m.params_mut()[k] += h;
                let up = data.loss(&m, batch, &config).unwrap();
                m.params_mut()[k] -= 2.0 * h;
                let down = data.loss(&m, batch, &config).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        worst_chain = worst_chain.max(relative_error(&grad, &fd));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_qp = 0.0f64;
    let mut regimes = [0usize; 2];
    for _ in 0..20 {
        let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let d = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let g = rng.random_range(0.1..0.9);
        let p = setup.problem(&x, &d, &[g, 1.0 - g]).unwrap();
        let s = solve_filter(&p).unwrap();
        regimes[s.active.cbf as usize] += 1;
        let jac = differentiate_filter(&p, &s);
        // Allocations stay on the simplex, so probe along (1, -1).
        let gp = [g + h, 1.0 - g - h];
        let gm = [g - h, 1.0 - g + h];
        let up = solve_filter(&p.with_gamma(&gp).unwrap()).unwrap().controls;
        let down = solve_filter(&p.with_gamma(&gm).unwrap()).unwrap().controls;
        let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let analytic: Vec<f64> = (0..2).map(|j| jac.du_dgamma[(j, 0)] - jac.du_dgamma[(j, 1)]).collect();
        worst_qp = worst_qp.max(relative_error(&analytic, &fd));
        for i in 0..2 {
            let mut dp = d;
            let mut dm = d;
            dp[i] += h;
            dm[i] -= h;
            let up = solve_filter(&p.with_desired(&dp).unwrap()).unwrap().controls;
            let down = solve_filter(&p.with_desired(&dm).unwrap()).unwrap().controls;
            let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let analytic: Vec<f64> = (0..2).map(|j| jac.du_ddesired[(j, i)]).collect();
            worst_qp = worst_qp.max(relative_error(&analytic, &fd));
        }
    }
    verdict(
        "differentiation_matches_finite_differences",
        worst_chain <= 1e-3 && worst_qp <= 1e-4,
        format!(
            "chained gradient worst rel. error {worst_chain:.2e} over 20 batches (10 active, 10 inactive; tol 1e-3); \
             filter Jacobian worst rel. error {worst_qp:.2e} over {} active / {} inactive instances (tol 1e-4)",
            regimes[1], regimes[0]
        ),
    );
}

fn swap_blocks(x: &[f64], d: usize, i: usize, j: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for k in 0..d {
        y.swap(i * d + k, j * d + k);
    }
    y
}

#[test]
fn symmetry_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let d = 2;
    for n in [2, 3, 4] {
        let spec = ModelSpec::Symmetric {
            n_agents: n,
            agent_dim: d,
            hidden: vec![16, 16, 16],
        };
        let m = init_model(spec, n as u64).unwrap();
        let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = m.eval(&x).unwrap();
            worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
            for i in 0..n {
                for j in 0..n {
                    let s = m.eval(&swap_blocks(&x, d, i, j)).unwrap();
                    worst = worst.max((g[i] - s[j]).abs());
                }
                for p in perms.iter().filter(|p| p[i] == i) {
                    let y: Vec<f64> = p.iter().flat_map(|&src| x[src * d..src * d + d].to_vec()).collect();
                    worst = worst.max((g[i] - m.eval(&y).unwrap()[i]).abs());
                }
            }
        }
    }
    let rel = init_model(ModelSpec::RelativeSymmetric { agent_dim: 4, hidden: vec![16, 16, 16] }, 9).unwrap();
    let mut worst_rel = 0.0f64;
    for _ in 0..1000 {
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let g = rel.eval(&r).unwrap();
        let h = rel.eval(&neg).unwrap();
        worst_rel = worst_rel.max((g[0] + h[0] - 1.0).abs()).max((g[0] + g[1] - 1.0).abs());
    }
    verdict(
        "symmetry_suite",
        worst <= 1e-12 && worst_rel <= 1e-12,
        format!("permutation-symmetric N = 2, 3, 4 worst deviation {worst:.1e}; relative negation worst deviation {worst_rel:.1e} (tol 1e-12)"),
    );
}

fn weaving_setup() -> FilterSetup {
    FilterSetup::new(FilterSetupConfig::weaving()).unwrap()
}

fn weaving_data(scenario: WeavingScenario, count: usize, seed: u64) -> Vec<InteractionSample> {
    let config = WeavingConfig {
        count,
        seed,
        ..WeavingConfig::default()
    };
    let truth = GammaTruth::Model(Box::new(weaving_truth_model(1.0)));
    generate_weaving_trajectories(scenario, &config, &weaving_setup(), &truth).unwrap()
}

fn weaving_fit(spec: ModelSpec, samples: &[InteractionSample], epochs: usize) -> ResponsibilityModel {
    let setup = weaving_setup();
    let mut model = init_model(spec, 11).unwrap();
    let contexts: Vec<Vec<f64>> = samples.iter().map(|s| model.context_from_state(&s.x).unwrap()).collect();
    model.fit_input_scale(&contexts).unwrap();
    let data = PreparedData::new(samples, &setup, &model, None).unwrap();
    let config = TrainConfig {
        epochs,
        batch_size: 64,
        learning_rate: 1e-3,
        optimizer: OptimizerKind::Adam,
        seed: 3,
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &config).unwrap();
    model
}

fn probe_grid(r_lat: f64) -> LandscapeSpec {
    LandscapeSpec {
        axes: [
            GridAxis {
                axis: RelativeAxis::RLon,
                min: -10.0,
                max: 10.0,
                n: 21,
            },
            GridAxis {
                axis: RelativeAxis::VLon,
                min: -3.0,
                max: 3.0,
                n: 13,
            },
        ],
        fixed: [0.0, r_lat, 0.0, 0.0],
        ..LandscapeSpec::default()
    }
}

#[test]
fn symmetric_model_is_data_efficient() {
    let start = Instant::now();
    let samples = weaving_data(WeavingScenario::Mixed, 20, 21);
    let augmented = augment(&samples, Augmentation::A2).unwrap();
    let symmetric = weaving_fit(ModelSpec::RelativeSymmetric { agent_dim: 4, hidden: vec![16, 16, 16] }, &samples, 200);
    let plain = ModelSpec::Mlp {
        n_agents: 2,
        context: ContextKind::Relative { agent_dim: 4 },
        hidden: vec![16, 16, 16],
    };
    let with_a2 = weaving_fit(plain.clone(), &augmented, 100);
    let without_a2 = weaving_fit(plain, &samples, 200);
    let setup = weaving_setup();
    let mut agreement = 0.0f64;
    let mut violation = 0.0f64;
    for r_lat in [-3.7, 0.0] {
        let grid = probe_grid(r_lat);
        let a = compute_landscape(&symmetric, &setup, &grid).unwrap();
        let b = compute_landscape(&with_a2, &setup, &grid).unwrap();
        agreement = agreement.max(mean_abs_difference(&a, &b));
        violation = violation.max(max_swap_violation(&without_a2, &grid).unwrap());
    }
    verdict(
        "symmetric_model_is_data_efficient",
        agreement <= 0.1 && violation > 0.1,
        format!(
            "mean |dgamma| symmetric vs unconstrained+swap-augmented {agreement:.4} (tol 0.1); \
             unconstrained without augmentation swap violation {violation:.4} (needs > 0.1); {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn batch_cost_scales_linearly() {
    let setup = FilterSetup::new(FilterSetupConfig::two_agent_line()).unwrap();
    let data_config = SyntheticConfig::new(&setup.config().system, 512, 8);
    let samples = generate_synthetic(&data_config, &setup, &GammaTruth::Constant(vec![0.3, 0.7])).unwrap();
    let model = init_model(ModelSpec::Constant { n_agents: 2 }, 0).unwrap();
    let data = PreparedData::new(&samples, &setup, &model, None).unwrap();
    let sizes = doubling_sizes(8, 512);
    let points = time_loss_gradient(&data, &model, &TrainConfig::default(), &sizes, 7, 4096).unwrap();
    let slope = scaling_exponent(&points);
    verdict(
        "batch_cost_scales_linearly",
        (0.8..=1.2).contains(&slope),
        format!("fitted exponent {slope:.3} over batch sizes {sizes:?} (accept [0.8, 1.2])"),
    );
}

#[test]
fn learned_landscape_favors_faster_car() {
    let start = Instant::now();
    let samples = weaving_data(WeavingScenario::RearOvertake, 20, 31);
    let model = weaving_fit(ModelSpec::RelativeSymmetric { agent_dim: 4, hidden: vec![16, 16, 16] }, &samples, 200);
    let mut checked = 0;
    let mut agree = 0;
    for r_lat in [-3.7, -1.85, 0.0, 1.85, 3.7] {
        for v in [0.5, 1.0, 2.0, 3.0] {
            // Agent 2 faster by v at equal longitudinal position.
            let g = model.eval(&[0.0, r_lat, v, 0.0]).unwrap();
            checked += 1;
            agree += (g[1] > g[0]) as usize;
        }
    }
    verdict(
        "learned_landscape_favors_faster_car",
        agree == checked,
        format!(
            "faster car receives the larger gamma in {agree} of {checked} equal-position probes; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}
