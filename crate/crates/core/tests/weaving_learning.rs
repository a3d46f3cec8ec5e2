use respalloc::analysis::{compute_landscape, LandscapeSpec};
use respalloc::datasets::{
    generate_weaving_trajectories, weaving_truth_model, GammaTruth, InteractionSample, WeavingConfig, WeavingScenario,
};
use respalloc::models::{init_model, ModelSpec, ResponsibilityModel};
use respalloc::setup::{FilterSetup, FilterSetupConfig};
use respalloc::training::{fit, PreparedData, TrainConfig};

fn rollouts(seed: u64) -> Vec<InteractionSample> {
    let setup = FilterSetup::new(FilterSetupConfig::weaving()).unwrap();
    let config = WeavingConfig {
        count: 8,
        seed,
        ..WeavingConfig::default()
    };
    let truth = GammaTruth::Model(Box::new(weaving_truth_model(1.0)));
    generate_weaving_trajectories(WeavingScenario::RearOvertake, &config, &setup, &truth).unwrap()
}

/// Same states and desired controls, filtered with the opposite allocation.
fn relabel_reversed(samples: &[InteractionSample]) -> Vec<InteractionSample> {
    let setup = FilterSetup::new(FilterSetupConfig::weaving()).unwrap();
    let reversed = weaving_truth_model(-1.0);
    samples
        .iter()
        .map(|s| {
            let gamma = reversed.eval(&reversed.context_from_state(&s.x).unwrap()).unwrap();
            let u = setup.solve(&s.x, &s.stacked_u_des().unwrap(), &gamma).unwrap().controls;
            let mut out = s.clone();
            out.u = u.chunks(s.u[0].len()).map(<[f64]>::to_vec).collect();
            out
        })
        .collect()
}

fn train(samples: &[InteractionSample]) -> ResponsibilityModel {
    let setup = FilterSetup::new(FilterSetupConfig::weaving()).unwrap();
    let mut model = init_model(
        ModelSpec::RelativeSymmetric {
            agent_dim: 4,
            hidden: vec![16, 16],
        },
        1,
    )
    .unwrap();
    let contexts: Vec<Vec<f64>> = samples.iter().map(|s| model.context_from_state(&s.x).unwrap()).collect();
    model.fit_input_scale(&contexts).unwrap();
    let data = PreparedData::new(samples, &setup, &model, None).unwrap();
    let config = TrainConfig {
        epochs: 60,
        batch_size: 64,
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &config).unwrap();
    model
}

fn landscape_variance(model: &ResponsibilityModel) -> f64 {
    let setup = FilterSetup::new(FilterSetupConfig::weaving()).unwrap();
    let mut spec = LandscapeSpec::default();
    spec.axes[0].n = 15;
    spec.axes[1].n = 15;
    let g: Vec<f64> = compute_landscape(model, &setup, &spec).unwrap().iter().map(|c| c.gamma[0]).collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g.len() as f64
}

#[test]
fn conflicting_demonstrations_flatten_the_landscape() {
    let consistent = rollouts(5);
    let mut conflicting = consistent.clone();
    conflicting.extend(relabel_reversed(&consistent));
    let v_consistent = landscape_variance(&train(&consistent));
    let v_conflicting = landscape_variance(&train(&conflicting));
    assert!(v_conflicting < v_consistent, "{v_conflicting} vs {v_consistent}");
}
