use healthdyn_core::calibration::{build_model, CalibrationSpec, Variant};
use healthdyn_core::model::Model;
use healthdyn_core::optim::{AnnealOptions, SimplexOptions};
use healthdyn_core::sim::InitialConditions;
use healthdyn_core::smm::{
    estimate, loss, moment_weights, simulate_moments, FreeParam, SmmConfig, Weighting,
};

const TRUE_WEIGHT: f64 = 0.378;

fn setup() -> (Model, InitialConditions) {
    let m = build_model(&CalibrationSpec::coarse(Variant::Nonlinear)).unwrap();
    let init = InitialConditions::lognormal(60_000.0, 1.0, 1000, 5).unwrap();
    (m, init)
}

fn small_config() -> SmmConfig {
    let mut c = SmmConfig::only(&[FreeParam::ConsumptionWeight]);
    c.n_histories = 2000;
    c.n_starts = 2;
    c.optimizer.anneal = AnnealOptions {
        temperatures: 4,
        steps_per_temperature: 5,
        ..AnnealOptions::default()
    };
    c.optimizer.simplex = SimplexOptions {
        xtol: 1e-4,
        ftol: 1e-10,
        ..SimplexOptions::new(1, 0.1)
    };
    c.optimizer.max_cycles = 3;
    c.optimizer.max_evals = 400;
    c
}

#[test]
fn objective_is_deterministic_under_a_fixed_seed() {
    let (m, init) = setup();
    let a = simulate_moments(&m, &init, 500, 4).unwrap();
    let b = simulate_moments(&m, &init, 500, 4).unwrap();
    let w = moment_weights(&a, Weighting::Identity);
    assert_eq!(loss(&a, &b, &w).unwrap().value, 0.0);
}

#[test]
fn consumption_weight_is_recovered() {
    let (m, init) = setup();
    assert_eq!(m.params.consumption_weight, TRUE_WEIGHT);
    // data from an independent simulation seed
    let data = simulate_moments(&m, &init, 2000, 1234).unwrap();
    let mut start = m.clone();
    start.params.consumption_weight = 0.3;
    let c = small_config();
    let est = estimate(&c, &data, &start, &init).unwrap();
    assert!(
        (est.values[0] - TRUE_WEIGHT).abs() <= 0.02,
        "estimate {}",
        est.values[0]
    );
    assert_eq!(est.fit.len(), data.moments.len());

    // best loss never rises, every iterate stays inside the bounds
    assert!(est
        .trace
        .windows(2)
        .all(|w| w[1].best_loss <= w[0].best_loss));
    let (lo, hi) = (c.lower(), c.upper());
    assert!(est.trace.iter().all(|r| r.x[0] >= lo[0] && r.x[0] <= hi[0]));

    let again = estimate(&c, &data, &start, &init).unwrap();
    assert_eq!(est.values, again.values);
    assert_eq!(est.loss, again.loss);
}
