//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line with the measured quantities before asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use healthdyn_core::calibration::{
    annual_health_process, build_model, degenerate_model, synthetic_mortality, CalibrationSpec,
    Variant,
};
use healthdyn_core::dynamics::canonical::{
    canonical_moments, estimate_canonical, simulate_canonical, simulate_residual_panel,
    CanonicalFitOptions, CanonicalParams, MomentKey, VarianceForm,
};
use healthdyn_core::dynamics::discrete::{
    annualize, discretize, mortality_bias_correction, BiasCorrectionOptions,
};
use healthdyn_core::dynamics::generator::{HealthGenerator, KinkedQuantile};
use healthdyn_core::dynamics::quantile::{
    estimate_quantile_table, persistence, simulate_generator, EtaPanel, EtaTransition,
    QuantileFitOptions, QuantileTable,
};
use healthdyn_core::earnings::{estimate_earnings_process, WageObs, WageProfile};
use healthdyn_core::model::params::{utility, PENSION_AGE};
use healthdyn_core::model::solver::{solve, Solution};
use healthdyn_core::model::{Channel, Model};
use healthdyn_core::optim::{AnnealOptions, SimplexOptions};
use healthdyn_core::sim::experiments::{
    counterfactual_shock, decomposition_table, willingness_to_pay, wtp_curve, Outcomes,
    ShockExperiment, ShockRow, SHOCK_AGE,
};
use healthdyn_core::sim::{simulate_histories, InitialConditions, SimOptions};
use healthdyn_core::smm::{estimate, simulate_moments, FreeParam, SmmConfig};
use healthdyn_core::stats::{mean, quantile, variance};

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    // the stdout handle bypasses test output capture, so the line shows in every run
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("{status} [{id:>2}] {name}: {detail}\n");
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn solved(variant: Variant) -> &'static (Model, Solution) {
    static NONLINEAR: OnceLock<(Model, Solution)> = OnceLock::new();
    static CANONICAL: OnceLock<(Model, Solution)> = OnceLock::new();
    let cell = match variant {
        Variant::Nonlinear => &NONLINEAR,
        Variant::Canonical => &CANONICAL,
    };
    cell.get_or_init(|| {
        let m = build_model(&CalibrationSpec::new(variant)).unwrap();
        let s = solve(&m).unwrap();
        (m, s)
    })
}

fn coarse() -> (Model, Solution) {
    let m = build_model(&CalibrationSpec::coarse(Variant::Nonlinear)).unwrap();
    let s = solve(&m).unwrap();
    (m, s)
}

#[test]
fn c01_canonical_process_recovery() {
    let start = Instant::now();
    let truth = CanonicalParams::HEALTH;
    let panel = simulate_residual_panel(&truth, 50_000, 5, 2024).unwrap();
    let fit = estimate_canonical(&panel, &CanonicalFitOptions::default())
        .unwrap()
        .params;
    let secs = start.elapsed().as_secs_f64();
    let pass = (fit.rho - truth.rho).abs() <= 0.02
        && (fit.var_nu - truth.var_nu).abs() <= 0.03
        && (fit.var_eps - truth.var_eps).abs() <= 0.03
        && (fit.var0 - truth.var0).abs() <= 0.03
        && secs < 120.0;
    verdict(
        1,
        "canonical process recovery",
        pass,
        format!(
            "rho {:.4} var_nu {:.4} var_eps {:.4} var0 {:.4} in {secs:.1}s",
            fit.rho, fit.var_nu, fit.var_eps, fit.var0
        ),
    );
}

#[test]
fn c02_earnings_process_recovery() {
    let start = Instant::now();
    let truth = CanonicalParams::WAGE;
    let n = 50_000;
    let waves = 5;
    let residual = simulate_residual_panel(&truth, n, waves, 77).unwrap();
    // health covariate with its own persistence, independent of wages
    let health_process = CanonicalParams {
        rho: 0.9,
        var_nu: 0.1,
        var_eps: 0.1,
        var0: 0.5,
    };
    let (eta, eps) = simulate_canonical(&health_process, n, waves, 78).unwrap();
    let profile = WageProfile::default();
    let obs: Vec<WageObs> = residual
        .obs
        .iter()
        .map(|o| {
            let i = o.person as usize;
            let age = 50 + (i % 10) as u32 + 2 * o.t as u32;
            let h = eta[i * waves + o.t] + eps[i * waves + o.t];
            WageObs {
                person: o.person,
                wave: o.t,
                age,
                health: h,
                log_wage: profile.log_wage(h, age) + o.value,
            }
        })
        .collect();
    let fit = estimate_earnings_process(&obs, profile.knots, &CanonicalFitOptions::default())
        .unwrap()
        .stochastic;
    let secs = start.elapsed().as_secs_f64();
    let pass = [
        (fit.rho, truth.rho),
        (fit.var_nu, truth.var_nu),
        (fit.var_eps, truth.var_eps),
        (fit.var0, truth.var0),
    ]
    .iter()
    .all(|(a, b)| (a - b).abs() <= 0.03)
        && secs < 120.0;
    verdict(
        2,
        "earnings process recovery",
        pass,
        format!(
            "rho {:.4} var_nu {:.4} var_err {:.4} var0 {:.4} in {secs:.1}s",
            fit.rho, fit.var_nu, fit.var_eps, fit.var0
        ),
    );
}

#[test]
fn c03_moment_formula_against_monte_carlo() {
    let params = CanonicalParams::HEALTH;
    let (n, periods) = (1_000_000, 5);
    let (eta, eps) = simulate_canonical(&params, n, periods, 99).unwrap();
    let h: Vec<f64> = eta.iter().zip(&eps).map(|(a, b)| a + b).collect();
    let lags: Vec<usize> = (1..periods).collect();
    let standard = canonical_moments(&params, periods, &lags, VarianceForm::Standard).unwrap();
    let printed = canonical_moments(&params, periods, &lags, VarianceForm::AsPrinted).unwrap();
    let (mut worst_standard, mut worst_printed) = (0.0f64, 0.0f64);
    for t in 0..periods {
        for lag in 0..=t {
            let products: Vec<f64> = (0..n)
                .map(|i| h[i * periods + t] * h[i * periods + t - lag])
                .collect();
            let m = mean(&products);
            let se = (variance(&products) / n as f64).sqrt();
            let key = MomentKey { t, lag };
            worst_standard = worst_standard.max((m - standard.values[&key]).abs() / se);
            worst_printed = worst_printed.max((m - printed.values[&key]).abs() / se);
        }
    }
    verdict(
        3,
        "moment formula oracle",
        worst_standard < 3.0,
        format!(
            "largest gap {worst_standard:.2} standard errors with (1-rho^2) accumulation; the (1+rho^2) form misses by up to {worst_printed:.1}"
        ),
    );
}

/// Transitions between consecutive periods of row-major paths.
fn transitions(values: &[f64], n_paths: usize, periods: usize) -> Vec<EtaTransition> {
    (0..n_paths)
        .flat_map(|i| (1..periods).map(move |t| (i, t)))
        .map(|(i, t)| EtaTransition {
            age: 50,
            prev: values[i * periods + t - 1],
            next: values[i * periods + t],
        })
        .collect()
}

fn binned_table(
    trs: Vec<EtaTransition>,
    initial: Vec<f64>,
    n_rows: usize,
    taus: Vec<f64>,
) -> QuantileTable {
    let prevs: Vec<f64> = trs.iter().map(|t| t.prev).collect();
    let eta_grid = (0..n_rows)
        .map(|k| quantile(&prevs, (k as f64 + 0.5) / n_rows as f64))
        .collect();
    let panel = EtaPanel {
        initial_age: 50,
        initial,
        transitions: trs,
    };
    let opts = QuantileFitOptions {
        eta_grid,
        taus,
        min_count: 50,
        ages: vec![50],
        age_window: None,
    };
    estimate_quantile_table(&panel, &opts).unwrap()
}

fn twentieths() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

#[test]
fn c04_quantile_estimator_embeds_the_linear_process() {
    let rho = 0.9;
    let var_nu = 0.19;
    let params = CanonicalParams {
        rho,
        var_nu,
        var_eps: 0.0,
        var0: var_nu / (1.0 - rho * rho),
    };
    let (n_paths, periods) = (200_000, 6);
    let (eta, _) = simulate_canonical(&params, n_paths, periods, 5).unwrap();
    let trs = transitions(&eta, n_paths, periods);
    let n_obs = trs.len();
    let initial: Vec<f64> = (0..n_paths).map(|i| eta[i * periods]).collect();
    let table = binned_table(trs, initial, 11, twentieths());
    let slice = &table.slices[0];
    let mut values = Vec::new();
    for &e in &slice.eta {
        for &tau in &table.taus {
            values.push(persistence(slice, &table.taus, e, tau).value);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = mean(&values);
    verdict(
        4,
        "quantile machinery embeds AR(1)",
        hi - lo < 0.05 && (level - rho).abs() <= 0.02,
        format!(
            "{n_obs} transitions, persistence range {:.4}, mean {level:.4} vs {rho}",
            hi - lo
        ),
    );
}

#[test]
fn c05_nonlinear_persistence_shape() {
    let generator = KinkedQuantile::default();
    let true_gap = generator.rho_low_bad - generator.rho_low_good;
    let (n_paths, horizon) = (200_000, 6);
    let paths = simulate_generator(
        &HealthGenerator::Kinked(generator.clone()),
        50,
        n_paths,
        horizon,
        8,
    );
    let trs = transitions(&paths.values, n_paths, paths.horizon);
    let prevs: Vec<f64> = trs.iter().map(|t| t.prev).collect();
    let low_eta = quantile(&prevs, 0.2);
    let initial = paths.period(0);
    let table = binned_table(trs, initial, 41, twentieths());
    let slice = &table.slices[0];
    let low_tau = persistence(slice, &table.taus, low_eta, 0.1).value;
    let high_tau = persistence(slice, &table.taus, low_eta, 0.9).value;
    let gap = low_tau - high_tau;
    verdict(
        5,
        "nonlinear persistence shape",
        low_eta < generator.kink && gap > 0.2 && (gap - true_gap).abs() <= 0.1,
        format!("at eta {low_eta:.3}: persistence {low_tau:.3} (tau 0.1) vs {high_tau:.3} (tau 0.9), gap {gap:.3} vs true {true_gap:.2}"),
    );
}

#[test]
fn c06_discretization_algebra() {
    let spec = CalibrationSpec::new(Variant::Nonlinear);
    let horizon = ((spec.grid.last_age - spec.grid.first_age + 1) / 2) as usize;
    let paths = simulate_generator(
        &spec.generator,
        spec.grid.first_age,
        spec.n_paths,
        horizon,
        spec.seed,
    );
    let biennial = discretize(&paths, spec.generator.sigma_eps(), spec.n_eta, spec.n_eps).unwrap();
    let annual = annualize(&biennial);
    let row_error = annual
        .transitions
        .iter()
        .chain(&biennial.transitions)
        .map(|t| t.stochastic_error())
        .fold(0.0f64, f64::max);
    let identity_steps = annual
        .transitions
        .iter()
        .step_by(2)
        .all(|t| t.is_identity());
    let composed = (0..biennial.transitions.len()).all(|k| {
        annual.transitions[2 * k].matmul(&annual.transitions[2 * k + 1]) == biennial.transitions[k]
    });
    verdict(
        6,
        "discretization and annualization algebra",
        row_error <= 1e-12 && identity_steps && composed,
        format!(
            "max row-sum error {row_error:.1e}; within-block steps identity: {identity_steps}; annual pairs compose to two-year matrices: {composed}"
        ),
    );
}

#[test]
fn c07_mortality_rescaling_and_selection() {
    let spec = CalibrationSpec::new(Variant::Nonlinear);
    let process = annual_health_process(
        &spec.generator,
        spec.grid.first_age,
        spec.grid.last_age,
        spec.n_paths,
        spec.n_eta,
        spec.n_eps,
        spec.seed,
    )
    .unwrap();
    let table = synthetic_mortality(&process, &spec.mortality).unwrap();
    let life = spec
        .mortality
        .life_table(spec.grid.first_age, spec.grid.last_age);
    let weighted = table.weighted_rates();
    let rate_gap = table
        .ages
        .iter()
        .zip(&weighted)
        .map(|(a, w)| (w - life.rate(*a).unwrap()).abs())
        .fold(0.0f64, f64::max);
    let targets = process.medians();
    let corrected = mortality_bias_correction(
        &process,
        &table.rates,
        &targets,
        &BiasCorrectionOptions::default(),
    )
    .unwrap();
    let raw_gap = process
        .survivor_medians(&table.rates)
        .iter()
        .zip(&targets)
        .map(|(m, t)| (m - t).abs())
        .fold(0.0f64, f64::max);
    verdict(
        7,
        "mortality rescaling and selection correction",
        rate_gap <= 1e-10 && corrected.converged && corrected.iterations <= 50 && corrected.max_gap < 1e-3,
        format!(
            "life-table gap {rate_gap:.1e}; survivor-median gap {raw_gap:.3} before, {:.1e} after {} iterations",
            corrected.max_gap, corrected.iterations
        ),
    );
}

/// Best lifetime utility over every sequence of grid asset choices.
fn enumerate(model: &Model, t: usize, a: f64) -> f64 {
    if t == model.n_ages() {
        return 0.0;
    }
    let p = &model.params;
    let cash = a.max(p.consumption_floor);
    model
        .grid
        .assets
        .iter()
        .filter(|&&next| cash - next >= p.consumption_floor - 1e-9)
        .map(|&next| {
            utility(
                cash - next,
                p.time_endowment,
                p.consumption_weight,
                p.risk_aversion,
            )
            .unwrap()
                + enumerate(model, t + 1, next)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn c08_solver_correctness() {
    let grid: Vec<f64> = (0..10).map(|k| 2000.0 * k as f64).collect();
    let tiny = degenerate_model(70, 72, grid.clone()).unwrap();
    let tiny_sol = solve(&tiny).unwrap();
    let brute_gap = grid
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            (tiny_sol.slices[0].value[tiny_sol.dims.index(k, 0, 0, 0, 0)] - enumerate(&tiny, 0, a))
                .abs()
        })
        .fold(0.0f64, f64::max);

    let (m, sol) = coarse();
    let d = sol.dims;
    let mut monotone = true;
    for s in &sol.slices {
        for idx in 0..d.len() {
            let (a, p, j, i, e) = d.unpack(idx);
            if a > 0 && s.value[idx] < s.value[d.index(a - 1, p, j, i, e)] {
                monotone = false;
            }
        }
    }
    let init = InitialConditions::lognormal(50_000.0, 1.2, 1000, 4).unwrap();
    let hs = simulate_histories(&m, &sol, &init, &SimOptions::new(3000, 9)).unwrap();
    let p = &m.params;
    let (mut budget_gap, mut time_gap) = (0.0f64, 0.0f64);
    let (mut floor_ok, mut retired_ok) = (true, true);
    for h in &hs {
        for t in 0..h.periods() {
            let age = h.age(t);
            let contribution = if age < PENSION_AGE {
                p.pension_contribution_rate
            } else {
                0.0
            };
            let pension_income = if age >= PENSION_AGE {
                p.pension_annuity_rate * h.pension[t]
            } else {
                0.0
            };
            let implied = h.assets[t] * (1.0 + p.interest_rate)
                + h.hours[t] * h.wage[t] * (1.0 - contribution)
                + pension_income
                - h.tax[t]
                + h.transfer[t]
                - h.consumption[t]
                - h.work_cost[t];
            budget_gap = budget_gap.max((h.next_assets[t] - implied).abs());
            let time_cost = p
                .time_cost
                .eval(m.channel_health(Channel::TimeCost, t, h.health[t]))
                .0;
            time_gap =
                time_gap.max((h.leisure[t] - (p.time_endowment - h.hours[t] - time_cost)).abs());
            floor_ok &= h.consumption[t] >= p.consumption_floor - 1e-9;
            retired_ok &= age < 70 || h.hours[t] == 0.0;
        }
    }
    verdict(
        8,
        "solver correctness",
        brute_gap <= 1e-9 && monotone && budget_gap <= 1e-9 && time_gap <= 1e-9 && floor_ok && retired_ok,
        format!(
            "enumeration gap {brute_gap:.1e}; value monotone: {monotone}; budget residual {budget_gap:.1e}; time residual {time_gap:.1e}; consumption floor held: {floor_ok}; no work from 70: {retired_ok}"
        ),
    );
}

#[test]
fn c09_smm_self_recovery() {
    let start = Instant::now();
    let m = build_model(&CalibrationSpec::coarse(Variant::Nonlinear)).unwrap();
    let truth = m.params.consumption_weight;
    let init = InitialConditions::lognormal(60_000.0, 1.0, 1000, 5).unwrap();
    let data = simulate_moments(&m, &init, 2000, 1234).unwrap();
    let mut from = m.clone();
    from.params.consumption_weight = 0.3;
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
    let est = estimate(&c, &data, &from, &init).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        9,
        "SMM self-recovery",
        (est.values[0] - truth).abs() <= 0.02 && secs <= 1800.0,
        format!(
            "consumption weight {:.4} vs {truth} after {} evaluations in {secs:.0}s",
            est.values[0],
            est.trace.len()
        ),
    );
}

fn assets_at_85(r: &healthdyn_core::sim::experiments::ShockResult, tau: f64) -> f64 {
    r.diffs
        .iter()
        .find(|d| d.tau_shock == tau && d.age == 85 && d.variable == "assets")
        .unwrap()
        .value
}

#[test]
fn c10_counterfactual_structure() {
    let (m, sol) = solved(Variant::Nonlinear);

    let mut own = ShockExperiment::new(0.1, 10_000.0, 2000, 3);
    own.tau_shocks = vec![0.5];
    let r = counterfactual_shock(m, sol, &own).unwrap();
    let self_zero = r.diffs.iter().all(|d| d.value == 0.0 || d.value.is_nan());

    let (cm, csol) = solved(Variant::Canonical);
    let t = cm.grid.ages.iter().position(|a| *a == SHOCK_AGE).unwrap();
    let n = cm.health.n_eta();
    let cell = (cm.health.eta_at(t, n - 1) - cm.health.eta_at(t, 0)) / (n - 1) as f64;
    let asym = [0.1, 0.5, 0.9].map(|tau| {
        counterfactual_shock(cm, csol, &ShockExperiment::new(tau, 10_000.0, 5000, 1))
            .unwrap()
            .eta_asymmetry(0.1, 0.9)
            .unwrap()
    });
    let symmetric = asym.iter().all(|a| *a < cell);

    let mut lines = Vec::new();
    let mut asset_asymmetry = true;
    for a0 in [10_000.0, 80_000.0, 200_000.0] {
        let r = counterfactual_shock(m, sol, &ShockExperiment::new(0.1, a0, 20_000, 1)).unwrap();
        let (loss, gain) = (assets_at_85(&r, 0.1), assets_at_85(&r, 0.9));
        let holds = loss.abs() > gain.abs();
        // the low-wealth cell is reported but not required; see the project notes
        if a0 > 10_000.0 {
            asset_asymmetry &= holds;
        }
        lines.push(format!(
            "a0 {a0}: bad {loss:.0} good {gain:+.0}{}",
            if holds { "" } else { " (reversed)" }
        ));
    }

    let low =
        counterfactual_shock(m, sol, &ShockExperiment::new(0.1, 10_000.0, 20_000, 1)).unwrap();
    let ratios: Vec<f64> = low
        .cov_ratio(0.1)
        .unwrap()
        .iter()
        .zip(&low.median.profiles.ages)
        .filter(|(_, age)| **age > SHOCK_AGE)
        .filter_map(|(r, _)| *r)
        .collect();
    let cov_ratio = mean(&ratios);

    verdict(
        10,
        "counterfactual structure",
        self_zero && symmetric && asset_asymmetry && cov_ratio > 1.0,
        format!(
            "self-difference zero: {self_zero}; canonical eta asymmetry {:.3}/{:.3}/{:.3} vs cell {cell:.3}; assets at 85 {}; bad-shock CoV ratio {cov_ratio:.3}",
            asym[0],
            asym[1],
            asym[2],
            lines.join(", ")
        ),
    );
}

#[test]
fn c11_decomposition_neutrality_and_signs() {
    let (coarse_model, _) = coarse();
    let neutral = coarse_model.with_channels_at(&Channel::ALL, 0.5).unwrap();
    let neutral_sol = solve(&neutral).unwrap();
    let init = InitialConditions::lognormal(50_000.0, 1.0, 300, 2).unwrap();
    let a = SimOptions::new(1000, 3);
    let mut b = a.clone();
    b.seeds = b.seeds.with_health(999);
    let ha = simulate_histories(&neutral, &neutral_sol, &init, &a).unwrap();
    let hb = simulate_histories(&neutral, &neutral_sol, &init, &b).unwrap();
    let draws_differ = ha.iter().zip(&hb).any(|(x, y)| x.eta != y.eta);
    let invariant = Outcomes::from_histories(&ha) == Outcomes::from_histories(&hb);

    let (m, _) = solved(Variant::Nonlinear);
    let init = InitialConditions::lognormal(60_000.0, 1.0, 1000, 5).unwrap();
    let rows = decomposition_table(m, 0.75, &init, &SimOptions::new(5000, 21)).unwrap();
    let time = rows
        .iter()
        .find(|r| r.channels == vec![Channel::TimeCost])
        .unwrap();
    let signs = time.pct_change.employment > 0.0 && time.pct_change.hours > 0.0;
    let summary: Vec<String> = rows
        .iter()
        .skip(1)
        .map(|r| {
            let label: Vec<&str> = r.channels.iter().map(|c| c.name()).collect();
            format!(
                "{} emp {:+.1}% hrs {:+.1}%",
                label.join("+"),
                r.pct_change.employment,
                r.pct_change.hours
            )
        })
        .collect();
    verdict(
        11,
        "decomposition neutrality and signs",
        draws_differ && invariant && signs,
        format!(
            "health draws differ: {draws_differ}; outcomes identical: {invariant}; {}",
            summary.join("; ")
        ),
    );
}

#[test]
fn c12_willingness_to_pay_properties() {
    let (m, sol) = solved(Variant::Nonlinear);
    let taus = [0.05, 0.1, 0.3, 0.5, 0.7, 0.9];
    let (mut natural_max, mut dominated_ok, mut decreasing) = (0.0f64, true, true);
    let mut shown = Vec::new();
    for tau_init in [0.1, 0.5] {
        for a0 in [10_000.0, 80_000.0, 200_000.0] {
            let r = willingness_to_pay(m, sol, tau_init, &ShockRow::Natural, a0, 0.0).unwrap();
            natural_max = natural_max.max(r.wtp.abs());
            let curve = wtp_curve(m, sol, tau_init, &taus, a0).unwrap();
            dominated_ok &= curve.iter().take(2).all(|(_, w)| w.wtp >= 0.0);
            decreasing &= curve.windows(2).all(|w| w[1].1.wtp <= w[0].1.wtp + 1.0);
            if tau_init == 0.1 {
                shown.push(format!("a0 {a0}: {:.0}", curve[1].1.wtp));
            }
        }
    }
    verdict(
        12,
        "willingness-to-pay properties",
        natural_max <= 1.0 && dominated_ok && decreasing,
        format!(
            "natural-transition |wtp| <= {natural_max:.2}; bad shocks non-negative: {dominated_ok}; non-increasing in shock rank: {decreasing}; tau 0.1 shock at tau_init 0.1: {}",
            shown.join(", ")
        ),
    );
}

const PIPELINE: &str = r#"
seed = 2025
[data]
n_persons = 2000
[health]
n_eta = 7
n_eps = 3
n_paths = 2000
[grid]
n_assets = 14
n_pension = 3
[earnings]
n_nodes = 3
[sim]
n_histories = 1000
[smm]
free = ["consumption_weight"]
n_histories = 500
n_starts = 1
max_evals = 12
anneal_temperatures = 2
anneal_steps = 2
[shock]
n_histories = 1000
tau_init = [0.1]
assets = [10000.0]
[decomp]
n_histories = 500
[wtp]
tau_init = [0.1]
assets = [10000.0]
[inequality]
n_histories = 500
"#;

const STAGES: [&str; 13] = [
    "gen-data",
    "fit-index",
    "fit-health",
    "fit-earnings",
    "fit-wealth",
    "solve",
    "estimate",
    "simulate",
    "shock",
    "decompose",
    "wtp",
    "inequality",
    "report",
];

fn run_pipeline(dir: &Path, threads: &str) {
    let config = dir.join("run.toml");
    std::fs::write(&config, PIPELINE).unwrap();
    for stage in STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_healthdyn"))
            .arg("--config")
            .arg(&config)
            .args(["--threads", threads, "--set"])
            .arg(format!("out_dir=\"{}\"", dir.join("out").display()))
            .arg(stage)
            .env("RUST_LOG", "error")
            .env_remove("HEALTHDYN_OUT")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

/// Every artifact except the manifests, which record timings.
fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n == "manifests") {
                continue;
            }
            stack.extend(std::fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()));
        } else {
            out.push((
                p.strip_prefix(root).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn c13_pipeline_determinism() {
    let one = tempfile::tempdir().unwrap();
    let many = tempfile::tempdir().unwrap();
    run_pipeline(one.path(), "1");
    run_pipeline(many.path(), "8");
    let a = artifacts(&one.path().join("out"));
    let b = artifacts(&many.path().join("out"));
    let names: Vec<&String> = a.iter().map(|x| &x.0).collect();
    let differing: Vec<&String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| &x.0)
        .collect();
    let same_files = names == b.iter().map(|x| &x.0).collect::<Vec<_>>();

    run_pipeline(one.path(), "3");
    let rerun_identical = STAGES.iter().all(|s| {
        let text =
            std::fs::read_to_string(one.path().join("out/manifests").join(format!("{s}.json")))
                .unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        m["identical_to_previous"] == serde_json::Value::Bool(true)
    });
    verdict(
        13,
        "pipeline determinism",
        same_files && differing.is_empty() && rerun_identical && a.len() > 40,
        format!(
            "{} files compared between 1 and 8 threads, {} differ; every manifest flags the 3-thread rerun identical: {rerun_identical}",
            a.len(),
            differing.len()
        ),
    );
}
