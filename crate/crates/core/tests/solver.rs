use healthdyn_core::calibration::{build_model, degenerate_model, CalibrationSpec, Variant};
use healthdyn_core::model::params::{utility, PENSION_AGE};
use healthdyn_core::model::solver::{policy_eval, solve, Solution, State};
use healthdyn_core::model::{Channel, Model};
use healthdyn_core::sim::experiments::Outcomes;
use healthdyn_core::sim::{simulate_histories, History, InitialConditions, SimOptions};

fn coarse() -> (Model, Solution) {
    let m = build_model(&CalibrationSpec::coarse(Variant::Nonlinear)).unwrap();
    let s = solve(&m).unwrap();
    (m, s)
}

/// Best lifetime utility over every sequence of grid asset choices.
fn brute_force(model: &Model, a0: f64) -> f64 {
    let grid = &model.grid.assets;
    let leisure = model.params.time_endowment;
    let n_ages = model.n_ages();
    fn go(model: &Model, t: usize, a: f64, n_ages: usize, leisure: f64, grid: &[f64]) -> f64 {
        if t == n_ages {
            return 0.0;
        }
        let p = &model.params;
        let cash = a.max(p.consumption_floor);
        grid.iter()
            .filter(|&&next| cash - next >= p.consumption_floor - 1e-9)
            .map(|&next| {
                utility(cash - next, leisure, p.consumption_weight, p.risk_aversion).unwrap()
                    + go(model, t + 1, next, n_ages, leisure, grid)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
    go(model, 0, a0, n_ages, leisure, grid)
}

#[test]
fn three_period_solution_matches_enumeration() {
    let assets: Vec<f64> = (0..10).map(|k| 2000.0 * k as f64).collect();
    let m = degenerate_model(70, 72, assets.clone()).unwrap();
    let sol = solve(&m).unwrap();
    for (k, &a0) in assets.iter().enumerate() {
        let v = sol.slices[0].value[sol.dims.index(k, 0, 0, 0, 0)];
        let oracle = brute_force(&m, a0);
        assert!(
            ((v - oracle) / oracle).abs() < 1e-12,
            "asset {a0}: solver {v} vs enumeration {oracle}"
        );
    }
}

#[test]
fn value_is_monotone_in_assets() {
    let (m, sol) = coarse();
    let d = sol.dims;
    for slice in &sol.slices {
        for p in 0..d.pension {
            for j in 0..d.wage {
                for i in 0..d.eta {
                    for e in 0..d.eps {
                        for a in 1..d.assets {
                            let lo = slice.value[d.index(a - 1, p, j, i, e)];
                            let hi = slice.value[d.index(a, p, j, i, e)];
                            assert!(hi >= lo, "value falls in assets");
                        }
                    }
                }
            }
        }
    }
    // no work from 70 on
    for (t, age) in m.grid.ages.iter().enumerate() {
        if *age >= 70 {
            assert!(sol.slices[t].hours.iter().all(|h| *h == 0));
        }
    }
}

fn check_identities(m: &Model, hs: &[History]) {
    let p = &m.params;
    for h in hs {
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
            let implied = h.assets[t]
                + h.hours[t] * h.wage[t] * (1.0 - contribution)
                + p.interest_rate * h.assets[t]
                + pension_income
                - h.tax[t]
                + h.transfer[t]
                - h.consumption[t]
                - h.work_cost[t];
            assert!(
                (h.next_assets[t] - implied).abs() < 1e-9,
                "budget residual {}",
                h.next_assets[t] - implied
            );
            let time_cost = p
                .time_cost
                .eval(m.channel_health(Channel::TimeCost, t, h.health[t]))
                .0;
            assert!((h.leisure[t] - (p.time_endowment - h.hours[t] - time_cost)).abs() < 1e-9);
            assert!(h.leisure[t] > 0.0);
            assert!(h.consumption[t] >= p.consumption_floor - 1e-9);
            assert!(h.next_assets[t] >= 0.0);
            if age >= 70 {
                assert_eq!(h.hours[t], 0.0);
            }
            if t + 1 < h.periods() {
                assert_eq!(h.assets[t + 1], h.next_assets[t]);
            }
        }
    }
}

#[test]
fn simulated_histories_satisfy_identities() {
    let (m, sol) = coarse();
    let init = InitialConditions::lognormal(50_000.0, 1.2, 1000, 4).unwrap();
    let hs = simulate_histories(&m, &sol, &init, &SimOptions::new(2000, 9)).unwrap();
    check_identities(&m, &hs);
    // survivors shrink monotonically
    let alive: Vec<usize> = (0..m.n_ages())
        .map(|t| hs.iter().filter(|h| h.alive_at(t)).count())
        .collect();
    assert!(alive.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn deterministic_instance_gives_identical_histories() {
    let assets: Vec<f64> = (0..12).map(|k| 5000.0 * k as f64).collect();
    let m = degenerate_model(60, 75, assets).unwrap();
    let sol = solve(&m).unwrap();
    let hs = simulate_histories(
        &m,
        &sol,
        &InitialConditions::fixed(20_000.0, 0.0),
        &SimOptions::new(50, 1),
    )
    .unwrap();
    assert!(hs.iter().all(|h| h == &hs[0]));
    assert_eq!(hs[0].periods(), 16);
}

#[test]
fn higher_fixed_cost_of_work_lowers_participation() {
    let (m, sol) = coarse();
    let mut costly = m.clone();
    costly.params.work_cost[0] *= 10.0;
    let sol_costly = solve(&costly).unwrap();
    let init = InitialConditions::lognormal(50_000.0, 1.0, 500, 2).unwrap();
    let opts = SimOptions::new(1000, 3);
    let base = simulate_histories(&m, &sol, &init, &opts).unwrap();
    let high = simulate_histories(&costly, &sol_costly, &init, &opts).unwrap();
    let part = |hs: &[History], t: usize| {
        let alive: Vec<&History> = hs.iter().filter(|h| h.alive_at(t)).collect();
        alive.iter().filter(|h| h.hours[t] > 0.0).count() as f64 / alive.len() as f64
    };
    for t in 0..20 {
        assert!(part(&high, t) <= part(&base, t), "age index {t}");
    }
}

#[test]
fn policy_on_a_node_is_the_node_policy() {
    let (m, sol) = coarse();
    let d = sol.dims;
    for t in [0usize, 10, 25] {
        for a in [0usize, 5, d.assets - 1] {
            for i in [0usize, d.eta / 2, d.eta - 1] {
                let node = d.index(a, 1, 1, i, 1);
                let pol = policy_eval(
                    &m,
                    &sol,
                    t,
                    &State {
                        assets: m.grid.assets[a],
                        pension: m.grid.pension[1],
                        wage_node: 1,
                        eta_node: i,
                        eps_node: 1,
                    },
                );
                assert_eq!(
                    pol.next_assets,
                    m.grid.assets[sol.slices[t].next_asset[node] as usize]
                );
                assert_eq!(pol.hours, m.grid.hours[sol.slices[t].hours[node] as usize]);
                assert_eq!(pol.consumption, sol.slices[t].consumption[node]);
                assert!(!pol.adjusted);
            }
        }
    }
}

#[test]
fn interpolated_consumption_lies_between_nodes() {
    let (m, sol) = coarse();
    let d = sol.dims;
    let t = 20; // age 70: no work, no pension dynamics
    let mut checked = 0;
    for a in 0..d.assets - 1 {
        let s = &sol.slices[t];
        let n0 = d.index(a, 0, 0, 3, 1);
        let n1 = d.index(a + 1, 0, 0, 3, 1);
        let mid = 0.5 * (m.grid.assets[a] + m.grid.assets[a + 1]);
        let pol = policy_eval(
            &m,
            &sol,
            t,
            &State {
                assets: mid,
                pension: m.grid.pension[0],
                wage_node: 0,
                eta_node: 3,
                eps_node: 1,
            },
        );
        if pol.adjusted {
            continue;
        }
        let (lo, hi) = (
            s.consumption[n0].min(s.consumption[n1]),
            s.consumption[n0].max(s.consumption[n1]),
        );
        assert!(
            pol.consumption >= lo - 1e-9 && pol.consumption <= hi + 1e-9,
            "asset cell {a}"
        );
        checked += 1;
    }
    assert!(checked > d.assets / 2);
}

#[test]
fn health_neutral_model_ignores_health_draws() {
    let (m, _) = coarse();
    let neutral = m.with_channels_at(&Channel::ALL, 0.5).unwrap();
    let sol = solve(&neutral).unwrap();
    let init = InitialConditions::lognormal(50_000.0, 1.0, 300, 2).unwrap();
    let a = SimOptions::new(800, 3);
    let mut b = a.clone();
    b.seeds = b.seeds.with_health(999);
    let ha = simulate_histories(&neutral, &sol, &init, &a).unwrap();
    let hb = simulate_histories(&neutral, &sol, &init, &b).unwrap();
    assert_ne!(ha[0].eta, hb[0].eta);
    assert_eq!(Outcomes::from_histories(&ha), Outcomes::from_histories(&hb));
}

#[test]
fn solution_rebuilds_from_its_slices() {
    let (m, sol) = coarse();
    let rebuilt = Solution::from_slices(&m, sol.slices.clone()).unwrap();
    assert_eq!(rebuilt, sol);
    assert!(Solution::from_slices(&m, sol.slices[1..].to_vec()).is_err());
}
