//! Health-shock counterfactuals, channel decompositions and willingness to
//! pay.

use rayon::prelude::*;

use super::inequality::age_cov;
use super::{simulate_histories, ForcedNode, History, InitialConditions, SimOptions};
use crate::error::{Error, Result};
use crate::model::params::bequest;
use crate::model::solver::{best_choice, expected_next, solve, Solution};
use crate::model::{Channel, Model};
use crate::rng::SeedPlan;
use crate::stats::weighted_quantile;

/// Age at which the initial health rank is imposed.
pub const INIT_AGE: u32 = 51;
/// Age at which the shock hits.
pub const SHOCK_AGE: u32 = 52;
pub const MEDIAN_RANK: f64 = 0.5;

fn age_index(model: &Model, age: u32) -> Result<usize> {
    model
        .grid
        .ages
        .iter()
        .position(|a| *a == age)
        .ok_or_else(|| Error::Misaligned(format!("model ages do not include {age}")))
}

fn check_rank(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "rank {tau} must lie in (0, 1)"
        )))
    }
}

/// Grid node nearest the `tau`-quantile of the unconditional persistent
/// health distribution at age index `t`, with the rank it represents
/// (cumulative mass through the node).
pub fn marginal_node(model: &Model, t: usize, tau: f64) -> (usize, f64) {
    let marg = &model.health.marginals()[t];
    let values: Vec<f64> = (0..model.health.n_eta())
        .map(|i| model.health.eta_at(t, i))
        .collect();
    let q = weighted_quantile(&values, marg, tau);
    let node = values
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - q).abs().total_cmp(&(b.1 - q).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    (node, marg[..=node].iter().sum())
}

/// Node reached from `from` at the `tau` conditional quantile of the
/// transition out of age index `t`, with its cumulative rank.
pub fn conditional_node(model: &Model, t: usize, from: usize, tau: f64) -> (usize, f64) {
    let trans = &model.health.transitions[t];
    let node = trans.row_quantile(from, tau);
    (node, trans.row(from)[..=node].iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockExperiment {
    pub tau_init: f64,
    pub tau_shocks: Vec<f64>,
    pub assets: f64,
    pub pension: f64,
    pub n: usize,
    pub seeds: SeedPlan,
}

impl ShockExperiment {
    pub fn new(tau_init: f64, assets: f64, n: usize, seed: u64) -> Self {
        Self {
            tau_init,
            tau_shocks: vec![0.1, 0.5, 0.9],
            assets,
            pension: 0.0,
            n,
            seeds: SeedPlan::from_seed(seed),
        }
    }
}

/// Survivor means by age for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub ages: Vec<u32>,
    pub alive: Vec<usize>,
    pub health: Vec<f64>,
    pub eta: Vec<f64>,
    pub assets: Vec<f64>,
    pub participation: Vec<f64>,
    pub hours: Vec<f64>,
    pub assets_cov: Vec<Option<f64>>,
}

pub const PROFILE_VARIABLES: [&str; 5] = ["health", "eta", "assets", "participation", "hours"];

impl Profiles {
    pub fn from_histories(model: &Model, hs: &[History]) -> Self {
        let n_ages = model.n_ages();
        let mut p = Profiles {
            ages: model.grid.ages.clone(),
            alive: vec![0; n_ages],
            health: vec![f64::NAN; n_ages],
            eta: vec![f64::NAN; n_ages],
            assets: vec![f64::NAN; n_ages],
            participation: vec![f64::NAN; n_ages],
            hours: vec![f64::NAN; n_ages],
            assets_cov: age_cov(hs, n_ages),
        };
        for t in 0..n_ages {
            let alive: Vec<&History> = hs.iter().filter(|h| h.alive_at(t)).collect();
            let n = alive.len();
            p.alive[t] = n;
            if n == 0 {
                continue;
            }
            let mean =
                |f: &dyn Fn(&History) -> f64| alive.iter().map(|h| f(h)).sum::<f64>() / n as f64;
            p.health[t] = mean(&|h| h.health[t]);
            p.eta[t] = mean(&|h| h.eta[t]);
            p.assets[t] = mean(&|h| h.assets[t]);
            p.participation[t] = mean(&|h| (h.hours[t] > 0.0) as u8 as f64);
            p.hours[t] = mean(&|h| h.hours[t]);
        }
        p
    }

    pub fn variable(&self, name: &str) -> &[f64] {
        match name {
            "health" => &self.health,
            "eta" => &self.eta,
            "assets" => &self.assets,
            "participation" => &self.participation,
            "hours" => &self.hours,
            _ => panic!("unknown profile variable {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub tau_shock: f64,
    pub node: usize,
    /// Rank actually imposed after snapping to the grid.
    pub snapped_rank: f64,
    pub profiles: Profiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRow {
    pub tau_shock: f64,
    pub age: u32,
    pub variable: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockResult {
    pub init_node: usize,
    pub init_rank: f64,
    pub median: Arm,
    pub arms: Vec<Arm>,
    /// Each arm minus the median arm, by age and variable.
    pub diffs: Vec<DiffRow>,
}

impl ShockResult {
    pub fn arm(&self, tau: f64) -> Option<&Arm> {
        self.arms.iter().find(|a| a.tau_shock == tau)
    }

    /// Ratio of an arm's asset CoV to the median arm's, by age.
    pub fn cov_ratio(&self, tau: f64) -> Option<Vec<Option<f64>>> {
        let arm = self.arm(tau)?;
        Some(
            arm.profiles
                .assets_cov
                .iter()
                .zip(&self.median.profiles.assets_cov)
                .map(|(a, m)| match (a, m) {
                    (Some(a), Some(m)) if *m > 0.0 => Some(a / m),
                    _ => None,
                })
                .collect(),
        )
    }

    /// Mean over ages from the shock on of |good gap + bad gap| in persistent
    /// health, where each gap is taken against the median arm.
    pub fn eta_asymmetry(&self, bad: f64, good: f64) -> Option<f64> {
        let (b, g) = (self.arm(bad)?, self.arm(good)?);
        let m = &self.median.profiles;
        let sums: Vec<f64> = (0..m.ages.len())
            .filter(|&t| m.ages[t] >= SHOCK_AGE && m.alive[t] > 0)
            .map(|t| (b.profiles.eta[t] - m.eta[t] + g.profiles.eta[t] - m.eta[t]).abs())
            .collect();
        (!sums.is_empty()).then(|| sums.iter().sum::<f64>() / sums.len() as f64)
    }
}

/// Impose the initial rank at age 51 and each shock rank at 52, then
/// simulate with common random numbers and difference against the median
/// shock.
pub fn counterfactual_shock(
    model: &Model,
    sol: &Solution,
    exp: &ShockExperiment,
) -> Result<ShockResult> {
    check_rank(exp.tau_init)?;
    for &t in &exp.tau_shocks {
        check_rank(t)?;
    }
    let t_init = age_index(model, INIT_AGE)?;
    let t_shock = age_index(model, SHOCK_AGE)?;
    let (init_node, init_rank) = marginal_node(model, t_init, exp.tau_init);
    let init = InitialConditions::fixed(exp.assets, exp.pension);
    let run = |tau: f64| -> Result<Arm> {
        let (node, snapped_rank) = conditional_node(model, t_init, init_node, tau);
        let opts = SimOptions {
            n: exp.n,
            seeds: exp.seeds,
            forced: vec![
                ForcedNode {
                    age_index: t_init,
                    node: init_node,
                },
                ForcedNode {
                    age_index: t_shock,
                    node,
                },
            ],
        };
        let hs = simulate_histories(model, sol, &init, &opts)?;
        Ok(Arm {
            tau_shock: tau,
            node,
            snapped_rank,
            profiles: Profiles::from_histories(model, &hs),
        })
    };
    let median = run(MEDIAN_RANK)?;
    let arms: Vec<Arm> = exp
        .tau_shocks
        .iter()
        .map(|&t| run(t))
        .collect::<Result<_>>()?;
    let mut diffs = Vec::new();
    for arm in &arms {
        for var in PROFILE_VARIABLES {
            let a = arm.profiles.variable(var);
            let m = median.profiles.variable(var);
            for (t, age) in model.grid.ages.iter().enumerate() {
                diffs.push(DiffRow {
                    tau_shock: arm.tau_shock,
                    age: *age,
                    variable: var,
                    value: a[t] - m[t],
                });
            }
        }
    }
    Ok(ShockResult {
        init_node,
        init_rank,
        median,
        arms,
        diffs,
    })
}

/// Aggregate outcomes reported by the decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcomes {
    /// Mean assets over all person-years alive.
    pub assets: f64,
    /// Mean disposable income over all person-years alive.
    pub income: f64,
    /// Share working among person-years aged 50-69.
    pub employment: f64,
    /// Mean annual hours among workers aged 50-69.
    pub hours: f64,
}

impl Outcomes {
    pub fn from_histories(hs: &[History]) -> Self {
        let (mut a, mut inc, mut n) = (0.0, 0.0, 0usize);
        let (mut work, mut n_work_age, mut hours) = (0usize, 0usize, 0.0);
        for h in hs {
            for t in 0..h.periods() {
                a += h.assets[t];
                inc += h.disposable_income[t];
                n += 1;
                if h.age(t) <= 69 {
                    n_work_age += 1;
                    if h.hours[t] > 0.0 {
                        work += 1;
                        hours += h.hours[t];
                    }
                }
            }
        }
        let div = |x: f64, d: usize| if d == 0 { f64::NAN } else { x / d as f64 };
        Outcomes {
            assets: div(a, n),
            income: div(inc, n),
            employment: div(work as f64, n_work_age),
            hours: div(hours, work),
        }
    }

    pub fn pct_change_from(&self, base: &Outcomes) -> Outcomes {
        let pct = |x: f64, b: f64| 100.0 * (x - b) / b;
        Outcomes {
            assets: pct(self.assets, base.assets),
            income: pct(self.income, base.income),
            employment: pct(self.employment, base.employment),
            hours: pct(self.hours, base.hours),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompRow {
    pub channels: Vec<Channel>,
    pub percentile: f64,
    pub outcomes: Outcomes,
    pub pct_change: Outcomes,
}

/// Outcomes with the listed channels fixed at the percentile of health;
/// the model is re-solved and re-simulated under the same seeds.
pub fn decompose_channels(
    model: &Model,
    channels: &[Channel],
    percentile: f64,
    init: &InitialConditions,
    opts: &SimOptions,
) -> Result<Outcomes> {
    let m = if channels.is_empty() {
        model.clone()
    } else {
        model.with_channels_at(channels, percentile)?
    };
    let sol = solve(&m)?;
    Ok(Outcomes::from_histories(&simulate_histories(
        &m, &sol, init, opts,
    )?))
}

/// Baseline, each channel alone, and all channels together.
pub fn decomposition_table(
    model: &Model,
    percentile: f64,
    init: &InitialConditions,
    opts: &SimOptions,
) -> Result<Vec<DecompRow>> {
    let mut sets: Vec<Vec<Channel>> = vec![Vec::new()];
    sets.extend(Channel::ALL.iter().map(|c| vec![*c]));
    sets.push(Channel::ALL.to_vec());
    let base = decompose_channels(model, &[], percentile, init, opts)?;
    sets.into_iter()
        .map(|chs| {
            let out = if chs.is_empty() {
                base
            } else {
                decompose_channels(model, &chs, percentile, init, opts)?
            };
            Ok(DecompRow {
                channels: chs,
                percentile,
                outcomes: out,
                pct_change: out.pct_change_from(&base),
            })
        })
        .collect()
}

/// Next-period persistent-health distribution used for the shock arm.
#[derive(Debug, Clone, PartialEq)]
pub enum ShockRow {
    /// Point mass at the conditional `tau` quantile.
    Forced(f64),
    /// The unconstrained transition.
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WtpResult {
    pub wtp: f64,
    pub init_node: usize,
    pub shock_node: Option<usize>,
    pub iterations: usize,
    /// The shock is preferred by more than the current assets; `wtp` holds `-assets`.
    pub censored: bool,
}

/// Expected value at age 51 over wage nodes and transitory health, for
/// assets `a` and the given next-period health distribution.
fn expected_value_51(
    model: &Model,
    ev: &[f64],
    bequests: &[f64],
    t: usize,
    init_node: usize,
    wage_dist: &[f64],
    a: f64,
    p: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (j, &pj) in wage_dist.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for (e, &pe) in model.health.eps_weights.iter().enumerate() {
            let h = model.health.health(t, init_node, e);
            let c = best_choice(model, t, Some(ev), bequests, a, p, j, h)
                .ok_or_else(|| Error::Infeasible(format!("no feasible choice at assets {a}")))?;
            total += pj * pe * c.value;
        }
    }
    Ok(total)
}

/// Asset transfer at 51 that makes a person facing the imposed shock at 52
/// as well off as without it. Negative values mean the shock is preferred.
pub fn willingness_to_pay(
    model: &Model,
    sol: &Solution,
    tau_init: f64,
    shock: &ShockRow,
    assets: f64,
    pension: f64,
) -> Result<WtpResult> {
    check_rank(tau_init)?;
    if let ShockRow::Forced(t) = shock {
        check_rank(*t)?;
    }
    if !(assets >= 0.0) {
        return Err(Error::InvalidInput("assets must be non-negative".into()));
    }
    let t = age_index(model, INIT_AGE)?;
    let (init_node, _) = marginal_node(model, t, tau_init);
    let natural = model.health.transitions[t].row(init_node).to_vec();
    let (row, shock_node) = match shock {
        ShockRow::Natural => (natural.clone(), None),
        ShockRow::Forced(tau) => {
            let (node, _) = conditional_node(model, t, init_node, *tau);
            let mut r = vec![0.0; natural.len()];
            r[node] = 1.0;
            (r, Some(node))
        }
    };
    let next = &sol.slices[t + 1].value;
    let ev_free = expected_next(model, next, &natural);
    let ev_shock = expected_next(model, next, &row);
    let prm = &model.params;
    let bequests: Vec<f64> = model
        .grid
        .assets
        .iter()
        .map(|&a| {
            bequest(
                a,
                prm.bequest_weight,
                prm.bequest_shift,
                prm.risk_aversion,
                prm.consumption_weight,
            )
        })
        .collect::<Result<_>>()?;
    let wage_dist = (0..t).fold(model.earnings.chain.initial.clone(), |d, _| {
        model.earnings.chain.transition.push_forward(&d)
    });

    let target = expected_value_51(
        model, &ev_free, &bequests, t, init_node, &wage_dist, assets, pension,
    )?;
    let gap = |delta: f64| -> Result<f64> {
        Ok(expected_value_51(
            model,
            &ev_shock,
            &bequests,
            t,
            init_node,
            &wage_dist,
            assets + delta,
            pension,
        )? - target)
    };
    let g0 = gap(0.0)?;
    if g0 == 0.0 {
        return Ok(WtpResult {
            wtp: 0.0,
            init_node,
            shock_node,
            iterations: 0,
            censored: false,
        });
    }
    let a_max = *model.grid.assets.last().expect("non-empty grid");
    let (mut lo, mut hi) = if g0 < 0.0 {
        (0.0, a_max - assets)
    } else {
        (-assets, 0.0)
    };
    if g0 < 0.0 && gap(hi)? < 0.0 {
        return Err(Error::Bracketing(format!(
            "willingness to pay exceeds {hi:.0} (top of the asset grid)"
        )));
    }
    if g0 > 0.0 && gap(lo)? >= 0.0 {
        return Ok(WtpResult {
            wtp: -assets,
            init_node,
            shock_node,
            iterations: 0,
            censored: true,
        });
    }
    let mut iterations = 0;
    while hi - lo > 1.0 {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(WtpResult {
        wtp: 0.5 * (lo + hi),
        init_node,
        shock_node,
        iterations,
        censored: false,
    })
}

/// Willingness to pay on a grid of shock ranks, evaluated in parallel.
pub fn wtp_curve(
    model: &Model,
    sol: &Solution,
    tau_init: f64,
    taus: &[f64],
    assets: f64,
) -> Result<Vec<(f64, WtpResult)>> {
    taus.par_iter()
        .map(|&tau| {
            willingness_to_pay(model, sol, tau_init, &ShockRow::Forced(tau), assets, 0.0)
                .map(|r| (tau, r))
        })
        .collect()
}
