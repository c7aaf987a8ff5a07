//! Forward simulation of life histories and the targeted moments.

pub mod experiments;
pub mod inequality;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;

use crate::dynamics::discrete::{health_group, GROUP_PERCENTILES};
use crate::earnings::sample_weights;
use crate::error::{Error, Result};
use crate::model::solver::{policy_eval, state_terms, Solution, State};
use crate::model::Model;
use crate::rng::{stream_rng, SeedPlan, Stream};
use crate::stats::{quantile_sorted, sorted_copy};

/// Starting (assets, pension wealth) pairs; each history draws one.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub pool: Vec<(f64, f64)>,
}

impl InitialConditions {
    pub fn fixed(assets: f64, pension: f64) -> Self {
        Self {
            pool: vec![(assets, pension)],
        }
    }

    /// Log-normal assets around `median`, no pension wealth.
    pub fn lognormal(median: f64, sigma: f64, n: usize, seed: u64) -> Result<Self> {
        let dist = LogNormal::new(median.ln(), sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = stream_rng(seed, Stream::Initial, u64::MAX);
        Ok(Self {
            pool: (0..n).map(|_| (dist.sample(&mut rng), 0.0)).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool.is_empty() {
            return Err(Error::InvalidInput(
                "initial-conditions pool is empty".into(),
            ));
        }
        if self.pool.iter().any(|(a, p)| !(*a >= 0.0) || !(*p >= 0.0)) {
            return Err(Error::InvalidInput(
                "initial assets and pension must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Persistent-health node imposed at a model age index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForcedNode {
    pub age_index: usize,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub n: usize,
    pub seeds: SeedPlan,
    pub forced: Vec<ForcedNode>,
}

impl SimOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seeds: SeedPlan::from_seed(seed),
            forced: Vec::new(),
        }
    }
}

/// One simulated life; every vector has one entry per age lived.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub first_age: u32,
    pub eta_node: Vec<usize>,
    pub eta: Vec<f64>,
    pub eps: Vec<f64>,
    pub health: Vec<f64>,
    pub wage_node: Vec<usize>,
    pub wage: Vec<f64>,
    pub hours: Vec<f64>,
    pub consumption: Vec<f64>,
    pub assets: Vec<f64>,
    pub pension: Vec<f64>,
    pub tax: Vec<f64>,
    pub transfer: Vec<f64>,
    pub work_cost: Vec<f64>,
    pub next_assets: Vec<f64>,
    pub leisure: Vec<f64>,
    pub disposable_income: Vec<f64>,
    /// First age at which the person is no longer alive.
    pub death_age: u32,
}

impl History {
    pub fn periods(&self) -> usize {
        self.assets.len()
    }

    pub fn alive_at(&self, t: usize) -> bool {
        t < self.periods()
    }

    pub fn age(&self, t: usize) -> u32 {
        self.first_age + t as u32
    }
}

fn simulate_one(
    model: &Model,
    sol: &Solution,
    init: &InitialConditions,
    opts: &SimOptions,
    id: u64,
) -> History {
    let n_ages = model.n_ages();
    let mut r_init = stream_rng(opts.seeds.initial, Stream::Initial, id);
    let mut r_health = stream_rng(opts.seeds.health, Stream::Health, id);
    let mut r_wage = stream_rng(opts.seeds.wage, Stream::Wage, id);
    let mut r_surv = stream_rng(opts.seeds.survival, Stream::Survival, id);

    let (mut assets, mut pension) = init.pool[r_init.random_range(0..init.pool.len())];
    let mut wage_node = sample_weights(&model.earnings.chain.initial, r_init.random());
    let mut eta_node = sample_weights(&model.health.initial, r_health.random());

    let mut h = History {
        first_age: model.grid.ages[0],
        ..Default::default()
    };
    for t in 0..n_ages {
        let (u_eta, u_eps, u_wage, u_surv): (f64, f64, f64, f64) = (
            r_health.random(),
            r_health.random(),
            r_wage.random(),
            r_surv.random(),
        );
        if t > 0 {
            eta_node = model.health.transitions[t - 1].sample(eta_node, u_eta);
            wage_node = model.earnings.chain.transition.sample(wage_node, u_wage);
        }
        if let Some(f) = opts.forced.iter().find(|f| f.age_index == t) {
            eta_node = f.node;
        }
        let eps_node = sample_weights(&model.health.eps_weights, u_eps);
        let state = State {
            assets,
            pension,
            wage_node,
            eta_node,
            eps_node,
        };
        let pol = policy_eval(model, sol, t, &state);
        let health = model.health.health(t, eta_node, eps_node);

        h.eta_node.push(eta_node);
        h.eta.push(model.health.eta_at(t, eta_node));
        h.eps.push(model.health.eps[eps_node]);
        h.health.push(health);
        h.wage_node.push(wage_node);
        h.wage.push(pol.wage);
        h.hours.push(pol.hours);
        h.consumption.push(pol.consumption);
        h.assets.push(assets);
        h.pension.push(pension);
        h.tax.push(pol.budget.tax);
        h.transfer.push(pol.budget.transfer);
        h.work_cost.push(pol.work_cost);
        h.next_assets.push(pol.next_assets);
        h.leisure.push(pol.leisure);
        h.disposable_income
            .push(pol.budget.disposable_income(assets));

        let survival = state_terms(model, t, wage_node, health).survival;
        if t + 1 == n_ages || u_surv >= survival {
            h.death_age = h.age(t) + 1;
            break;
        }
        assets = pol.next_assets;
        pension = pol.next_pension;
    }
    h
}

/// Simulate `opts.n` histories; results depend only on the seeds.
pub fn simulate_histories(
    model: &Model,
    sol: &Solution,
    init: &InitialConditions,
    opts: &SimOptions,
) -> Result<Vec<History>> {
    if sol.ages != model.grid.ages {
        return Err(Error::Misaligned(
            "solution ages differ from model ages".into(),
        ));
    }
    if sol.dims != crate::model::solver::Dims::of(model) {
        return Err(Error::Misaligned(
            "solution grid differs from model grid".into(),
        ));
    }
    init.validate()?;
    if let Some(f) = opts
        .forced
        .iter()
        .find(|f| f.age_index >= model.n_ages() || f.node >= model.health.n_eta())
    {
        return Err(Error::InvalidInput(format!(
            "forced node {f:?} outside the model"
        )));
    }
    Ok((0..opts.n as u64)
        .into_par_iter()
        .map(|i| simulate_one(model, sol, init, opts, i))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MomentKind {
    Assets,
    Hours,
    Participation,
}

impl MomentKind {
    pub fn name(self) -> &'static str {
        match self {
            MomentKind::Assets => "assets",
            MomentKind::Hours => "hours",
            MomentKind::Participation => "participation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub id: usize,
    pub kind: MomentKind,
    pub age: u32,
    /// Health group 1..=4 for participation moments.
    pub group: Option<u8>,
    /// `None` when the cell is empty.
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub moments: Vec<Moment>,
}

impl MomentSet {
    pub fn missing(&self) -> usize {
        self.moments.iter().filter(|m| m.value.is_none()).count()
    }
}

pub const ASSET_AGES: (u32, u32) = (51, 85);
pub const WORK_AGES: (u32, u32) = (50, 69);
pub const N_MOMENTS: usize = 135;

/// One person-age observation feeding the moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentObs {
    pub age: u32,
    pub assets: Option<f64>,
    pub hours: Option<f64>,
    pub health: Option<f64>,
}

pub fn history_obs(histories: &[History]) -> Vec<MomentObs> {
    histories
        .iter()
        .flat_map(|h| {
            (0..h.periods()).map(move |t| MomentObs {
                age: h.age(t),
                assets: Some(h.assets[t]),
                hours: Some(h.hours[t]),
                health: Some(h.health[t]),
            })
        })
        .collect()
}

/// Mean assets by age, mean hours of workers by age, and participation by
/// age and health group (cut at the within-age 20th, 30th and 50th
/// percentiles).
pub fn moments_from_obs(obs: &[MomentObs]) -> Result<MomentSet> {
    if obs.is_empty() {
        return Err(Error::Empty("no observations for moments".into()));
    }
    let span = |(a, b): (u32, u32)| (a..=b).collect::<Vec<u32>>();
    let mut moments = Vec::with_capacity(N_MOMENTS);
    let mut push = |kind, age, group, sum: f64, count: usize| {
        let id = moments.len();
        moments.push(Moment {
            id,
            kind,
            age,
            group,
            value: (count > 0).then(|| sum / count as f64),
            count,
        });
    };
    let asset_ages = span(ASSET_AGES);
    let work_ages = span(WORK_AGES);
    let mut asset_acc = vec![(0.0, 0usize); asset_ages.len()];
    let mut hours_acc = vec![(0.0, 0usize); work_ages.len()];
    let mut health_by_age: Vec<Vec<f64>> = vec![Vec::new(); work_ages.len()];
    for o in obs {
        if (ASSET_AGES.0..=ASSET_AGES.1).contains(&o.age) {
            if let Some(a) = o.assets {
                let c = &mut asset_acc[(o.age - ASSET_AGES.0) as usize];
                c.0 += a;
                c.1 += 1;
            }
        }
        if (WORK_AGES.0..=WORK_AGES.1).contains(&o.age) {
            let k = (o.age - WORK_AGES.0) as usize;
            if let Some(s) = o.hours.filter(|s| *s > 0.0) {
                hours_acc[k].0 += s;
                hours_acc[k].1 += 1;
            }
            if let (Some(h), Some(_)) = (o.health, o.hours) {
                health_by_age[k].push(h);
            }
        }
    }
    let cutoffs: Vec<Option<[f64; 3]>> = health_by_age
        .iter()
        .map(|v| {
            (!v.is_empty()).then(|| GROUP_PERCENTILES.map(|p| quantile_sorted(&sorted_copy(v), p)))
        })
        .collect();
    let mut part_acc = vec![[(0.0, 0usize); 4]; work_ages.len()];
    for o in obs {
        if !(WORK_AGES.0..=WORK_AGES.1).contains(&o.age) {
            continue;
        }
        let k = (o.age - WORK_AGES.0) as usize;
        if let (Some(h), Some(s), Some(cut)) = (o.health, o.hours, cutoffs[k]) {
            let g = health_group(h, &cut);
            part_acc[k][g].0 += (s > 0.0) as u8 as f64;
            part_acc[k][g].1 += 1;
        }
    }
    for (k, &age) in asset_ages.iter().enumerate() {
        push(
            MomentKind::Assets,
            age,
            None,
            asset_acc[k].0,
            asset_acc[k].1,
        );
    }
    for (k, &age) in work_ages.iter().enumerate() {
        push(MomentKind::Hours, age, None, hours_acc[k].0, hours_acc[k].1);
    }
    for (k, &age) in work_ages.iter().enumerate() {
        for g in 0..4 {
            push(
                MomentKind::Participation,
                age,
                Some(g as u8 + 1),
                part_acc[k][g].0,
                part_acc[k][g].1,
            );
        }
    }
    Ok(MomentSet { moments })
}

pub fn compute_moments(histories: &[History]) -> Result<MomentSet> {
    if histories.is_empty() {
        return Err(Error::Empty("no histories".into()));
    }
    moments_from_obs(&history_obs(histories))
}
