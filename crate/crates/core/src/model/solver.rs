//! Backward induction on the discretized state space.

use rayon::prelude::*;

use super::params::{
    bequest, net_resources, next_pension, utility_ln, work_cost, Budget, NO_WORK_AGE,
};
use super::{bracket, Channel, Model};
use crate::error::{Error, Result};

/// Sizes of the state dimensions; nodes are stored with the transitory
/// health index varying fastest, then persistent health, wage, pension,
/// assets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub assets: usize,
    pub pension: usize,
    pub wage: usize,
    pub eta: usize,
    pub eps: usize,
}

impl Dims {
    pub fn of(model: &Model) -> Self {
        Self {
            assets: model.grid.assets.len(),
            pension: model.grid.pension.len(),
            wage: model.earnings.chain.len(),
            eta: model.health.n_eta(),
            eps: model.health.n_eps(),
        }
    }

    pub fn len(&self) -> usize {
        self.assets * self.pension * self.wage * self.eta * self.eps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, a: usize, p: usize, j: usize, i: usize, e: usize) -> usize {
        (((a * self.pension + p) * self.wage + j) * self.eta + i) * self.eps + e
    }

    pub fn unpack(&self, mut idx: usize) -> (usize, usize, usize, usize, usize) {
        let e = idx % self.eps;
        idx /= self.eps;
        let i = idx % self.eta;
        idx /= self.eta;
        let j = idx % self.wage;
        idx /= self.wage;
        let p = idx % self.pension;
        (idx / self.pension, p, j, i, e)
    }

    /// Size of a continuation slice for one persistent-health node.
    fn slice_len(&self) -> usize {
        self.assets * self.pension * self.wage
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeSolution {
    pub value: Vec<f64>,
    pub next_asset: Vec<u16>,
    pub hours: Vec<u8>,
    pub consumption: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub ages: Vec<u32>,
    pub dims: Dims,
    pub slices: Vec<AgeSolution>,
    /// Expected value of next period's value function by
    /// `[eta][next asset][next pension][wage]`, for every age but the last.
    pub continuation: Vec<Vec<f64>>,
}

impl Solution {
    pub fn continuation_slice(&self, t: usize, eta: usize) -> Option<&[f64]> {
        let len = self.dims.slice_len();
        self.continuation
            .get(t)
            .map(|c| &c[eta * len..(eta + 1) * len])
    }
}

/// Best choice at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub value: f64,
    pub next_index: usize,
    pub hours_index: usize,
    pub consumption: f64,
}

/// Expected next-period value over wage and health transitions given a
/// distribution over next persistent-health nodes, laid out
/// `[next asset][next pension][current wage]`.
///
/// Differences from a reference node are summed so that a value function
/// that does not vary with health yields an expectation that does not
/// depend on `eta_row` at all, bit for bit.
pub fn expected_next(model: &Model, next_value: &[f64], eta_row: &[f64]) -> Vec<f64> {
    let d = Dims::of(model);
    let wt = &model.earnings.chain.transition;
    let ew = &model.health.eps_weights;
    let mut out = vec![0.0; d.slice_len()];
    let mut over_health = vec![0.0; d.wage];
    for k in 0..d.assets {
        for m in 0..d.pension {
            for (jn, slot) in over_health.iter_mut().enumerate() {
                let reference = next_value[d.index(k, m, jn, 0, 0)];
                let mut acc = 0.0;
                for (inext, &pi) in eta_row.iter().enumerate() {
                    if pi == 0.0 {
                        continue;
                    }
                    let mut inner = 0.0;
                    for (e, &we) in ew.iter().enumerate() {
                        inner += we * (next_value[d.index(k, m, jn, inext, e)] - reference);
                    }
                    acc += pi * inner;
                }
                *slot = reference + acc;
            }
            for j in 0..d.wage {
                let row = wt.row(j);
                let mut ev = 0.0;
                for (jn, &pj) in row.iter().enumerate() {
                    ev += pj * over_health[jn];
                }
                out[(k * d.pension + m) * d.wage + j] = ev;
            }
        }
    }
    out
}

fn bequest_values(model: &Model) -> Vec<f64> {
    let p = &model.params;
    model
        .grid
        .assets
        .iter()
        .map(|&a| {
            bequest(
                a,
                p.bequest_weight,
                p.bequest_shift,
                p.risk_aversion,
                p.consumption_weight,
            )
            .expect("validated")
        })
        .collect()
}

/// Wage offer, cost of time and survival probability entering the choice
/// at age index `t` for own health `h`.
#[derive(Debug, Clone, Copy)]
pub struct StateTerms {
    pub wage: f64,
    pub time_cost: f64,
    pub survival: f64,
}

pub fn state_terms(model: &Model, t: usize, wage_node: usize, h: f64) -> StateTerms {
    let age = model.grid.ages[t];
    let hw = model.channel_health(Channel::Wages, t, h);
    let ht = model.channel_health(Channel::TimeCost, t, h);
    let hm = model.channel_health(Channel::Mortality, t, h);
    StateTerms {
        wage: model.earnings.offer(hw, age, wage_node),
        time_cost: model.params.time_cost.eval(ht).0,
        survival: 1.0 - model.mortality.death_prob(t, hm),
    }
}

/// Maximize over next assets and hours at an arbitrary continuous state.
/// `ev` is the continuation slice for the state's persistent-health node
/// (`None` at the last age).
pub fn best_choice(
    model: &Model,
    t: usize,
    ev: Option<&[f64]>,
    bequests: &[f64],
    assets: f64,
    pension: f64,
    wage_node: usize,
    h: f64,
) -> Option<Choice> {
    let prm = &model.params;
    let grid = &model.grid;
    let age = grid.ages[t];
    let terms = state_terms(model, t, wage_node, h);
    let (gamma, nu, beta) = (prm.consumption_weight, prm.risk_aversion, prm.discount);
    let floor = prm.consumption_floor - 1e-9;
    let n_wage = model.earnings.chain.len();
    let n_pension = grid.pension.len();
    let mut best: Option<Choice> = None;
    for (s_idx, &s) in grid.hours.iter().enumerate() {
        if s > 0.0 && (age >= NO_WORK_AGE || terms.wage <= 0.0) {
            break;
        }
        let leisure = prm.time_endowment - s - terms.time_cost;
        if leisure <= 0.0 {
            continue;
        }
        let ln_l = leisure.ln();
        let budget = net_resources(assets, s, terms.wage, pension, age, prm);
        let cash = budget.resources - work_cost(s, age, &prm.work_cost);
        let (m, wm, _) = bracket(
            &grid.pension,
            next_pension(pension, s * terms.wage, age, prm),
        );
        for (k, &a_next) in grid.assets.iter().enumerate() {
            let c = cash - a_next;
            if c < floor {
                break;
            }
            let flow = utility_ln(c.ln(), ln_l, gamma, nu);
            let cont = match ev {
                None => beta * bequests[k],
                Some(ev) => {
                    let at = |mm: usize| ev[(k * n_pension + mm) * n_wage + wage_node];
                    let expect = if wm == 0.0 {
                        at(m)
                    } else {
                        (1.0 - wm) * at(m) + wm * at(m + 1)
                    };
                    beta * (terms.survival * expect + (1.0 - terms.survival) * bequests[k])
                }
            };
            let v = flow + cont;
            let better = match &best {
                None => true,
                Some(b) => {
                    v > b.value || (v == b.value && (k, s_idx) < (b.next_index, b.hours_index))
                }
            };
            if better {
                best = Some(Choice {
                    value: v,
                    next_index: k,
                    hours_index: s_idx,
                    consumption: c,
                });
            }
        }
    }
    best
}

/// Solve the model backwards from the last age.
/// Continuation values for every current health node at age index `t`.
fn continuation_at(model: &Model, t: usize, next_value: &[f64]) -> Vec<f64> {
    let trans = &model.health.transitions[t];
    (0..model.health.n_eta())
        .into_par_iter()
        .flat_map_iter(|i| expected_next(model, next_value, trans.row(i)))
        .collect()
}

impl Solution {
    /// Rebuild a solution from stored per-age slices, recomputing the
    /// continuation values.
    pub fn from_slices(model: &Model, slices: Vec<AgeSolution>) -> Result<Solution> {
        model.validate()?;
        let d = Dims::of(model);
        if slices.len() != model.n_ages() {
            return Err(Error::Misaligned(format!(
                "{} slices for {} ages",
                slices.len(),
                model.n_ages()
            )));
        }
        for (t, s) in slices.iter().enumerate() {
            let lens = [
                s.value.len(),
                s.next_asset.len(),
                s.hours.len(),
                s.consumption.len(),
            ];
            if lens.iter().any(|l| *l != d.len()) {
                return Err(Error::Misaligned(format!(
                    "slice {t} does not match the state space ({} nodes)",
                    d.len()
                )));
            }
            if s.next_asset.iter().any(|k| *k as usize >= d.assets)
                || s.hours
                    .iter()
                    .any(|k| *k as usize >= model.grid.hours.len())
            {
                return Err(Error::Misaligned(format!(
                    "slice {t} has a policy index outside the grid"
                )));
            }
        }
        let continuation = (0..slices.len() - 1)
            .map(|t| continuation_at(model, t, &slices[t + 1].value))
            .collect();
        Ok(Solution {
            ages: model.grid.ages.clone(),
            dims: d,
            slices,
            continuation,
        })
    }
}

pub fn solve(model: &Model) -> Result<Solution> {
    model.validate()?;
    let d = Dims::of(model);
    if d.assets > u16::MAX as usize || model.grid.hours.len() > u8::MAX as usize {
        return Err(Error::Config("grid too large for policy storage".into()));
    }
    let n_ages = model.n_ages();
    let bequests = bequest_values(model);
    let mut slices: Vec<AgeSolution> = Vec::with_capacity(n_ages);
    let mut continuation: Vec<Vec<f64>> = vec![Vec::new(); n_ages - 1];
    for t in (0..n_ages).rev() {
        let ev_t: Option<Vec<f64>> = (t + 1 < n_ages)
            .then(|| continuation_at(model, t, &slices.last().expect("next age solved").value));
        let slice_len = d.slice_len();
        let grid = &model.grid;
        let choices: Vec<std::result::Result<Choice, usize>> = (0..d.len())
            .into_par_iter()
            .map(|idx| {
                let (a, p, j, i, e) = d.unpack(idx);
                let ev = ev_t
                    .as_ref()
                    .map(|v| &v[i * slice_len..(i + 1) * slice_len]);
                let h = model.health.health(t, i, e);
                best_choice(
                    model,
                    t,
                    ev,
                    &bequests,
                    grid.assets[a],
                    grid.pension[p],
                    j,
                    h,
                )
                .ok_or(idx)
            })
            .collect();
        let mut sol = AgeSolution {
            value: Vec::with_capacity(d.len()),
            next_asset: Vec::with_capacity(d.len()),
            hours: Vec::with_capacity(d.len()),
            consumption: Vec::with_capacity(d.len()),
        };
        for c in choices {
            let c = c.map_err(|idx| {
                let (a, p, j, i, e) = d.unpack(idx);
                Error::Infeasible(format!(
                    "no feasible choice at age {} (asset {a}, pension {p}, wage {j}, health {i}/{e})",
                    grid.ages[t]
                ))
            })?;
            sol.value.push(c.value);
            sol.next_asset.push(c.next_index as u16);
            sol.hours.push(c.hours_index as u8);
            sol.consumption.push(c.consumption);
        }
        slices.push(sol);
        if let Some(ev) = ev_t {
            continuation[t] = ev;
        }
    }
    slices.reverse();
    Ok(Solution {
        ages: model.grid.ages.clone(),
        dims: d,
        slices,
        continuation,
    })
}

/// Continuous state for policy evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub assets: f64,
    pub pension: f64,
    pub wage_node: usize,
    pub eta_node: usize,
    pub eps_node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Policy {
    pub next_assets: f64,
    pub hours: f64,
    pub consumption: f64,
    pub wage: f64,
    pub leisure: f64,
    pub work_cost: f64,
    pub next_pension: f64,
    pub budget: Budget,
    /// State was outside the grid hull and was clamped.
    pub clamped: bool,
    /// Interpolated choice was adjusted to keep consumption at the floor.
    pub adjusted: bool,
}

/// Policy at an off-grid state: next assets interpolated over the four
/// surrounding (asset, pension) nodes, hours from the heaviest node, and
/// consumption from the budget at the actual state.
pub fn policy_eval(model: &Model, sol: &Solution, t: usize, state: &State) -> Policy {
    let prm = &model.params;
    let grid = &model.grid;
    let d = sol.dims;
    let age = grid.ages[t];
    let (ia, wa, ca) = bracket(&grid.assets, state.assets);
    let (ip, wp, cp) = bracket(&grid.pension, state.pension);
    let assets = state.assets.max(0.0);
    let pension = state.pension.max(0.0);
    let slice = &sol.slices[t];
    let mut a_next = 0.0;
    let mut heaviest = (f64::NEG_INFINITY, 0u8);
    let pen_corners: Vec<(usize, f64)> = if d.pension == 1 {
        vec![(0, 1.0)]
    } else {
        vec![(0, 1.0 - wp), (1, wp)]
    };
    for (da, w_a) in [(0usize, 1.0 - wa), (1, wa)] {
        for &(dp, w_p) in &pen_corners {
            let w = w_a * w_p;
            if w == 0.0 {
                continue;
            }
            let node = d.index(
                ia + da,
                ip + dp,
                state.wage_node,
                state.eta_node,
                state.eps_node,
            );
            a_next += w * grid.assets[slice.next_asset[node] as usize];
            if w > heaviest.0 {
                heaviest = (w, slice.hours[node]);
            }
        }
    }
    let h = model.health.health(t, state.eta_node, state.eps_node);
    let terms = state_terms(model, t, state.wage_node, h);
    let mut hours = grid.hours[heaviest.1 as usize];
    if age >= NO_WORK_AGE || prm.time_endowment - hours - terms.time_cost <= 0.0 {
        hours = 0.0;
    }
    let mut adjusted = false;
    let eval = |hours: f64, a_next: f64| {
        let budget = net_resources(assets, hours, terms.wage, pension, age, prm);
        let wc = work_cost(hours, age, &prm.work_cost);
        (budget, wc, budget.resources - wc - a_next)
    };
    let (mut budget, mut wc, mut c) = eval(hours, a_next);
    if c < prm.consumption_floor - 1e-9 {
        adjusted = true;
        if budget.resources - wc < prm.consumption_floor {
            hours = 0.0;
            (budget, wc, _) = eval(0.0, 0.0);
        }
        a_next = a_next
            .min(budget.resources - wc - prm.consumption_floor)
            .max(0.0);
        c = budget.resources - wc - a_next;
    }
    Policy {
        next_assets: a_next,
        hours,
        consumption: c,
        wage: terms.wage,
        leisure: prm.time_endowment - hours - terms.time_cost,
        work_cost: wc,
        next_pension: next_pension(pension, hours * terms.wage, age, prm),
        budget,
        clamped: ca || cp,
        adjusted,
    }
}
