//! Simulated method of moments for the life-cycle preference and cost
//! parameters.

use log::warn;

use crate::error::{Error, Result};
use crate::model::params::ModelParams;
use crate::model::solver::solve;
use crate::model::Model;
use crate::optim::{
    hybrid_minimize, latin_hypercube, AnnealOptions, HybridOptions, SimplexOptions, TraceRow,
};
use crate::panel::Panel;
use crate::sim::{
    compute_moments, simulate_histories, InitialConditions, MomentKind, MomentObs, MomentSet,
    SimOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeParam {
    ConsumptionWeight,
    BequestWeight,
    BequestShift,
    /// Time cost at knot 0..4 (minimum, 20th, 30th, 50th percentile).
    TimeCost(usize),
    /// Fixed cost, age slope, older full-time cost.
    WorkCost(usize),
}

impl FreeParam {
    pub const ALL: [FreeParam; 10] = [
        FreeParam::ConsumptionWeight,
        FreeParam::BequestWeight,
        FreeParam::BequestShift,
        FreeParam::TimeCost(0),
        FreeParam::TimeCost(1),
        FreeParam::TimeCost(2),
        FreeParam::TimeCost(3),
        FreeParam::WorkCost(0),
        FreeParam::WorkCost(1),
        FreeParam::WorkCost(2),
    ];

    pub fn name(self) -> String {
        match self {
            FreeParam::ConsumptionWeight => "consumption_weight".into(),
            FreeParam::BequestWeight => "bequest_weight".into(),
            FreeParam::BequestShift => "bequest_shift".into(),
            FreeParam::TimeCost(k) => format!("time_cost_{k}"),
            FreeParam::WorkCost(k) => format!("work_cost_{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FreeParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown free parameter '{s}'")))
    }

    pub fn get(self, p: &ModelParams) -> f64 {
        match self {
            FreeParam::ConsumptionWeight => p.consumption_weight,
            FreeParam::BequestWeight => p.bequest_weight,
            FreeParam::BequestShift => p.bequest_shift,
            FreeParam::TimeCost(k) => p.time_cost.values[k],
            FreeParam::WorkCost(k) => p.work_cost[k],
        }
    }

    pub fn set(self, p: &mut ModelParams, v: f64) {
        match self {
            FreeParam::ConsumptionWeight => p.consumption_weight = v,
            FreeParam::BequestWeight => p.bequest_weight = v,
            FreeParam::BequestShift => p.bequest_shift = v,
            FreeParam::TimeCost(k) => p.time_cost.values[k] = v,
            FreeParam::WorkCost(k) => p.work_cost[k] = v,
        }
    }

    fn default_bounds(self) -> (f64, f64) {
        match self {
            FreeParam::ConsumptionWeight => (0.2, 0.6),
            FreeParam::BequestWeight => (0.0, 0.2),
            FreeParam::BequestShift => (50_000.0, 1_500_000.0),
            FreeParam::TimeCost(_) => (0.0, 4_870.0),
            FreeParam::WorkCost(0) => (0.0, 6_000.0),
            FreeParam::WorkCost(1) => (0.0, 80.0),
            FreeParam::WorkCost(_) => (0.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub param: FreeParam,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Identity,
    /// Inverse squared data moment, so each term is a squared relative gap.
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct SmmConfig {
    pub free: Vec<Bound>,
    pub weighting: Weighting,
    pub n_histories: usize,
    /// Simulation seed held fixed across evaluations.
    pub sim_seed: u64,
    /// Latin-hypercube starts drawn inside the bounds.
    pub n_starts: usize,
    /// Explicit starting points tried before the Latin-hypercube ones.
    pub starts: Vec<Vec<f64>>,
    pub optimizer: HybridOptions,
}

impl Default for SmmConfig {
    fn default() -> Self {
        let free = FreeParam::ALL
            .into_iter()
            .map(|param| {
                let (lower, upper) = param.default_bounds();
                Bound {
                    param,
                    lower,
                    upper,
                }
            })
            .collect::<Vec<_>>();
        let dim = free.len();
        Self {
            free,
            weighting: Weighting::Identity,
            n_histories: 15_000,
            sim_seed: 11,
            n_starts: 5,
            starts: Vec::new(),
            optimizer: HybridOptions {
                anneal: AnnealOptions::default(),
                simplex: SimplexOptions::new(dim, 0.1),
                max_cycles: 5,
                cycle_tolerance: 1e-3,
                max_evals: 5_000,
                seed: 3,
            },
        }
    }
}

impl SmmConfig {
    /// Estimate only the listed parameters with default bounds.
    pub fn only(params: &[FreeParam]) -> Self {
        let mut c = Self::default();
        c.free.retain(|b| params.contains(&b.param));
        c.optimizer.simplex = SimplexOptions::new(c.free.len(), 0.1);
        c
    }

    pub fn lower(&self) -> Vec<f64> {
        self.free.iter().map(|b| b.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.free.iter().map(|b| b.upper).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.free.iter().map(|b| b.param.name()).collect()
    }

    pub fn validate(&self, time_endowment: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.free.is_empty() {
            return bad("no free parameters".into());
        }
        for (i, b) in self.free.iter().enumerate() {
            if self.free[..i].iter().any(|o| o.param == b.param) {
                return bad(format!("{} listed twice", b.param.name()));
            }
            if !(b.lower.is_finite() && b.upper.is_finite() && b.lower < b.upper) {
                return bad(format!(
                    "bounds of {} must be finite and increasing",
                    b.param.name()
                ));
            }
            match b.param {
                FreeParam::BequestShift if b.lower <= 0.0 => {
                    return bad("bequest shift must stay positive".into())
                }
                FreeParam::TimeCost(k) if k > 3 => {
                    return bad(format!("time-cost knot {k} is not free"))
                }
                FreeParam::TimeCost(_) if b.upper >= time_endowment || b.lower < 0.0 => {
                    return bad("time-cost bounds must lie in [0, time endowment)".into())
                }
                FreeParam::WorkCost(k) if k > 2 => {
                    return bad(format!("work-cost term {k} does not exist"))
                }
                FreeParam::ConsumptionWeight if b.lower <= 0.0 || b.upper >= 1.0 => {
                    return bad("consumption weight bounds must lie in (0, 1)".into())
                }
                _ => {}
            }
        }
        if self.n_histories == 0 {
            return bad("n_histories must be positive".into());
        }
        if self.n_starts == 0 && self.starts.is_empty() {
            return bad("at least one start is required".into());
        }
        let (lo, hi) = (self.lower(), self.upper());
        for s in &self.starts {
            if s.len() != lo.len()
                || s.iter()
                    .zip(lo.iter().zip(&hi))
                    .any(|(v, (l, u))| v < l || v > u)
            {
                return bad("explicit start outside the bounds".into());
            }
        }
        Ok(())
    }

    pub fn apply(&self, base: &ModelParams, x: &[f64]) -> ModelParams {
        let mut p = base.clone();
        for (b, v) in self.free.iter().zip(x) {
            b.param.set(&mut p, *v);
        }
        p
    }
}

/// Per-moment weights for the chosen scheme.
pub fn moment_weights(data: &MomentSet, weighting: Weighting) -> Vec<f64> {
    data.moments
        .iter()
        .map(|m| match (weighting, m.value) {
            (Weighting::Identity, _) => 1.0,
            (Weighting::Diagonal, Some(v)) if v.abs() > 1e-12 => 1.0 / (v * v),
            (Weighting::Diagonal, _) => 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    /// Cells missing in the simulation or the data.
    pub skipped: usize,
}

/// Weighted sum of squared gaps over cells present on both sides.
pub fn loss(sim: &MomentSet, data: &MomentSet, weights: &[f64]) -> Result<Loss> {
    if sim.moments.len() != data.moments.len() || weights.len() != data.moments.len() {
        return Err(Error::Misaligned(format!(
            "{} simulated moments, {} data moments, {} weights",
            sim.moments.len(),
            data.moments.len(),
            weights.len()
        )));
    }
    let mut value = 0.0;
    let mut skipped = 0;
    for ((s, d), w) in sim.moments.iter().zip(&data.moments).zip(weights) {
        if s.id != d.id || s.kind != d.kind || s.age != d.age || s.group != d.group {
            return Err(Error::Misaligned(format!(
                "moment {} does not match data moment {}",
                s.id, d.id
            )));
        }
        match (s.value, d.value) {
            (Some(a), Some(b)) => value += w * (a - b) * (a - b),
            _ => skipped += 1,
        }
    }
    Ok(Loss { value, skipped })
}

/// Simulated moments for one parameter vector.
pub fn simulate_moments(
    model: &Model,
    init: &InitialConditions,
    n: usize,
    seed: u64,
) -> Result<MomentSet> {
    let sol = solve(model)?;
    compute_moments(&simulate_histories(
        model,
        &sol,
        init,
        &SimOptions::new(n, seed),
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub id: usize,
    pub kind: MomentKind,
    pub age: u32,
    pub group: Option<u8>,
    pub data: Option<f64>,
    pub simulated: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamEstimate {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub params: ModelParams,
    pub loss: f64,
    pub skipped: usize,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub budget_exhausted: bool,
    pub fit: Vec<FitRow>,
}

/// Minimize the moment distance over the free parameters, starting from
/// the explicit starts and a Latin hypercube inside the bounds. Proposals
/// that fail validation or leave the bounds score infinity.
pub fn estimate(
    config: &SmmConfig,
    data: &MomentSet,
    model: &Model,
    init: &InitialConditions,
) -> Result<ParamEstimate> {
    config.validate(model.params.time_endowment)?;
    init.validate()?;
    let weights = moment_weights(data, config.weighting);
    let objective = |x: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.params = config.apply(&model.params, x);
        m.params.validate()?;
        let sim = simulate_moments(&m, init, config.n_histories, config.sim_seed)?;
        Ok(loss(&sim, data, &weights)?.value)
    };
    // surface structural errors before the search starts
    let (lo, hi) = (config.lower(), config.upper());
    let mut starts = config.starts.clone();
    starts.extend(latin_hypercube(
        config.n_starts,
        &lo,
        &hi,
        config.optimizer.seed,
    ));
    let probe = config.apply(&model.params, &starts[0]);
    if let Err(e) = probe.validate() {
        return Err(Error::Config(format!(
            "first start is not a valid parameter vector: {e}"
        )));
    }
    let result = hybrid_minimize(
        |x| objective(x).unwrap_or(f64::INFINITY),
        &starts,
        &lo,
        &hi,
        &config.optimizer,
    );
    if result.budget_exhausted {
        warn!("evaluation budget exhausted; returning the best incumbent");
    }
    if !result.f.is_finite() {
        return Err(Error::NonConvergence(
            "no start produced a finite loss".into(),
        ));
    }
    let params = config.apply(&model.params, &result.x);
    let mut best = model.clone();
    best.params = params.clone();
    let sim = simulate_moments(&best, init, config.n_histories, config.sim_seed)?;
    let fit_loss = loss(&sim, data, &weights)?;
    let fit = sim
        .moments
        .iter()
        .zip(&data.moments)
        .map(|(s, d)| FitRow {
            id: d.id,
            kind: d.kind,
            age: d.age,
            group: d.group,
            data: d.value,
            simulated: s.value,
        })
        .collect();
    Ok(ParamEstimate {
        names: config.names(),
        values: result.x,
        params,
        loss: fit_loss.value,
        skipped: fit_loss.skipped,
        trace: result.trace,
        converged: result.converged,
        budget_exhausted: result.budget_exhausted,
        fit,
    })
}

/// Moment observations from a panel, given per-record health and wealth
/// already on the model scale.
pub fn panel_moment_obs(
    panel: &Panel,
    health: &[Option<f64>],
    wealth: &[f64],
) -> Result<Vec<MomentObs>> {
    if health.len() != panel.records.len() || wealth.len() != panel.records.len() {
        return Err(Error::Misaligned(
            "health and wealth must have one entry per panel record".into(),
        ));
    }
    Ok(panel
        .records
        .iter()
        .zip(health.iter().zip(wealth))
        .map(|(r, (h, w))| MomentObs {
            age: r.age,
            assets: Some(*w),
            hours: Some(r.hours_annual),
            health: *h,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{moments_from_obs, N_MOMENTS};

    fn data() -> MomentSet {
        let obs: Vec<MomentObs> = (50..=85)
            .flat_map(|age| {
                (0..10).map(move |k| MomentObs {
                    age,
                    assets: Some(1000.0 * k as f64 + age as f64),
                    hours: Some(if k % 2 == 0 { 0.0 } else { 1500.0 + k as f64 }),
                    health: Some(k as f64 / 10.0),
                })
            })
            .collect();
        moments_from_obs(&obs).unwrap()
    }

    #[test]
    fn identical_moments_have_zero_loss() {
        let d = data();
        assert_eq!(d.moments.len(), N_MOMENTS);
        let w = moment_weights(&d, Weighting::Identity);
        assert_eq!(
            loss(&d, &d, &w).unwrap(),
            Loss {
                value: 0.0,
                skipped: 0
            }
        );
    }

    #[test]
    fn single_gap_gives_its_square() {
        let d = data();
        let mut s = d.clone();
        s.moments[7].value = s.moments[7].value.map(|v| v + 3.0);
        let w = moment_weights(&d, Weighting::Identity);
        assert!((loss(&s, &d, &w).unwrap().value - 9.0).abs() < 1e-9);
        let wd = moment_weights(&d, Weighting::Diagonal);
        let v = d.moments[7].value.unwrap();
        assert!((loss(&s, &d, &wd).unwrap().value - 9.0 / (v * v)).abs() < 1e-12);
    }

    #[test]
    fn missing_cells_are_skipped_and_counted() {
        let d = data();
        let mut s = d.clone();
        s.moments[0].value = None;
        s.moments[100].value = None;
        let w = moment_weights(&d, Weighting::Identity);
        assert_eq!(loss(&s, &d, &w).unwrap().skipped, 2);
    }

    #[test]
    fn misaligned_moments_are_rejected() {
        let d = data();
        let mut s = d.clone();
        s.moments.pop();
        let w = moment_weights(&d, Weighting::Identity);
        assert!(loss(&s, &d, &w).is_err());
        let mut s = d.clone();
        s.moments[3].age += 1;
        assert!(loss(&s, &d, &w).is_err());
    }

    #[test]
    fn config_checks() {
        let c = SmmConfig::default();
        assert!(c.validate(4880.0).is_ok());
        assert_eq!(c.free.len(), 10);
        let mut bad = c.clone();
        bad.free[3].upper = 5000.0;
        assert!(bad.validate(4880.0).is_err());
        let mut bad = c.clone();
        bad.free[2].lower = 0.0;
        assert!(bad.validate(4880.0).is_err());
        let mut bad = c.clone();
        bad.starts = vec![vec![0.0; 10]];
        assert!(bad.validate(4880.0).is_err());
        for p in FreeParam::ALL {
            assert_eq!(FreeParam::parse(&p.name()).unwrap(), p);
        }
    }

    #[test]
    fn apply_sets_only_free_values() {
        let c = SmmConfig::only(&[FreeParam::TimeCost(1), FreeParam::WorkCost(2)]);
        let base = ModelParams::default();
        let p = c.apply(&base, &[1000.0, 5.0]);
        assert_eq!(p.time_cost.values[1], 1000.0);
        assert_eq!(p.work_cost[2], 5.0);
        assert_eq!(p.consumption_weight, base.consumption_weight);
    }
}
