//! Hourly wage offers: a deterministic age/health profile plus a persistent
//! AR(1) component and classical measurement error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::canonical::{
    estimate_canonical, CanonicalFitOptions, CanonicalParams, ResidualObs, ResidualPanel,
};
use crate::dynamics::discrete::ar1_equiprobable;
use crate::error::{Error, Result};
use crate::matrix::Transition;
use crate::rng::{stream_rng, Stream};
use crate::stats::ols;

/// Last age with a wage offer.
pub const LAST_WORKING_AGE: u32 = 69;

/// Piecewise-linear health basis with three interior knots.
pub fn health_segments(h: f64, knots: &[f64; 3]) -> [f64; 4] {
    let [k0, k1, k2] = *knots;
    [
        (h - k0).min(0.0),
        h.clamp(k0, k1) - k0,
        h.clamp(k1, k2) - k1,
        (h - k2).max(0.0),
    ]
}

/// Deterministic part of the log hourly wage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WageProfile {
    /// Log wage at age 50 and health equal to the first knot.
    pub intercept: f64,
    /// Coefficients on `(age − 50)/10` and its square.
    pub age: [f64; 2],
    pub knots: [f64; 3],
    /// Slopes of the four health segments, all non-negative.
    pub health: [f64; 4],
}

impl Default for WageProfile {
    fn default() -> Self {
        Self {
            intercept: 1.95,
            age: [-0.05, -0.02],
            knots: [-0.633, -0.17, 0.34],
            health: [0.3, 0.2, 0.15, 0.05],
        }
    }
}

impl WageProfile {
    pub fn regressors(&self, h: f64, age: u32) -> [f64; 7] {
        let x = (age as f64 - 50.0) / 10.0;
        let s = health_segments(h, &self.knots);
        [1.0, x, x * x, s[0], s[1], s[2], s[3]]
    }

    pub fn log_wage(&self, h: f64, age: u32) -> f64 {
        let r = self.regressors(h, age);
        let b = [
            self.intercept,
            self.age[0],
            self.age[1],
            self.health[0],
            self.health[1],
            self.health[2],
            self.health[3],
        ];
        r.iter().zip(b).map(|(x, c)| x * c).sum()
    }
}

/// Wage offer per hour; zero from age 70.
pub fn wage_offer(profile: &WageProfile, h: f64, age: u32, persistent: f64) -> f64 {
    if age > LAST_WORKING_AGE {
        return 0.0;
    }
    (profile.log_wage(h, age) + persistent).exp()
}

/// Persistent wage component on a finite grid with annual transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct WageChain {
    pub nodes: Vec<f64>,
    pub transition: Transition,
    pub initial: Vec<f64>,
}

impl WageChain {
    /// Equal-probability discretization of the annual AR(1).
    pub fn from_annual(rho: f64, var_nu: f64, n: usize) -> Result<Self> {
        let (nodes, transition) = ar1_equiprobable(rho, var_nu.sqrt(), n)?;
        Ok(Self {
            nodes,
            transition,
            initial: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Annual AR(1) equivalent of a process estimated on two-year steps:
/// `ρ_a = √ρ_b`, `σ²_a = σ²_b / (1 + ρ_b)`.
pub fn annual_from_biennial(rho: f64, var_nu: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Domain(format!(
            "two-year persistence {rho} must lie in [0, 1)"
        )));
    }
    Ok((rho.sqrt(), var_nu / (1.0 + rho)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarningsProcess {
    pub profile: WageProfile,
    /// Stochastic parameters on the two-year panel spacing;
    /// `var_eps` is the measurement-error variance.
    pub stochastic: CanonicalParams,
    pub chain: WageChain,
}

impl EarningsProcess {
    pub fn new(profile: WageProfile, stochastic: CanonicalParams, n_nodes: usize) -> Result<Self> {
        stochastic.validate()?;
        let (rho, var) = annual_from_biennial(stochastic.rho, stochastic.var_nu)?;
        Ok(Self {
            profile,
            stochastic,
            chain: WageChain::from_annual(rho, var, n_nodes)?,
        })
    }

    pub fn offer(&self, h: f64, age: u32, node: usize) -> f64 {
        wage_offer(&self.profile, h, age, self.chain.nodes[node])
    }
}

/// One observed log wage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WageObs {
    pub person: u64,
    /// Wave index (two-year spacing).
    pub wave: usize,
    pub age: u32,
    pub health: f64,
    pub log_wage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarningsFit {
    pub profile: WageProfile,
    pub stochastic: CanonicalParams,
    pub objective: f64,
    /// Health segments whose slope was fixed at zero.
    pub constrained: Vec<usize>,
}

/// Least squares for the profile with health slopes constrained
/// non-negative; returns the profile and the segments held at zero.
pub fn fit_wage_profile(obs: &[WageObs], knots: [f64; 3]) -> Result<(WageProfile, Vec<usize>)> {
    if obs.is_empty() {
        return Err(Error::Empty("no wage observations".into()));
    }
    let template = WageProfile {
        intercept: 0.0,
        age: [0.0; 2],
        knots,
        health: [0.0; 4],
    };
    let rows: Vec<[f64; 7]> = obs
        .iter()
        .map(|o| template.regressors(o.health, o.age))
        .collect();
    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.log_wage));

    let mut active: Vec<usize> = (0..7).collect();
    let mut constrained = Vec::new();
    let coef = loop {
        let x = DMatrix::from_fn(obs.len(), active.len(), |i, j| rows[i][active[j]]);
        let b = ols(&x, &y)?;
        let mut full = [0.0; 7];
        for (j, &c) in active.iter().enumerate() {
            full[c] = b[j];
        }
        // drop the most negative health slope and refit
        let worst = active
            .iter()
            .enumerate()
            .filter(|(_, c)| **c >= 3)
            .map(|(j, c)| (j, *c, b[j]))
            .filter(|t| t.2 < 0.0)
            .min_by(|a, b| a.2.total_cmp(&b.2));
        match worst {
            Some((j, c, _)) => {
                constrained.push(c - 3);
                active.remove(j);
            }
            None => break full,
        }
    };
    constrained.sort_unstable();
    let profile = WageProfile {
        intercept: coef[0],
        age: [coef[1], coef[2]],
        knots,
        health: [coef[3], coef[4], coef[5], coef[6]],
    };
    Ok((profile, constrained))
}

/// Profile by constrained least squares, then the minimum-distance fit of
/// the residual autocovariances.
pub fn estimate_earnings_process(
    obs: &[WageObs],
    knots: [f64; 3],
    opts: &CanonicalFitOptions,
) -> Result<EarningsFit> {
    let (profile, constrained) = fit_wage_profile(obs, knots)?;
    let residuals = ResidualPanel {
        obs: obs
            .iter()
            .map(|o| ResidualObs {
                person: o.person,
                t: o.wave,
                value: o.log_wage - profile.log_wage(o.health, o.age),
            })
            .collect(),
    };
    let fit = estimate_canonical(&residuals, opts)?;
    Ok(EarningsFit {
        profile,
        stochastic: fit.params,
        objective: fit.objective,
        constrained,
    })
}

/// Simulated node indices of the persistent wage component, annual steps,
/// row-major by path.
#[derive(Debug, Clone, PartialEq)]
pub struct WagePaths {
    pub n_paths: usize,
    pub horizon: usize,
    pub nodes: Vec<usize>,
}

impl WagePaths {
    pub fn path(&self, i: usize) -> &[usize] {
        &self.nodes[i * self.horizon..(i + 1) * self.horizon]
    }
}

pub fn simulate_earnings(
    chain: &WageChain,
    n_paths: usize,
    horizon: usize,
    seed: u64,
) -> WagePaths {
    let nodes = (0..n_paths)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = stream_rng(seed, Stream::Wage, i as u64);
            let mut node = sample_weights(&chain.initial, rng.random());
            let mut path = Vec::with_capacity(horizon);
            for t in 0..horizon {
                if t > 0 {
                    node = chain.transition.sample(node, rng.random());
                }
                path.push(node);
            }
            path
        })
        .collect();
    WagePaths {
        n_paths,
        horizon,
        nodes,
    }
}

/// Index drawn from a discrete distribution by inversion.
pub fn sample_weights(weights: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (j, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return j;
        }
    }
    weights
        .iter()
        .rposition(|w| *w > 0.0)
        .unwrap_or(weights.len() - 1)
}
