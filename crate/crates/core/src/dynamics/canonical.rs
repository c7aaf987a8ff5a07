//! Canonical AR(1) + iid decomposition of health (or log-wage) residuals and
//! its minimum-distance estimator.
//!
//! One period is one survey wave (two years). Period `t` counts waves since
//! the initial age, so `t = 0` is the age-50 cross-section.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead_restarts, SimplexOptions};
use crate::rng::{stream_rng, Stream};

/// ρ, σ²_ν, σ²_ε and the initial persistent variance σ²_0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalParams {
    pub rho: f64,
    pub var_nu: f64,
    pub var_eps: f64,
    pub var0: f64,
}

impl CanonicalParams {
    /// Canonical health estimates used as the default calibration.
    pub const HEALTH: CanonicalParams = CanonicalParams {
        rho: 0.953,
        var_nu: 0.084,
        var_eps: 0.137,
        var0: 0.450,
    };

    /// Two-year wage process estimates; `var_eps` is measurement error.
    pub const WAGE: CanonicalParams = CanonicalParams {
        rho: 0.896,
        var_nu: 0.034,
        var_eps: 0.226,
        var0: 0.148,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Domain(format!(
                "|rho| must be below 1, got {}",
                self.rho
            )));
        }
        for (name, v) in [
            ("var_nu", self.var_nu),
            ("var_eps", self.var_eps),
            ("var0", self.var0),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "{name} must be a finite non-negative variance, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which denominator multiplies σ²_ν in the variance recursion.
///
/// `AsPrinted` evaluates `(1 − ρ^{2t}) / (1 + ρ²)`; `Standard` uses the
/// geometric-sum closed form `(1 − ρ^{2t}) / (1 − ρ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceForm {
    AsPrinted,
    Standard,
}

/// Identifies one second moment: `E[h_t h_{t-lag}]` (lag 0 is a variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MomentKey {
    pub t: usize,
    pub lag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoreticalMoments {
    pub values: BTreeMap<MomentKey, f64>,
}

fn accumulated(params: &CanonicalParams, periods: usize, form: VarianceForm) -> f64 {
    let r2 = params.rho * params.rho;
    let r2t = r2.powi(periods as i32);
    let denom = match form {
        VarianceForm::AsPrinted => 1.0 + r2,
        VarianceForm::Standard => 1.0 - r2,
    };
    // ρ = 0 under the standard form: the sum has exactly one term per period
    let frac = if denom == 0.0 {
        periods as f64
    } else {
        (1.0 - r2t) / denom
    };
    r2t * params.var0 + frac * params.var_nu
}

/// Theoretical variances and lag covariances for periods `0..n_periods`.
pub fn canonical_moments(
    params: &CanonicalParams,
    n_periods: usize,
    lags: &[usize],
    form: VarianceForm,
) -> Result<TheoreticalMoments> {
    params.validate()?;
    let mut values = BTreeMap::new();
    for t in 0..n_periods {
        values.insert(
            MomentKey { t, lag: 0 },
            accumulated(params, t, form) + params.var_eps,
        );
        for &lag in lags {
            if lag == 0 || lag > t {
                continue;
            }
            let cov = params.rho.powi(lag as i32) * accumulated(params, t - lag, form);
            values.insert(MomentKey { t, lag }, cov);
        }
    }
    Ok(TheoreticalMoments { values })
}

/// One residual observation keyed by person and period index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualObs {
    pub person: u64,
    pub t: usize,
    pub value: f64,
}

/// Residuals arranged by person.
#[derive(Debug, Clone, Default)]
pub struct ResidualPanel {
    pub obs: Vec<ResidualObs>,
}

impl ResidualPanel {
    pub fn by_person(&self) -> BTreeMap<u64, BTreeMap<usize, f64>> {
        let mut map: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
        for o in &self.obs {
            map.entry(o.person).or_default().insert(o.t, o.value);
        }
        map
    }

    pub fn max_waves_per_person(&self) -> usize {
        self.by_person()
            .values()
            .map(BTreeMap::len)
            .max()
            .unwrap_or(0)
    }
}

/// Sample second moment with its cell count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalMoment {
    pub value: f64,
    pub count: usize,
}

/// Cross-sectional `E[h_t h_{t-lag}]` for every observed cell.
pub fn empirical_moments(
    panel: &ResidualPanel,
    lags: &[usize],
) -> BTreeMap<MomentKey, EmpiricalMoment> {
    let mut sums: BTreeMap<MomentKey, (f64, usize)> = BTreeMap::new();
    for series in panel.by_person().values() {
        for (&t, &v) in series {
            let e = sums.entry(MomentKey { t, lag: 0 }).or_insert((0.0, 0));
            e.0 += v * v;
            e.1 += 1;
            for &lag in lags {
                if lag == 0 || lag > t {
                    continue;
                }
                if let Some(&w) = series.get(&(t - lag)) {
                    let e = sums.entry(MomentKey { t, lag }).or_insert((0.0, 0));
                    e.0 += v * w;
                    e.1 += 1;
                }
            }
        }
    }
    sums.into_iter()
        .map(|(k, (s, n))| {
            (
                k,
                EmpiricalMoment {
                    value: s / n as f64,
                    count: n,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CanonicalFitOptions {
    /// Lags in periods (waves). Two-year waves and lags of 2..8 years give 1..=4.
    pub lags: Vec<usize>,
    /// Cells with fewer observations are left out of the objective.
    pub min_count: usize,
    pub max_evals: usize,
}

impl Default for CanonicalFitOptions {
    fn default() -> Self {
        Self {
            lags: vec![1, 2, 3, 4],
            min_count: 30,
            max_evals: 40_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CanonicalFit {
    pub params: CanonicalParams,
    pub objective: f64,
    /// (moment, empirical, fitted, count)
    pub fitted: Vec<(MomentKey, f64, f64, usize)>,
    pub evals: usize,
}

fn from_free(z: &[f64]) -> CanonicalParams {
    CanonicalParams {
        rho: z[0].tanh(),
        var_nu: z[1] * z[1],
        var_eps: z[2] * z[2],
        var0: z[3] * z[3],
    }
}

/// Equally weighted minimum-distance fit of the AR(1) + iid model to the
/// residual second moments. Requires persons observed for at least three
/// waves.
pub fn estimate_canonical(
    panel: &ResidualPanel,
    opts: &CanonicalFitOptions,
) -> Result<CanonicalFit> {
    if panel.max_waves_per_person() < 3 {
        return Err(Error::Identification(
            "the AR(1) + iid model needs persons observed for at least three waves".into(),
        ));
    }
    let emp: Vec<(MomentKey, EmpiricalMoment)> = empirical_moments(panel, &opts.lags)
        .into_iter()
        .filter(|(_, m)| m.count >= opts.min_count)
        .collect();
    if !emp.iter().any(|(k, _)| k.lag >= 1) || emp.len() < 4 {
        return Err(Error::Identification(
            "too few populated moment cells".into(),
        ));
    }
    let n_periods = emp.iter().map(|(k, _)| k.t).max().unwrap_or(0) + 1;

    let objective = |z: &[f64]| -> f64 {
        let p = from_free(z);
        if !(p.rho.abs() < 1.0) {
            return f64::INFINITY;
        }
        let th = match canonical_moments(&p, n_periods, &opts.lags, VarianceForm::Standard) {
            Ok(th) => th,
            Err(_) => return f64::INFINITY,
        };
        emp.iter()
            .map(|(k, m)| (m.value - th.values[k]).powi(2))
            .sum()
    };

    // moment-based starting values
    let v0 = emp
        .iter()
        .find(|(k, _)| k.t == 0 && k.lag == 0)
        .map(|(_, m)| m.value)
        .unwrap_or(1.0);
    let starts = [
        [0.9f64.atanh(), 0.3, 0.3, (0.6 * v0).max(1e-4).sqrt()],
        [0.5f64.atanh(), 0.5, 0.5, (0.3 * v0).max(1e-4).sqrt()],
        [0.97f64.atanh(), 0.1, 0.5, (0.8 * v0).max(1e-4).sqrt()],
    ];
    let mut sopts = SimplexOptions::new(4, 0.1);
    sopts.ftol = 1e-16;
    sopts.xtol = 1e-10;
    sopts.max_evals = opts.max_evals;
    let mut best: Option<crate::optim::Minimum> = None;
    let mut evals = 0;
    for s in &starts {
        let m = nelder_mead_restarts(objective, s, &sopts, 8);
        evals += m.evals;
        if best.as_ref().is_none_or(|b| m.f < b.f) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one start");
    if !best.f.is_finite() || !best.converged {
        return Err(Error::NonConvergence(format!(
            "minimum distance stopped after {evals} evaluations at objective {:.3e}, params {:?}",
            best.f,
            from_free(&best.x)
        )));
    }
    let params = from_free(&best.x);
    let th = canonical_moments(&params, n_periods, &opts.lags, VarianceForm::Standard)?;
    let fitted = emp
        .iter()
        .map(|(k, m)| (*k, m.value, th.values[k], m.count))
        .collect();
    Ok(CanonicalFit {
        params,
        objective: best.f,
        fitted,
        evals,
    })
}

/// Simulated persistent/transitory paths for `n_persons` over `n_periods`
/// waves, starting at period 0. Returns `(eta, eps)` row-major by person.
pub fn simulate_canonical(
    params: &CanonicalParams,
    n_persons: usize,
    n_periods: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_persons)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Health, i as u64);
            let mut eta_row = Vec::with_capacity(n_periods);
            let mut eps_row = Vec::with_capacity(n_periods);
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut eta = params.var0.sqrt() * z;
            for t in 0..n_periods {
                if t > 0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    eta = params.rho * eta + params.var_nu.sqrt() * z;
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                eta_row.push(eta);
                eps_row.push(params.var_eps.sqrt() * z);
            }
            (eta_row, eps_row)
        })
        .collect();
    let mut eta = Vec::with_capacity(n_persons * n_periods);
    let mut eps = Vec::with_capacity(n_persons * n_periods);
    for (a, b) in rows {
        eta.extend(a);
        eps.extend(b);
    }
    Ok((eta, eps))
}

/// Residual panel `h = η + ε` observed at periods `0..n_periods` for every
/// person.
pub fn simulate_residual_panel(
    params: &CanonicalParams,
    n_persons: usize,
    n_periods: usize,
    seed: u64,
) -> Result<ResidualPanel> {
    let (eta, eps) = simulate_canonical(params, n_persons, n_periods, seed)?;
    let obs = (0..n_persons)
        .flat_map(|i| {
            let eta = &eta;
            let eps = &eps;
            (0..n_periods).map(move |t| ResidualObs {
                person: i as u64,
                t,
                value: eta[i * n_periods + t] + eps[i * n_periods + t],
            })
        })
        .collect();
    Ok(ResidualPanel { obs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_variance_sums_table_values() {
        let m =
            canonical_moments(&CanonicalParams::HEALTH, 1, &[], VarianceForm::Standard).unwrap();
        assert!((m.values[&MomentKey { t: 0, lag: 0 }] - 0.587).abs() < 1e-12);
        let m =
            canonical_moments(&CanonicalParams::HEALTH, 1, &[], VarianceForm::AsPrinted).unwrap();
        assert!((m.values[&MomentKey { t: 0, lag: 0 }] - 0.587).abs() < 1e-12);
    }

    #[test]
    fn zero_persistence_kills_covariances() {
        let p = CanonicalParams {
            rho: 0.0,
            ..CanonicalParams::HEALTH
        };
        for form in [VarianceForm::AsPrinted, VarianceForm::Standard] {
            let m = canonical_moments(&p, 6, &[1, 2, 3, 4], form).unwrap();
            for (k, v) in &m.values {
                if k.lag > 0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn explosive_rho_is_rejected() {
        let p = CanonicalParams {
            rho: 1.0,
            ..CanonicalParams::HEALTH
        };
        assert!(matches!(
            canonical_moments(&p, 3, &[1], VarianceForm::Standard),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn standard_form_matches_recursion() {
        let p = CanonicalParams::HEALTH;
        let m = canonical_moments(&p, 8, &[1], VarianceForm::Standard).unwrap();
        let mut v = p.var0;
        for t in 0..8 {
            if t > 0 {
                v = p.rho * p.rho * v + p.var_nu;
            }
            assert!((m.values[&MomentKey { t, lag: 0 }] - (v + p.var_eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_wave_panel_is_not_identified() {
        let panel = simulate_residual_panel(&CanonicalParams::HEALTH, 200, 2, 1).unwrap();
        assert!(matches!(
            estimate_canonical(&panel, &CanonicalFitOptions::default()),
            Err(Error::Identification(_))
        ));
    }

    #[test]
    fn noiseless_decay_recovers_rho() {
        let p = CanonicalParams {
            rho: 0.8,
            var_nu: 0.0,
            var_eps: 0.0,
            var0: 0.5,
        };
        let panel = simulate_residual_panel(&p, 2_000, 5, 4).unwrap();
        let fit = estimate_canonical(&panel, &CanonicalFitOptions::default()).unwrap();
        assert!((fit.params.rho - 0.8).abs() < 0.005, "{:?}", fit.params);
    }
}
