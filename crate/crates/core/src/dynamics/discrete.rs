//! Finite-state representation of the health process used by the
//! life-cycle model.

use log::warn;

use crate::dynamics::quantile::EtaPaths;
use crate::error::{Error, Result};
use crate::matrix::Transition;
use crate::stats::{
    equiprobable_normal, norm_cdf, norm_quantile, quantile_sorted, weighted_quantile,
};

/// Percentiles separating the four health groups used for mortality and
/// participation moments.
pub const GROUP_PERCENTILES: [f64; 3] = [0.2, 0.3, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepairedRow {
    pub step: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteHealthProcess {
    /// Model ages, one grid per age.
    pub ages: Vec<u32>,
    /// Years between consecutive ages (2 before annualization, 1 after).
    pub step_years: u32,
    /// Persistent-component grid per age, sorted.
    pub eta: Vec<Vec<f64>>,
    /// Additive location shift per age applied on top of `eta`.
    pub offsets: Vec<f64>,
    pub eps: Vec<f64>,
    pub eps_weights: Vec<f64>,
    /// `transitions[k]` maps age `k` to age `k + 1`.
    pub transitions: Vec<Transition>,
    /// Distribution over persistent nodes at the first age.
    pub initial: Vec<f64>,
    pub repaired: Vec<RepairedRow>,
}

impl DiscreteHealthProcess {
    pub fn n_eta(&self) -> usize {
        self.initial.len()
    }

    pub fn n_eps(&self) -> usize {
        self.eps.len()
    }

    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn age_index(&self, age: u32) -> Option<usize> {
        self.ages.iter().position(|a| *a == age)
    }

    /// Location of persistent node `i` at age index `a`, shift included.
    pub fn eta_at(&self, a: usize, i: usize) -> f64 {
        self.eta[a][i] + self.offsets[a]
    }

    pub fn health(&self, a: usize, i: usize, e: usize) -> f64 {
        self.eta_at(a, i) + self.eps[e]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_eta();
        let m = self.ages.len();
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput("health process has no nodes".into()));
        }
        if self.eta.len() != m || self.offsets.len() != m || self.transitions.len() + 1 != m {
            return Err(Error::InvalidInput(
                "health process arrays disagree on the number of ages".into(),
            ));
        }
        if self.ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "ages must be strictly increasing".into(),
            ));
        }
        for (a, g) in self.eta.iter().enumerate() {
            if g.len() != n || g.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidInput(format!(
                    "age {}: persistent grid unsorted or wrong size",
                    self.ages[a]
                )));
            }
        }
        if self.eps.len() != self.eps_weights.len() || self.eps.is_empty() {
            return Err(Error::InvalidInput(
                "transitory grid and weights differ in length".into(),
            ));
        }
        if (self.eps_weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
            || self.eps_weights.iter().any(|w| *w < 0.0)
        {
            return Err(Error::InvalidInput(
                "transitory weights are not a distribution".into(),
            ));
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-12
            || self.initial.iter().any(|w| *w < 0.0)
        {
            return Err(Error::InvalidInput(
                "initial weights are not a distribution".into(),
            ));
        }
        for (k, t) in self.transitions.iter().enumerate() {
            if t.dim() != n {
                return Err(Error::InvalidInput(format!(
                    "step {k}: transition has wrong dimension"
                )));
            }
            let err = t.stochastic_error();
            if err > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "step {k}: row sums off by {err:e}"
                )));
            }
        }
        Ok(())
    }

    /// Unconditional distribution over persistent nodes at each age.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_ages());
        let mut dist = self.initial.clone();
        out.push(dist.clone());
        for t in &self.transitions {
            dist = t.push_forward(&dist);
            out.push(dist.clone());
        }
        out
    }

    /// Health values and weights over all (persistent, transitory) nodes at
    /// age index `a`, given persistent-node weights.
    pub fn health_distribution(&self, a: usize, eta_weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut values = Vec::with_capacity(self.n_eta() * self.n_eps());
        let mut weights = Vec::with_capacity(values.capacity());
        for (i, w) in eta_weights.iter().enumerate() {
            for (e, pe) in self.eps_weights.iter().enumerate() {
                values.push(self.health(a, i, e));
                weights.push(w * pe);
            }
        }
        (values, weights)
    }

    /// 20th, 30th and 50th percentiles of health at each age under the
    /// unconditional (no-mortality) distribution.
    pub fn group_cutoffs(&self) -> Vec<[f64; 3]> {
        self.marginals()
            .iter()
            .enumerate()
            .map(|(a, m)| {
                let (v, w) = self.health_distribution(a, m);
                GROUP_PERCENTILES.map(|p| weighted_quantile(&v, &w, p))
            })
            .collect()
    }

    /// Health group (0 = worst) of every node at every age, indexed
    /// `[age][i * n_eps + e]`.
    pub fn node_groups(&self) -> Vec<Vec<usize>> {
        self.group_cutoffs()
            .iter()
            .enumerate()
            .map(|(a, cut)| {
                (0..self.n_eta())
                    .flat_map(|i| (0..self.n_eps()).map(move |e| (i, e)))
                    .map(|(i, e)| health_group(self.health(a, i, e), cut))
                    .collect()
            })
            .collect()
    }

    /// Median health at each age without mortality.
    pub fn medians(&self) -> Vec<f64> {
        self.marginals()
            .iter()
            .enumerate()
            .map(|(a, m)| {
                let (v, w) = self.health_distribution(a, m);
                weighted_quantile(&v, &w, 0.5)
            })
            .collect()
    }

    /// Persistent-node mass alive at each age when the annual death
    /// probability of a node depends on its health group.
    pub fn survivor_weights(&self, death: &[[f64; 4]]) -> Vec<Vec<f64>> {
        let groups = self.node_groups();
        let ne = self.n_eps();
        let mut out = Vec::with_capacity(self.n_ages());
        let mut dist = self.initial.clone();
        out.push(dist.clone());
        for (a, t) in self.transitions.iter().enumerate() {
            let alive: Vec<f64> = dist
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let surv: f64 = (0..ne)
                        .map(|e| self.eps_weights[e] * (1.0 - death[a][groups[a][i * ne + e]]))
                        .sum();
                    w * surv
                })
                .collect();
            dist = t.push_forward(&alive);
            out.push(dist.clone());
        }
        out
    }

    pub fn survivor_medians(&self, death: &[[f64; 4]]) -> Vec<f64> {
        self.survivor_weights(death)
            .iter()
            .enumerate()
            .map(|(a, m)| {
                let (v, w) = self.health_distribution(a, m);
                if w.iter().sum::<f64>() <= 0.0 {
                    return f64::NAN;
                }
                weighted_quantile(&v, &w, 0.5)
            })
            .collect()
    }
}

/// Group index of `h` given ascending cutoffs: values at or below the first
/// cutoff fall in group 0.
pub fn health_group(h: f64, cutoffs: &[f64; 3]) -> usize {
    cutoffs.iter().filter(|c| h > **c).count()
}

/// Rank-based assignment of values to `n` equal-probability bins; ties are
/// broken by position so the bin sizes differ by at most one.
fn rank_bins(values: &[f64], n: usize) -> (Vec<usize>, Vec<f64>) {
    let len = values.len();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut bins = vec![0; len];
    for (rank, &idx) in order.iter().enumerate() {
        bins[idx] = rank * n / len;
    }
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let grid = (0..n)
        .map(|k| quantile_sorted(&sorted, (k as f64 + 0.5) / n as f64))
        .collect();
    (bins, grid)
}

/// Bin simulated paths period by period and count bin-to-bin moves.
///
/// Produces a process on the path spacing (biennial for generator paths).
pub fn discretize(
    paths: &EtaPaths,
    sigma_eps: f64,
    n_eta: usize,
    n_eps: usize,
) -> Result<DiscreteHealthProcess> {
    if n_eta == 0 || n_eps == 0 {
        return Err(Error::InvalidInput("grid sizes must be positive".into()));
    }
    if !(sigma_eps >= 0.0) {
        return Err(Error::InvalidInput(
            "transitory standard deviation must be non-negative".into(),
        ));
    }
    let needed = 10 * n_eta * n_eta;
    let ages: Vec<u32> = (0..paths.horizon)
        .map(|t| paths.initial_age + paths.step_years * t as u32)
        .collect();
    if paths.n_paths < needed {
        return Err(Error::Insufficient {
            age: ages.first().copied().unwrap_or(paths.initial_age),
            detail: format!("{} paths, need at least {needed}", paths.n_paths),
        });
    }
    let binned: Vec<(Vec<usize>, Vec<f64>)> = (0..paths.horizon)
        .map(|t| rank_bins(&paths.period(t), n_eta))
        .collect();

    let mut transitions = Vec::with_capacity(paths.horizon.saturating_sub(1));
    let mut repaired = Vec::new();
    for t in 0..paths.horizon.saturating_sub(1) {
        let mut counts = vec![0.0; n_eta * n_eta];
        for (from, to) in binned[t].0.iter().zip(&binned[t + 1].0) {
            counts[from * n_eta + to] += 1.0;
        }
        let totals: Vec<f64> = (0..n_eta)
            .map(|i| counts[i * n_eta..(i + 1) * n_eta].iter().sum())
            .collect();
        let filled: Vec<usize> = (0..n_eta).filter(|&i| totals[i] > 0.0).collect();
        if filled.is_empty() {
            return Err(Error::Insufficient {
                age: ages[t],
                detail: "no transitions observed".into(),
            });
        }
        let mut data = vec![0.0; n_eta * n_eta];
        for i in 0..n_eta {
            let src = if totals[i] > 0.0 {
                i
            } else {
                let donor = *filled
                    .iter()
                    .min_by_key(|&&j| (j.abs_diff(i), j))
                    .expect("non-empty");
                warn!(
                    "age {}: empty transition row {i} copied from row {donor}",
                    ages[t]
                );
                repaired.push(RepairedRow { step: t, row: i });
                donor
            };
            for j in 0..n_eta {
                data[i * n_eta + j] = counts[src * n_eta + j] / totals[src];
            }
        }
        transitions.push(Transition::from_row_major(
            n_eta,
            normalize_rows(n_eta, data),
        ));
    }

    let mut initial = vec![0.0; n_eta];
    for b in &binned[0].0 {
        initial[*b] += 1.0;
    }
    let total = paths.n_paths as f64;
    initial.iter_mut().for_each(|w| *w /= total);

    let (eps, eps_weights) = transitory_grid(sigma_eps, n_eps);
    let process = DiscreteHealthProcess {
        ages,
        step_years: paths.step_years,
        eta: binned.into_iter().map(|b| b.1).collect(),
        offsets: vec![0.0; paths.horizon],
        eps,
        eps_weights,
        transitions,
        initial: normalize(initial),
        repaired,
    };
    process.validate()?;
    Ok(process)
}

/// Equal-probability normal grid for the transitory component.
pub fn transitory_grid(sigma: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    (equiprobable_normal(sigma, n), normalize(vec![1.0; n]))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Rescale rows so each sums to one to within a few ulps.
fn normalize_rows(n: usize, mut data: Vec<f64>) -> Vec<f64> {
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        // fold any residual into the largest entry
        let resid = 1.0 - row.iter().sum::<f64>();
        if let Some(big) = row.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *big += resid;
        }
    }
    data
}

/// Convert a process on two-year steps into annual steps: both ages of a
/// two-year block share the grid, the step inside a block is the identity
/// and the step across blocks is the two-year matrix.
pub fn annualize(process: &DiscreteHealthProcess) -> DiscreteHealthProcess {
    let n = process.n_eta();
    let m = process.n_ages();
    let mut ages = Vec::with_capacity(2 * m);
    let mut eta = Vec::with_capacity(2 * m);
    let mut offsets = Vec::with_capacity(2 * m);
    let mut transitions = Vec::with_capacity(2 * m - 1);
    let mut repaired = Vec::new();
    for k in 0..m {
        for extra in 0..2 {
            ages.push(process.ages[k] + extra);
            eta.push(process.eta[k].clone());
            offsets.push(process.offsets[k]);
        }
        transitions.push(Transition::identity(n));
        if k + 1 < m {
            transitions.push(process.transitions[k].clone());
        }
    }
    for r in &process.repaired {
        repaired.push(RepairedRow {
            step: 2 * r.step + 1,
            row: r.row,
        });
    }
    DiscreteHealthProcess {
        ages,
        step_years: 1,
        eta,
        offsets,
        eps: process.eps.clone(),
        eps_weights: process.eps_weights.clone(),
        transitions,
        initial: process.initial.clone(),
        repaired,
    }
}

#[derive(Debug, Clone)]
pub struct BiasCorrectionOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for BiasCorrectionOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiasCorrection {
    pub process: DiscreteHealthProcess,
    pub iterations: usize,
    pub converged: bool,
    /// Largest |survivor median − target| across ages at the returned iterate.
    pub max_gap: f64,
}

/// Shift each age's grid so that median health among survivors matches
/// `targets`. `death[a]` holds the annual death probability per health
/// group for the step out of age index `a`.
pub fn mortality_bias_correction(
    process: &DiscreteHealthProcess,
    death: &[[f64; 4]],
    targets: &[f64],
    opts: &BiasCorrectionOptions,
) -> Result<BiasCorrection> {
    let m = process.n_ages();
    if death.len() + 1 < m {
        return Err(Error::InvalidInput(format!(
            "mortality covers {} steps but the process has {}",
            death.len(),
            m - 1
        )));
    }
    if targets.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} target medians for {m} ages",
            targets.len()
        )));
    }
    let mut current = process.clone();
    let mut best: Option<(f64, DiscreteHealthProcess, usize)> = None;
    for iter in 0..=opts.max_iterations {
        let medians = current.survivor_medians(death);
        let gaps: Vec<f64> = medians.iter().zip(targets).map(|(m, t)| t - m).collect();
        let max_gap = gaps.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if best.as_ref().is_none_or(|b| max_gap < b.0) {
            best = Some((max_gap, current.clone(), iter));
        }
        if max_gap < opts.tolerance {
            return Ok(BiasCorrection {
                process: current,
                iterations: iter,
                converged: true,
                max_gap,
            });
        }
        if iter == opts.max_iterations {
            break;
        }
        for (o, g) in current.offsets.iter_mut().zip(&gaps) {
            if g.is_finite() {
                *o += g;
            }
        }
    }
    let (max_gap, process, iterations) = best.expect("at least one iterate");
    warn!("mortality bias correction stopped after {iterations} iterations with gap {max_gap:.2e}");
    Ok(BiasCorrection {
        process,
        iterations,
        converged: false,
        max_gap,
    })
}

/// Equal-probability discretization of a stationary Gaussian AR(1):
/// conditional-mean nodes and exact bin-to-bin probabilities.
pub fn ar1_equiprobable(rho: f64, sigma_nu: f64, n: usize) -> Result<(Vec<f64>, Transition)> {
    if !(rho.abs() < 1.0) || !(sigma_nu >= 0.0) || n == 0 {
        return Err(Error::Domain(format!(
            "invalid AR(1): rho {rho}, sigma {sigma_nu}, n {n}"
        )));
    }
    let sigma = sigma_nu / (1.0 - rho * rho).sqrt();
    if n == 1 || sigma == 0.0 {
        return Ok((
            vec![0.0; n],
            Transition::from_row_major(n, vec![1.0 / n as f64; n * n]),
        ));
    }
    let nodes = equiprobable_normal(sigma, n);
    let edges: Vec<f64> = (0..=n)
        .map(|k| sigma * norm_quantile(k as f64 / n as f64))
        .collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let mean = rho * nodes[i];
        for j in 0..n {
            let cdf = |x: f64| {
                if x == f64::INFINITY {
                    1.0
                } else if x == f64::NEG_INFINITY {
                    0.0
                } else if sigma_nu == 0.0 {
                    if mean < x {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    norm_cdf((x - mean) / sigma_nu)
                }
            };
            data[i * n + j] = (cdf(edges[j + 1]) - cdf(edges[j])).max(0.0);
        }
    }
    Ok((
        nodes,
        Transition::from_row_major(n, normalize_rows(n, data)),
    ))
}

/// Correlation between consecutive states of a chain whose origin nodes
/// carry weights `dist`.
pub fn chain_autocorrelation(from: &[f64], to: &[f64], dist: &[f64], t: &Transition) -> f64 {
    let n = from.len();
    let next = t.push_forward(dist);
    let mx: f64 = from.iter().zip(dist).map(|(x, w)| x * w).sum();
    let my: f64 = to.iter().zip(&next).map(|(y, w)| y * w).sum();
    let vx: f64 = from
        .iter()
        .zip(dist)
        .map(|(x, w)| w * (x - mx).powi(2))
        .sum();
    let vy: f64 = to
        .iter()
        .zip(&next)
        .map(|(y, w)| w * (y - my).powi(2))
        .sum();
    let mut cov = 0.0;
    for i in 0..n {
        for j in 0..n {
            cov += dist[i] * t.get(i, j) * (from[i] - mx) * (to[j] - my);
        }
    }
    cov / (vx * vy).sqrt()
}
