//! Conditional quantile tables for the persistent component:
//! `η_t = Q_t(η_{t-1}, u_t)` with `u_t ~ Uniform(0, 1)`.
//!
//! Tables are estimated by binning the previous-period state and taking
//! empirical quantiles of the next-period state inside each bin. Rows are
//! stored at the within-bin mean of the conditioning variable. Between rows
//! and between ranks the table is interpolated linearly.

use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::generator::HealthGenerator;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::stats::{quantile_sorted, sorted_copy};

/// Quantiles of `η_{t+1}` conditional on `η_t` for one origin age.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSlice {
    /// Origin age of the transition.
    pub age: u32,
    /// Conditioning values, strictly increasing.
    pub eta: Vec<f64>,
    /// Row-major `eta.len() × taus.len()` quantiles.
    pub q: Vec<f64>,
    /// Rows that were below the minimum count and copied from a neighbour.
    pub borrowed_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    pub taus: Vec<f64>,
    pub initial_age: u32,
    pub step_years: u32,
    /// Marginal quantiles of η at the initial age, on `taus`.
    pub initial_marginal: Vec<f64>,
    pub slices: Vec<QuantileSlice>,
}

fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    // returns lower index and weight on the upper point, clamped to the hull
    let n = grid.len();
    if n == 1 || x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let hi = grid.partition_point(|g| *g <= x).min(n - 1);
    let lo = hi - 1;
    let w = (x - grid[lo]) / (grid[hi] - grid[lo]);
    (lo, w)
}

fn interp(grid: &[f64], values: &[f64], x: f64) -> f64 {
    if grid.len() == 1 {
        return values[0];
    }
    let (lo, w) = bracket(grid, x);
    values[lo] * (1.0 - w) + values[lo + 1] * w
}

impl QuantileSlice {
    fn row(&self, i: usize, n_tau: usize) -> &[f64] {
        &self.q[i * n_tau..(i + 1) * n_tau]
    }

    /// Bilinear evaluation; `η` outside the rows is clamped to the boundary
    /// row and reported through the second return value.
    pub fn eval(&self, taus: &[f64], eta: f64, tau: f64) -> (f64, bool) {
        let n_tau = taus.len();
        let clamped = eta < self.eta[0] || eta > self.eta[self.eta.len() - 1];
        if self.eta.len() == 1 {
            return (interp(taus, self.row(0, n_tau), tau), clamped);
        }
        let (lo, w) = bracket(&self.eta, eta);
        let a = interp(taus, self.row(lo, n_tau), tau);
        let b = interp(taus, self.row(lo + 1, n_tau), tau);
        (a * (1.0 - w) + b * w, clamped)
    }
}

impl QuantileTable {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "rank grid must be non-empty and strictly increasing".into(),
            ));
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidInput("ranks must lie in (0, 1)".into()));
        }
        if self.initial_marginal.len() != self.taus.len() {
            return Err(Error::InvalidInput(
                "initial marginal must be tabulated on the rank grid".into(),
            ));
        }
        for s in &self.slices {
            if s.eta.is_empty() || s.eta.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidInput(format!(
                    "age {}: state grid not strictly increasing",
                    s.age
                )));
            }
            if s.q.len() != s.eta.len() * self.taus.len() {
                return Err(Error::InvalidInput(format!(
                    "age {}: quantile matrix has wrong size",
                    s.age
                )));
            }
            for i in 0..s.eta.len() {
                if s.row(i, self.taus.len()).windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::InvalidInput(format!(
                        "age {}: row {i} not monotone in rank",
                        s.age
                    )));
                }
            }
        }
        if self.slices.is_empty() {
            return Err(Error::InvalidInput(
                "quantile table has no transition slices".into(),
            ));
        }
        Ok(())
    }

    /// Slice used for the transition out of period `k` (the last slice is
    /// reused past the tabulated horizon).
    pub fn slice_for_step(&self, k: usize) -> &QuantileSlice {
        &self.slices[k.min(self.slices.len() - 1)]
    }

    pub fn initial_quantile(&self, tau: f64) -> f64 {
        interp(&self.taus, &self.initial_marginal, tau)
    }

    /// Tabulate a known quantile function on the given grids.
    pub fn from_generator(
        generator: &HealthGenerator,
        initial_age: u32,
        n_slices: usize,
        eta_grid: &[f64],
        taus: &[f64],
    ) -> Self {
        let slices = (0..n_slices)
            .map(|k| QuantileSlice {
                age: initial_age + 2 * k as u32,
                eta: eta_grid.to_vec(),
                q: eta_grid
                    .iter()
                    .flat_map(|&e| taus.iter().map(move |&t| generator.quantile(e, t)))
                    .collect(),
                borrowed_rows: Vec::new(),
            })
            .collect();
        Self {
            taus: taus.to_vec(),
            initial_age,
            step_years: 2,
            initial_marginal: taus
                .iter()
                .map(|&t| generator.initial_quantile(t))
                .collect(),
            slices,
        }
    }
}

/// Observed transition of the persistent component between consecutive waves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaTransition {
    pub age: u32,
    pub prev: f64,
    pub next: f64,
}

/// Persistent-component observations: initial-age draws and transitions.
#[derive(Debug, Clone, Default)]
pub struct EtaPanel {
    pub initial_age: u32,
    pub initial: Vec<f64>,
    pub transitions: Vec<EtaTransition>,
}

#[derive(Debug, Clone)]
pub struct QuantileFitOptions {
    pub eta_grid: Vec<f64>,
    pub taus: Vec<f64>,
    /// Bins with fewer transitions borrow their neighbour's quantiles.
    pub min_count: usize,
    /// Origin ages of the output slices.
    pub ages: Vec<u32>,
    /// Transitions within this many years of a slice's age are pooled into
    /// it; `None` pools every age.
    pub age_window: Option<u32>,
}

/// Evenly spaced ranks `(k - 1/2)/n`, `k = 1..=n`.
pub fn midpoint_taus(n: usize) -> Vec<f64> {
    (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
}

/// Outcomes moved to the bin mean along the within-bin least-squares slope,
/// so the spread of the conditioning variable inside a bin does not widen
/// the conditional quantiles.
fn centred_outcomes(prev: &[f64], next: &[f64], centre: f64) -> Vec<f64> {
    let n = prev.len() as f64;
    let next_mean = next.iter().sum::<f64>() / n;
    let (sxy, sxx) = prev
        .iter()
        .zip(next)
        .fold((0.0, 0.0), |(sxy, sxx), (x, y)| {
            let dx = x - centre;
            (sxy + dx * (y - next_mean), sxx + dx * dx)
        });
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    prev.iter()
        .zip(next)
        .map(|(x, y)| y - slope * (x - centre))
        .collect()
}

/// Binned conditional-quantile estimator with a within-bin linear
/// adjustment and monotone rearrangement.
pub fn estimate_quantile_table(
    panel: &EtaPanel,
    opts: &QuantileFitOptions,
) -> Result<QuantileTable> {
    let grid = &opts.eta_grid;
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "state grid must be non-empty and strictly increasing".into(),
        ));
    }
    if opts.taus.is_empty()
        || opts.taus.windows(2).any(|w| w[1] <= w[0])
        || opts.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0))
    {
        return Err(Error::InvalidInput(
            "rank grid must be strictly increasing inside (0, 1)".into(),
        ));
    }
    if opts.ages.is_empty() {
        return Err(Error::InvalidInput("no output ages requested".into()));
    }
    if panel.initial.is_empty() {
        return Err(Error::Empty("no initial-age observations".into()));
    }
    let edges: Vec<f64> = grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let n_bins = grid.len();
    let n_tau = opts.taus.len();

    let mut slices = Vec::with_capacity(opts.ages.len());
    let mut any_populated = false;
    for &age in &opts.ages {
        let mut prevs: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
        let mut nexts: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
        for tr in &panel.transitions {
            if let Some(w) = opts.age_window {
                if tr.age.abs_diff(age) > w {
                    continue;
                }
            }
            let b = edges.partition_point(|e| *e <= tr.prev);
            prevs[b].push(tr.prev);
            nexts[b].push(tr.next);
        }
        let populated: Vec<bool> = prevs
            .iter()
            .map(|p| p.len() >= opts.min_count.max(1))
            .collect();
        if !populated.iter().any(|p| *p) {
            continue;
        }
        any_populated = true;

        let mut eta = vec![0.0; n_bins];
        let mut q = vec![0.0; n_bins * n_tau];
        for b in 0..n_bins {
            if !populated[b] {
                continue;
            }
            eta[b] = prevs[b].iter().sum::<f64>() / prevs[b].len() as f64;
            let sorted = sorted_copy(&centred_outcomes(&prevs[b], &nexts[b], eta[b]));
            let mut row: Vec<f64> = opts
                .taus
                .iter()
                .map(|&t| quantile_sorted(&sorted, t))
                .collect();
            row.sort_by(f64::total_cmp);
            q[b * n_tau..(b + 1) * n_tau].copy_from_slice(&row);
        }
        // sparse bins sit at their grid point and copy the nearest populated row
        let mut borrowed = Vec::new();
        for b in 0..n_bins {
            if populated[b] {
                continue;
            }
            let donor = (0..n_bins)
                .filter(|&j| populated[j])
                .min_by_key(|&j| (j.abs_diff(b), j))
                .expect("at least one populated bin");
            eta[b] = grid[b];
            let row = q[donor * n_tau..(donor + 1) * n_tau].to_vec();
            q[b * n_tau..(b + 1) * n_tau].copy_from_slice(&row);
            borrowed.push(b);
        }
        // bin means of neighbouring populated bins are ordered; a borrowed row
        // placed at its grid point may not be, so order rows by value
        let mut order: Vec<usize> = (0..n_bins).collect();
        order.sort_by(|&a, &b| eta[a].total_cmp(&eta[b]));
        let eta_sorted: Vec<f64> = order.iter().map(|&i| eta[i]).collect();
        if eta_sorted.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "age {age}: duplicate bin locations"
            )));
        }
        let q_sorted: Vec<f64> = order
            .iter()
            .flat_map(|&i| q[i * n_tau..(i + 1) * n_tau].to_vec())
            .collect();
        let borrowed_rows = order
            .iter()
            .enumerate()
            .filter(|(_, i)| borrowed.contains(i))
            .map(|(pos, _)| pos)
            .collect();
        slices.push(QuantileSlice {
            age,
            eta: eta_sorted,
            q: q_sorted,
            borrowed_rows,
        });
    }
    if !any_populated {
        return Err(Error::Empty("every state bin is empty at every age".into()));
    }
    let initial_sorted = sorted_copy(&panel.initial);
    let table = QuantileTable {
        taus: opts.taus.clone(),
        initial_age: panel.initial_age,
        step_years: 2,
        initial_marginal: opts
            .taus
            .iter()
            .map(|&t| quantile_sorted(&initial_sorted, t))
            .collect(),
        slices,
    };
    table.validate()?;
    Ok(table)
}

/// Simulated persistent-component paths, row-major by path.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaPaths {
    pub initial_age: u32,
    pub step_years: u32,
    pub n_paths: usize,
    pub horizon: usize,
    pub values: Vec<f64>,
    /// Draws whose conditioning state fell outside the table rows.
    pub clamped: usize,
}

impl EtaPaths {
    pub fn period(&self, t: usize) -> Vec<f64> {
        (0..self.n_paths)
            .map(|i| self.values[i * self.horizon + t])
            .collect()
    }

    pub fn path(&self, i: usize) -> &[f64] {
        &self.values[i * self.horizon..(i + 1) * self.horizon]
    }
}

/// Forward simulation `η_t = Q_t(η_{t-1}, u_t)`; path `i` uses its own
/// random stream so output does not depend on the thread count.
pub fn simulate_nonlinear(
    table: &QuantileTable,
    n_paths: usize,
    horizon: usize,
    seed: u64,
) -> Result<EtaPaths> {
    table.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let rows: Vec<(Vec<f64>, usize)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Health, i as u64);
            let mut path = Vec::with_capacity(horizon);
            let mut clamped = 0;
            let mut eta = table.initial_quantile(rng.random());
            path.push(eta);
            for k in 1..horizon {
                let u: f64 = rng.random();
                let (next, c) = table.slice_for_step(k - 1).eval(&table.taus, eta, u);
                clamped += c as usize;
                eta = next;
                path.push(eta);
            }
            (path, clamped)
        })
        .collect();
    let clamped = rows.iter().map(|r| r.1).sum();
    Ok(EtaPaths {
        initial_age: table.initial_age,
        step_years: table.step_years,
        n_paths,
        horizon,
        values: rows.into_iter().flat_map(|r| r.0).collect(),
        clamped,
    })
}

/// Paths drawn directly from a generator (no tabulation).
pub fn simulate_generator(
    generator: &HealthGenerator,
    initial_age: u32,
    n_paths: usize,
    horizon: usize,
    seed: u64,
) -> EtaPaths {
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = stream_rng(seed, Stream::Health, i as u64);
            let mut eta = generator.initial_quantile(rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12));
            let mut path = Vec::with_capacity(horizon);
            path.push(eta);
            for _ in 1..horizon {
                let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                eta = generator.quantile(eta, u);
                path.push(eta);
            }
            path
        })
        .collect();
    EtaPaths {
        initial_age,
        step_years: 2,
        n_paths,
        horizon,
        values,
        clamped: 0,
    }
}

/// Result of [`persistence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Persistence {
    pub value: f64,
    /// The difference was one-sided because `η` is at the edge of the rows.
    pub one_sided: bool,
}

/// `∂Q_t(η, τ)/∂η` by a central difference whose step is the local row
/// spacing; one-sided at the boundary rows.
pub fn persistence(slice: &QuantileSlice, taus: &[f64], eta: f64, tau: f64) -> Persistence {
    let rows = &slice.eta;
    let n = rows.len();
    if n < 2 {
        return Persistence {
            value: 0.0,
            one_sided: true,
        };
    }
    let (lo, _) = bracket(rows, eta);
    let step = rows[lo + 1] - rows[lo];
    let x = eta.clamp(rows[0], rows[n - 1]);
    let f = |e: f64| slice.eval(taus, e, tau).0;
    if x - step >= rows[0] && x + step <= rows[n - 1] {
        Persistence {
            value: (f(x + step) - f(x - step)) / (2.0 * step),
            one_sided: false,
        }
    } else if x + step <= rows[n - 1] {
        Persistence {
            value: (f(x + step) - f(x)) / step,
            one_sided: true,
        }
    } else {
        Persistence {
            value: (f(x) - f(x - step)) / step,
            one_sided: true,
        }
    }
}
