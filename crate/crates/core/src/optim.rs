//! Derivative-free minimizers: a Nelder–Mead simplex and a hybrid
//! annealing + simplex driver with restart-until-fixed-point cycles.
//!
//! Objectives return `f64::INFINITY` for points outside the feasible region;
//! those points are never accepted.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Absolute spread of objective values across the simplex at convergence.
    pub ftol: f64,
    /// Largest vertex distance (infinity norm) at convergence.
    pub xtol: f64,
    pub max_evals: usize,
    /// Initial step along each coordinate.
    pub initial_step: Vec<f64>,
}

impl SimplexOptions {
    pub fn new(dim: usize, step: f64) -> Self {
        Self {
            ftol: 1e-12,
            xtol: 1e-9,
            max_evals: 20_000,
            initial_step: vec![step; dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder–Mead with standard coefficients (1, 2, 0.5, 0.5).
///
/// Ties are resolved by vertex order so repeated runs are bit-identical.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    values.push(eval(x0, &mut evals));
    for i in 0..n {
        let mut x = x0.to_vec();
        let step = opts.initial_step.get(i).copied().unwrap_or(0.1);
        x[i] += if step != 0.0 { step } else { 0.00025 };
        let v = eval(&x, &mut evals);
        // an infeasible first step is tried in the opposite direction
        if !v.is_finite() {
            let mut y = x0.to_vec();
            y[i] -= step;
            let w = eval(&y, &mut evals);
            if w.is_finite() {
                simplex.push(y);
                values.push(w);
                continue;
            }
        }
        simplex.push(x);
        values.push(v);
    }

    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let fspread = values[n] - values[0];
        let xspread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if (fspread.is_finite() && fspread <= opts.ftol && xspread <= opts.xtol)
            || xspread <= opts.xtol * 1e-3
        {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=n {
            let shrunk: Vec<f64> = simplex[i]
                .iter()
                .zip(&simplex[0])
                .map(|(x, b)| b + 0.5 * (x - b))
                .collect();
            values[i] = eval(&shrunk, &mut evals);
            simplex[i] = shrunk;
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        f: values[best],
        evals,
        converged,
    }
}

/// Repeated Nelder–Mead, restarting from the incumbent until a restart no
/// longer improves it.
pub fn nelder_mead_restarts<F>(
    mut f: F,
    x0: &[f64],
    opts: &SimplexOptions,
    max_restarts: usize,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let mut best = nelder_mead(&mut f, x0, opts);
    let mut total = best.evals;
    for _ in 0..max_restarts {
        let next = nelder_mead(&mut f, &best.x, opts);
        total += next.evals;
        let improved = next.f < best.f - opts.ftol;
        if next.f <= best.f {
            best = Minimum { evals: 0, ..next };
        }
        if !improved {
            break;
        }
    }
    best.evals = total;
    best
}

/// Simulated annealing schedule.
#[derive(Debug, Clone)]
pub struct AnnealOptions {
    pub initial_temperature: f64,
    pub cooling: f64,
    pub temperatures: usize,
    pub steps_per_temperature: usize,
    /// Proposal standard deviation as a fraction of each bound width.
    pub step_fraction: f64,
}

impl Default for AnnealOptions {
    fn default() -> Self {
        Self {
            initial_temperature: 1.0,
            cooling: 0.85,
            temperatures: 12,
            steps_per_temperature: 10,
            step_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HybridOptions {
    pub anneal: AnnealOptions,
    pub simplex: SimplexOptions,
    /// Annealing + simplex cycles allowed per start.
    pub max_cycles: usize,
    /// A cycle whose end point is within this fraction of each bound width of
    /// its start point ends the search.
    pub cycle_tolerance: f64,
    /// Hard cap on objective evaluations over all starts.
    pub max_evals: usize,
    pub seed: u64,
}

/// One objective evaluation recorded by [`hybrid_minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub start: usize,
    pub cycle: usize,
    pub stage: &'static str,
    pub x: Vec<f64>,
    pub loss: f64,
    pub best_loss: f64,
}

#[derive(Debug, Clone)]
pub struct HybridResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub trace: Vec<TraceRow>,
    /// Whether every start ended on a fixed-point cycle.
    pub converged: bool,
    pub budget_exhausted: bool,
}

struct Recorder<'a, F> {
    f: F,
    lower: &'a [f64],
    upper: &'a [f64],
    trace: Vec<TraceRow>,
    best: f64,
    best_x: Vec<f64>,
    start: usize,
    cycle: usize,
    stage: &'static str,
    max_evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Recorder<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        let inside = x
            .iter()
            .zip(self.lower.iter().zip(self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi);
        if !inside {
            return f64::INFINITY;
        }
        if self.trace.len() >= self.max_evals {
            return f64::INFINITY;
        }
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best {
            self.best = v;
            self.best_x = x.to_vec();
        }
        self.trace.push(TraceRow {
            iteration: self.trace.len(),
            start: self.start,
            cycle: self.cycle,
            stage: self.stage,
            x: x.to_vec(),
            loss: v,
            best_loss: self.best,
        });
        v
    }

    fn exhausted(&self) -> bool {
        self.trace.len() >= self.max_evals
    }
}

/// Box-constrained hybrid of simulated annealing and Nelder–Mead.
///
/// For every start, annealing explores from the incumbent, the simplex
/// polishes the annealing optimum, and the cycle repeats from the polished
/// point until it returns (within tolerance) to the point it started from.
pub fn hybrid_minimize<F>(
    f: F,
    starts: &[Vec<f64>],
    lower: &[f64],
    upper: &[f64],
    opts: &HybridOptions,
) -> HybridResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = lower.len();
    let widths: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let mut rec = Recorder {
        f,
        lower,
        upper,
        trace: Vec::new(),
        best: f64::INFINITY,
        best_x: starts.first().cloned().unwrap_or_else(|| lower.to_vec()),
        start: 0,
        cycle: 0,
        stage: "start",
        max_evals: opts.max_evals,
    };
    let mut all_converged = true;

    for (s, x0) in starts.iter().enumerate() {
        rec.start = s;
        rec.cycle = 0;
        rec.stage = "start";
        let mut incumbent = x0.clone();
        let mut incumbent_f = rec.eval(&incumbent);
        let mut fixed_point = false;
        for cycle in 0..opts.max_cycles {
            if rec.exhausted() {
                break;
            }
            rec.cycle = cycle;
            let cycle_start = incumbent.clone();

            // annealing
            rec.stage = "anneal";
            let mut rng = stream_rng(opts.seed, Stream::Anneal, (s * 1000 + cycle) as u64);
            let mut current = incumbent.clone();
            let mut current_f = incumbent_f;
            let mut best = incumbent.clone();
            let mut best_f = incumbent_f;
            let mut temp = opts.anneal.initial_temperature;
            let t0 = opts.anneal.initial_temperature.max(f64::MIN_POSITIVE);
            for _ in 0..opts.anneal.temperatures {
                for _ in 0..opts.anneal.steps_per_temperature {
                    let scale = opts.anneal.step_fraction * (temp / t0).sqrt();
                    let proposal: Vec<f64> = (0..dim)
                        .map(|j| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            current[j] + z * scale * widths[j]
                        })
                        .collect();
                    let u: f64 = rng.random();
                    let fp = rec.eval(&proposal);
                    if !fp.is_finite() {
                        continue;
                    }
                    let accept = fp <= current_f
                        || (temp > 0.0
                            && u < (-(fp - current_f) / (temp * current_f.abs().max(1e-300)))
                                .exp());
                    if accept {
                        current = proposal;
                        current_f = fp;
                        if current_f < best_f {
                            best = current.clone();
                            best_f = current_f;
                        }
                    }
                }
                temp *= opts.anneal.cooling;
            }

            // simplex polish, working in bound-width units
            rec.stage = "simplex";
            let scaled0: Vec<f64> = best
                .iter()
                .zip(lower.iter().zip(&widths))
                .map(|(x, (l, w))| (x - l) / w)
                .collect();
            let mut sopts = opts.simplex.clone();
            sopts.max_evals = sopts
                .max_evals
                .min(opts.max_evals.saturating_sub(rec.trace.len()));
            let lower_c = lower.to_vec();
            let widths_c = widths.clone();
            let m = nelder_mead(
                |z: &[f64]| {
                    let x: Vec<f64> = z
                        .iter()
                        .zip(lower_c.iter().zip(&widths_c))
                        .map(|(v, (l, w))| l + v * w)
                        .collect();
                    rec.eval(&x)
                },
                &scaled0,
                &sopts,
            );
            let polished: Vec<f64> =
                m.x.iter()
                    .zip(lower.iter().zip(&widths))
                    .map(|(v, (l, w))| l + v * w)
                    .collect();
            if m.f <= best_f {
                incumbent = polished;
                incumbent_f = m.f;
            } else {
                incumbent = best;
                incumbent_f = best_f;
            }
            let moved = incumbent
                .iter()
                .zip(&cycle_start)
                .zip(&widths)
                .map(|((a, b), w)| (a - b).abs() / w)
                .fold(0.0f64, f64::max);
            if moved <= opts.cycle_tolerance {
                fixed_point = true;
                break;
            }
        }
        all_converged &= fixed_point;
    }

    HybridResult {
        x: rec.best_x.clone(),
        f: rec.best,
        budget_exhausted: rec.exhausted(),
        trace: rec.trace,
        converged: all_converged,
    }
}

/// Latin-hypercube starting points inside the box, deterministic by seed.
pub fn latin_hypercube(n: usize, lower: &[f64], upper: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::Misc, 0);
    let dim = lower.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let k = rng.random_range(0..=i);
            perm.swap(i, k);
        }
        cols.push(
            perm.iter()
                .map(|&p| {
                    let u: f64 = rng.random();
                    lower[j] + (upper[j] - lower[j]) * (p as f64 + u) / n as f64
                })
                .collect(),
        );
    }
    (0..n)
        .map(|i| (0..dim).map(|j| cols[j][i]).collect())
        .collect()
}
