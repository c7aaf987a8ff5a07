//! Small statistical helpers shared across modules.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the standard normal CDF.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divisor n).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Mean, variance, skewness and (non-excess) kurtosis with divisor n.
pub fn central_moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return (m, 0.0, f64::NAN, f64::NAN);
    }
    (m, m2, m3 / m2.powf(1.5), m4 / (m2 * m2))
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Linear-interpolated empirical quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Empirical quantile of unsorted data.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted_copy(xs), p)
}

/// Smallest value whose cumulative weight reaches `p`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let target = p * total;
    let mut cum = 0.0;
    for &i in &idx {
        cum += weights[i];
        if cum >= target - 1e-14 * total {
            return values[i];
        }
    }
    values[*idx.last().expect("non-empty")]
}

/// Least-squares fit of `y` on the columns of `x`.
///
/// Fails with [`Error::SingularDesign`] when the design is numerically rank
/// deficient (singular-value ratio below `1e-10`).
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign(format!(
            "{} rows for {} columns",
            x.nrows(),
            x.ncols()
        )));
    }
    // column scaling keeps the conditioning check meaningful for raw polynomials
    let scales: Vec<f64> = (0..x.ncols())
        .map(|j| {
            let n = x.column(j).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut xs = x.clone();
    for (j, s) in scales.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = xs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 || smin / smax < 1e-10 {
        let col = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(Error::SingularDesign(format!(
            "condition ratio {:.3e} (weakest direction {col})",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    let beta = svd
        .solve(y, 0.0)
        .map_err(|e| Error::SingularDesign(e.to_string()))?;
    Ok(DVector::from_iterator(
        beta.len(),
        beta.iter().zip(&scales).map(|(b, s)| b / s),
    ))
}

/// Row-major design matrix from a list of rows.
pub fn design(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, k, |i, j| rows[i][j])
}

/// `n` equal-probability bins of `N(0, sigma²)` represented by their
/// conditional means; every bin carries weight `1/n`.
pub fn equiprobable_normal(sigma: f64, n: usize) -> Vec<f64> {
    let edges: Vec<f64> = (0..=n)
        .map(|k| norm_quantile(k as f64 / n as f64))
        .collect();
    (0..n)
        .map(|k| {
            let dens = |z: f64| if z.is_finite() { norm_pdf(z) } else { 0.0 };
            sigma * n as f64 * (dens(edges[k]) - dens(edges[k + 1]))
        })
        .collect()
}
