//! Continuous health index from objective indicators via a binary-response
//! model of self-reported good health, and its demographic residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{norm_cdf, norm_pdf, ols};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Probit,
    Logit,
}

impl Link {
    fn cdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => norm_cdf(z),
            Link::Logit => 1.0 / (1.0 + (-z).exp()),
        }
    }

    fn pdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => norm_pdf(z),
            Link::Logit => {
                let p = self.cdf(z);
                p * (1.0 - p)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Probit => "probit",
            Link::Logit => "logit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthIndexModel {
    pub link: Link,
    pub names: Vec<String>,
    /// Intercept followed by one coefficient per indicator.
    pub coefs: Vec<f64>,
    /// Mean and standard deviation of the linear index over the fitting sample.
    pub mean: f64,
    pub sd: f64,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl HealthIndexModel {
    pub fn linear_index(&self, z: &[f64]) -> f64 {
        self.coefs[1..].iter().zip(z).map(|(a, x)| a * x).sum()
    }

    /// Standardized index; `None` if any indicator is missing.
    pub fn predict(&self, z: &[Option<f64>]) -> Option<f64> {
        if z.len() != self.names.len() {
            return None;
        }
        let mut s = 0.0;
        for (a, x) in self.coefs[1..].iter().zip(z) {
            s += a * (*x)?;
        }
        Some((s - self.mean) / self.sd)
    }
}

#[derive(Debug, Clone)]
pub struct IndexFitOptions {
    pub link: Link,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IndexFitOptions {
    fn default() -> Self {
        Self {
            link: Link::Probit,
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

/// Complete or quasi-complete separation by a single indicator.
fn separating_indicator(z: &[Vec<f64>], y: &[bool], names: &[String]) -> Option<String> {
    for (j, name) in names.iter().enumerate() {
        let col = z.iter().map(|r| r[j]);
        let (mut lo1, mut hi1, mut lo0, mut hi0) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for (x, &yy) in col.zip(y) {
            if yy {
                lo1 = lo1.min(x);
                hi1 = hi1.max(x);
            } else {
                lo0 = lo0.min(x);
                hi0 = hi0.max(x);
            }
        }
        if hi0 < lo1 || hi1 < lo0 {
            return Some(name.clone());
        }
        // a binary indicator whose rarer level has a single outcome
        let mut levels: Vec<f64> = z.iter().map(|r| r[j]).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        if levels.len() == 2 {
            for &level in &levels {
                let outcomes: Vec<bool> = z
                    .iter()
                    .zip(y)
                    .filter(|(r, _)| r[j] == level)
                    .map(|(_, &yy)| yy)
                    .collect();
                if outcomes.iter().all(|o| *o) || outcomes.iter().all(|o| !*o) {
                    return Some(name.clone());
                }
            }
        }
    }
    None
}

/// Maximum-likelihood fit of `P(good) = F(α₀ + Z'α)`; the linear index
/// `Z'α` is then standardized over the fitting sample.
pub fn fit_latent_index(
    z: &[Vec<f64>],
    y: &[bool],
    names: &[String],
    opts: &IndexFitOptions,
) -> Result<HealthIndexModel> {
    let n = z.len();
    let k = names.len();
    if n == 0 {
        return Err(Error::Empty(
            "no complete observations for the index".into(),
        ));
    }
    if y.len() != n || z.iter().any(|r| r.len() != k) {
        return Err(Error::Misaligned(
            "indicator rows and outcomes disagree".into(),
        ));
    }
    if y.iter().all(|v| *v) || y.iter().all(|v| !*v) {
        return Err(Error::Separation(
            "intercept (outcome has a single value)".into(),
        ));
    }
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { z[i][j - 1] });
    // rank check through least squares on an arbitrary response
    let probe = DVector::from_iterator(n, y.iter().map(|b| *b as u8 as f64));
    ols(&x, &probe)?;
    if let Some(name) = separating_indicator(z, y, names) {
        return Err(Error::Separation(name));
    }

    let link = opts.link;
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = &x * beta;
        eta.iter()
            .zip(y)
            .map(|(e, &yy)| {
                let p = link.cdf(*e).clamp(1e-300, 1.0 - 1e-16);
                if yy {
                    p.ln()
                } else {
                    (1.0 - link.cdf(*e)).max(1e-300).ln()
                }
            })
            .sum()
    };
    let mut beta = DVector::zeros(k + 1);
    let share = y.iter().filter(|v| **v).count() as f64 / n as f64;
    beta[0] = match link {
        Link::Probit => crate::stats::norm_quantile(share),
        Link::Logit => (share / (1.0 - share)).ln(),
    };
    let mut ll = loglik(&beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let eta = &x * &beta;
        let mut grad = DVector::zeros(k + 1);
        let mut info = DMatrix::zeros(k + 1, k + 1);
        for i in 0..n {
            let e = eta[i];
            let p = link.cdf(e).clamp(1e-15, 1.0 - 1e-15);
            let d = link.pdf(e).max(1e-300);
            let yy = y[i] as u8 as f64;
            let score = (yy - p) * d / (p * (1.0 - p));
            let w = d * d / (p * (1.0 - p));
            let row = x.row(i);
            grad.axpy(score, &row.transpose(), 1.0);
            info.ger(w, &row.transpose(), &row.transpose(), 1.0);
        }
        let step = info
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| {
                Error::SingularDesign("information matrix not positive definite".into())
            })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cl = loglik(&cand);
            if cl >= ll - 1e-12 {
                beta = cand;
                let change = cl - ll;
                ll = cl;
                accepted = true;
                if step.amax() * t < opts.tolerance
                    || change.abs() < opts.tolerance * (1.0 + ll.abs())
                {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "index fit after {iterations} Newton steps"
        )));
    }
    if beta.amax() > 1e4 {
        return Err(Error::Separation("linear combination of indicators".into()));
    }

    let coefs: Vec<f64> = beta.iter().copied().collect();
    let index: Vec<f64> = z
        .iter()
        .map(|r| coefs[1..].iter().zip(r).map(|(a, b)| a * b).sum())
        .collect();
    let mean = index.iter().sum::<f64>() / n as f64;
    let sd = (index.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Domain("fitted index has zero variance".into()));
    }
    Ok(HealthIndexModel {
        link,
        names: names.to_vec(),
        coefs,
        mean,
        sd,
        iterations,
        log_likelihood: ll,
    })
}

/// Demographic controls for residualization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demographics {
    pub age: u32,
    pub birth_year: i32,
    /// 0, 1 or 2.
    pub education: u8,
    pub partner: bool,
}

fn demographic_row(d: &Demographics) -> Vec<f64> {
    let x = (d.age as f64 - 65.0) / 10.0;
    vec![
        1.0,
        x,
        x * x,
        x * x * x,
        (d.birth_year as f64 - 1940.0) / 10.0,
        (d.education == 1) as u8 as f64,
        (d.education == 2) as u8 as f64,
        d.partner as u8 as f64,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residualization {
    pub coefs: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Least-squares residuals of the index on a cubic in age, birth year,
/// education dummies and a partner dummy.
pub fn residualize(index: &[f64], demo: &[Demographics]) -> Result<Residualization> {
    if index.len() != demo.len() {
        return Err(Error::Misaligned(
            "index and demographics differ in length".into(),
        ));
    }
    if index.is_empty() {
        return Err(Error::Empty("nothing to residualize".into()));
    }
    let rows: Vec<Vec<f64>> = demo.iter().map(demographic_row).collect();
    let k = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(index);
    let beta = ols(&x, &y)?;
    let fitted = &x * &beta;
    Ok(Residualization {
        coefs: beta.iter().copied().collect(),
        residuals: index
            .iter()
            .zip(fitted.iter())
            .map(|(a, b)| a - b)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("z{j}")).collect()
    }

    fn sample(n: usize, alpha: &[f64]) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = stream_rng(5, Stream::Misc, 0);
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..alpha.len())
                .map(|j| {
                    let v: f64 = rng.sample(StandardNormal);
                    if j % 2 == 0 {
                        (v > 0.8) as u8 as f64
                    } else {
                        v
                    }
                })
                .collect();
            let u: f64 = rng.sample(StandardNormal);
            let latent = 0.3 + row.iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>() + u;
            z.push(row);
            y.push(latent > 0.0);
        }
        (z, y)
    }

    #[test]
    fn recovers_direction_of_coefficients() {
        let alpha = [-0.8, 0.5, -0.4, 0.3];
        let (z, y) = sample(20_000, &alpha);
        let m = fit_latent_index(&z, &y, &names(4), &IndexFitOptions::default()).unwrap();
        let a = &m.coefs[1..];
        let dot: f64 = a.iter().zip(&alpha).map(|(x, y)| x * y).sum();
        let cos = dot
            / (a.iter().map(|v| v * v).sum::<f64>().sqrt()
                * alpha.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(cos > 0.99, "{cos}");
        let idx: Vec<f64> = z
            .iter()
            .map(|r| {
                m.predict(&r.iter().map(|v| Some(*v)).collect::<Vec<_>>())
                    .unwrap()
            })
            .collect();
        let mean = idx.iter().sum::<f64>() / idx.len() as f64;
        let sd = (idx.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / idx.len() as f64).sqrt();
        assert!(mean.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
    }

    #[test]
    fn logit_link_also_fits() {
        let (z, y) = sample(5000, &[-0.8, 0.5]);
        let opts = IndexFitOptions {
            link: Link::Logit,
            ..Default::default()
        };
        let m = fit_latent_index(&z, &y, &names(2), &opts).unwrap();
        assert!(m.coefs[1] < 0.0 && m.coefs[2] > 0.0);
    }

    #[test]
    fn doubling_indicators_leaves_index_unchanged() {
        let (z, y) = sample(5000, &[-0.8, 0.5, 0.2]);
        let z2: Vec<Vec<f64>> = z
            .iter()
            .map(|r| r.iter().map(|v| 2.0 * v).collect())
            .collect();
        let a = fit_latent_index(&z, &y, &names(3), &IndexFitOptions::default()).unwrap();
        let b = fit_latent_index(&z2, &y, &names(3), &IndexFitOptions::default()).unwrap();
        for (r, r2) in z.iter().zip(&z2).take(200) {
            let pa = a
                .predict(&r.iter().map(|v| Some(*v)).collect::<Vec<_>>())
                .unwrap();
            let pb = b
                .predict(&r2.iter().map(|v| Some(*v)).collect::<Vec<_>>())
                .unwrap();
            assert!((pa - pb).abs() < 1e-8);
        }
        assert!((a.coefs[1] / b.coefs[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn duplicated_constant_is_singular() {
        let (mut z, y) = sample(500, &[-0.8, 0.5]);
        z.iter_mut().for_each(|r| r.push(1.0));
        assert!(matches!(
            fit_latent_index(&z, &y, &names(3), &IndexFitOptions::default()),
            Err(Error::SingularDesign(_))
        ));
    }

    #[test]
    fn perfect_separation_names_the_indicator() {
        let (mut z, y) = sample(500, &[-0.8, 0.5]);
        for (r, &yy) in z.iter_mut().zip(&y) {
            r.push(if yy {
                1.0 + r[1].abs()
            } else {
                -1.0 - r[1].abs()
            });
        }
        match fit_latent_index(&z, &y, &names(3), &IndexFitOptions::default()) {
            Err(Error::Separation(name)) => assert_eq!(name, "z2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_indicator_gives_missing_prediction() {
        let (z, y) = sample(2000, &[-0.8, 0.5]);
        let m = fit_latent_index(&z, &y, &names(2), &IndexFitOptions::default()).unwrap();
        assert_eq!(m.predict(&[Some(1.0), None]), None);
    }

    fn demo(n: usize) -> Vec<Demographics> {
        (0..n)
            .map(|i| Demographics {
                age: 50 + (i % 35) as u32,
                birth_year: 1925 + (i % 29) as i32,
                education: (i % 3) as u8,
                partner: i % 4 != 0,
            })
            .collect()
    }

    #[test]
    fn age_line_residualizes_to_zero() {
        let d = demo(600);
        let idx: Vec<f64> = d.iter().map(|x| 0.3 - 0.02 * x.age as f64).collect();
        let r = residualize(&idx, &d).unwrap();
        assert!(r.residuals.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn residualization_is_idempotent_and_centred() {
        let d = demo(700);
        let idx: Vec<f64> = (0..700).map(|i| ((i * 7919) % 113) as f64 / 50.0).collect();
        let r1 = residualize(&idx, &d).unwrap();
        let r2 = residualize(&r1.residuals, &d).unwrap();
        assert!(r1.residuals.iter().sum::<f64>().abs() < 1e-10);
        for (a, b) in r1.residuals.iter().zip(&r2.residuals) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
