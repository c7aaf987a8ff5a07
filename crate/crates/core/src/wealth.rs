//! Cohort-corrected wealth age profile from a fixed-effects regression.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::ols;

/// House price index by calendar year.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceIndex {
    pub years: Vec<i32>,
    pub values: Vec<f64>,
}

impl PriceIndex {
    pub fn value(&self, year: i32) -> Result<f64> {
        self.years
            .iter()
            .position(|y| *y == year)
            .map(|i| self.values[i])
            .ok_or_else(|| Error::InvalidInput(format!("price index has no entry for {year}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HousingRecord {
    pub year: i32,
    pub housing: f64,
    pub non_housing: f64,
}

/// Total wealth with housing expressed at reference-year prices and grown
/// at the real return `r` from the reference year.
pub fn deflate_housing(
    records: &[HousingRecord],
    index: &PriceIndex,
    reference_year: i32,
    r: f64,
) -> Result<Vec<f64>> {
    let base = index.value(reference_year)?;
    if !(base > 0.0) {
        return Err(Error::InvalidInput(format!(
            "price index at {reference_year} must be positive"
        )));
    }
    records
        .iter()
        .map(|rec| {
            let rel = index.value(rec.year)? / base;
            if !(rel > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "price index at {} must be positive",
                    rec.year
                )));
            }
            let growth = (1.0 + r).powi(rec.year - reference_year);
            Ok(rec.housing / rel * growth + rec.non_housing)
        })
        .collect()
}

/// Ten-year birth cohorts aligned so that 1946–1955 is one cohort.
pub fn cohort_start(birth_year: i32) -> i32 {
    1946 + 10 * (birth_year - 1946).div_euclid(10)
}

pub fn cohort_label(start: i32) -> String {
    format!("{}-{}", start, start + 9)
}

pub fn parse_cohort(label: &str) -> Result<i32> {
    let (a, b) = label.split_once('-').ok_or_else(|| {
        Error::InvalidInput(format!("cohort `{label}` is not of the form YYYY-YYYY"))
    })?;
    let start: i32 = a
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("bad cohort `{label}`")))?;
    let end: i32 = b
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("bad cohort `{label}`")))?;
    if end != start + 9 || cohort_start(start) != start {
        return Err(Error::InvalidInput(format!(
            "cohort `{label}` is not a ten-year cohort"
        )));
    }
    Ok(start)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WealthObs {
    pub person: u64,
    pub age: u32,
    pub birth_year: i32,
    pub unemployment: f64,
    pub wealth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthProfileModel {
    /// Coefficients on powers of `(age − 50)/10`, lowest first.
    pub age_coefs: Vec<f64>,
    /// `None` when unemployment has no within-person variation.
    pub unemployment_coef: Option<f64>,
    pub effects: BTreeMap<u64, f64>,
    pub person_cohort: BTreeMap<u64, i32>,
    pub cohort_means: BTreeMap<i32, f64>,
    pub dropped_single_wave: usize,
}

fn age_powers(age: u32, order: usize) -> Vec<f64> {
    let x = (age as f64 - 50.0) / 10.0;
    (1..=order).map(|k| x.powi(k as i32)).collect()
}

impl WealthProfileModel {
    pub fn age_part(&self, age: u32) -> f64 {
        age_powers(age, self.age_coefs.len())
            .iter()
            .zip(&self.age_coefs)
            .map(|(x, b)| x * b)
            .sum()
    }

    fn cohort_mean(&self, cohort: i32) -> Result<f64> {
        self.cohort_means.get(&cohort).copied().ok_or_else(|| {
            Error::InvalidInput(format!("cohort {} not present", cohort_label(cohort)))
        })
    }

    /// Wealth of `person` at `age` with the fixed effect moved to `cohort`.
    pub fn person_profile(
        &self,
        person: u64,
        cohort: i32,
        age: u32,
        unemployment: f64,
    ) -> Result<f64> {
        let f = *self.effects.get(&person).ok_or_else(|| {
            Error::InvalidInput(format!("person {person} not in the estimation sample"))
        })?;
        let own = self.cohort_mean(self.person_cohort[&person])?;
        let shifted = f - own + self.cohort_mean(cohort)?;
        Ok(shifted + self.age_part(age) + self.unemployment_coef.unwrap_or(0.0) * unemployment)
    }

    /// Mean wealth by age for the given cohort at a fixed unemployment rate.
    pub fn simulate_profile(
        &self,
        cohort: i32,
        unemployment: f64,
        ages: &[u32],
    ) -> Result<Vec<(u32, f64)>> {
        let target = self.cohort_mean(cohort)?;
        let n = self.effects.len() as f64;
        let mean_shift: f64 = self
            .effects
            .iter()
            .map(|(p, f)| f - self.cohort_means[&self.person_cohort[p]])
            .sum::<f64>()
            / n;
        Ok(ages
            .iter()
            .map(|&a| {
                (
                    a,
                    mean_shift
                        + target
                        + self.age_part(a)
                        + self.unemployment_coef.unwrap_or(0.0) * unemployment,
                )
            })
            .collect())
    }
}

/// Within-person regression of wealth on an age polynomial of `order` and
/// the unemployment rate, then cohort means of the recovered effects.
pub fn fit_wealth_profile(obs: &[WealthObs], order: usize) -> Result<WealthProfileModel> {
    if order == 0 {
        return Err(Error::InvalidInput(
            "age polynomial order must be at least 1".into(),
        ));
    }
    let mut groups: BTreeMap<u64, Vec<&WealthObs>> = BTreeMap::new();
    for o in obs {
        groups.entry(o.person).or_default().push(o);
    }
    let dropped = groups.values().filter(|g| g.len() < 2).count();
    groups.retain(|_, g| g.len() >= 2);
    if groups.is_empty() {
        return Err(Error::Empty(
            "no person has two or more wealth observations".into(),
        ));
    }

    let k = order + 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    for g in groups.values() {
        let raw: Vec<Vec<f64>> = g
            .iter()
            .map(|o| {
                let mut r = age_powers(o.age, order);
                r.push(o.unemployment);
                r
            })
            .collect();
        let n = g.len() as f64;
        let means: Vec<f64> = (0..k)
            .map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let ybar = g.iter().map(|o| o.wealth).sum::<f64>() / n;
        for (r, o) in raw.iter().zip(g) {
            rows.push(r.iter().zip(&means).map(|(x, m)| x - m).collect());
            ys.push(o.wealth - ybar);
        }
    }
    let u_scale = rows.iter().map(|r| r[order].abs()).fold(0.0, f64::max);
    let use_u = u_scale > 1e-12;
    let cols = if use_u { k } else { order };
    let x = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    let y = DVector::from_vec(ys);
    let beta = ols(&x, &y)?;
    let age_coefs: Vec<f64> = beta.iter().take(order).copied().collect();
    let unemployment_coef = use_u.then(|| beta[order]);

    let mut effects = BTreeMap::new();
    let mut person_cohort = BTreeMap::new();
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (p, g) in &groups {
        let f = g
            .iter()
            .map(|o| {
                let fitted: f64 = age_powers(o.age, order)
                    .iter()
                    .zip(&age_coefs)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + unemployment_coef.unwrap_or(0.0) * o.unemployment;
                o.wealth - fitted
            })
            .sum::<f64>()
            / g.len() as f64;
        let c = cohort_start(g[0].birth_year);
        effects.insert(*p, f);
        person_cohort.insert(*p, c);
        let e = sums.entry(c).or_insert((0.0, 0));
        e.0 += f;
        e.1 += 1;
    }
    let cohort_means = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect();
    Ok(WealthProfileModel {
        age_coefs,
        unemployment_coef,
        effects,
        person_cohort,
        cohort_means,
        dropped_single_wave: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> PriceIndex {
        PriceIndex {
            years: vec![2002, 2004, 2006],
            values: vec![100.0, 140.0, 150.0],
        }
    }

    #[test]
    fn flat_index_leaves_totals_unchanged() {
        let idx = PriceIndex {
            years: vec![2002, 2004],
            values: vec![1.0, 1.0],
        };
        let recs = [HousingRecord {
            year: 2002,
            housing: 50.0,
            non_housing: 10.0,
        }];
        assert_eq!(deflate_housing(&recs, &idx, 2004, 0.0).unwrap(), vec![60.0]);
    }

    #[test]
    fn forty_percent_rise_scales_earlier_housing() {
        let recs = [
            HousingRecord {
                year: 2002,
                housing: 100.0,
                non_housing: 0.0,
            },
            HousingRecord {
                year: 2002,
                housing: 0.0,
                non_housing: 7.0,
            },
        ];
        let out = deflate_housing(&recs, &index(), 2004, 0.0).unwrap();
        assert!((out[0] - 140.0).abs() < 1e-9);
        assert_eq!(out[1], 7.0);
        assert!(deflate_housing(
            &[HousingRecord {
                year: 2010,
                housing: 1.0,
                non_housing: 0.0
            }],
            &index(),
            2004,
            0.0
        )
        .is_err());
    }

    #[test]
    fn cohorts_are_ten_year_blocks() {
        assert_eq!(cohort_start(1946), 1946);
        assert_eq!(cohort_start(1955), 1946);
        assert_eq!(cohort_start(1945), 1936);
        assert_eq!(parse_cohort("1946-1955").unwrap(), 1946);
        assert!(parse_cohort("1950-1959").is_err());
    }

    fn synthetic(vary_u: bool) -> Vec<WealthObs> {
        let coefs = [30.0, 8.0, -1.5];
        (0..3000u64)
            .flat_map(|p| {
                let by = 1930 + (p % 25) as i32;
                let fe = ((p * 7919) % 100) as f64 - 50.0 + if by >= 1946 { 20.0 } else { 0.0 };
                (0..4).map(move |w| {
                    let year = 2002 + 2 * w;
                    let age = (year - by) as u32;
                    let u = if vary_u {
                        0.05 + 0.01 * ((w * 3) % 4) as f64
                    } else {
                        0.05
                    };
                    let x = (age as f64 - 50.0) / 10.0;
                    let wealth =
                        fe + coefs[0] * x + coefs[1] * x * x + coefs[2] * x.powi(3) - 200.0 * u;
                    WealthObs {
                        person: p,
                        age,
                        birth_year: by,
                        unemployment: u,
                        wealth,
                    }
                })
            })
            .collect()
    }

    #[test]
    fn recovers_age_profile_and_cohort_offsets() {
        let m = fit_wealth_profile(&synthetic(true), 3).unwrap();
        for (a, b) in m.age_coefs.iter().zip([30.0, 8.0, -1.5]) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
        assert!((m.unemployment_coef.unwrap() + 200.0).abs() < 1e-6);
        let gap = m.cohort_means[&1946] - m.cohort_means[&1936];
        assert!((gap - 20.0).abs() < 2.0, "{gap}");
    }

    #[test]
    fn constant_unemployment_is_flagged() {
        let m = fit_wealth_profile(&synthetic(false), 3).unwrap();
        assert!(m.unemployment_coef.is_none());
    }

    #[test]
    fn own_cohort_reproduces_fitted_values() {
        let obs = synthetic(true);
        let m = fit_wealth_profile(&obs, 3).unwrap();
        for o in obs.iter().take(40) {
            let c = m.person_cohort[&o.person];
            let v = m
                .person_profile(o.person, c, o.age, o.unemployment)
                .unwrap();
            assert!((v - o.wealth).abs() < 1e-6);
        }
        assert!(m.simulate_profile(1800, 0.049, &[60]).is_err());
    }

    #[test]
    fn cohorts_shift_profiles_in_parallel() {
        let m = fit_wealth_profile(&synthetic(true), 3).unwrap();
        let ages: Vec<u32> = (50..80).collect();
        let a = m.simulate_profile(1946, 0.049, &ages).unwrap();
        let b = m.simulate_profile(1936, 0.049, &ages).unwrap();
        let d0 = a[0].1 - b[0].1;
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| ((x.1 - y.1) - d0).abs() < 1e-9));
    }
}
