//! Death probabilities by age and health group, scaled to a life table.

use log::warn;

use crate::dynamics::discrete::{health_group, GROUP_PERCENTILES};
use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sorted_copy};

/// Annual death probability implied by a two-year probability.
pub fn annual_from_biennial(p: f64) -> f64 {
    1.0 - (1.0 - p).sqrt()
}

/// One person-wave used for mortality estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MortalityObs {
    pub age: u32,
    pub health: f64,
    /// Died before the next wave (two years later).
    pub died: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRates {
    /// Inclusive age bands.
    pub bands: Vec<(u32, u32)>,
    pub counts: Vec<[usize; 4]>,
    pub deaths: Vec<[usize; 4]>,
    /// Annual death probability per band and group; `None` for empty cells.
    pub annual: Vec<[Option<f64>; 4]>,
}

impl RawRates {
    pub fn band_of(&self, age: u32) -> Option<usize> {
        self.bands.iter().position(|b| age >= b.0 && age <= b.1)
    }

    /// Rates for `age` with empty cells filled from the nearest filled group
    /// in the same band (the worse group on ties). Ages outside every band
    /// use the nearest band.
    pub fn for_age(&self, age: u32) -> Result<[f64; 4]> {
        if self.bands.is_empty() {
            return Err(Error::Empty("no mortality bands".into()));
        }
        let band = self.band_of(age).unwrap_or_else(|| {
            (0..self.bands.len())
                .min_by_key(|&i| {
                    let (lo, hi) = self.bands[i];
                    if age < lo {
                        lo - age
                    } else {
                        age.saturating_sub(hi)
                    }
                })
                .expect("non-empty")
        });
        let cells = self.annual[band];
        let mut out = [0.0; 4];
        for g in 0..4 {
            out[g] = match cells[g] {
                Some(v) => v,
                None => (0..4)
                    .filter_map(|j| cells[j].map(|v| (j.abs_diff(g), j, v)))
                    .min_by_key(|(d, j, _)| (*d, *j))
                    .map(|t| t.2)
                    .ok_or_else(|| {
                        Error::Empty(format!(
                            "age band {:?} has no observations",
                            self.bands[band]
                        ))
                    })?,
            };
        }
        Ok(out)
    }
}

/// Empirical two-year death frequency per age band and health group,
/// converted to annual probabilities. Groups use the 20/30/50th percentile
/// cutoffs of health within each band.
pub fn estimate_mortality(obs: &[MortalityObs], bands: &[(u32, u32)]) -> Result<RawRates> {
    if obs.is_empty() {
        return Err(Error::Empty("no observations for mortality".into()));
    }
    let mut counts = vec![[0usize; 4]; bands.len()];
    let mut deaths = vec![[0usize; 4]; bands.len()];
    for (b, &(lo, hi)) in bands.iter().enumerate() {
        let in_band: Vec<&MortalityObs> =
            obs.iter().filter(|o| o.age >= lo && o.age <= hi).collect();
        if in_band.is_empty() {
            continue;
        }
        let sorted = sorted_copy(&in_band.iter().map(|o| o.health).collect::<Vec<_>>());
        let cut = GROUP_PERCENTILES.map(|p| quantile_sorted(&sorted, p));
        for o in in_band {
            let g = health_group(o.health, &cut);
            counts[b][g] += 1;
            deaths[b][g] += o.died as usize;
        }
    }
    let annual = counts
        .iter()
        .zip(&deaths)
        .map(|(c, d)| {
            let mut out = [None; 4];
            for g in 0..4 {
                if c[g] > 0 {
                    out[g] = Some(annual_from_biennial(d[g] as f64 / c[g] as f64));
                }
            }
            out
        })
        .collect();
    Ok(RawRates {
        bands: bands.to_vec(),
        counts,
        deaths,
        annual,
    })
}

/// Aggregate annual death rates by single year of age.
#[derive(Debug, Clone, PartialEq)]
pub struct LifeTable {
    pub ages: Vec<u32>,
    pub rates: Vec<f64>,
}

impl LifeTable {
    pub fn new(ages: Vec<u32>, rates: Vec<f64>) -> Result<Self> {
        if ages.len() != rates.len() || ages.is_empty() {
            return Err(Error::InvalidInput(
                "life table ages and rates differ in length".into(),
            ));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "life table ages must be strictly increasing".into(),
            ));
        }
        if let Some(r) = rates.iter().find(|r| !(**r >= 0.0 && **r <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "life table rate {r} outside [0, 1]"
            )));
        }
        Ok(Self { ages, rates })
    }

    /// Gompertz schedule `min(1, level·exp(slope·(age − first)))`.
    pub fn gompertz(first: u32, last: u32, level: f64, slope: f64) -> Self {
        let ages: Vec<u32> = (first..=last).collect();
        let rates = ages
            .iter()
            .map(|a| (level * (slope * (a - first) as f64).exp()).min(1.0))
            .collect();
        Self { ages, rates }
    }

    pub fn rate(&self, age: u32) -> Result<f64> {
        self.ages
            .iter()
            .position(|a| *a == age)
            .map(|i| self.rates[i])
            .ok_or_else(|| Error::InvalidInput(format!("life table has no entry for age {age}")))
    }
}

/// Death probabilities by model age and health group.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityTable {
    pub ages: Vec<u32>,
    /// Annual death probability for the step out of each age, per group.
    pub rates: Vec<[f64; 4]>,
    /// Health cutoffs defining the groups at each age.
    pub cutoffs: Vec<[f64; 3]>,
    /// Population share of each group at each age used for the scaling.
    pub group_weights: Vec<[f64; 4]>,
    pub targets: Vec<f64>,
    pub factors: Vec<f64>,
    /// (age, group) cells clipped at one.
    pub clipped: Vec<(u32, usize)>,
}

impl MortalityTable {
    /// Survival-irrelevant table: nobody dies before the terminal age.
    pub fn zero(ages: Vec<u32>, cutoffs: Vec<[f64; 3]>) -> Self {
        let n = ages.len();
        Self {
            ages,
            rates: vec![[0.0; 4]; n],
            cutoffs,
            group_weights: vec![[0.2, 0.1, 0.2, 0.5]; n],
            targets: vec![0.0; n],
            factors: vec![1.0; n],
            clipped: Vec::new(),
        }
    }

    pub fn death_prob(&self, age_index: usize, health: f64) -> f64 {
        self.rates[age_index][health_group(health, &self.cutoffs[age_index])]
    }

    /// Health-weighted average death rate at each age.
    pub fn weighted_rates(&self) -> Vec<f64> {
        self.rates
            .iter()
            .zip(&self.group_weights)
            .map(|(r, w)| r.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Scale the rates at each age by one common factor so that the
/// group-weighted rate equals the life-table rate. Cells pushed above one
/// are clipped and the factor is re-solved over the remaining cells.
pub fn rescale_to_lifetable(
    ages: &[u32],
    raw: &[[f64; 4]],
    life: &LifeTable,
    group_weights: &[[f64; 4]],
    cutoffs: &[[f64; 3]],
) -> Result<MortalityTable> {
    if raw.len() != ages.len() || group_weights.len() != ages.len() || cutoffs.len() != ages.len() {
        return Err(Error::Misaligned(
            "mortality inputs must cover every model age".into(),
        ));
    }
    let mut rates = Vec::with_capacity(ages.len());
    let mut targets = Vec::with_capacity(ages.len());
    let mut factors = Vec::with_capacity(ages.len());
    let mut clipped = Vec::new();
    for (k, &age) in ages.iter().enumerate() {
        let target = life.rate(age)?;
        let w = group_weights[k];
        let total_w: f64 = w.iter().sum();
        if (total_w - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "age {age}: group weights sum to {total_w}"
            )));
        }
        let base = raw[k];
        let mut out = [0.0; 4];
        let mut fixed = [false; 4];
        let mut factor = 1.0;
        loop {
            let fixed_mass: f64 = (0..4).filter(|&g| fixed[g]).map(|g| w[g]).sum();
            let free: f64 = (0..4).filter(|&g| !fixed[g]).map(|g| w[g] * base[g]).sum();
            let need = target - fixed_mass;
            if free <= 0.0 {
                if need.abs() > 1e-12 {
                    // no mortality signal left: spread the remainder evenly
                    let free_w: f64 = (0..4).filter(|&g| !fixed[g]).map(|g| w[g]).sum();
                    if free_w <= 0.0 {
                        return Err(Error::Domain(format!(
                            "age {age}: life-table rate {target} unreachable"
                        )));
                    }
                    warn!(
                        "age {age}: raw rates are zero; using the life-table rate in every group"
                    );
                    for g in (0..4).filter(|&g| !fixed[g]) {
                        out[g] = need / free_w;
                    }
                    factor = f64::NAN;
                }
                break;
            }
            factor = need / free;
            let mut newly = false;
            for g in 0..4 {
                if fixed[g] {
                    out[g] = 1.0;
                } else {
                    out[g] = base[g] * factor;
                    if out[g] > 1.0 {
                        fixed[g] = true;
                        newly = true;
                    }
                }
            }
            if !newly {
                break;
            }
        }
        for g in 0..4 {
            if fixed[g] {
                warn!("age {age}: death probability in group {g} clipped at 1");
                clipped.push((age, g));
            }
        }
        if out.iter().any(|v| *v > 1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "age {age}: life-table rate {target} unreachable"
            )));
        }
        rates.push(out);
        targets.push(target);
        factors.push(factor);
    }
    Ok(MortalityTable {
        ages: ages.to_vec(),
        rates,
        cutoffs: cutoffs.to_vec(),
        group_weights: group_weights.to_vec(),
        targets,
        factors,
        clipped,
    })
}

/// Probability of being alive after each age of a health path, starting
/// alive at the first age.
pub fn survival_curve(table: &MortalityTable, health_path: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    health_path
        .iter()
        .enumerate()
        .take(table.ages.len())
        .map(|(k, &h)| {
            s *= 1.0 - table.death_prob(k, h);
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const W: [f64; 4] = [0.2, 0.1, 0.2, 0.5];

    fn table(raw: Vec<[f64; 4]>, rates: Vec<f64>) -> Result<MortalityTable> {
        let n = raw.len();
        let ages: Vec<u32> = (50..50 + n as u32).collect();
        let life = LifeTable::new(ages.clone(), rates).unwrap();
        rescale_to_lifetable(&ages, &raw, &life, &vec![W; n], &vec![[-0.6, -0.2, 0.3]; n])
    }

    #[test]
    fn biennial_conversion_inverts_exactly() {
        assert!((annual_from_biennial(0.19) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matching_rates_keep_unit_factors() {
        let t = table(vec![[0.02, 0.01, 0.01, 0.005]; 2], vec![0.0095; 2]).unwrap();
        assert!(t.factors.iter().all(|f| (f - 1.0).abs() < 1e-12));
    }

    #[test]
    fn clipping_preserves_the_weighted_identity() {
        let t = table(vec![[0.5, 0.1, 0.05, 0.01]], vec![0.3]).unwrap();
        assert_eq!(t.clipped, vec![(50, 0)]);
        assert!((t.weighted_rates()[0] - 0.3).abs() < 1e-10);
        assert!(t.rates[0].iter().all(|r| *r <= 1.0));
    }

    #[test]
    fn missing_life_table_age_is_an_error() {
        let life = LifeTable::new(vec![50], vec![0.01]).unwrap();
        let r = rescale_to_lifetable(&[50, 51], &[[0.0; 4]; 2], &life, &[W; 2], &[[0.0; 3]; 2]);
        assert!(r.is_err());
    }

    #[test]
    fn survival_products() {
        let t = table(vec![[0.1; 4]; 3], vec![0.1; 3]).unwrap();
        let s = survival_curve(&t, &[0.0, 0.0, 0.0]);
        for (a, b) in s.iter().zip([0.9, 0.81, 0.729]) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = MortalityTable::zero(vec![50, 51], vec![[0.0; 3]; 2]);
        assert_eq!(survival_curve(&z, &[1.0, -1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn healthier_paths_survive_longer() {
        let t = table(vec![[0.08, 0.04, 0.02, 0.01]; 10], vec![0.03; 10]).unwrap();
        let bad = survival_curve(&t, &[-2.0; 10]);
        let good = survival_curve(&t, &[2.0; 10]);
        assert!(bad.iter().zip(&good).all(|(b, g)| b <= g));
    }

    #[test]
    fn no_deaths_means_zero_rates() {
        let obs: Vec<MortalityObs> = (0..100)
            .map(|i| MortalityObs {
                age: 50 + (i % 10),
                health: i as f64,
                died: false,
            })
            .collect();
        let r = estimate_mortality(&obs, &[(50, 59)]).unwrap();
        assert_eq!(r.for_age(55).unwrap(), [0.0; 4]);
    }

    proptest! {
        #[test]
        fn rescaled_weighted_rate_matches_target(
            raw in prop::array::uniform4(0.0f64..0.6),
            target in 0.0f64..0.5,
        ) {
            prop_assume!(raw.iter().any(|r| *r > 1e-6));
            let t = table(vec![raw], vec![target]).unwrap();
            prop_assert!((t.weighted_rates()[0] - target).abs() < 1e-10);
            prop_assert!(t.rates[0].iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }
}
