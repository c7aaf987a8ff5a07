//! Longitudinal person-wave records and a synthetic generator with a
//! ground-truth sidecar.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::canonical::CanonicalParams;
use crate::dynamics::discrete::{health_group, GROUP_PERCENTILES};
use crate::dynamics::generator::{HealthGenerator, KinkedQuantile};
use crate::earnings::{WageProfile, LAST_WORKING_AGE};
use crate::error::{Error, Result};
use crate::mortality::LifeTable;
use crate::rng::{stream_rng, Stream};
use crate::stats::{norm_quantile, quantile_sorted, sorted_copy};
use crate::wealth::{cohort_start, PriceIndex};

/// Objective health indicators, in column order.
pub const INDICATORS: [&str; 12] = [
    "eyesight",
    "hearing",
    "mobility",
    "adl",
    "iadl",
    "depression",
    "heart_disease",
    "other_disease",
    "eye_problems",
    "incontinence",
    "bmi",
    "grip_strength",
];

/// Calendar year of a wave (wave 1 is 2002, waves two years apart).
pub fn wave_year(first_year: i32, wave: u32) -> i32 {
    first_year + 2 * (wave as i32 - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub person_id: u64,
    pub wave: u32,
    pub age: u32,
    pub birth_year: i32,
    /// 0 = low, 1 = intermediate, 2 = high.
    pub education: u8,
    pub has_partner: bool,
    pub indicators: Vec<Option<f64>>,
    pub self_reported_good: bool,
    /// Missing for non-workers.
    pub hourly_wage: Option<f64>,
    pub hours_annual: f64,
    pub wealth_total: f64,
    pub housing_wealth: f64,
    pub dead_by_next_wave: bool,
    pub unemployment_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub person_id: u64,
    pub wave: u32,
    pub eta: f64,
    pub eps: f64,
    /// Demographic component plus `eta + eps`.
    pub health: f64,
    /// Latent self-report propensity; the report is good iff positive.
    pub latent: f64,
    pub wage_persistent: f64,
    pub wage_error: f64,
    /// Log hourly wage offer without measurement error.
    pub log_wage_offer: f64,
    /// Person fixed effect in wealth, cohort offset included.
    pub wealth_effect: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Panel {
    pub records: Vec<PanelRecord>,
}

impl Panel {
    /// Checks the record invariants; the error names the offending row
    /// (0-based, in file order).
    pub fn validate(&self) -> Result<()> {
        let mut last: BTreeMap<u64, (u32, bool)> = BTreeMap::new();
        let width = self.records.first().map_or(0, |r| r.indicators.len());
        for (row, r) in self.records.iter().enumerate() {
            let fail = |msg: &str| {
                Err(Error::InvalidInput(format!(
                    "row {row} (person {}, wave {}): {msg}",
                    r.person_id, r.wave
                )))
            };
            if r.age < 50 {
                return fail("age below 50");
            }
            if !(r.hours_annual >= 0.0) {
                return fail("negative or missing hours");
            }
            if r.education > 2 {
                return fail("education must be 0, 1 or 2");
            }
            if r.indicators.len() != width {
                return fail("indicator count differs from the first row");
            }
            if let Some(w) = r.hourly_wage {
                if !(w > 0.0) {
                    return fail("hourly wage must be positive when present");
                }
            }
            if let Some(&(prev_wave, died)) = last.get(&r.person_id) {
                if died {
                    return fail("record after death");
                }
                if r.wave <= prev_wave {
                    return fail("waves not strictly increasing");
                }
            }
            last.insert(r.person_id, (r.wave, r.dead_by_next_wave));
        }
        Ok(())
    }

    pub fn n_persons(&self) -> usize {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Inclusive age bands used for mortality groups in the generator and by
/// default in estimation.
pub fn mortality_bands() -> Vec<(u32, u32)> {
    let mut b: Vec<(u32, u32)> = (0..8).map(|k| (50 + 5 * k, 54 + 5 * k)).collect();
    b.push((90, 110));
    b
}

/// Descriptive bands of the summary table.
pub const SUMMARY_BANDS: [(u32, u32); 3] = [(50, 59), (60, 69), (70, 90)];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_persons: usize,
    pub n_waves: u32,
    pub first_year: i32,
    pub entry_age_min: u32,
    pub entry_age_max: u32,
    pub seed: u64,
    pub health: HealthGenerator,
    /// Coefficients of the latent self-report on the indicators.
    pub alpha: Vec<f64>,
    pub report_intercept: f64,
    pub reporting_sd: f64,
    pub wage_profile: WageProfile,
    /// Two-year persistent wage process; `var_eps` is measurement error.
    pub wage_process: CanonicalParams,
    pub mortality_level: f64,
    pub mortality_slope: f64,
    /// Hazard multiplier for the worst health group.
    pub low_health_hazard: f64,
    /// Target employment rate per summary band.
    pub participation: [f64; 3],
    pub participation_slope: [f64; 3],
    pub hours: [f64; 3],
    pub hours_sd: f64,
    /// Cubic wealth profile in `(age − 50)/10`, currency units.
    pub wealth_profile: [f64; 4],
    /// Offsets by ten-year cohort start year.
    pub cohort_offsets: Vec<(i32, f64)>,
    pub unemployment_effect: f64,
    pub fixed_effect_sd: f64,
    pub wealth_noise_sd: f64,
    pub housing_share: f64,
    /// Unemployment rate per wave, wave 1 first.
    pub unemployment: Vec<f64>,
    pub price_index: PriceIndex,
    pub real_return: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_persons: 20_000,
            n_waves: 7,
            first_year: 2002,
            entry_age_min: 50,
            entry_age_max: 80,
            seed: 20_240_601,
            health: HealthGenerator::Kinked(KinkedQuantile::default()),
            alpha: vec![
                -0.35, -0.3, -0.55, -0.6, -0.5, -0.45, -0.4, -0.3, -0.25, -0.35, -0.03, 0.05,
            ],
            report_intercept: 0.4,
            reporting_sd: 1.0,
            wage_profile: WageProfile::default(),
            wage_process: CanonicalParams::WAGE,
            mortality_level: 0.003,
            mortality_slope: 0.095,
            low_health_hazard: 2.0,
            participation: [0.795, 0.407, 0.068],
            participation_slope: [0.35, 0.4, 0.1],
            hours: [1926.0, 1597.0, 950.0],
            hours_sd: 300.0,
            wealth_profile: [102_590.0, 61_585.0, -11_612.0, 500.0],
            cohort_offsets: vec![
                (1906, -8_000.0),
                (1916, -6_000.0),
                (1926, -4_000.0),
                (1936, -2_000.0),
                (1946, 0.0),
                (1956, 2_000.0),
            ],
            unemployment_effect: -250_000.0,
            fixed_effect_sd: 60_000.0,
            wealth_noise_sd: 15_000.0,
            housing_share: 0.6,
            unemployment: vec![0.051, 0.048, 0.054, 0.057, 0.079, 0.080, 0.062],
            price_index: PriceIndex {
                years: vec![2002, 2004, 2006, 2008, 2010, 2012, 2014],
                values: vec![100.0, 140.0, 150.0, 155.0, 145.0, 147.0, 160.0],
            },
            real_return: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_persons == 0 {
            return bad("n_persons must be positive".into());
        }
        if self.n_waves < 3 {
            return bad("n_waves must be at least 3".into());
        }
        if self.entry_age_min < 50 || self.entry_age_max < self.entry_age_min {
            return bad("entry ages must satisfy 50 <= min <= max".into());
        }
        if self.alpha.len() != INDICATORS.len() {
            return bad(format!("alpha needs {} coefficients", INDICATORS.len()));
        }
        if !(self.reporting_sd > 0.0)
            || !(self.hours_sd >= 0.0)
            || !(self.fixed_effect_sd >= 0.0)
            || !(self.wealth_noise_sd >= 0.0)
        {
            return bad(
                "standard deviations must be non-negative (reporting noise positive)".into(),
            );
        }
        self.wage_process
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let HealthGenerator::Canonical(p) = &self.health {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.unemployment.len() < self.n_waves as usize {
            return bad("unemployment series shorter than the number of waves".into());
        }
        for w in 1..=self.n_waves {
            let y = wave_year(self.first_year, w);
            if self.price_index.value(y).is_err() {
                return bad(format!("price index missing year {y}"));
            }
        }
        if self.price_index.value(2004).is_err() {
            return bad("price index must include the reference year 2004".into());
        }
        if !(0.0..=1.0).contains(&self.housing_share) {
            return bad("housing share must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Annual death probability by age averaged over health groups.
    pub fn life_table(&self, first: u32, last: u32) -> LifeTable {
        let ages: Vec<u32> = (first..=last).collect();
        let avg = GROUP_PERCENTILES[0] * self.low_health_hazard + (1.0 - GROUP_PERCENTILES[0]);
        let rates = ages
            .iter()
            .map(|&a| (self.hazard(a) * avg).min(1.0))
            .collect();
        LifeTable { ages, rates }
    }

    fn hazard(&self, age: u32) -> f64 {
        (self.mortality_level * (self.mortality_slope * (age as f64 - 50.0)).exp()).min(1.0)
    }

    fn cohort_offset(&self, birth_year: i32) -> f64 {
        let c = cohort_start(birth_year);
        self.cohort_offsets
            .iter()
            .find(|(s, _)| *s == c)
            .map_or(0.0, |(_, v)| *v)
    }

    fn summary_band(age: u32) -> usize {
        SUMMARY_BANDS.iter().position(|b| age <= b.1).unwrap_or(2)
    }
}

struct Draft {
    record: PanelRecord,
    truth: TruthRecord,
    resid_health: f64,
}

fn person_drafts(cfg: &SynthConfig, person: u64) -> Vec<Draft> {
    let mut rng = stream_rng(cfg.seed, Stream::Panel, person);
    let mut hrng = stream_rng(cfg.seed, Stream::Health, person);
    let mut wrng = stream_rng(cfg.seed, Stream::Wage, person);
    let mut zrng = stream_rng(cfg.seed, Stream::Reporting, person);

    let span = cfg.entry_age_max - cfg.entry_age_min + 1;
    let entry_age = cfg.entry_age_min + rng.random_range(0..span);
    let birth_year = cfg.first_year - entry_age as i32;
    let education = match rng.random::<f64>() {
        u if u < 0.4 => 0,
        u if u < 0.75 => 1,
        _ => 2,
    };
    let has_partner = rng.random::<f64>() < 0.7;
    let wealth_effect = cfg.wealth_profile[0] - cfg.unemployment_effect * 0.049
        + cfg.cohort_offset(birth_year)
        + cfg.fixed_effect_sd * rng.sample::<f64, _>(StandardNormal);

    // persistent components start at age 50 (or 51) and step every two years
    let first_period = ((entry_age - 50) / 2) as usize;
    let last_period = first_period + cfg.n_waves as usize - 1;
    let clamp_u = |u: f64| u.clamp(1e-12, 1.0 - 1e-12);
    let mut eta = cfg.health.initial_quantile(clamp_u(hrng.random()));
    let wp = &cfg.wage_process;
    let mut theta = wp.var0.sqrt() * wrng.sample::<f64, _>(StandardNormal);
    let mut etas = Vec::with_capacity(last_period + 1);
    let mut thetas = Vec::with_capacity(last_period + 1);
    for t in 0..=last_period {
        if t > 0 {
            eta = cfg.health.quantile(eta, clamp_u(hrng.random()));
            theta = wp.rho * theta + wp.var_nu.sqrt() * wrng.sample::<f64, _>(StandardNormal);
        }
        etas.push(eta);
        thetas.push(theta);
    }

    let sigma_eps = cfg.health.sigma_eps();
    (1..=cfg.n_waves)
        .map(|wave| {
            let k = (wave - 1) as usize;
            let age = entry_age + 2 * k as u32;
            let year = wave_year(cfg.first_year, wave);
            let eta = etas[first_period + k];
            let eps = sigma_eps * hrng.sample::<f64, _>(StandardNormal);
            let resid = eta + eps;
            let demo = -0.3 * (age as f64 - 50.0) / 10.0
                + 0.15 * education as f64
                + 0.1 * has_partner as u8 as f64;
            let health = demo + resid;

            let mut z = Vec::with_capacity(INDICATORS.len());
            for j in 0..10 {
                let threshold = -1.4 + 0.08 * j as f64;
                let loading = 0.8 + 0.05 * j as f64;
                let e: f64 = zrng.sample(StandardNormal);
                z.push((threshold - loading * health + e > 0.0) as u8 as f64);
            }
            z.push(28.0 - 1.0 * health + 4.0 * zrng.sample::<f64, _>(StandardNormal));
            z.push(30.0 + 5.0 * health + 6.0 * zrng.sample::<f64, _>(StandardNormal));
            let u: f64 = zrng.sample(StandardNormal);
            let latent = cfg.report_intercept
                + z.iter().zip(&cfg.alpha).map(|(a, b)| a * b).sum::<f64>()
                + cfg.reporting_sd * u;

            let theta = thetas[first_period + k];
            let wage_error = wp.var_eps.sqrt() * wrng.sample::<f64, _>(StandardNormal);
            let log_wage_offer = cfg.wage_profile.log_wage(resid, age) + theta;

            let x = (age as f64 - 50.0) / 10.0;
            let unemp = cfg.unemployment[k];
            let wealth = wealth_effect - cfg.wealth_profile[0]
                + cfg
                    .wealth_profile
                    .iter()
                    .enumerate()
                    .map(|(p, c)| c * x.powi(p as i32))
                    .sum::<f64>()
                + cfg.unemployment_effect * unemp
                + cfg.wealth_noise_sd * rng.sample::<f64, _>(StandardNormal);
            let housing_real = cfg.housing_share * wealth.max(0.0);
            let rel = cfg.price_index.value(year).expect("validated")
                / cfg.price_index.value(2004).expect("validated");
            let housing_nominal = housing_real * rel / (1.0 + cfg.real_return).powi(year - 2004);
            let wealth_total = wealth - housing_real + housing_nominal;

            Draft {
                record: PanelRecord {
                    person_id: person,
                    wave,
                    age,
                    birth_year,
                    education,
                    has_partner,
                    indicators: z.into_iter().map(Some).collect(),
                    self_reported_good: latent > 0.0,
                    hourly_wage: None,
                    hours_annual: 0.0,
                    wealth_total,
                    housing_wealth: housing_nominal,
                    dead_by_next_wave: false,
                    unemployment_rate: unemp,
                },
                truth: TruthRecord {
                    person_id: person,
                    wave,
                    eta,
                    eps,
                    health,
                    latent,
                    wage_persistent: theta,
                    wage_error,
                    log_wage_offer,
                    wealth_effect,
                },
                resid_health: resid,
            }
        })
        .collect()
}

fn band_index(bands: &[(u32, u32)], age: u32) -> usize {
    bands
        .iter()
        .position(|b| age >= b.0 && age <= b.1)
        .unwrap_or(bands.len() - 1)
}

/// Synthetic panel and its ground truth, reproducible from the seed.
pub fn generate_panel(cfg: &SynthConfig) -> Result<(Panel, Vec<TruthRecord>)> {
    cfg.validate()?;
    let drafts: Vec<Vec<Draft>> = (0..cfg.n_persons as u64)
        .into_par_iter()
        .map(|p| person_drafts(cfg, p))
        .collect();

    // group cutoffs and participation ranks from the full (pre-death) sample
    let mbands = mortality_bands();
    let mut by_band: Vec<Vec<f64>> = vec![Vec::new(); mbands.len()];
    let mut by_summary: Vec<Vec<f64>> = vec![Vec::new(); SUMMARY_BANDS.len()];
    for d in drafts.iter().flatten() {
        by_band[band_index(&mbands, d.record.age)].push(d.resid_health);
        by_summary[SynthConfig::summary_band(d.record.age)].push(d.resid_health);
    }
    let cutoffs: Vec<[f64; 3]> = by_band
        .iter()
        .map(|v| {
            let s = sorted_copy(v);
            if s.is_empty() {
                [0.0; 3]
            } else {
                GROUP_PERCENTILES.map(|p| quantile_sorted(&s, p))
            }
        })
        .collect();
    let sorted_summary: Vec<Vec<f64>> = by_summary.iter().map(|v| sorted_copy(v)).collect();

    let people: Vec<Vec<(PanelRecord, TruthRecord)>> = drafts
        .into_par_iter()
        .map(|mut person| {
            let id = person[0].record.person_id;
            let mut srng = stream_rng(cfg.seed, Stream::Survival, id);
            let mut lrng = stream_rng(cfg.seed, Stream::Misc, id);
            let mut out = Vec::with_capacity(person.len());
            for d in person.iter_mut() {
                let age = d.record.age;
                let sb = SynthConfig::summary_band(age);
                let s = &sorted_summary[sb];
                let rank =
                    (s.partition_point(|v| *v < d.resid_health) as f64 + 0.5) / s.len() as f64;
                let p_work = if age > LAST_WORKING_AGE {
                    cfg.participation[2]
                } else {
                    cfg.participation[sb] + cfg.participation_slope[sb] * (rank - 0.5)
                }
                .clamp(0.0, 1.0);
                let u_work: f64 = lrng.random();
                let z_hours: f64 = lrng.sample(StandardNormal);
                if u_work < p_work {
                    let hours = (cfg.hours[sb] + 150.0 * (rank - 0.5) + cfg.hours_sd * z_hours)
                        .clamp(200.0, 3500.0);
                    d.record.hours_annual = hours;
                    d.record.hourly_wage =
                        Some((d.truth.log_wage_offer + d.truth.wage_error).exp());
                }
                let group = health_group(d.resid_health, &cutoffs[band_index(&mbands, age)]);
                let mult = if group == 0 {
                    cfg.low_health_hazard
                } else {
                    1.0
                };
                let q = (cfg.hazard(age) * mult).min(1.0);
                let p_die = 1.0 - (1.0 - q).powi(2);
                let u_die: f64 = srng.random();
                d.record.dead_by_next_wave = u_die < p_die;
                out.push((d.record.clone(), d.truth.clone()));
                if d.record.dead_by_next_wave {
                    break;
                }
            }
            out
        })
        .collect();

    let mut records = Vec::new();
    let mut truth = Vec::new();
    for (r, t) in people.into_iter().flatten() {
        records.push(r);
        truth.push(t);
    }
    let panel = Panel { records };
    panel.validate()?;
    Ok((panel, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub band: (u32, u32),
    pub observations: usize,
    pub pct_working: f64,
    /// Mean annual hours among workers; `None` without workers.
    pub mean_hours: Option<f64>,
    /// Mean annual earnings among workers.
    pub mean_earnings: Option<f64>,
    pub mean_wealth: f64,
}

pub fn panel_summary(panel: &Panel) -> Result<Vec<SummaryRow>> {
    if panel.records.is_empty() {
        return Err(Error::Empty("panel has no records".into()));
    }
    let rows = SUMMARY_BANDS
        .iter()
        .map(|&band| {
            let recs: Vec<&PanelRecord> = panel
                .records
                .iter()
                .filter(|r| r.age >= band.0 && r.age <= band.1)
                .collect();
            let workers: Vec<&&PanelRecord> =
                recs.iter().filter(|r| r.hours_annual > 0.0).collect();
            let n = recs.len();
            let nw = workers.len();
            let earnings: Vec<f64> = workers
                .iter()
                .filter_map(|r| r.hourly_wage.map(|w| w * r.hours_annual))
                .collect();
            SummaryRow {
                band,
                observations: n,
                pct_working: if n == 0 {
                    f64::NAN
                } else {
                    100.0 * nw as f64 / n as f64
                },
                mean_hours: (nw > 0)
                    .then(|| workers.iter().map(|r| r.hours_annual).sum::<f64>() / nw as f64),
                mean_earnings: (!earnings.is_empty())
                    .then(|| earnings.iter().sum::<f64>() / earnings.len() as f64),
                mean_wealth: if n == 0 {
                    f64::NAN
                } else {
                    recs.iter().map(|r| r.wealth_total).sum::<f64>() / n as f64
                },
            }
        })
        .collect();
    Ok(rows)
}

/// Standard-normal score of a rank, guarded against the endpoints.
pub fn rank_score(rank: f64) -> f64 {
    norm_quantile(rank.clamp(1e-9, 1.0 - 1e-9))
}
