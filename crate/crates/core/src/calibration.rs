//! Synthetic model primitives with the shape of the published calibration.

use crate::dynamics::canonical::CanonicalParams;
use crate::dynamics::discrete::{
    annualize, discretize, mortality_bias_correction, BiasCorrectionOptions, DiscreteHealthProcess,
    GROUP_PERCENTILES,
};
use crate::dynamics::generator::{HealthGenerator, KinkedQuantile};
use crate::dynamics::quantile::{simulate_generator, EtaPaths};
use crate::earnings::{EarningsProcess, WageChain, WageProfile};
use crate::error::{Error, Result};
use crate::matrix::Transition;
use crate::model::params::{ModelParams, TaxSchedule};
use crate::model::{Channels, GridSpec, Model, StateGrid};
use crate::mortality::{rescale_to_lifetable, LifeTable, MortalityTable};
use crate::stats::weighted_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Nonlinear,
    Canonical,
}

impl Variant {
    /// Persistent-health grid size.
    pub fn n_eta(self) -> usize {
        match self {
            Variant::Nonlinear => 19,
            Variant::Canonical => 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nonlinear => "nonlinear",
            Variant::Canonical => "canonical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nonlinear" => Ok(Variant::Nonlinear),
            "canonical" => Ok(Variant::Canonical),
            _ => Err(Error::Config(format!(
                "unknown variant '{s}' (expected nonlinear or canonical)"
            ))),
        }
    }

    pub fn generator(self) -> HealthGenerator {
        match self {
            Variant::Nonlinear => HealthGenerator::Kinked(KinkedQuantile::default()),
            Variant::Canonical => HealthGenerator::Canonical(CanonicalParams::HEALTH),
        }
    }

    pub fn params(self) -> ModelParams {
        match self {
            Variant::Nonlinear => ModelParams::default(),
            Variant::Canonical => ModelParams::canonical(),
        }
    }
}

/// Gompertz hazard with a multiplier for the worst health group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GompertzMortality {
    pub level: f64,
    pub slope: f64,
    pub low_health_hazard: f64,
}

impl Default for GompertzMortality {
    fn default() -> Self {
        Self {
            level: 0.003,
            slope: 0.095,
            low_health_hazard: 2.0,
        }
    }
}

impl GompertzMortality {
    pub fn hazard(&self, age: u32) -> f64 {
        (self.level * (self.slope * (age as f64 - 50.0)).exp()).min(1.0)
    }

    pub fn group_rates(&self, age: u32) -> [f64; 4] {
        let q = self.hazard(age);
        [(q * self.low_health_hazard).min(1.0), q, q, q]
    }

    /// Population life table implied by the group shares 20/10/20/50.
    pub fn life_table(&self, first: u32, last: u32) -> LifeTable {
        let ages: Vec<u32> = (first..=last).collect();
        let w = GROUP_PERCENTILES[0];
        let rates = ages
            .iter()
            .map(|&a| {
                let r = self.group_rates(a);
                w * r[0] + (1.0 - w) * r[1]
            })
            .collect();
        LifeTable { ages, rates }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    pub variant: Variant,
    pub generator: HealthGenerator,
    pub n_paths: usize,
    pub n_eta: usize,
    pub n_eps: usize,
    pub n_wage: usize,
    pub grid: GridSpec,
    pub params: ModelParams,
    pub wage_profile: WageProfile,
    pub wage_process: CanonicalParams,
    pub mortality: GompertzMortality,
    /// Shift the health grids so survivors keep the no-mortality medians.
    pub correct_selection: bool,
    pub seed: u64,
}

impl CalibrationSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            generator: variant.generator(),
            n_paths: 20_000,
            n_eta: variant.n_eta(),
            n_eps: 5,
            n_wage: 5,
            grid: GridSpec::default(),
            params: variant.params(),
            wage_profile: WageProfile::default(),
            wage_process: CanonicalParams::WAGE,
            mortality: GompertzMortality::default(),
            correct_selection: true,
            seed: 7,
        }
    }

    /// Small grids for fast experiments.
    pub fn coarse(variant: Variant) -> Self {
        Self {
            n_paths: 4_000,
            n_eta: 7,
            n_eps: 3,
            n_wage: 3,
            grid: GridSpec {
                n_assets: 16,
                n_pension: 3,
                ..GridSpec::default()
            },
            ..Self::new(variant)
        }
    }
}

/// Discretize simulated paths of the generator on two-year steps from the
/// first model age and convert to annual steps.
pub fn annual_health_process(
    generator: &HealthGenerator,
    first_age: u32,
    last_age: u32,
    n_paths: usize,
    n_eta: usize,
    n_eps: usize,
    seed: u64,
) -> Result<DiscreteHealthProcess> {
    let paths = simulate_generator(
        generator,
        first_age,
        n_paths,
        biennial_horizon(first_age, last_age)?,
        seed,
    );
    annual_process_from_paths(&paths, generator.sigma_eps(), n_eta, n_eps)
}

/// Two-year steps needed to cover the model ages.
pub fn biennial_horizon(first_age: u32, last_age: u32) -> Result<usize> {
    if last_age <= first_age || (last_age - first_age) % 2 == 0 {
        return Err(Error::Config(
            "the model age span must cover whole two-year steps".into(),
        ));
    }
    Ok(((last_age - first_age + 1) / 2) as usize)
}

pub fn annual_process_from_paths(
    paths: &EtaPaths,
    sigma_eps: f64,
    n_eta: usize,
    n_eps: usize,
) -> Result<DiscreteHealthProcess> {
    Ok(annualize(&discretize(paths, sigma_eps, n_eta, n_eps)?))
}

/// Group death rates rescaled to the population life table, with groups
/// cut at the no-mortality health percentiles of the process.
pub fn synthetic_mortality(
    process: &DiscreteHealthProcess,
    gompertz: &GompertzMortality,
) -> Result<MortalityTable> {
    let ages = process.ages.clone();
    let raw: Vec<[f64; 4]> = ages.iter().map(|&a| gompertz.group_rates(a)).collect();
    let life = gompertz.life_table(ages[0], ages[ages.len() - 1]);
    let weights = vec![[0.2, 0.1, 0.2, 0.5]; ages.len()];
    rescale_to_lifetable(&ages, &raw, &life, &weights, &process.group_cutoffs())
}

/// Time-cost knots at the minimum, 20th, 30th and 50th percentiles and
/// maximum of pooled health.
pub fn time_cost_knots(process: &DiscreteHealthProcess) -> [f64; 5] {
    let marg = process.marginals();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for (t, m) in marg.iter().enumerate() {
        let (v, w) = process.health_distribution(t, m);
        values.extend(v);
        weights.extend(w);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q = GROUP_PERCENTILES.map(|p| weighted_quantile(&values, &weights, p));
    [lo, q[0], q[1], q[2], hi]
}

pub fn build_model(spec: &CalibrationSpec) -> Result<Model> {
    let process = annual_health_process(
        &spec.generator,
        spec.grid.first_age,
        spec.grid.last_age,
        spec.n_paths,
        spec.n_eta,
        spec.n_eps,
        spec.seed,
    )?;
    let mortality = synthetic_mortality(&process, &spec.mortality)?;
    let health = if spec.correct_selection {
        correct_selection(&process, &mortality)?
    } else {
        process
    };
    let earnings = EarningsProcess::new(spec.wage_profile.clone(), spec.wage_process, spec.n_wage)?;
    assemble_model(spec.params.clone(), &spec.grid, health, earnings, mortality)
}

/// Shift the health grids so that survivors keep the no-mortality medians.
pub fn correct_selection(
    process: &DiscreteHealthProcess,
    mortality: &MortalityTable,
) -> Result<DiscreteHealthProcess> {
    let targets = process.medians();
    Ok(mortality_bias_correction(
        process,
        &mortality.rates,
        &targets,
        &BiasCorrectionOptions::default(),
    )?
    .process)
}

/// Model from fitted or synthetic primitives; the time-cost knots are
/// placed on the health distribution of the process.
pub fn assemble_model(
    mut params: ModelParams,
    grid: &GridSpec,
    health: DiscreteHealthProcess,
    earnings: EarningsProcess,
    mortality: MortalityTable,
) -> Result<Model> {
    params.time_cost.knots = time_cost_knots(&health);
    let model = Model {
        params,
        grid: grid.build()?,
        health,
        earnings,
        mortality,
        channels: Channels::default(),
    };
    model.validate()?;
    Ok(model)
}

/// Deterministic single-node model: no health or wage risk, no mortality
/// before the last age, no time cost, no taxes, zero interest, no bequest
/// motive and no work.
pub fn degenerate_model(first_age: u32, last_age: u32, assets: Vec<f64>) -> Result<Model> {
    let ages: Vec<u32> = (first_age..=last_age).collect();
    let n = ages.len();
    let health = DiscreteHealthProcess {
        ages: ages.clone(),
        step_years: 1,
        eta: vec![vec![0.0]; n],
        offsets: vec![0.0; n],
        eps: vec![0.0],
        eps_weights: vec![1.0],
        transitions: vec![Transition::identity(1); n - 1],
        initial: vec![1.0],
        repaired: Vec::new(),
    };
    let earnings = EarningsProcess {
        profile: WageProfile::default(),
        stochastic: CanonicalParams {
            rho: 0.0,
            var_nu: 0.0,
            var_eps: 0.0,
            var0: 0.0,
        },
        chain: WageChain {
            nodes: vec![0.0],
            transition: Transition::identity(1),
            initial: vec![1.0],
        },
    };
    let mut params = ModelParams {
        interest_rate: 0.0,
        discount: 1.0,
        bequest_weight: 0.0,
        tax: TaxSchedule::zero(),
        ..ModelParams::default()
    };
    params.time_cost.values = [0.0; 4];
    let grid = StateGrid {
        ages: ages.clone(),
        assets,
        pension: vec![0.0],
        hours: vec![0.0],
    };
    let model = Model {
        params,
        grid,
        health,
        earnings,
        mortality: MortalityTable::zero(ages, vec![[-1.0, 0.0, 1.0]; n]),
        channels: Channels::default(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_model_is_aligned() {
        let m = build_model(&CalibrationSpec::coarse(Variant::Nonlinear)).unwrap();
        assert_eq!(m.health.ages.first(), Some(&50));
        assert_eq!(m.health.ages.last(), Some(&85));
        let w = m.mortality.weighted_rates();
        for (t, &age) in m.mortality.ages.iter().enumerate() {
            let target = GompertzMortality::default()
                .life_table(50, 85)
                .rate(age)
                .unwrap();
            assert!((w[t] - target).abs() < 1e-12);
        }
        let k = m.params.time_cost.knots;
        assert!(k.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Nonlinear, Variant::Canonical] {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("linear").is_err());
    }
}
