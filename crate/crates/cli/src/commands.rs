//! Pipeline stages. Each reads its inputs from the output directory, writes
//! its artifacts there and reports both lists for the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Subcommand;
use log::{info, warn};

use healthdyn_core::calibration::{
    annual_process_from_paths, assemble_model, biennial_horizon, Variant,
};
use healthdyn_core::dynamics::canonical::{
    estimate_canonical, CanonicalFitOptions, ResidualObs, ResidualPanel,
};
use healthdyn_core::dynamics::discrete::{
    mortality_bias_correction, BiasCorrectionOptions, DiscreteHealthProcess,
};
use healthdyn_core::dynamics::generator::HealthGenerator;
use healthdyn_core::dynamics::quantile::{
    estimate_quantile_table, midpoint_taus, simulate_generator, simulate_nonlinear, EtaPanel,
    EtaTransition, QuantileFitOptions,
};
use healthdyn_core::earnings::{estimate_earnings_process, EarningsProcess, WageObs};
use healthdyn_core::health_index::{
    fit_latent_index, residualize, Demographics, IndexFitOptions, Link,
};
use healthdyn_core::model::params::ModelParams;
use healthdyn_core::model::solver::{solve, Solution};
use healthdyn_core::model::{Channel, GridSpec, Model};
use healthdyn_core::mortality::{
    estimate_mortality, rescale_to_lifetable, LifeTable, MortalityObs, MortalityTable,
};
use healthdyn_core::optim::{AnnealOptions, HybridOptions, SimplexOptions};
use healthdyn_core::panel::{
    generate_panel, mortality_bands, panel_summary, wave_year, Panel, SynthConfig, INDICATORS,
};
use healthdyn_core::rng::mix64;
use healthdyn_core::sim::experiments::{
    counterfactual_shock, decomposition_table, willingness_to_pay, Profiles, ShockExperiment,
    ShockRow,
};
use healthdyn_core::sim::inequality::inequality_metrics;
use healthdyn_core::sim::{
    compute_moments, moments_from_obs, simulate_histories, InitialConditions, MomentSet, SimOptions,
};
use healthdyn_core::smm::{
    estimate as smm_estimate, panel_moment_obs, FreeParam, SmmConfig, Weighting,
};
use healthdyn_core::stats::{ols, quantile, variance, weighted_quantile};
use healthdyn_core::wealth::{deflate_housing, fit_wealth_profile, HousingRecord, WealthObs};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{
    self, fmt_f, fmt_opt, EarnFile, HealthFitFile, HealthRow, HindexFile, ParamsFile, WealthFile,
};

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Generate the synthetic panel and its ground truth.
    GenData,
    /// Fit the latent health index and residualize it.
    FitIndex,
    /// Estimate the health process, discretize it and attach mortality.
    FitHealth {
        #[arg(long, conflicts_with = "nonlinear")]
        canonical: bool,
        #[arg(long)]
        nonlinear: bool,
    },
    /// Fit the wage profile and its stochastic component.
    FitEarnings,
    /// Fit the wealth age profile.
    FitWealth,
    /// Solve the life-cycle model.
    Solve,
    /// Estimate preference parameters by simulated moments.
    Estimate,
    /// Simulate histories and moments from the solved model.
    Simulate,
    /// Counterfactual health shocks at age 52.
    Shock {
        #[arg(long, value_delimiter = ',')]
        tau_init: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        tau_shock: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        assets: Option<Vec<f64>>,
    },
    /// Switch off health channels one at a time.
    Decompose,
    /// Willingness to pay to avoid a health shock.
    Wtp,
    /// Inequality under each channel decomposition.
    Inequality,
    /// Collect the result tables into one document.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::FitIndex => "fit-index",
            Command::FitHealth { .. } => "fit-health",
            Command::FitEarnings => "fit-earnings",
            Command::FitWealth => "fit-wealth",
            Command::Solve => "solve",
            Command::Estimate => "estimate",
            Command::Simulate => "simulate",
            Command::Shock { .. } => "shock",
            Command::Decompose => "decompose",
            Command::Wtp => "wtp",
            Command::Inequality => "inequality",
            Command::Report => "report",
        }
    }

    fn stage(&self) -> u64 {
        match self {
            Command::GenData => 1,
            Command::FitIndex => 2,
            Command::FitHealth { .. } => 3,
            Command::FitEarnings => 4,
            Command::FitWealth => 5,
            Command::Solve => 6,
            Command::Estimate => 7,
            Command::Simulate => 8,
            Command::Shock { .. } => 9,
            Command::Decompose => 10,
            Command::Wtp => 11,
            Command::Inequality => 12,
            Command::Report => 13,
        }
    }
}

// Artifact file names inside the output directory.
pub const PANEL_CSV: &str = "panel.csv";
pub const TRUTH_CSV: &str = "truth.csv";
pub const SUMMARY_CSV: &str = "panel_summary.csv";
pub const HINDEX_TOML: &str = "hindex.toml";
pub const HEALTH_CSV: &str = "health.csv";
pub const HEALTH_FIT_TOML: &str = "health_fit.toml";
pub const DHP_DIR: &str = "dhp";
pub const QTAB_DIR: &str = "qtab";
pub const EARN_TOML: &str = "earnings.toml";
pub const WEALTH_TOML: &str = "wealth.toml";
pub const WEALTH_CSV: &str = "wealth_profile.csv";
pub const SOL_DIR: &str = "solution";
pub const DATA_MOMENTS_CSV: &str = "data_moments.csv";
pub const SMM_TRACE_CSV: &str = "smm_trace.csv";
pub const SMM_FIT_CSV: &str = "smm_fit.csv";
pub const PARAMS_ESTIMATED_TOML: &str = "params_estimated.toml";
pub const MOMENTS_CSV: &str = "moments.csv";
pub const PROFILES_CSV: &str = "profiles.csv";
pub const SHOCK_DIFF_CSV: &str = "shock_diff.csv";
pub const SHOCK_COV_CSV: &str = "shock_cov.csv";
pub const SHOCK_SUMMARY_CSV: &str = "shock_summary.csv";
pub const DECOMP_CSV: &str = "decomp.csv";
pub const WTP_CSV: &str = "wtp.csv";
pub const INEQUALITY_CSV: &str = "inequality.csv";
pub const REPORT_MD: &str = "report.md";

/// Files read and written by one stage.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    inputs: Vec<PathBuf>,
}

impl Context {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        let out = cfg.out_dir()?;
        let seed = cfg.u64("seed")?;
        Ok(Self {
            cfg,
            out,
            seed,
            inputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of an artifact produced by an earlier stage.
    fn need(&mut self, name: &str, producer: &'static str) -> CliResult<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(CliError::Dependency {
                path: p,
                needs: producer,
            });
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn stage_seed(&self, command: &Command) -> u64 {
        mix64(self.seed ^ command.stage().wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn variant(&self) -> CliResult<Variant> {
        Ok(Variant::parse(self.cfg.str("variant")?)?)
    }
}

pub fn run(ctx: &mut Context, command: &Command) -> CliResult<Outcome> {
    ctx.inputs.clear();
    let seed = ctx.stage_seed(command);
    let outputs = match command {
        Command::GenData => gen_data(ctx, seed)?,
        Command::FitIndex => fit_index(ctx)?,
        Command::FitHealth {
            canonical,
            nonlinear,
        } => {
            if *canonical {
                ctx.cfg.set("variant", "canonical".into())?;
            }
            if *nonlinear {
                ctx.cfg.set("variant", "nonlinear".into())?;
            }
            fit_health(ctx, seed)?
        }
        Command::FitEarnings => fit_earnings(ctx)?,
        Command::FitWealth => fit_wealth(ctx)?,
        Command::Solve => solve_model(ctx)?,
        Command::Estimate => estimate(ctx, seed)?,
        Command::Simulate => simulate(ctx, seed)?,
        Command::Shock {
            tau_init,
            tau_shock,
            assets,
        } => {
            if let Some(v) = tau_init {
                ctx.cfg.set("shock.tau_init", float_list(v))?;
            }
            if let Some(v) = tau_shock {
                ctx.cfg.set("shock.tau_shock", float_list(v))?;
            }
            if let Some(v) = assets {
                ctx.cfg.set("shock.assets", float_list(v))?;
            }
            shock(ctx, seed)?
        }
        Command::Decompose => decompose(ctx, seed)?,
        Command::Wtp => wtp(ctx)?,
        Command::Inequality => inequality(ctx, seed)?,
        Command::Report => report(ctx)?,
    };
    Ok(Outcome {
        inputs: std::mem::take(&mut ctx.inputs),
        outputs,
    })
}

fn float_list(v: &[f64]) -> toml::Value {
    toml::Value::Array(v.iter().map(|x| toml::Value::Float(*x)).collect())
}

fn gen_data(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let synth = SynthConfig {
        n_persons: ctx.cfg.usize("data.n_persons")?,
        n_waves: ctx.cfg.u64("data.n_waves")? as u32,
        seed,
        ..SynthConfig::default()
    };
    synth
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (panel, truth) = generate_panel(&synth)?;
    info!(
        "generated {} records for {} persons",
        panel.records.len(),
        panel.n_persons()
    );
    let (p, t, s) = (
        ctx.path(PANEL_CSV),
        ctx.path(TRUTH_CSV),
        ctx.path(SUMMARY_CSV),
    );
    formats::save_panel(&p, &panel)?;
    formats::save_truth(&t, &truth)?;
    let rows = panel_summary(&panel)?.into_iter().map(|r| {
        vec![
            format!("{}-{}", r.band.0, r.band.1),
            r.observations.to_string(),
            fmt_f(r.pct_working),
            fmt_opt(r.mean_hours),
            fmt_opt(r.mean_earnings),
            fmt_f(r.mean_wealth),
        ]
    });
    formats::write_csv(
        &s,
        &[
            "age_band",
            "observations",
            "pct_working",
            "mean_hours",
            "mean_earnings",
            "mean_wealth",
        ],
        rows,
    )?;
    Ok(vec![p, t, s])
}

fn load_panel(ctx: &mut Context) -> CliResult<Panel> {
    let p = ctx.need(PANEL_CSV, "gen-data")?;
    formats::load_panel(&p)
}

fn fit_index(ctx: &mut Context) -> CliResult<Vec<PathBuf>> {
    let panel = load_panel(ctx)?;
    let link = match ctx.cfg.str("index.link")? {
        "probit" => Link::Probit,
        "logit" => Link::Logit,
        other => {
            return Err(CliError::Config(format!(
                "key 'index.link' must be probit or logit, got '{other}'"
            )))
        }
    };
    let names: Vec<String> = INDICATORS.iter().map(|s| s.to_string()).collect();
    let complete: Vec<usize> = (0..panel.records.len())
        .filter(|&i| panel.records[i].indicators.iter().all(Option::is_some))
        .collect();
    let z: Vec<Vec<f64>> = complete
        .iter()
        .map(|&i| {
            panel.records[i]
                .indicators
                .iter()
                .map(|v| v.unwrap())
                .collect()
        })
        .collect();
    let y: Vec<bool> = complete
        .iter()
        .map(|&i| panel.records[i].self_reported_good)
        .collect();
    let model = fit_latent_index(
        &z,
        &y,
        &names,
        &IndexFitOptions {
            link,
            ..IndexFitOptions::default()
        },
    )?;
    info!(
        "index fitted on {} complete cases in {} iterations",
        complete.len(),
        model.iterations
    );

    let index: Vec<Option<f64>> = panel
        .records
        .iter()
        .map(|r| model.predict(&r.indicators))
        .collect();
    let present: Vec<usize> = (0..index.len()).filter(|&i| index[i].is_some()).collect();
    let demo: Vec<Demographics> = present
        .iter()
        .map(|&i| {
            let r = &panel.records[i];
            Demographics {
                age: r.age,
                birth_year: r.birth_year,
                education: r.education,
                partner: r.has_partner,
            }
        })
        .collect();
    let values: Vec<f64> = present.iter().map(|&i| index[i].unwrap()).collect();
    let res = residualize(&values, &demo)?;
    let mut residual = vec![None; index.len()];
    for (k, &i) in present.iter().enumerate() {
        residual[i] = Some(res.residuals[k]);
    }
    let rows: Vec<HealthRow> = panel
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| HealthRow {
            person_id: r.person_id,
            wave: r.wave,
            age: r.age,
            index: index[i],
            residual: residual[i],
        })
        .collect();
    let (h, c) = (ctx.path(HINDEX_TOML), ctx.path(HEALTH_CSV));
    formats::write_toml(
        &h,
        &HindexFile {
            format: formats::HINDEX.into(),
            n_fit: complete.len(),
            demographic_coefs: res.coefs,
            model,
        },
    )?;
    formats::save_health(&c, &rows)?;
    Ok(vec![h, c])
}

/// Health rows aligned with the panel records.
fn load_health(ctx: &mut Context, panel: &Panel) -> CliResult<Vec<HealthRow>> {
    let p = ctx.need(HEALTH_CSV, "fit-index")?;
    let rows = formats::load_health(&p)?;
    let aligned = rows.len() == panel.records.len()
        && rows
            .iter()
            .zip(&panel.records)
            .all(|(h, r)| h.person_id == r.person_id && h.wave == r.wave);
    if !aligned {
        return Err(CliError::format(
            &p,
            "rows do not match the panel; rerun fit-index",
        ));
    }
    Ok(rows)
}

fn grid_spec(cfg: &RunConfig) -> CliResult<GridSpec> {
    let g = GridSpec {
        n_assets: cfg.usize("grid.n_assets")?,
        asset_max: cfg.f64("grid.asset_max")?,
        asset_curvature: cfg.f64("grid.asset_curvature")?,
        n_pension: cfg.usize("grid.n_pension")?,
        pension_max: cfg.f64("grid.pension_max")?,
        ..GridSpec::default()
    };
    g.build().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(g)
}

fn life_table(cfg: &RunConfig, first: u32, last: u32) -> CliResult<LifeTable> {
    let file = cfg.str("mortality.life_table")?;
    if file.is_empty() {
        return Ok(SynthConfig::default().life_table(first, last));
    }
    let path = Path::new(file);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "key 'mortality.life_table': {} does not exist",
            path.display()
        )));
    }
    formats::load_life_table(path)
}

fn fit_health(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let variant = ctx.variant()?;
    let panel = load_panel(ctx)?;
    let health = load_health(ctx, &panel)?;
    let grid = grid_spec(&ctx.cfg)?;
    let n_paths = ctx.cfg.usize("health.n_paths")?;
    let n_eta = match ctx.cfg.usize("health.n_eta")? {
        0 => variant.n_eta(),
        n => n,
    };
    let n_eps = ctx.cfg.usize("health.n_eps")?;
    let horizon = biennial_horizon(grid.first_age, grid.last_age)?;
    let mut outputs = Vec::new();

    let mut fit = HealthFitFile {
        format: formats::HFIT.into(),
        variant: variant.name().into(),
        sigma_eps: 0.0,
        n_paths,
        canonical: None,
        canonical_objective: None,
        scale_intercept: None,
        scale_slope: None,
        clamped_draws: 0,
        bias_iterations: 0,
    };
    let paths = match variant {
        Variant::Canonical => {
            let obs = panel
                .records
                .iter()
                .zip(&health)
                .filter_map(|(r, h)| {
                    h.residual.map(|v| ResidualObs {
                        person: r.person_id,
                        t: ((r.age - 50) / 2) as usize,
                        value: v,
                    })
                })
                .collect();
            let est = estimate_canonical(&ResidualPanel { obs }, &CanonicalFitOptions::default())?;
            info!("canonical health fit: {:?}", est.params);
            fit.sigma_eps = est.params.var_eps.sqrt();
            fit.canonical = Some(est.params);
            fit.canonical_objective = Some(est.objective);
            simulate_generator(
                &HealthGenerator::Canonical(est.params),
                grid.first_age,
                n_paths,
                horizon,
                seed,
            )
        }
        Variant::Nonlinear => {
            let truth = formats::load_truth(&ctx.need(TRUTH_CSV, "gen-data")?)?;
            let truth_by: BTreeMap<(u64, u32), (f64, f64)> = truth
                .iter()
                .map(|t| ((t.person_id, t.wave), (t.eta, t.eps)))
                .collect();
            let linked: Vec<(usize, f64, f64, f64)> = panel
                .records
                .iter()
                .enumerate()
                .filter_map(|(i, r)| {
                    let res = health[i].residual?;
                    let (eta, eps) = *truth_by.get(&(r.person_id, r.wave))?;
                    Some((i, res, eta, eps))
                })
                .collect();
            if linked.len() < 10 {
                return Err(CliError::Numerical(healthdyn_core::Error::Empty(
                    "too few records link to the truth file".into(),
                )));
            }
            let x = nalgebra_design(&linked.iter().map(|l| l.2 + l.3).collect::<Vec<_>>());
            let y = nalgebra::DVector::from_iterator(linked.len(), linked.iter().map(|l| l.1));
            let beta = ols(&x, &y)?;
            let (a, b) = (beta[0], beta[1]);
            let eps: Vec<f64> = linked.iter().map(|l| l.3).collect();
            fit.scale_intercept = Some(a);
            fit.scale_slope = Some(b);
            fit.sigma_eps = b.abs() * variance(&eps).sqrt();
            info!("persistent component mapped to index units by {a:.4} + {b:.4} x");

            let scaled: BTreeMap<(u64, u32), (u32, f64)> = linked
                .iter()
                .map(|l| {
                    (
                        (panel.records[l.0].person_id, panel.records[l.0].wave),
                        (panel.records[l.0].age, a + b * l.2),
                    )
                })
                .collect();
            let mut eta_panel = EtaPanel {
                initial_age: grid.first_age,
                ..EtaPanel::default()
            };
            for (&(person, wave), &(age, value)) in &scaled {
                if age <= grid.first_age + 1 {
                    eta_panel.initial.push(value);
                }
                if let Some(&(_, next)) = scaled.get(&(person, wave + 1)) {
                    eta_panel.transitions.push(EtaTransition {
                        age,
                        prev: value,
                        next,
                    });
                }
            }
            let all: Vec<f64> = scaled.values().map(|v| v.1).collect();
            let eta_grid: Vec<f64> = midpoint_taus(ctx.cfg.usize("health.quantile_states")?)
                .iter()
                .map(|&p| quantile(&all, p))
                .collect();
            let opts = QuantileFitOptions {
                eta_grid,
                taus: midpoint_taus(ctx.cfg.usize("health.quantile_ranks")?),
                min_count: ctx.cfg.usize("health.quantile_min_count")?,
                ages: (0..horizon)
                    .map(|k| grid.first_age + 2 * k as u32)
                    .collect(),
                age_window: Some(ctx.cfg.u64("health.quantile_age_window")? as u32),
            };
            let table = estimate_quantile_table(&eta_panel, &opts)?;
            let q = ctx.path(QTAB_DIR);
            formats::save_qtab(&q, &table)?;
            outputs.push(q);
            let paths = simulate_nonlinear(&table, n_paths, horizon, seed)?;
            fit.clamped_draws = paths.clamped;
            paths
        }
    };
    let process = annual_process_from_paths(&paths, fit.sigma_eps, n_eta, n_eps)?;
    let mortality = fitted_mortality(ctx, &panel, &health, &process)?;
    let process = if ctx.cfg.bool("health.correct_selection")? {
        let corrected = mortality_bias_correction(
            &process,
            &mortality.rates,
            &process.medians(),
            &BiasCorrectionOptions::default(),
        )?;
        if !corrected.converged {
            warn!(
                "selection correction stopped with a median gap of {:.2e}",
                corrected.max_gap
            );
        }
        fit.bias_iterations = corrected.iterations;
        corrected.process
    } else {
        process
    };
    let (d, f) = (ctx.path(DHP_DIR), ctx.path(HEALTH_FIT_TOML));
    formats::save_dhp(&d, &process, &mortality)?;
    formats::write_toml(&f, &fit)?;
    outputs.push(d);
    outputs.push(f);
    Ok(outputs)
}

fn nalgebra_design(x: &[f64]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] })
}

/// Death rates by health group from the panel, rescaled to the life table
/// with groups cut on the process's own health distribution.
fn fitted_mortality(
    ctx: &Context,
    panel: &Panel,
    health: &[HealthRow],
    process: &DiscreteHealthProcess,
) -> CliResult<MortalityTable> {
    let obs: Vec<MortalityObs> = panel
        .records
        .iter()
        .zip(health)
        .filter_map(|(r, h)| {
            h.residual.map(|v| MortalityObs {
                age: r.age,
                health: v,
                died: r.dead_by_next_wave,
            })
        })
        .collect();
    let raw = estimate_mortality(&obs, &mortality_bands())?;
    let ages = process.ages.clone();
    let rates = ages
        .iter()
        .map(|&a| raw.for_age(a))
        .collect::<Result<Vec<_>, _>>()?;
    let life = life_table(&ctx.cfg, ages[0], ages[ages.len() - 1])?;
    let weights = vec![[0.2, 0.1, 0.2, 0.5]; ages.len()];
    Ok(rescale_to_lifetable(
        &ages,
        &rates,
        &life,
        &weights,
        &process.group_cutoffs(),
    )?)
}

fn fit_earnings(ctx: &mut Context) -> CliResult<Vec<PathBuf>> {
    let panel = load_panel(ctx)?;
    let health = load_health(ctx, &panel)?;
    let residuals: Vec<f64> = health.iter().filter_map(|h| h.residual).collect();
    let weights = vec![1.0; residuals.len()];
    let knots = [0.2, 0.3, 0.5].map(|p| weighted_quantile(&residuals, &weights, p));
    let obs: Vec<WageObs> = panel
        .records
        .iter()
        .zip(&health)
        .filter_map(|(r, h)| {
            Some(WageObs {
                person: r.person_id,
                wave: r.wave as usize,
                age: r.age,
                health: h.residual?,
                log_wage: r.hourly_wage?.ln(),
            })
        })
        .collect();
    let fit = estimate_earnings_process(&obs, knots, &CanonicalFitOptions::default())?;
    let n_nodes = ctx.cfg.usize("earnings.n_nodes")?;
    EarningsProcess::new(fit.profile.clone(), fit.stochastic, n_nodes)?;
    info!(
        "wage process fitted on {} observations: {:?}",
        obs.len(),
        fit.stochastic
    );
    let p = ctx.path(EARN_TOML);
    formats::write_toml(
        &p,
        &EarnFile {
            format: formats::EARN.into(),
            n_nodes,
            objective: fit.objective,
            constrained: fit.constrained,
            profile: fit.profile,
            stochastic: fit.stochastic,
        },
    )?;
    Ok(vec![p])
}

/// Total wealth with housing at reference-year prices.
fn deflated_wealth(cfg: &RunConfig, panel: &Panel) -> CliResult<Vec<f64>> {
    let synth = SynthConfig::default();
    let records: Vec<HousingRecord> = panel
        .records
        .iter()
        .map(|r| HousingRecord {
            year: wave_year(synth.first_year, r.wave),
            housing: r.housing_wealth,
            non_housing: r.wealth_total - r.housing_wealth,
        })
        .collect();
    let reference = cfg.i64("wealth.reference_year")? as i32;
    Ok(deflate_housing(
        &records,
        &synth.price_index,
        reference,
        synth.real_return,
    )?)
}

fn fit_wealth(ctx: &mut Context) -> CliResult<Vec<PathBuf>> {
    let panel = load_panel(ctx)?;
    let wealth = deflated_wealth(&ctx.cfg, &panel)?;
    let obs: Vec<WealthObs> = panel
        .records
        .iter()
        .zip(&wealth)
        .map(|(r, w)| WealthObs {
            person: r.person_id,
            age: r.age,
            birth_year: r.birth_year,
            unemployment: r.unemployment_rate,
            wealth: *w,
        })
        .collect();
    let order = ctx.cfg.usize("wealth.order")?;
    let model = fit_wealth_profile(&obs, order)?;
    let (t, c) = (ctx.path(WEALTH_TOML), ctx.path(WEALTH_CSV));
    formats::write_toml(
        &t,
        &WealthFile {
            format: formats::WEALTH.into(),
            order,
            reference_year: ctx.cfg.i64("wealth.reference_year")? as i32,
            age_coefs: model.age_coefs.clone(),
            unemployment_coef: model.unemployment_coef,
            cohort_starts: model.cohort_means.keys().copied().collect(),
            cohort_means: model.cohort_means.values().copied().collect(),
            dropped_single_wave: model.dropped_single_wave,
        },
    )?;
    let grid = GridSpec::default();
    let rows = (grid.first_age..=grid.last_age)
        .map(|age| vec![age.to_string(), fmt_f(model.age_part(age))]);
    formats::write_csv(&c, &["age", "age_profile"], rows)?;
    Ok(vec![t, c])
}

fn base_params(ctx: &mut Context) -> CliResult<(String, ModelParams)> {
    let variant = ctx.variant()?;
    let file = ctx.cfg.str("model.params_file")?.to_string();
    let mut params = if file.is_empty() {
        variant.params()
    } else {
        let path = PathBuf::from(&file);
        if !path.exists() {
            return Err(CliError::Dependency {
                path,
                needs: "estimate",
            });
        }
        ctx.inputs.push(path.clone());
        formats::read_toml::<ParamsFile>(&path, formats::PARAMS)?.params
    };
    params.interest_rate = ctx.cfg.f64("model.interest_rate")?;
    params
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((variant.name().to_string(), params))
}

fn load_primitives(
    ctx: &mut Context,
) -> CliResult<(DiscreteHealthProcess, MortalityTable, EarningsProcess)> {
    let d = ctx.need(DHP_DIR, "fit-health")?;
    let e = ctx.need(EARN_TOML, "fit-earnings")?;
    let (health, mortality) = formats::load_dhp(&d)?;
    let earn: EarnFile = formats::read_toml(&e, formats::EARN)?;
    let earnings = EarningsProcess::new(earn.profile, earn.stochastic, earn.n_nodes)?;
    Ok((health, mortality, earnings))
}

fn solve_model(ctx: &mut Context) -> CliResult<Vec<PathBuf>> {
    let (health, mortality, earnings) = load_primitives(ctx)?;
    let (variant, params) = base_params(ctx)?;
    let grid = grid_spec(&ctx.cfg)?;
    let model = assemble_model(params, &grid, health, earnings, mortality)?;
    let sol = solve(&model)?;
    let dir = ctx.path(SOL_DIR);
    let params = ParamsFile {
        format: formats::PARAMS.into(),
        variant,
        params: model.params.clone(),
    };
    formats::save_solution(&dir, &sol.ages, &sol.dims, &sol.slices, &grid, &params)?;
    Ok(vec![dir])
}

/// Model and solution as written by `solve`.
fn load_solved(ctx: &mut Context) -> CliResult<(Model, Solution)> {
    let dir = ctx.need(SOL_DIR, "solve")?;
    let files = formats::load_solution(&dir)?;
    let (health, mortality, earnings) = load_primitives(ctx)?;
    let model = assemble_model(
        files.params.params,
        &files.grid,
        health,
        earnings,
        mortality,
    )?;
    let sol = Solution::from_slices(&model, files.slices).map_err(|e| CliError::format(&dir, e))?;
    Ok((model, sol))
}

/// Starting assets of panel members first seen at 50 or 51.
fn initial_pool(ctx: &mut Context) -> CliResult<InitialConditions> {
    let panel = load_panel(ctx)?;
    let wealth = deflated_wealth(&ctx.cfg, &panel)?;
    let pool: Vec<(f64, f64)> = panel
        .records
        .iter()
        .zip(&wealth)
        .filter(|(r, _)| r.age <= 51)
        .map(|(_, w)| (w.max(0.0), 0.0))
        .collect();
    if pool.is_empty() {
        return Err(CliError::Numerical(healthdyn_core::Error::Empty(
            "no panel members aged 50 or 51".into(),
        )));
    }
    Ok(InitialConditions { pool })
}

fn moment_rows(m: &MomentSet) -> impl Iterator<Item = Vec<String>> + '_ {
    m.moments.iter().map(|x| {
        vec![
            x.id.to_string(),
            x.kind.name().into(),
            x.age.to_string(),
            x.group.map(|g| g.to_string()).unwrap_or_default(),
            fmt_opt(x.value),
            x.count.to_string(),
        ]
    })
}

const MOMENT_HEADER: [&str; 6] = ["moment_id", "kind", "age", "group", "value", "count"];

fn smm_config(cfg: &RunConfig, seed: u64) -> CliResult<SmmConfig> {
    let free = cfg
        .str_list("smm.free")?
        .iter()
        .map(|s| FreeParam::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut c = SmmConfig::only(&free);
    c.weighting = match cfg.str("smm.weighting")? {
        "identity" => Weighting::Identity,
        "diagonal" => Weighting::Diagonal,
        other => {
            return Err(CliError::Config(format!(
                "key 'smm.weighting' must be identity or diagonal, got '{other}'"
            )))
        }
    };
    c.n_histories = cfg.usize("smm.n_histories")?;
    c.n_starts = cfg.usize("smm.n_starts")?;
    c.sim_seed = mix64(seed);
    let mut simplex = SimplexOptions::new(c.free.len(), 0.1);
    simplex.xtol = cfg.f64("smm.simplex_xtol")?;
    simplex.ftol = cfg.f64("smm.simplex_ftol")?;
    c.optimizer = HybridOptions {
        anneal: AnnealOptions {
            initial_temperature: cfg.f64("smm.anneal_temperature")?,
            cooling: cfg.f64("smm.anneal_cooling")?,
            temperatures: cfg.usize("smm.anneal_temperatures")?,
            steps_per_temperature: cfg.usize("smm.anneal_steps")?,
            step_fraction: cfg.f64("smm.anneal_step_fraction")?,
        },
        simplex,
        max_cycles: cfg.usize("smm.max_cycles")?,
        cycle_tolerance: cfg.f64("smm.cycle_tolerance")?,
        max_evals: cfg.usize("smm.max_evals")?,
        seed,
    };
    Ok(c)
}

fn estimate(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let config = smm_config(&ctx.cfg, seed)?;
    let panel = load_panel(ctx)?;
    let health = load_health(ctx, &panel)?;
    let wealth = deflated_wealth(&ctx.cfg, &panel)?;
    let residual: Vec<Option<f64>> = health.iter().map(|h| h.residual).collect();
    let data = moments_from_obs(&panel_moment_obs(&panel, &residual, &wealth)?)?;
    let (health_process, mortality, earnings) = load_primitives(ctx)?;
    let (variant, params) = base_params(ctx)?;
    let grid = grid_spec(&ctx.cfg)?;
    let model = assemble_model(params, &grid, health_process, earnings, mortality)?;
    let init = initial_pool(ctx)?;
    let est = smm_estimate(&config, &data, &model, &init)?;
    if est.budget_exhausted {
        warn!("evaluation budget exhausted before convergence");
    }
    info!("loss {:.6e} at {:?}", est.loss, est.values);

    let (dm, tr, fit, pe) = (
        ctx.path(DATA_MOMENTS_CSV),
        ctx.path(SMM_TRACE_CSV),
        ctx.path(SMM_FIT_CSV),
        ctx.path(PARAMS_ESTIMATED_TOML),
    );
    formats::write_csv(&dm, &MOMENT_HEADER, moment_rows(&data))?;
    let mut header: Vec<String> = ["iteration", "start", "cycle", "stage", "loss", "best_loss"]
        .map(String::from)
        .to_vec();
    header.extend(est.names.iter().cloned());
    let rows = est.trace.iter().map(|t| {
        let mut row = vec![
            t.iteration.to_string(),
            t.start.to_string(),
            t.cycle.to_string(),
            t.stage.into(),
            fmt_f(t.loss),
            fmt_f(t.best_loss),
        ];
        row.extend(t.x.iter().map(|v| fmt_f(*v)));
        row
    });
    formats::write_csv(&tr, &header, rows)?;
    let rows = est.fit.iter().map(|f| {
        vec![
            f.id.to_string(),
            f.kind.name().into(),
            f.age.to_string(),
            f.group.map(|g| g.to_string()).unwrap_or_default(),
            fmt_opt(f.data),
            fmt_opt(f.simulated),
        ]
    });
    formats::write_csv(
        &fit,
        &["moment_id", "kind", "age", "group", "data", "simulated"],
        rows,
    )?;
    formats::write_toml(
        &pe,
        &ParamsFile {
            format: formats::PARAMS.into(),
            variant,
            params: est.params,
        },
    )?;
    Ok(vec![dm, tr, fit, pe])
}

fn profile_rows(p: &Profiles) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..p.ages.len()).map(|t| {
        vec![
            p.ages[t].to_string(),
            p.alive[t].to_string(),
            fmt_f(p.health[t]),
            fmt_f(p.eta[t]),
            fmt_f(p.assets[t]),
            fmt_f(p.participation[t]),
            fmt_f(p.hours[t]),
            fmt_opt(p.assets_cov[t]),
        ]
    })
}

fn simulate(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let (model, sol) = load_solved(ctx)?;
    let init = initial_pool(ctx)?;
    let hs = simulate_histories(
        &model,
        &sol,
        &init,
        &SimOptions::new(ctx.cfg.usize("sim.n_histories")?, seed),
    )?;
    let moments = compute_moments(&hs)?;
    let profiles = Profiles::from_histories(&model, &hs);
    let (m, p) = (ctx.path(MOMENTS_CSV), ctx.path(PROFILES_CSV));
    formats::write_csv(&m, &MOMENT_HEADER, moment_rows(&moments))?;
    formats::write_csv(
        &p,
        &[
            "age",
            "alive",
            "health",
            "eta",
            "assets",
            "participation",
            "hours",
            "assets_cov",
        ],
        profile_rows(&profiles),
    )?;
    Ok(vec![m, p])
}

fn shock(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let (model, sol) = load_solved(ctx)?;
    let tau_inits = ctx.cfg.f64_list("shock.tau_init")?;
    let tau_shocks = ctx.cfg.f64_list("shock.tau_shock")?;
    let assets = ctx.cfg.f64_list("shock.assets")?;
    let n = ctx.cfg.usize("shock.n_histories")?;
    let (mut diffs, mut covs, mut summary) = (Vec::new(), Vec::new(), Vec::new());
    for &tau_init in &tau_inits {
        for &a0 in &assets {
            let exp = ShockExperiment {
                tau_shocks: tau_shocks.clone(),
                ..ShockExperiment::new(tau_init, a0, n, seed)
            };
            let res = counterfactual_shock(&model, &sol, &exp)?;
            let key = [fmt_f(tau_init), fmt_f(a0)];
            for d in &res.diffs {
                let mut row = key.to_vec();
                row.extend([
                    fmt_f(d.tau_shock),
                    d.age.to_string(),
                    d.variable.into(),
                    fmt_f(d.value),
                ]);
                diffs.push(row);
            }
            for arm in &res.arms {
                let ratio = res.cov_ratio(arm.tau_shock).unwrap_or_default();
                for (t, r) in ratio.iter().enumerate() {
                    let mut row = key.to_vec();
                    row.extend([
                        fmt_f(arm.tau_shock),
                        res.median.profiles.ages[t].to_string(),
                        fmt_opt(*r),
                    ]);
                    covs.push(row);
                }
                let mut row = key.to_vec();
                row.extend([
                    fmt_f(arm.tau_shock),
                    arm.node.to_string(),
                    fmt_f(arm.snapped_rank),
                    res.init_node.to_string(),
                    fmt_f(res.init_rank),
                ]);
                summary.push(row);
            }
        }
    }
    let (d, c, s) = (
        ctx.path(SHOCK_DIFF_CSV),
        ctx.path(SHOCK_COV_CSV),
        ctx.path(SHOCK_SUMMARY_CSV),
    );
    formats::write_csv(
        &d,
        &[
            "tau_init",
            "assets",
            "tau_shock",
            "age",
            "variable",
            "difference",
        ],
        diffs,
    )?;
    formats::write_csv(
        &c,
        &["tau_init", "assets", "tau_shock", "age", "cov_ratio"],
        covs,
    )?;
    formats::write_csv(
        &s,
        &[
            "tau_init",
            "assets",
            "tau_shock",
            "shock_node",
            "shock_rank",
            "init_node",
            "init_rank",
        ],
        summary,
    )?;
    Ok(vec![d, c, s])
}

fn channel_label(chs: &[Channel]) -> String {
    if chs.is_empty() {
        "baseline".into()
    } else {
        chs.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
    }
}

fn decompose(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let dir = ctx.need(SOL_DIR, "solve")?;
    let files = formats::load_solution(&dir)?;
    let (health, mortality, earnings) = load_primitives(ctx)?;
    let model = assemble_model(
        files.params.params,
        &files.grid,
        health,
        earnings,
        mortality,
    )?;
    let init = initial_pool(ctx)?;
    let pct = ctx.cfg.f64("decomp.percentile")?;
    let table = decomposition_table(
        &model,
        pct,
        &init,
        &SimOptions::new(ctx.cfg.usize("decomp.n_histories")?, seed),
    )?;
    let rows = table.iter().map(|r| {
        vec![
            channel_label(&r.channels),
            fmt_f(r.percentile),
            fmt_f(r.outcomes.assets),
            fmt_f(r.outcomes.income),
            fmt_f(r.outcomes.employment),
            fmt_f(r.outcomes.hours),
            fmt_f(r.pct_change.assets),
            fmt_f(r.pct_change.income),
            fmt_f(r.pct_change.employment),
            fmt_f(r.pct_change.hours),
        ]
    });
    let p = ctx.path(DECOMP_CSV);
    formats::write_csv(
        &p,
        &[
            "channels",
            "percentile",
            "assets",
            "income",
            "employment",
            "hours",
            "pct_assets",
            "pct_income",
            "pct_employment",
            "pct_hours",
        ],
        rows,
    )?;
    Ok(vec![p])
}

fn wtp(ctx: &mut Context) -> CliResult<Vec<PathBuf>> {
    let (model, sol) = load_solved(ctx)?;
    let mut shocks: Vec<ShockRow> = ctx
        .cfg
        .f64_list("wtp.tau_shock")?
        .into_iter()
        .map(ShockRow::Forced)
        .collect();
    shocks.push(ShockRow::Natural);
    let mut rows = Vec::new();
    for &tau_init in &ctx.cfg.f64_list("wtp.tau_init")? {
        for &a0 in &ctx.cfg.f64_list("wtp.assets")? {
            for shock in &shocks {
                let r = willingness_to_pay(&model, &sol, tau_init, shock, a0, 0.0)?;
                let label = match shock {
                    ShockRow::Forced(t) => fmt_f(*t),
                    ShockRow::Natural => "natural".into(),
                };
                rows.push(vec![
                    fmt_f(tau_init),
                    label,
                    fmt_f(a0),
                    fmt_f(r.wtp),
                    (r.censored as u8).to_string(),
                    r.init_node.to_string(),
                    r.shock_node.map(|n| n.to_string()).unwrap_or_default(),
                ]);
            }
        }
    }
    let p = ctx.path(WTP_CSV);
    formats::write_csv(
        &p,
        &[
            "tau_init",
            "tau_shock",
            "assets",
            "wtp",
            "censored",
            "init_node",
            "shock_node",
        ],
        rows,
    )?;
    Ok(vec![p])
}

fn inequality(ctx: &mut Context, seed: u64) -> CliResult<Vec<PathBuf>> {
    let (model, sol) = load_solved(ctx)?;
    let init = initial_pool(ctx)?;
    let opts = SimOptions::new(ctx.cfg.usize("inequality.n_histories")?, seed);
    let mut cases: Vec<(f64, Vec<Channel>)> = vec![(f64::NAN, Vec::new())];
    for p in ctx.cfg.f64_list("inequality.percentiles")? {
        cases.extend(Channel::ALL.iter().map(|c| (p, vec![*c])));
        cases.push((p, Channel::ALL.to_vec()));
    }
    let mut rows = Vec::new();
    for (p, chs) in cases {
        let hs = if chs.is_empty() {
            simulate_histories(&model, &sol, &init, &opts)?
        } else {
            let m = model.with_channels_at(&chs, p)?;
            let s = solve(&m)?;
            simulate_histories(&m, &s, &init, &opts)?
        };
        let t = inequality_metrics(&hs)?;
        rows.push(vec![
            channel_label(&chs),
            if chs.is_empty() {
                String::new()
            } else {
                fmt_f(p)
            },
            fmt_opt(t.assets_ratio_80_20),
            fmt_f(t.assets_sd),
            fmt_opt(t.earnings_ratio_80_20),
            fmt_opt(t.earnings_log_sd),
            fmt_f(t.zero_earnings_share),
        ]);
    }
    let path = ctx.path(INEQUALITY_CSV);
    formats::write_csv(
        &path,
        &[
            "channels",
            "percentile",
            "assets_ratio_80_20",
            "assets_sd",
            "earnings_ratio_80_20",
            "earnings_log_sd",
            "zero_earnings_share",
        ],
        rows,
    )?;
    Ok(vec![path])
}

const REPORT_TABLES: [(&str, &str); 9] = [
    (SUMMARY_CSV, "Panel summary"),
    (SMM_FIT_CSV, "Moment fit"),
    (MOMENTS_CSV, "Simulated moments"),
    (PROFILES_CSV, "Age profiles"),
    (SHOCK_SUMMARY_CSV, "Shock arms"),
    (SHOCK_COV_CSV, "Asset dispersion ratios"),
    (DECOMP_CSV, "Channel decomposition"),
    (WTP_CSV, "Willingness to pay"),
    (INEQUALITY_CSV, "Inequality"),
];

/// Markdown document with every result table found; missing ones are listed.
fn report(ctx: &mut Context) -> CliResult<Vec<PathBuf>> {
    let mut doc = String::from("# Results\n");
    let mut missing = Vec::new();
    for (file, title) in REPORT_TABLES {
        let path = ctx.path(file);
        if !path.exists() {
            missing.push(file);
            continue;
        }
        ctx.inputs.push(path.clone());
        let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::format(&path, e))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| CliError::format(&path, e))?
            .iter()
            .map(String::from)
            .collect();
        doc.push_str(&format!(
            "\n## {title}\n\nSource: `{file}`\n\n| {} |\n|{}\n",
            header.join(" | "),
            "---|".repeat(header.len())
        ));
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::format(&path, e))?;
            doc.push_str(&format!(
                "| {} |\n",
                rec.iter().collect::<Vec<_>>().join(" | ")
            ));
        }
    }
    if !missing.is_empty() {
        doc.push_str(&format!("\nNot yet produced: {}\n", missing.join(", ")));
    }
    let p = ctx.path(REPORT_MD);
    std::fs::write(&p, doc).map_err(|e| CliError::io(&p, e))?;
    Ok(vec![p])
}
