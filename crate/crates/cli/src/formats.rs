//! Versioned artifact files: CSV tables, keyed-text (TOML) files and
//! directory bundles of both.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use healthdyn_core::dynamics::canonical::CanonicalParams;
use healthdyn_core::dynamics::discrete::{DiscreteHealthProcess, RepairedRow};
use healthdyn_core::dynamics::quantile::{QuantileSlice, QuantileTable};
use healthdyn_core::earnings::WageProfile;
use healthdyn_core::health_index::HealthIndexModel;
use healthdyn_core::matrix::Transition;
use healthdyn_core::model::params::ModelParams;
use healthdyn_core::model::solver::{AgeSolution, Dims};
use healthdyn_core::model::GridSpec;
use healthdyn_core::mortality::{LifeTable, MortalityTable};
use healthdyn_core::panel::{Panel, PanelRecord, TruthRecord, INDICATORS};

use crate::error::{CliError, CliResult};

pub const PANEL: &str = "panel_v1";
pub const TRUTH: &str = "truth_v1";
pub const HINDEX: &str = "hindex_v1";
pub const QTAB: &str = "qtab_v1";
pub const DHP: &str = "dhp_v1";
pub const EARN: &str = "earn_v1";
pub const PARAMS: &str = "params_v1";
pub const SOL: &str = "sol_v1";
pub const WEALTH: &str = "wealth_v1";
pub const HFIT: &str = "hfit_v1";

pub fn fmt_f(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn fmt_bool(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    Ok(())
}

/// Write a CSV file with a header row.
pub fn write_csv<S: AsRef<str>>(
    path: &Path,
    header: &[S],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    w.write_record(header.iter().map(|h| h.as_ref()))
        .map_err(|e| CliError::format(path, e))?;
    for row in rows {
        w.write_record(&row)
            .map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Rows of a CSV file whose header must equal `header`.
pub fn read_csv<S: AsRef<str>>(path: &Path, header: &[S]) -> CliResult<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let got = r.headers().map_err(|e| CliError::format(path, e))?.clone();
    if got.len() != header.len() || got.iter().zip(header).any(|(a, b)| a != b.as_ref()) {
        let want: Vec<&str> = header.iter().map(|h| h.as_ref()).collect();
        return Err(CliError::format(
            path,
            format!(
                "header {:?} does not match schema {:?}",
                got.iter().collect::<Vec<_>>(),
                want
            ),
        ));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| CliError::format(path, format!("row {i}: {e}"))))
        .collect()
}

struct Fields<'a> {
    path: &'a Path,
    row: usize,
    rec: &'a csv::StringRecord,
    header: &'a [String],
}

impl Fields<'_> {
    fn raw(&self, col: usize) -> &str {
        self.rec.get(col).unwrap_or("")
    }

    fn err(&self, col: usize, what: &str) -> CliError {
        CliError::format(
            self.path,
            format!(
                "row {}, column {}: {what} ('{}')",
                self.row,
                self.header[col],
                self.raw(col)
            ),
        )
    }

    fn f64(&self, col: usize) -> CliResult<f64> {
        self.raw(col)
            .parse()
            .map_err(|_| self.err(col, "expected a number"))
    }

    fn opt(&self, col: usize) -> CliResult<Option<f64>> {
        if self.raw(col).is_empty() {
            Ok(None)
        } else {
            self.f64(col).map(Some)
        }
    }

    fn int<T: std::str::FromStr>(&self, col: usize) -> CliResult<T> {
        self.raw(col)
            .parse()
            .map_err(|_| self.err(col, "expected an integer"))
    }

    fn bool(&self, col: usize) -> CliResult<bool> {
        match self.raw(col) {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(self.err(col, "expected 0 or 1")),
        }
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn panel_header() -> Vec<String> {
    let mut h = strings(&[
        "person_id",
        "wave",
        "age",
        "birth_year",
        "education",
        "has_partner",
    ]);
    h.extend(INDICATORS.iter().map(|s| s.to_string()));
    h.extend(strings(&[
        "self_reported_good",
        "hourly_wage",
        "hours_annual",
        "wealth_total",
        "housing_wealth",
        "dead_by_next_wave",
        "unemployment_rate",
    ]));
    h
}

pub fn save_panel(path: &Path, panel: &Panel) -> CliResult<()> {
    let rows = panel.records.iter().map(|r| {
        let mut row = vec![
            r.person_id.to_string(),
            r.wave.to_string(),
            r.age.to_string(),
            r.birth_year.to_string(),
            r.education.to_string(),
            fmt_bool(r.has_partner),
        ];
        row.extend(r.indicators.iter().map(|z| fmt_opt(*z)));
        row.extend([
            fmt_bool(r.self_reported_good),
            fmt_opt(r.hourly_wage),
            fmt_f(r.hours_annual),
            fmt_f(r.wealth_total),
            fmt_f(r.housing_wealth),
            fmt_bool(r.dead_by_next_wave),
            fmt_f(r.unemployment_rate),
        ]);
        row
    });
    write_csv(path, &panel_header(), rows)
}

/// Load and validate a panel; errors name the offending row.
pub fn load_panel(path: &Path) -> CliResult<Panel> {
    let header = panel_header();
    let recs = read_csv(path, &header)?;
    let k = INDICATORS.len();
    let mut records = Vec::with_capacity(recs.len());
    for (row, rec) in recs.iter().enumerate() {
        let f = Fields {
            path,
            row,
            rec,
            header: &header,
        };
        let indicators = (0..k)
            .map(|j| f.opt(6 + j))
            .collect::<CliResult<Vec<_>>>()?;
        let c = 6 + k;
        records.push(PanelRecord {
            person_id: f.int(0)?,
            wave: f.int(1)?,
            age: f.int(2)?,
            birth_year: f.int(3)?,
            education: f.int(4)?,
            has_partner: f.bool(5)?,
            indicators,
            self_reported_good: f.bool(c)?,
            hourly_wage: f.opt(c + 1)?,
            hours_annual: f.f64(c + 2)?,
            wealth_total: f.f64(c + 3)?,
            housing_wealth: f.f64(c + 4)?,
            dead_by_next_wave: f.bool(c + 5)?,
            unemployment_rate: f.f64(c + 6)?,
        });
    }
    let panel = Panel { records };
    panel.validate().map_err(|e| CliError::format(path, e))?;
    Ok(panel)
}

const TRUTH_HEADER: [&str; 11] = [
    "person_id",
    "wave",
    "eta",
    "eps",
    "health",
    "latent",
    "wage_persistent",
    "wage_error",
    "log_wage_offer",
    "wealth_effect",
    "format",
];

pub fn save_truth(path: &Path, truth: &[TruthRecord]) -> CliResult<()> {
    let rows = truth.iter().map(|t| {
        vec![
            t.person_id.to_string(),
            t.wave.to_string(),
            fmt_f(t.eta),
            fmt_f(t.eps),
            fmt_f(t.health),
            fmt_f(t.latent),
            fmt_f(t.wage_persistent),
            fmt_f(t.wage_error),
            fmt_f(t.log_wage_offer),
            fmt_f(t.wealth_effect),
            TRUTH.into(),
        ]
    });
    write_csv(path, &TRUTH_HEADER, rows)
}

pub fn load_truth(path: &Path) -> CliResult<Vec<TruthRecord>> {
    let header = strings(&TRUTH_HEADER);
    read_csv(path, &header)?
        .iter()
        .enumerate()
        .map(|(row, rec)| {
            let f = Fields {
                path,
                row,
                rec,
                header: &header,
            };
            Ok(TruthRecord {
                person_id: f.int(0)?,
                wave: f.int(1)?,
                eta: f.f64(2)?,
                eps: f.f64(3)?,
                health: f.f64(4)?,
                latent: f.f64(5)?,
                wage_persistent: f.f64(6)?,
                wage_error: f.f64(7)?,
                log_wage_offer: f.f64(8)?,
                wealth_effect: f.f64(9)?,
            })
        })
        .collect()
}

/// Per-record health measure from the index fit.
#[derive(Debug, Clone, PartialEq)]
pub struct HealthRow {
    pub person_id: u64,
    pub wave: u32,
    pub age: u32,
    pub index: Option<f64>,
    pub residual: Option<f64>,
}

const HEALTH_HEADER: [&str; 5] = ["person_id", "wave", "age", "index", "residual"];

pub fn save_health(path: &Path, rows: &[HealthRow]) -> CliResult<()> {
    write_csv(
        path,
        &HEALTH_HEADER,
        rows.iter().map(|r| {
            vec![
                r.person_id.to_string(),
                r.wave.to_string(),
                r.age.to_string(),
                fmt_opt(r.index),
                fmt_opt(r.residual),
            ]
        }),
    )
}

pub fn load_health(path: &Path) -> CliResult<Vec<HealthRow>> {
    let header = strings(&HEALTH_HEADER);
    read_csv(path, &header)?
        .iter()
        .enumerate()
        .map(|(row, rec)| {
            let f = Fields {
                path,
                row,
                rec,
                header: &header,
            };
            Ok(HealthRow {
                person_id: f.int(0)?,
                wave: f.int(1)?,
                age: f.int(2)?,
                index: f.opt(3)?,
                residual: f.opt(4)?,
            })
        })
        .collect()
}

pub fn load_life_table(path: &Path) -> CliResult<LifeTable> {
    let header = strings(&["age", "annual_death_rate"]);
    let mut ages = Vec::new();
    let mut rates = Vec::new();
    for (row, rec) in read_csv(path, &header)?.iter().enumerate() {
        let f = Fields {
            path,
            row,
            rec,
            header: &header,
        };
        ages.push(f.int(0)?);
        rates.push(f.f64(1)?);
    }
    LifeTable::new(ages, rates).map_err(|e| CliError::format(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let text = toml::to_string(value).map_err(|e| CliError::format(path, e))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Deserialize)]
struct FormatTag {
    format: String,
}

/// Read a keyed-text file and check its format tag.
pub fn read_toml<T: DeserializeOwned>(path: &Path, format: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let tag: FormatTag = toml::from_str(&text).map_err(|e| CliError::format(path, e))?;
    if tag.format != format {
        return Err(CliError::format(
            path,
            format!("expected format {format}, found {}", tag.format),
        ));
    }
    toml::from_str(&text).map_err(|e| CliError::format(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HindexFile {
    pub format: String,
    pub n_fit: usize,
    /// Residualization coefficients: intercept, age cubic, birth year,
    /// education dummies, partner.
    pub demographic_coefs: Vec<f64>,
    pub model: HealthIndexModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthFitFile {
    pub format: String,
    pub variant: String,
    pub sigma_eps: f64,
    pub n_paths: usize,
    /// Canonical fit on the residual index.
    pub canonical: Option<CanonicalParams>,
    pub canonical_objective: Option<f64>,
    /// Affine map from the true persistent component to index units.
    pub scale_intercept: Option<f64>,
    pub scale_slope: Option<f64>,
    pub clamped_draws: usize,
    pub bias_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarnFile {
    pub format: String,
    pub n_nodes: usize,
    pub objective: f64,
    pub constrained: Vec<usize>,
    pub profile: WageProfile,
    pub stochastic: CanonicalParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub variant: String,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WealthFile {
    pub format: String,
    pub order: usize,
    pub reference_year: i32,
    pub age_coefs: Vec<f64>,
    pub unemployment_coef: Option<f64>,
    pub cohort_starts: Vec<i32>,
    pub cohort_means: Vec<f64>,
    pub dropped_single_wave: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DhpMeta {
    format: String,
    step_years: u32,
    ages: Vec<u32>,
    offsets: Vec<f64>,
    eps: Vec<f64>,
    eps_weights: Vec<f64>,
    initial: Vec<f64>,
    repaired: Vec<[usize; 2]>,
    mortality_clipped: Vec<[u32; 2]>,
}

fn bundle_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Discretized health process and its mortality table.
pub fn save_dhp(
    dir: &Path,
    process: &DiscreteHealthProcess,
    mortality: &MortalityTable,
) -> CliResult<()> {
    let meta = DhpMeta {
        format: DHP.into(),
        step_years: process.step_years,
        ages: process.ages.clone(),
        offsets: process.offsets.clone(),
        eps: process.eps.clone(),
        eps_weights: process.eps_weights.clone(),
        initial: process.initial.clone(),
        repaired: process.repaired.iter().map(|r| [r.step, r.row]).collect(),
        mortality_clipped: mortality
            .clipped
            .iter()
            .map(|(a, g)| [*a, *g as u32])
            .collect(),
    };
    write_toml(&bundle_file(dir, "meta.toml"), &meta)?;
    let eta_rows = process.eta.iter().enumerate().flat_map(|(t, grid)| {
        let age = process.ages[t];
        grid.iter()
            .enumerate()
            .map(move |(i, v)| vec![t.to_string(), age.to_string(), i.to_string(), fmt_f(*v)])
    });
    write_csv(
        &bundle_file(dir, "eta.csv"),
        &["age_index", "age", "node", "eta"],
        eta_rows,
    )?;
    let n = process.n_eta();
    let mut header = strings(&["step", "from"]);
    header.extend((0..n).map(|j| format!("p_{j}")));
    let rows = process.transitions.iter().enumerate().flat_map(|(k, tr)| {
        (0..n).map(move |i| {
            let mut row = vec![k.to_string(), i.to_string()];
            row.extend(tr.row(i).iter().map(|p| fmt_f(*p)));
            row
        })
    });
    write_csv(&bundle_file(dir, "transitions.csv"), &header, rows)?;
    let mh = mortality_header();
    let rows = (0..mortality.ages.len()).map(|t| {
        let mut row = vec![mortality.ages[t].to_string()];
        row.extend(mortality.cutoffs[t].iter().map(|v| fmt_f(*v)));
        row.extend(mortality.rates[t].iter().map(|v| fmt_f(*v)));
        row.extend(mortality.group_weights[t].iter().map(|v| fmt_f(*v)));
        row.push(fmt_f(mortality.targets[t]));
        row.push(fmt_f(mortality.factors[t]));
        row
    });
    write_csv(&bundle_file(dir, "mortality.csv"), &mh, rows)
}

fn mortality_header() -> Vec<String> {
    strings(&[
        "age", "cut_1", "cut_2", "cut_3", "rate_1", "rate_2", "rate_3", "rate_4", "weight_1",
        "weight_2", "weight_3", "weight_4", "target", "factor",
    ])
}

pub fn load_dhp(dir: &Path) -> CliResult<(DiscreteHealthProcess, MortalityTable)> {
    let meta: DhpMeta = read_toml(&bundle_file(dir, "meta.toml"), DHP)?;
    let n_ages = meta.ages.len();
    let eta_path = bundle_file(dir, "eta.csv");
    let header = strings(&["age_index", "age", "node", "eta"]);
    let mut eta: Vec<Vec<f64>> = vec![Vec::new(); n_ages];
    for (row, rec) in read_csv(&eta_path, &header)?.iter().enumerate() {
        let f = Fields {
            path: &eta_path,
            row,
            rec,
            header: &header,
        };
        let t: usize = f.int(0)?;
        let node: usize = f.int(2)?;
        if t >= n_ages || node != eta[t].len() {
            return Err(CliError::format(
                &eta_path,
                format!("row {row}: nodes out of order"),
            ));
        }
        eta[t].push(f.f64(3)?);
    }
    let n = eta.first().map_or(0, Vec::len);
    let tr_path = bundle_file(dir, "transitions.csv");
    let mut header = strings(&["step", "from"]);
    header.extend((0..n).map(|j| format!("p_{j}")));
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); n_ages.saturating_sub(1)];
    for (row, rec) in read_csv(&tr_path, &header)?.iter().enumerate() {
        let f = Fields {
            path: &tr_path,
            row,
            rec,
            header: &header,
        };
        let k: usize = f.int(0)?;
        let from: usize = f.int(1)?;
        if k >= data.len() || from * n != data[k].len() {
            return Err(CliError::format(
                &tr_path,
                format!("row {row}: rows out of order"),
            ));
        }
        for j in 0..n {
            data[k].push(f.f64(2 + j)?);
        }
    }
    let process = DiscreteHealthProcess {
        ages: meta.ages.clone(),
        step_years: meta.step_years,
        eta,
        offsets: meta.offsets,
        eps: meta.eps,
        eps_weights: meta.eps_weights,
        transitions: data
            .into_iter()
            .map(|d| Transition::from_row_major(n, d))
            .collect(),
        initial: meta.initial,
        repaired: meta
            .repaired
            .iter()
            .map(|r| RepairedRow {
                step: r[0],
                row: r[1],
            })
            .collect(),
    };
    process.validate().map_err(|e| CliError::format(dir, e))?;

    let m_path = bundle_file(dir, "mortality.csv");
    let mh = mortality_header();
    let mut mortality = MortalityTable {
        ages: Vec::new(),
        rates: Vec::new(),
        cutoffs: Vec::new(),
        group_weights: Vec::new(),
        targets: Vec::new(),
        factors: Vec::new(),
        clipped: meta
            .mortality_clipped
            .iter()
            .map(|c| (c[0], c[1] as usize))
            .collect(),
    };
    for (row, rec) in read_csv(&m_path, &mh)?.iter().enumerate() {
        let f = Fields {
            path: &m_path,
            row,
            rec,
            header: &mh,
        };
        mortality.ages.push(f.int(0)?);
        mortality.cutoffs.push([f.f64(1)?, f.f64(2)?, f.f64(3)?]);
        mortality
            .rates
            .push([f.f64(4)?, f.f64(5)?, f.f64(6)?, f.f64(7)?]);
        mortality
            .group_weights
            .push([f.f64(8)?, f.f64(9)?, f.f64(10)?, f.f64(11)?]);
        mortality.targets.push(f.f64(12)?);
        mortality.factors.push(f.f64(13)?);
    }
    Ok((process, mortality))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QtabMeta {
    format: String,
    initial_age: u32,
    step_years: u32,
    taus: Vec<f64>,
    initial_marginal: Vec<f64>,
    ages: Vec<u32>,
    borrowed_rows: Vec<Vec<usize>>,
}

pub fn save_qtab(dir: &Path, table: &QuantileTable) -> CliResult<()> {
    let meta = QtabMeta {
        format: QTAB.into(),
        initial_age: table.initial_age,
        step_years: table.step_years,
        taus: table.taus.clone(),
        initial_marginal: table.initial_marginal.clone(),
        ages: table.slices.iter().map(|s| s.age).collect(),
        borrowed_rows: table
            .slices
            .iter()
            .map(|s| s.borrowed_rows.clone())
            .collect(),
    };
    write_toml(&bundle_file(dir, "meta.toml"), &meta)?;
    let k = table.taus.len();
    let mut header = strings(&["slice", "age", "row", "eta"]);
    header.extend((0..k).map(|j| format!("q_{j}")));
    let rows = table.slices.iter().enumerate().flat_map(|(s, slice)| {
        slice.eta.iter().enumerate().map(move |(i, e)| {
            let mut row = vec![
                s.to_string(),
                slice.age.to_string(),
                i.to_string(),
                fmt_f(*e),
            ];
            row.extend(slice.q[i * k..(i + 1) * k].iter().map(|v| fmt_f(*v)));
            row
        })
    });
    write_csv(&bundle_file(dir, "slices.csv"), &header, rows)
}

pub fn load_qtab(dir: &Path) -> CliResult<QuantileTable> {
    let meta: QtabMeta = read_toml(&bundle_file(dir, "meta.toml"), QTAB)?;
    let k = meta.taus.len();
    let path = bundle_file(dir, "slices.csv");
    let mut header = strings(&["slice", "age", "row", "eta"]);
    header.extend((0..k).map(|j| format!("q_{j}")));
    let mut slices: Vec<QuantileSlice> = meta
        .ages
        .iter()
        .zip(&meta.borrowed_rows)
        .map(|(age, b)| QuantileSlice {
            age: *age,
            eta: Vec::new(),
            q: Vec::new(),
            borrowed_rows: b.clone(),
        })
        .collect();
    for (row, rec) in read_csv(&path, &header)?.iter().enumerate() {
        let f = Fields {
            path: &path,
            row,
            rec,
            header: &header,
        };
        let s: usize = f.int(0)?;
        let slice = slices
            .get_mut(s)
            .ok_or_else(|| CliError::format(&path, format!("row {row}: unknown slice {s}")))?;
        slice.eta.push(f.f64(3)?);
        for j in 0..k {
            slice.q.push(f.f64(4 + j)?);
        }
    }
    let table = QuantileTable {
        taus: meta.taus,
        initial_age: meta.initial_age,
        step_years: meta.step_years,
        initial_marginal: meta.initial_marginal,
        slices,
    };
    table.validate().map_err(|e| CliError::format(dir, e))?;
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SolMeta {
    format: String,
    ages: Vec<u32>,
    /// assets, pension, wage, eta, eps
    dims: [usize; 5],
}

const SOL_HEADER: [&str; 5] = ["state", "value", "next_asset", "hours", "consumption"];

/// Policy and value slices, one CSV per age, with the grid and parameters
/// needed to rebuild the model.
pub fn save_solution(
    dir: &Path,
    ages: &[u32],
    dims: &Dims,
    slices: &[AgeSolution],
    grid: &GridSpec,
    params: &ParamsFile,
) -> CliResult<()> {
    let meta = SolMeta {
        format: SOL.into(),
        ages: ages.to_vec(),
        dims: [dims.assets, dims.pension, dims.wage, dims.eta, dims.eps],
    };
    write_toml(&bundle_file(dir, "meta.toml"), &meta)?;
    write_toml(
        &bundle_file(dir, "grid.toml"),
        &GridFile {
            format: "grid_v1".into(),
            grid: grid.clone(),
        },
    )?;
    write_toml(&bundle_file(dir, "params.toml"), params)?;
    for (age, s) in ages.iter().zip(slices) {
        let rows = (0..s.value.len()).map(|i| {
            vec![
                i.to_string(),
                fmt_f(s.value[i]),
                s.next_asset[i].to_string(),
                s.hours[i].to_string(),
                fmt_f(s.consumption[i]),
            ]
        });
        write_csv(
            &bundle_file(dir, &format!("age_{age}.csv")),
            &SOL_HEADER,
            rows,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridFile {
    format: String,
    grid: GridSpec,
}

pub struct SolutionFiles {
    pub ages: Vec<u32>,
    pub dims: [usize; 5],
    pub slices: Vec<AgeSolution>,
    pub grid: GridSpec,
    pub params: ParamsFile,
}

pub fn load_solution(dir: &Path) -> CliResult<SolutionFiles> {
    let meta: SolMeta = read_toml(&bundle_file(dir, "meta.toml"), SOL)?;
    let grid: GridFile = read_toml(&bundle_file(dir, "grid.toml"), "grid_v1")?;
    let params: ParamsFile = read_toml(&bundle_file(dir, "params.toml"), PARAMS)?;
    let header = strings(&SOL_HEADER);
    let mut slices = Vec::with_capacity(meta.ages.len());
    for age in &meta.ages {
        let path = bundle_file(dir, &format!("age_{age}.csv"));
        let recs = read_csv(&path, &header)?;
        let mut s = AgeSolution {
            value: Vec::with_capacity(recs.len()),
            next_asset: Vec::with_capacity(recs.len()),
            hours: Vec::with_capacity(recs.len()),
            consumption: Vec::with_capacity(recs.len()),
        };
        for (row, rec) in recs.iter().enumerate() {
            let f = Fields {
                path: &path,
                row,
                rec,
                header: &header,
            };
            if f.int::<usize>(0)? != row {
                return Err(CliError::format(
                    &path,
                    format!("row {row}: states out of order"),
                ));
            }
            s.value.push(f.f64(1)?);
            s.next_asset.push(f.int(2)?);
            s.hours.push(f.int(3)?);
            s.consumption.push(f.f64(4)?);
        }
        slices.push(s);
    }
    Ok(SolutionFiles {
        ages: meta.ages,
        dims: meta.dims,
        slices,
        grid: grid.grid,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use healthdyn_core::calibration::{build_model, CalibrationSpec, Variant};
    use healthdyn_core::model::solver::solve;
    use healthdyn_core::panel::{generate_panel, SynthConfig};

    fn small_panel() -> (Panel, Vec<TruthRecord>) {
        generate_panel(&SynthConfig {
            n_persons: 200,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn panel_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (panel, truth) = small_panel();
        let p = dir.path().join("panel.csv");
        save_panel(&p, &panel).unwrap();
        assert_eq!(load_panel(&p).unwrap(), panel);
        let t = dir.path().join("truth.csv");
        save_truth(&t, &truth).unwrap();
        assert_eq!(load_truth(&t).unwrap(), truth);
    }

    #[test]
    fn wave_gaps_are_accepted_and_bad_rows_named() {
        let dir = tempfile::tempdir().unwrap();
        let (mut panel, _) = small_panel();
        let p = dir.path().join("panel.csv");
        // drop a middle wave of someone observed three or more times
        let id = panel.records[0].person_id;
        let rows: Vec<usize> = (0..panel.records.len())
            .filter(|&i| panel.records[i].person_id == id)
            .collect();
        if rows.len() >= 3 {
            panel.records.remove(rows[1]);
        }
        save_panel(&p, &panel).unwrap();
        assert!(load_panel(&p).is_ok());

        panel.records[5].hours_annual = -1.0;
        save_panel(&p, &panel).unwrap();
        let err = load_panel(&p).unwrap_err().to_string();
        assert!(err.contains("row 5"), "{err}");

        std::fs::write(&p, "person_id,wave\n1,1\n").unwrap();
        assert!(load_panel(&p).unwrap_err().to_string().contains("schema"));
    }

    #[test]
    fn process_and_solution_bundles_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CalibrationSpec::coarse(Variant::Nonlinear);
        let m = build_model(&spec).unwrap();
        save_dhp(&dir.path().join("dhp"), &m.health, &m.mortality).unwrap();
        let (h, mort) = load_dhp(&dir.path().join("dhp")).unwrap();
        assert_eq!(h, m.health);
        assert_eq!(mort.rates, m.mortality.rates);
        assert_eq!(mort.cutoffs, m.mortality.cutoffs);

        let sol = solve(&m).unwrap();
        let params = ParamsFile {
            format: PARAMS.into(),
            variant: "nonlinear".into(),
            params: m.params.clone(),
        };
        save_solution(
            &dir.path().join("sol"),
            &sol.ages,
            &sol.dims,
            &sol.slices,
            &spec.grid,
            &params,
        )
        .unwrap();
        let back = load_solution(&dir.path().join("sol")).unwrap();
        assert_eq!(back.slices, sol.slices);
        assert_eq!(back.params.params, m.params);
        assert_eq!(back.grid, spec.grid);
    }

    #[test]
    fn format_tag_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.toml");
        write_toml(
            &p,
            &ParamsFile {
                format: PARAMS.into(),
                variant: "canonical".into(),
                params: ModelParams::canonical(),
            },
        )
        .unwrap();
        let back: ParamsFile = read_toml(&p, PARAMS).unwrap();
        assert_eq!(back.params, ModelParams::canonical());
        assert!(read_toml::<ParamsFile>(&p, EARN).is_err());
    }
}
