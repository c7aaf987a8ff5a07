//! Flat dotted-key run configuration with defaults and `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use toml::Value;

use crate::error::{CliError, CliResult};

/// Environment variable that may supply the output directory.
pub const OUT_DIR_ENV: &str = "HEALTHDYN_OUT";

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn strings(v: &[&str]) -> Value {
    Value::Array(v.iter().map(|s| Value::String(s.to_string())).collect())
}

/// Every accepted key with its default; `None` marks a required key.
fn registry() -> Vec<(&'static str, Option<Value>)> {
    use Value::{Boolean as B, Float as F, Integer as I, String as S};
    vec![
        ("seed", None),
        ("variant", Some(S("nonlinear".into()))),
        ("out_dir", Some(S("out".into()))),
        ("data.n_persons", Some(I(20_000))),
        ("data.n_waves", Some(I(7))),
        ("index.link", Some(S("probit".into()))),
        // 0 picks the variant's grid size
        ("health.n_eta", Some(I(0))),
        ("health.n_eps", Some(I(5))),
        ("health.n_paths", Some(I(20_000))),
        ("health.correct_selection", Some(B(true))),
        ("health.quantile_states", Some(I(9))),
        ("health.quantile_ranks", Some(I(11))),
        ("health.quantile_min_count", Some(I(50))),
        ("health.quantile_age_window", Some(I(4))),
        ("mortality.life_table", Some(S(String::new()))),
        ("earnings.n_nodes", Some(I(5))),
        ("wealth.order", Some(I(3))),
        ("wealth.reference_year", Some(I(2004))),
        ("grid.n_assets", Some(I(30))),
        ("grid.asset_max", Some(F(1_000_000.0))),
        ("grid.asset_curvature", Some(F(2.5))),
        ("grid.n_pension", Some(I(6))),
        ("grid.pension_max", Some(F(60_000.0))),
        ("model.params_file", Some(S(String::new()))),
        ("model.interest_rate", Some(F(0.02))),
        ("sim.n_histories", Some(I(15_000))),
        ("smm.n_histories", Some(I(15_000))),
        ("smm.n_starts", Some(I(5))),
        (
            "smm.free",
            Some(strings(&[
                "consumption_weight",
                "bequest_weight",
                "bequest_shift",
                "time_cost_0",
                "time_cost_1",
                "time_cost_2",
                "time_cost_3",
                "work_cost_0",
                "work_cost_1",
                "work_cost_2",
            ])),
        ),
        ("smm.weighting", Some(S("identity".into()))),
        ("smm.max_evals", Some(I(5_000))),
        ("smm.max_cycles", Some(I(5))),
        ("smm.cycle_tolerance", Some(F(1e-3))),
        ("smm.anneal_temperature", Some(F(1.0))),
        ("smm.anneal_cooling", Some(F(0.85))),
        ("smm.anneal_temperatures", Some(I(12))),
        ("smm.anneal_steps", Some(I(10))),
        ("smm.anneal_step_fraction", Some(F(0.05))),
        ("smm.simplex_xtol", Some(F(1e-4))),
        ("smm.simplex_ftol", Some(F(1e-10))),
        ("shock.tau_init", Some(floats(&[0.1, 0.5, 0.9]))),
        ("shock.tau_shock", Some(floats(&[0.1, 0.5, 0.9]))),
        (
            "shock.assets",
            Some(floats(&[10_000.0, 80_000.0, 200_000.0])),
        ),
        ("shock.n_histories", Some(I(20_000))),
        ("decomp.percentile", Some(F(0.75))),
        ("decomp.n_histories", Some(I(15_000))),
        ("wtp.tau_init", Some(floats(&[0.1, 0.5, 0.9]))),
        ("wtp.tau_shock", Some(floats(&[0.1]))),
        (
            "wtp.assets",
            Some(floats(&[
                10_000.0, 40_000.0, 80_000.0, 115_000.0, 200_000.0,
            ])),
        ),
        ("inequality.percentiles", Some(floats(&[0.25, 0.75]))),
        ("inequality.n_histories", Some(I(15_000))),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn parse_override(s: &str) -> CliResult<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{s}' must look like key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Defaults, then the file, then the overrides in order. Unknown keys
    /// and missing required keys are configuration errors.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let reg = registry();
        let mut values: BTreeMap<String, Value> = reg
            .iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v)))
            .collect();
        let mut given = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            flatten("", &table, &mut given);
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            given.insert(k, v);
        }
        for (k, v) in given {
            let Some((_, default)) = reg.iter().find(|(name, _)| *name == k) else {
                return Err(CliError::Config(format!("unknown key '{k}'")));
            };
            if let Some(d) = default {
                check_type(&k, d, &v)?;
            }
            values.insert(k, v);
        }
        for (k, default) in &reg {
            if default.is_none() && !values.contains_key(*k) {
                return Err(CliError::Config(format!("required key '{k}' is not set")));
            }
        }
        let cfg = RunConfig { values };
        cfg.u64("seed")?;
        Ok(cfg)
    }

    fn get(&self, key: &str) -> CliResult<&Value> {
        self.values
            .get(key)
            .ok_or_else(|| CliError::Config(format!("unknown key '{key}'")))
    }

    fn mismatch(key: &str, want: &str) -> CliError {
        CliError::Config(format!("key '{key}' must be {want}"))
    }

    pub fn i64(&self, key: &str) -> CliResult<i64> {
        self.get(key)?
            .as_integer()
            .ok_or_else(|| Self::mismatch(key, "an integer"))
    }

    pub fn u64(&self, key: &str) -> CliResult<u64> {
        u64::try_from(self.i64(key)?).map_err(|_| Self::mismatch(key, "a non-negative integer"))
    }

    pub fn usize(&self, key: &str) -> CliResult<usize> {
        usize::try_from(self.i64(key)?).map_err(|_| Self::mismatch(key, "a non-negative integer"))
    }

    pub fn f64(&self, key: &str) -> CliResult<f64> {
        as_f64(self.get(key)?).ok_or_else(|| Self::mismatch(key, "a number"))
    }

    pub fn bool(&self, key: &str) -> CliResult<bool> {
        self.get(key)?
            .as_bool()
            .ok_or_else(|| Self::mismatch(key, "true or false"))
    }

    pub fn str(&self, key: &str) -> CliResult<&str> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| Self::mismatch(key, "a string"))
    }

    pub fn f64_list(&self, key: &str) -> CliResult<Vec<f64>> {
        match self.get(key)? {
            Value::Array(a) => a
                .iter()
                .map(|v| as_f64(v).ok_or_else(|| Self::mismatch(key, "a list of numbers")))
                .collect(),
            v => as_f64(v)
                .map(|x| vec![x])
                .ok_or_else(|| Self::mismatch(key, "a list of numbers")),
        }
    }

    pub fn str_list(&self, key: &str) -> CliResult<Vec<String>> {
        match self.get(key)? {
            Value::Array(a) => a
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Self::mismatch(key, "a list of strings"))
                })
                .collect(),
            _ => Err(Self::mismatch(key, "a list of strings")),
        }
    }

    /// Output directory: the environment variable wins over the key.
    pub fn out_dir(&self) -> CliResult<PathBuf> {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Ok(PathBuf::from(self.str("out_dir")?)),
        }
    }

    /// Every key and value, sorted, for manifests.
    pub fn entries(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: Value) -> CliResult<()> {
        let reg = registry();
        let Some((_, default)) = reg.iter().find(|(name, _)| *name == key) else {
            return Err(CliError::Config(format!("unknown key '{key}'")));
        };
        if let Some(d) = default {
            check_type(key, d, &value)?;
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn check_type(key: &str, default: &Value, v: &Value) -> CliResult<()> {
    let ok = match (default, v) {
        (Value::Float(_), Value::Float(_) | Value::Integer(_)) => true,
        (Value::Array(_), Value::Array(_)) => true,
        // a single number where a list of numbers is expected
        (Value::Array(d), Value::Float(_) | Value::Integer(_)) => {
            d.first().is_none_or(|x| as_f64(x).is_some())
        }
        (d, v) => d.type_str() == v.type_str(),
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "key '{key}' expects {}, got {}",
            default.type_str(),
            v.type_str()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(sets: &[&str]) -> CliResult<RunConfig> {
        RunConfig::load(
            None,
            &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn seed_is_required() {
        assert!(matches!(with(&[]), Err(CliError::Config(_))));
        assert_eq!(with(&["seed=3"]).unwrap().u64("seed").unwrap(), 3);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = with(&["seed=1", "grid.n_asets=3"]).unwrap_err();
        assert!(err.to_string().contains("grid.n_asets"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn file_tables_flatten_to_dotted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\n[grid]\nn_assets = 12\nasset_max = 500000\n[shock]\nassets = [1000.0]\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &["grid.n_assets=14".into()]).unwrap();
        assert_eq!(cfg.usize("grid.n_assets").unwrap(), 14);
        assert_eq!(cfg.f64("grid.asset_max").unwrap(), 500_000.0);
        assert_eq!(cfg.f64_list("shock.assets").unwrap(), vec![1000.0]);
        std::fs::write(&path, "seed = 9\n[grid]\nbogus = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[])
            .unwrap_err()
            .to_string()
            .contains("grid.bogus"));
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = with(&[
            "seed=1",
            "variant=canonical",
            "shock.assets=5000",
            "health.correct_selection=false",
        ])
        .unwrap();
        assert_eq!(cfg.str("variant").unwrap(), "canonical");
        assert_eq!(cfg.f64_list("shock.assets").unwrap(), vec![5000.0]);
        assert!(!cfg.bool("health.correct_selection").unwrap());
        assert!(with(&["seed=1", "grid.n_assets=many"]).is_err());
        assert!(with(&["seed=-4"]).is_err());
        assert!(with(&["seed"]).is_err());
    }
}
