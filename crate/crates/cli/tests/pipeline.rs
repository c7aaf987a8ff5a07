use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 42
[data]
n_persons = 1500
[health]
n_eta = 7
n_eps = 3
n_paths = 2000
[grid]
n_assets = 14
n_pension = 3
[earnings]
n_nodes = 3
[sim]
n_histories = 800
[shock]
n_histories = 500
tau_init = [0.1]
assets = [10000.0]
[wtp]
tau_init = [0.1]
assets = [10000.0]
"#;

fn healthdyn(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.toml");
    if !config.exists() {
        std::fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_healthdyn"))
        .arg("--config")
        .arg(&config)
        .arg("--set")
        .arg(format!("out_dir=\"{}\"", dir.join("out").display()))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HEALTHDYN_OUT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = healthdyn(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const STAGES: [&str; 9] = [
    "gen-data",
    "fit-index",
    "fit-health",
    "fit-earnings",
    "fit-wealth",
    "solve",
    "simulate",
    "shock",
    "wtp",
];

#[test]
fn solving_before_fitting_health_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = healthdyn(dir.path(), &["solve"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fit-health"));
}

#[test]
fn unknown_keys_and_bad_types_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = healthdyn(dir.path(), &["--set", "grid.n_asets=20", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.n_asets"));
    let o = healthdyn(dir.path(), &["--set", "data.n_persons=many", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_healthdyn"))
        .args([
            "--set",
            &format!("out_dir=\"{}\"", dir.path().display()),
            "gen-data",
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn pipeline_is_reproducible_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for stage in STAGES {
        ok(a.path(), &["--threads", "1", stage]);
        ok(b.path(), &["--threads", "4", stage]);
    }
    for f in [
        "panel.csv",
        "health.csv",
        "dhp/transitions.csv",
        "earnings.toml",
        "solution/age_60.csv",
        "moments.csv",
        "shock_diff.csv",
        "wtp.csv",
    ] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    ok(a.path(), &["--threads", "2", "simulate"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&read(a.path(), "manifests/simulate.json")).unwrap();
    assert_eq!(
        manifest["identical_to_previous"],
        serde_json::Value::Bool(true)
    );
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.starts_with("solution/")));

    // the natural transition costs nothing
    let wtp = read(a.path(), "wtp.csv");
    let natural = wtp.lines().find(|l| l.contains("natural")).unwrap();
    let value: f64 = natural.split(',').nth(3).unwrap().parse().unwrap();
    assert!(value.abs() <= 1.0, "{natural}");
}

#[test]
fn environment_variable_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_healthdyn"))
        .args(["--set", "seed=3", "--set", "data.n_persons=200", "gen-data"])
        .env("HEALTHDYN_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("panel.csv").exists());
}
