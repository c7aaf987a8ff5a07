//! Per-subcommand run manifest: configuration, seed, file hashes and timing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
    /// Outputs hash the same as in the previous manifest for this subcommand.
    pub identical_to_previous: Option<bool>,
}

fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 of every file under `paths`, keyed by path relative to `root`.
pub fn hash_paths(root: &Path, paths: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = paths.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for entry in fs::read_dir(&p).map_err(|e| CliError::io(&p, e))? {
                stack.push(entry.map_err(|e| CliError::io(&p, e))?.path());
            }
        } else {
            let key = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .into_owned();
            out.insert(key, hash_file(&p)?);
        }
    }
    Ok(out)
}

pub fn manifest_path(out_dir: &Path, subcommand: &str) -> PathBuf {
    out_dir.join("manifests").join(format!("{subcommand}.json"))
}

/// Write the manifest, comparing output hashes with the one it replaces.
pub fn record(out_dir: &Path, mut manifest: Manifest) -> CliResult<Manifest> {
    let path = manifest_path(out_dir, &manifest.subcommand);
    manifest.identical_to_previous = fs::read_to_string(&path)
        .ok()
        .and_then(|text| serde_json::from_str::<Manifest>(&text).ok())
        .map(|prev| prev.outputs == manifest.outputs);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::format(&path, e))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}
