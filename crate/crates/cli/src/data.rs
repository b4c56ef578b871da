use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use chauffeur::scenario::{load_scenario, Scenario};
use chauffeur::training::Policy;
use serde::{Deserialize, Serialize};

use crate::config::{config_err, ExperimentConfig};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED: &str = "resolved_config.toml";
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub family: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: String,
    pub count: usize,
    pub seed: u64,
    pub density: usize,
    pub curvature: f64,
    pub scenarios: Vec<ManifestEntry>,
}

/// Scenarios of a directory: the manifest's order when one exists,
/// otherwise every `.json` file sorted by name.
pub fn load_scenarios(dir: &Path) -> anyhow::Result<Vec<Scenario>> {
    if !dir.is_dir() {
        return Err(config_err(format!(
            "scenario directory {} does not exist",
            dir.display()
        )));
    }
    let manifest = dir.join(MANIFEST);
    let files: Vec<PathBuf> = if manifest.exists() {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest)?)
            .map_err(|e| config_err(format!("invalid manifest {}: {e}", manifest.display())))?;
        m.scenarios.iter().map(|e| dir.join(&e.file)).collect()
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != MANIFEST))
            .collect();
        v.sort();
        v
    };
    if files.is_empty() {
        return Err(config_err(format!("no scenarios in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| load_scenario(f).map_err(|e| config_err(format!("{}: {e}", f.display()))))
        .collect()
}

pub fn load_policy(path: &Path) -> anyhow::Result<Policy> {
    if !path.exists() {
        return Err(config_err(format!("checkpoint {} does not exist", path.display())));
    }
    Policy::load(path).map_err(|e| config_err(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// Output directory bookkeeping: creation, resolved config and the
/// sidecar log holding wall-clock timings.
pub struct Run {
    pub dir: PathBuf,
    command: &'static str,
    started: Instant,
}

impl Run {
    pub fn start(dir: &Path, command: &'static str) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()))
    }

    pub fn finish(self, cfg: &ExperimentConfig) -> anyhow::Result<()> {
        self.write(RESOLVED, cfg.to_toml(self.command))?;
        self.write(
            RUN_LOG,
            format!(
                "command {}\nelapsed_s {:.3}\n",
                self.command,
                self.started.elapsed().as_secs_f64()
            ),
        )
    }
}

pub fn parse_flag<T: std::str::FromStr<Err = String>>(name: &str, v: &str) -> anyhow::Result<T> {
    v.parse::<T>().map_err(|e| config_err(format!("--{name}: {e}")))
}

/// Values in a CSV file keyed by header, every field parsed as a number
/// except those in `text_cols`.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Err(config_err(format!("missing input {}", path.display())));
        }
        let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn col(&self, name: &str) -> anyhow::Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| config_err(format!("column `{name}` not found (have {})", self.header.join(","))))
    }

    pub fn num(&self, row: usize, col: usize) -> anyhow::Result<f64> {
        let v = &self.rows[row][col];
        v.parse::<f64>().map_err(|_| {
            config_err(format!(
                "row {} column `{}`: `{v}` is not a number",
                row + 1,
                self.header[col]
            ))
        })
    }
}
