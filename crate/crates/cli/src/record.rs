//! Run records and the per-run output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// `v<crate version>`, or the `git describe` string injected at build time.
pub fn version() -> String {
    option_env!("SMP_GIT_DESCRIBE").map(str::to_string).unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub value: f64,
    /// Threshold the value was compared against, when there is a single one.
    pub threshold: Option<f64>,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, value: f64, threshold: Option<f64>, detail: impl Into<String>) -> Self {
        Self { pass, value, threshold, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub preset: String,
    pub config_hash: String,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub pass: bool,
    pub checks: BTreeMap<String, Check>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Files written by the command, relative to the run directory.
    pub files: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            preset: cfg.preset.to_string(),
            config_hash: cfg.digest(),
            version: version(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            pass: false,
            checks: BTreeMap::new(),
            metrics: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn check(&mut self, name: &str, check: Check) {
        self.checks.insert(name.to_string(), check);
    }

    pub fn metric<T: Serialize>(&mut self, name: &str, value: T) {
        self.metrics.insert(name.to_string(), serde_json::to_value(value).expect("metric serialises"));
    }

    pub fn finish(&mut self) {
        self.finished_unix = unix_now();
        self.pass = self.checks.values().all(|c| c.pass);
    }
}

/// `<out>/<hash>/`; every file of a run is written through this handle.
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(out: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let root = out.join(cfg.short_hash());
        fs::create_dir_all(root.join("plots")).with_context(|| format!("creating {}", root.display()))?;
        fs::write(root.join("config.toml"), cfg.to_toml())?;
        Ok(Self { root, written: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Writes `name` (relative to the run directory) through `body`.
    pub fn write<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
    {
        let path = self.root.join(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Two-column plot data `x y`.
    pub fn write_plot(&mut self, name: &str, points: &[(f64, f64)]) -> Result<()> {
        self.write(&format!("plots/{name}.dat"), |w| {
            for (x, y) in points {
                writeln!(w, "{x:.17e} {y:.17e}")?;
            }
            Ok(())
        })
    }

    /// Merges `record` into `record.json` under its command name.
    pub fn save_record(&mut self, mut record: RunRecord) -> Result<RunRecord> {
        record.files = std::mem::take(&mut self.written);
        record.files.sort();
        let path = self.root.join("record.json");
        let mut all: BTreeMap<String, RunRecord> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => BTreeMap::new(),
        };
        all.insert(record.command.clone(), record.clone());
        fs::write(&path, serde_json::to_string_pretty(&all)? + "\n")?;
        Ok(record)
    }
}

/// Records of every run directory below `out`, sorted by directory name.
pub fn load_all(out: &Path) -> Result<Vec<(String, BTreeMap<String, RunRecord>)>> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(out).with_context(|| format!("reading {}", out.display()))? {
        let entry = entry?;
        let path = entry.path().join("record.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let records = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        runs.push((entry.file_name().to_string_lossy().into_owned(), records));
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(runs)
}
