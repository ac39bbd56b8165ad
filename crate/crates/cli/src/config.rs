//! Experiment configuration and its canonical digest.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smp_core::forward::Scheme;
use smp_core::regression::BasisSpec;
use smp_core::spike::SearchMode;

use crate::presets::PresetName;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    pub t0: f64,
    pub eps: f64,
    /// `U`-index used on the spike window.
    pub u: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub basis_degree: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { scheme: Scheme::SemiImplicit, basis_degree: BasisSpec::default().degree }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Paths for the adjoint-based variational terms; the slope study uses `paths`.
    pub remainder_paths: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { remainder_paths: 2000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    Exhaustive,
    CoordinateDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub intervals: usize,
    pub mode: OptimizerMode,
    pub budget: u64,
    pub max_sweeps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { intervals: 4, mode: OptimizerMode::Exhaustive, budget: 100_000, max_sweeps: 20 }
    }
}

impl OptimizerConfig {
    pub fn search_mode(&self) -> SearchMode {
        match self.mode {
            OptimizerMode::Exhaustive => SearchMode::Exhaustive { budget: self.budget as u128 },
            OptimizerMode::CoordinateDescent => SearchMode::CoordinateDescent { max_sweeps: self.max_sweeps },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetName,
    /// Grid size `L`, a power of two.
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub spike: SpikeConfig,
    /// Spike widths for the scaling sweep.
    #[serde(default)]
    pub eps_list: Vec<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Shipped configuration of a preset.
    pub fn preset(name: PresetName) -> Self {
        let dyadic = |from: i32, to: i32| (from..=to).map(|i| 0.5f64.powi(i)).collect::<Vec<_>>();
        let (steps, spike, eps_list) = match name {
            PresetName::Zero => (64, SpikeConfig { t0: 0.25, eps: 0.25, u: 0 }, dyadic(2, 5)),
            PresetName::ScalarClosedForm => (256, SpikeConfig { t0: 0.25, eps: 0.25, u: 0 }, dyadic(2, 5)),
            PresetName::BenchmarkN8 => (128, SpikeConfig { t0: 0.25, eps: 0.25, u: 2 }, dyadic(4, 9)),
            PresetName::MpN4U3 => (64, SpikeConfig { t0: 0.25, eps: 0.125, u: 0 }, dyadic(3, 6)),
        };
        Self {
            preset: name,
            steps,
            paths: 10_000,
            seed: 20_240_917,
            spike,
            eps_list,
            solver: SolverConfig::default(),
            optimizer: OptimizerConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.steps.is_power_of_two() {
            bail!("steps must be a power of two, got {}", self.steps);
        }
        if self.paths < 100 {
            bail!("paths must be at least 100, got {}", self.paths);
        }
        if !(self.spike.eps > 0.0 && self.spike.t0 >= 0.0) {
            bail!("spike needs t0 >= 0 and eps > 0");
        }
        if self.eps_list.iter().any(|e| !(*e > 0.0)) {
            bail!("eps_list entries must be positive");
        }
        if self.sweep.remainder_paths < 100 {
            bail!("sweep.remainder_paths must be at least 100, got {}", self.sweep.remainder_paths);
        }
        if self.optimizer.intervals == 0 || !self.steps.is_multiple_of(self.optimizer.intervals) {
            bail!("{} steps cannot be split into {} control intervals", self.steps, self.optimizer.intervals);
        }
        Ok(())
    }

    /// Sorted-key JSON rendering used for hashing.
    pub fn canonical(&self) -> String {
        // serde_json maps are ordered by key, and numbers print in shortest round-trip form
        let value = serde_json::to_value(self).expect("configuration serialises");
        serde_json::to_string(&value).expect("value serialises")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Run directory name: the first 16 hex digits of the digest.
    pub fn short_hash(&self) -> String {
        self.digest()[..16].to_string()
    }

    pub fn basis(&self) -> BasisSpec {
        BasisSpec { degree: self.solver.basis_degree }
    }
}
