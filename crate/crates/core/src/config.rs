//! Campaign configuration: TOML schema, key=value overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::AcqConfig;
use crate::error::{Error, Result};
use crate::surrogate::FitConfig;

/// Initial replication rule: a fixed count per unique location, or a
/// uniform draw over an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RepSpec {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl Default for RepSpec {
    fn default() -> Self {
        RepSpec::Fixed(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// y = log(max(v, 0.5 * smallest positive value seen so far)).
    LogFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorRef {
    /// Builtin testbed name ("toy1d", "toy2d") or "external".
    pub kind: String,
    /// Command line for external simulators (split on whitespace).
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub transform: Transform,
    /// Native input ranges, one (lo, hi) per dimension. Coded [0,1] inputs
    /// are scaled to these before being written to an external simulator.
    #[serde(default)]
    pub input_ranges: Option<Vec<(f64, f64)>>,
}

impl SimulatorRef {
    pub fn builtin(name: &str) -> Self {
        SimulatorRef {
            kind: name.to_string(),
            command: None,
            transform: Transform::None,
            input_ranges: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub n_starts: usize,
    /// Multi-start count for warm refits between batches (the previous
    /// optimum is always one of the starts).
    pub update_starts: usize,
    pub theta_bounds: (f64, f64),
    pub theta_noise_bounds: (f64, f64),
    pub g_noise_bounds: (f64, f64),
    pub log_delta_bounds: (f64, f64),
    pub max_iters: usize,
    pub grad_tol: f64,
    pub allow_homoskedastic: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        let f = FitConfig::default();
        FitSettings {
            n_starts: f.n_starts,
            update_starts: 2,
            theta_bounds: f.theta_bounds,
            theta_noise_bounds: f.theta_noise_bounds,
            g_noise_bounds: f.g_noise_bounds,
            log_delta_bounds: f.log_delta_bounds,
            max_iters: f.max_iters,
            grad_tol: f.grad_tol,
            allow_homoskedastic: f.allow_homoskedastic,
        }
    }
}

impl FitSettings {
    pub fn to_fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            n_starts: self.n_starts,
            theta_bounds: self.theta_bounds,
            theta_noise_bounds: self.theta_noise_bounds,
            g_noise_bounds: self.g_noise_bounds,
            log_delta_bounds: self.log_delta_bounds,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            allow_homoskedastic: self.allow_homoskedastic,
            seed,
            extra_starts: Vec::new(),
        }
    }

    pub fn to_update_config(&self, seed: u64) -> FitConfig {
        let mut cfg = self.to_fit_config(seed);
        cfg.n_starts = self.update_starts;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcqSettings {
    pub n_starts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for AcqSettings {
    fn default() -> Self {
        let a = AcqConfig::default();
        AcqSettings {
            n_starts: a.n_starts,
            max_iters: a.max_iters,
            grad_tol: a.grad_tol,
        }
    }
}

impl AcqSettings {
    pub fn to_acq_config(&self, seed: u64) -> AcqConfig {
        AcqConfig {
            n_starts: self.n_starts,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensSettings {
    pub n_mc: usize,
    pub grid_size: usize,
    pub bootstrap: usize,
}

impl Default for SensSettings {
    fn default() -> Self {
        SensSettings {
            n_mc: 10_000,
            grid_size: 101,
            bootstrap: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub d: usize,
    /// Initial unique design size.
    pub n0: usize,
    /// Initial replicates per unique location.
    #[serde(default)]
    pub reps0: RepSpec,
    /// Batch size M.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub n_batches: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_size")]
    pub metrics_test_size: usize,
    pub output_dir: PathBuf,
    pub simulator: SimulatorRef,
    /// Candidate count for the best-of maximin LHS initial design.
    #[serde(default = "default_lhs_candidates")]
    pub lhs_candidates: usize,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub acquisition: AcqSettings,
    #[serde(default)]
    pub sensitivity: SensSettings,
}

fn default_batch_size() -> usize {
    24
}

fn default_test_size() -> usize {
    500
}

fn default_lhs_candidates() -> usize {
    64
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.n0 < self.d + 2 {
            return Err(Error::Config(format!(
                "n0 must be at least d + 2 = {}",
                self.d + 2
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let RepSpec::Range { min, max } = self.reps0 {
            if min == 0 || max < min {
                return Err(Error::Config("reps0 range needs 1 <= min <= max".into()));
            }
        }
        if let RepSpec::Fixed(k) = self.reps0 {
            if k == 0 {
                return Err(Error::Config("reps0 must be >= 1".into()));
            }
        }
        match self.simulator.kind.as_str() {
            "external" => {
                if self.simulator.command.is_none() {
                    return Err(Error::Config(
                        "external simulator requires simulator.command".into(),
                    ));
                }
            }
            name => {
                let bed = crate::testbeds::Testbed::by_name(name)?;
                if bed.dim() != self.d {
                    return Err(Error::Config(format!(
                        "testbed {name} has dimension {}, config says d = {}",
                        bed.dim(),
                        self.d
                    )));
                }
            }
        }
        if let Some(ranges) = &self.simulator.input_ranges {
            if ranges.len() != self.d {
                return Err(Error::Config(format!(
                    "input_ranges has {} entries for d = {}",
                    ranges.len(),
                    self.d
                )));
            }
            if ranges
                .iter()
                .any(|(lo, hi)| lo.partial_cmp(hi) != Some(std::cmp::Ordering::Less))
            {
                return Err(Error::Config("input_ranges entries need lo < hi".into()));
            }
        }
        if self.metrics_test_size == 0 {
            return Err(Error::Config("metrics_test_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Total run budget n0 * E[reps0] + M * n_batches (exact for fixed reps).
    pub fn planned_budget(&self) -> usize {
        let init = match self.reps0 {
            RepSpec::Fixed(k) => self.n0 * k,
            RepSpec::Range { min, max } => self.n0 * (min + max) / 2,
        };
        init + self.batch_size * self.n_batches
    }
}

/// Parse a TOML config file, apply `--set key=value` overrides (dotted
/// paths), and validate against the schema before any compute. Unknown
/// keys anywhere are config errors.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<CampaignConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<CampaignConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let cfg: CampaignConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config schema: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = value
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}' crosses a non-table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
