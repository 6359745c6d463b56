//! Experiment configuration: TOML file, `key=value` overrides, defaults.
//!
//! Precedence is overrides > file > defaults. Unknown keys anywhere in the
//! tree are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::sha256_hex;
use crate::readout::{default_lambda_grid, AttentionKind, TrainConfig};
use crate::reservoir::{BackendKind, EsnParams, LaserParams, ReservoirBackend};
use crate::{Error, Result};

/// Environment variable overriding `io.cache_dir`.
pub const CACHE_DIR_ENV: &str = "ATTN_RC_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemChoice {
    /// Driven Lorenz system observed through its own three coordinates.
    Uctls,
    /// Alternating Lorenz and Rössler windows.
    Alrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutChoice {
    Ridge,
    LinearAttention,
    NonlinearAttention,
}

impl ReadoutChoice {
    pub fn name(self) -> &'static str {
        match self {
            ReadoutChoice::Ridge => "ridge",
            ReadoutChoice::LinearAttention => "linear-attention",
            ReadoutChoice::NonlinearAttention => "nonlinear-attention",
        }
    }

    pub fn attention_kind(self) -> Option<AttentionKind> {
        match self {
            ReadoutChoice::Ridge => None,
            ReadoutChoice::LinearAttention => Some(AttentionKind::Linear),
            ReadoutChoice::NonlinearAttention => Some(AttentionKind::Nonlinear),
        }
    }
}

impl std::str::FromStr for ReadoutChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(ReadoutChoice::Ridge),
            "linear-attention" => Ok(ReadoutChoice::LinearAttention),
            "nonlinear-attention" => Ok(ReadoutChoice::NonlinearAttention),
            _ => Err(Error::Config(format!(
                "unknown readout '{s}' (expected ridge, linear-attention or nonlinear-attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub system: SystemChoice,
    pub sigma_force: f64,
    /// ALRS window length in samples.
    pub window: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the first ensemble member; member `k` uses `seed + k`.
    pub seed: u64,
    pub members: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            system: SystemChoice::Uctls,
            sigma_force: 0.05,
            window: 500,
            n_train: 25000,
            n_test: 5000,
            seed: 0,
            members: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirConfig {
    pub backend: BackendKind,
    pub nodes: usize,
    /// Node interval in seconds.
    pub theta: f64,
    /// Laser integration step in seconds; must divide `theta`.
    pub h_sub: f64,
    /// Leading training samples excluded from fitting.
    pub washout: usize,
    pub laser: LaserParams,
    pub esn: EsnParams,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::LangKobayashi,
            nodes: 50,
            theta: 1e-10,
            h_sub: 1e-11,
            washout: 100,
            laser: LaserParams::default(),
            esn: EsnParams::default(),
        }
    }
}

impl ReservoirConfig {
    pub fn backend(&self) -> Result<ReservoirBackend> {
        let mut laser = self.laser.clone();
        if self.backend == BackendKind::LangKobayashi {
            let ratio = self.theta / self.h_sub;
            let k = ratio.round();
            if !(self.h_sub > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
                return Err(Error::Config(format!(
                    "reservoir.h_sub = {:e} does not divide reservoir.theta = {:e}",
                    self.h_sub, self.theta
                )));
            }
            laser.substeps_per_node = k as usize;
        }
        let backend = ReservoirBackend {
            kind: self.backend,
            nodes: self.nodes,
            theta: self.theta,
            laser,
            esn: self.esn.clone(),
        };
        backend.validate()?;
        Ok(backend)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    pub model: ReadoutChoice,
    pub lambda_grid: Vec<f64>,
    pub train: TrainConfig,
    /// Evaluate the best-test-epoch weights instead of the last epoch.
    pub use_best_epoch: bool,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            model: ReadoutChoice::LinearAttention,
            lambda_grid: default_lambda_grid(),
            train: TrainConfig::default(),
            use_best_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Open-loop prediction horizons in samples.
    pub horizons: Vec<usize>,
    pub closed_loop: bool,
    pub vpt_threshold: f64,
    /// Closed-loop start points per test trajectory.
    pub vpt_starts: usize,
    /// Free-run length per start (UCTLS).
    pub free_run_steps: usize,
    /// Teacher-forced samples into an ALRS window before free running.
    pub window_warmup: usize,
    /// Emit spectra of truth and free-run predictions.
    pub spectrum: bool,
    /// Free-run length used for spectra.
    pub spectrum_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1],
            closed_loop: true,
            vpt_threshold: 0.4,
            vpt_starts: 10,
            free_run_steps: 500,
            window_warmup: 100,
            spectrum: false,
            spectrum_steps: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub output_dir: PathBuf,
    /// State-matrix cache; `None` uses the environment variable or
    /// `.attn-rc-cache`.
    pub cache_dir: Option<PathBuf>,
    pub use_cache: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("results"),
            cache_dir: None,
            use_cache: true,
        }
    }
}

impl IoConfig {
    pub fn resolved_cache_dir(&self) -> PathBuf {
        std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
            .unwrap_or_else(|| PathBuf::from(".attn-rc-cache"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub reservoir: ReservoirConfig,
    pub readout: ReadoutConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words such as `leaky-esn` are taken as strings
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Builds a config from optional TOML text plus `key=value` overrides.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match text {
            Some(t) => t
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text =
            match path {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?),
                None => None,
            };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(d.sigma_force >= 0.0) {
            return Err(Error::Config(
                "dataset.sigma_force must be non-negative".into(),
            ));
        }
        if d.members == 0 {
            return Err(Error::Config("dataset.members must be at least 1".into()));
        }
        if d.n_train <= self.reservoir.washout + 10 || d.n_test < 10 {
            return Err(Error::Config(
                "dataset.n_train must exceed reservoir.washout + 10 and n_test must be at least 10"
                    .into(),
            ));
        }
        if d.system == SystemChoice::Alrs
            && (d.window == 0
                || !d.n_train.is_multiple_of(d.window)
                || !d.n_test.is_multiple_of(d.window))
        {
            return Err(Error::Config(
                "dataset.window must divide n_train and n_test".into(),
            ));
        }
        self.reservoir.backend()?;
        self.readout.train.validate()?;
        if self.readout.lambda_grid.iter().any(|l| !(*l >= 0.0))
            || self.readout.lambda_grid.is_empty()
        {
            return Err(Error::Config(
                "readout.lambda_grid needs non-negative values".into(),
            ));
        }
        let e = &self.eval;
        if e.horizons.is_empty() || e.horizons.contains(&0) {
            return Err(Error::Config("eval.horizons must be positive".into()));
        }
        if e.vpt_starts == 0 || e.free_run_steps == 0 {
            return Err(Error::Config(
                "eval.vpt_starts and eval.free_run_steps must be positive".into(),
            ));
        }
        if !(e.vpt_threshold >= 0.0) {
            return Err(Error::Config(
                "eval.vpt_threshold must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Dotted keys whose values differ from the defaults.
    pub fn deviations(&self) -> Vec<String> {
        fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
            match (a, b) {
                (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                    for (k, v) in x {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, v, y.get(k).unwrap_or(&serde_json::Value::Null), out);
                    }
                }
                _ if a != b => out.push(format!("{prefix} = {a}")),
                _ => {}
            }
        }
        let mut out = Vec::new();
        walk(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &serde_json::to_value(Config::default()).expect("config serializes"),
            &mut out,
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_parameters() {
        let c = Config::default();
        assert_eq!(c.reservoir.nodes, 50);
        assert_eq!(c.reservoir.theta, 1e-10);
        assert_eq!(c.reservoir.laser.kappa, 1e8);
        assert_eq!(c.reservoir.laser.p, 1.11);
        assert_eq!(c.reservoir.laser.eta, 0.08);
        assert_eq!(c.reservoir.laser.alpha_tilde, 3.0);
        assert_eq!(c.readout.train.learning_rate, 0.01);
        assert_eq!((c.dataset.n_train, c.dataset.n_test), (25000, 5000));
        assert_eq!(c.eval.vpt_threshold, 0.4);
        c.validate().unwrap();
        assert!(c.deviations().is_empty());
    }

    #[test]
    fn file_then_overrides() {
        let text = "[reservoir]\nnodes = 20\nbackend = \"leaky-esn\"\n[dataset]\nseed = 4\n";
        let c = Config::resolve(
            Some(text),
            &["reservoir.nodes=30".into(), "readout.model=ridge".into()],
        )
        .unwrap();
        assert_eq!(c.reservoir.nodes, 30);
        assert_eq!(c.reservoir.backend, BackendKind::LeakyEsn);
        assert_eq!(c.dataset.seed, 4);
        assert_eq!(c.readout.model, ReadoutChoice::Ridge);
        assert_eq!(c.deviations().len(), 4);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::resolve(Some("[dataset]\nsigma = 1.0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
        let err = Config::resolve(None, &["readout.train.momentum=0.9".into()]).unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
        assert!(Config::resolve(None, &["nodes".into()]).is_err());
    }

    #[test]
    fn h_sub_must_divide_theta() {
        assert!(Config::resolve(None, &["reservoir.h_sub=3e-11".into()]).is_err());
        let c = Config::resolve(None, &["reservoir.h_sub=2e-11".into()]).unwrap();
        assert_eq!(c.reservoir.backend().unwrap().laser.substeps_per_node, 5);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = Config::resolve(None, &["eval.horizons=[1,2,3]".into()]).unwrap();
        let back = Config::resolve(Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), Config::default().hash());
    }
}
