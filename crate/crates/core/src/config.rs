//! Run configuration files.
//!
//! A run file is TOML: top-level keys for the experiment shape, then
//! `[dataset]`, `[fed]` (with `[fed.local]`), `[attack]`, `[detector]`,
//! an optional `[dp]` and an optional `[sweep]`. Unknown keys are errors.
//! Every omitted key takes its documented default, and the resolved form
//! (see [`RunConfig::to_toml`]) spells all of them out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackConfig, AttackKind};
use crate::detect::{DetectorConfig, DetectorKind};
use crate::evalharness::{DatasetSpec, ExperimentConfig, PartitionKind, SweepSpec};
use crate::fedsim::FedConfig;
use crate::numkit::SgdConfig;
use crate::privacy::DpConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}{}: {key}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        path: PathBuf,
        line: Option<usize>,
        key: String,
        message: String,
    },
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Invalid { line, .. } => *line,
            _ => None,
        }
    }
}

/// The `[fed]` table; the run seed is supplied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedSection {
    pub n_clients: usize,
    pub eta: f64,
    pub rounds: usize,
    pub snapshot_rounds: Vec<usize>,
    pub local: SgdConfig,
}

impl Default for FedSection {
    fn default() -> Self {
        let f = ExperimentConfig::default().fed;
        Self {
            n_clients: f.n_clients,
            eta: f.eta,
            rounds: f.rounds,
            snapshot_rounds: f.snapshot_rounds,
            local: f.local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Result directory; overridden by `--out`, defaults to `$FEDRIDER_OUT`
    /// or `results`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub partition: PartitionKind,
    pub hidden: Vec<usize>,
    pub free_rider_count: usize,
    pub detectors: Vec<DetectorKind>,
    pub top_k: usize,
    pub dataset: DatasetSpec,
    pub fed: FedSection,
    pub attack: AttackConfig,
    pub detector: DetectorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            output: None,
            partition: e.partition,
            hidden: e.hidden,
            free_rider_count: e.free_rider_count,
            detectors: e.detectors,
            top_k: e.top_k,
            dataset: e.dataset,
            fed: FedSection::default(),
            attack: e.attack,
            detector: e.detector,
            dp: None,
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    /// The experiment this file describes, for one seed.
    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            dataset: self.dataset.clone(),
            partition: self.partition,
            hidden: self.hidden.clone(),
            fed: FedConfig {
                n_clients: self.fed.n_clients,
                eta: self.fed.eta,
                rounds: self.fed.rounds,
                snapshot_rounds: self.fed.snapshot_rounds.clone(),
                local: self.fed.local.clone(),
                seed,
            },
            attack: self.attack.clone(),
            free_rider_count: self.free_rider_count,
            detectors: self.detectors.clone(),
            detector: self.detector.clone(),
            dp: self.dp.clone(),
            top_k: self.top_k,
        }
    }

    pub fn first_seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    /// Fully explicit TOML; parsing it yields an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        if let Err((key, message)) = cfg.check() {
            return Err(ConfigError::Invalid {
                path: path.to_path_buf(),
                line: locate(text, &key),
                key,
                message,
            });
        }
        Ok(cfg)
    }

    /// Checks every nested invariant, naming the offending key.
    fn check(&self) -> Result<(), (String, String)> {
        let fail = |key: &str, msg: String| Err((key.to_string(), msg));
        if self.seeds.is_empty() {
            return fail("seeds", "at least one seed is required".into());
        }
        let f = &self.fed;
        if f.n_clients == 0 {
            return fail("fed.n_clients", "n_clients must be positive".into());
        }
        if !(f.eta > 0.0 && f.eta <= 1.0) {
            return fail("fed.eta", format!("eta must lie in (0,1], got {}", f.eta));
        }
        if f.rounds == 0 {
            return fail("fed.rounds", "rounds must be positive".into());
        }
        if let Some(bad) = f.snapshot_rounds.iter().find(|&&r| r == 0 || r > f.rounds) {
            return fail(
                "fed.snapshot_rounds",
                format!("snapshot round {bad} outside [1, {}]", f.rounds),
            );
        }
        if let Err(e) = f.local.validate() {
            return fail("fed.local", e.to_string());
        }
        if let Err(e) = self.attack.validate() {
            let key = match self.attack.kind {
                AttackKind::AdvancedDelta if self.attack.sigma.map_or(true, |s| !(s >= 0.0)) => "attack.sigma",
                AttackKind::Random if !(self.attack.range > 0.0) => "attack.R",
                _ => "attack.fallback_range",
            };
            return fail(key, e.to_string());
        }
        if self.free_rider_count > f.n_clients {
            return fail(
                "free_rider_count",
                format!("{} free riders among {} clients", self.free_rider_count, f.n_clients),
            );
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return fail("hidden", "hidden layer widths must be positive".into());
        }
        if let Err(e) = self.detector.validate() {
            return fail("detector", e.to_string());
        }
        if let Some(dp) = &self.dp {
            if let Err(e) = dp.validate() {
                return fail("dp", e.to_string());
            }
        }
        for q in &self.sweep.q {
            if !(*q > 0.0 && *q <= 1.0) {
                return fail("sweep.q", format!("participation ratio must lie in (0,1], got {q}"));
            }
        }
        for eta in &self.sweep.eta {
            if !(*eta > 0.0 && *eta <= 1.0) {
                return fail("sweep.eta", format!("eta must lie in (0,1], got {eta}"));
            }
        }
        if let Some(c) = self.sweep.free_rider_count.iter().find(|&&c| c > f.n_clients) {
            return fail("sweep.free_rider_count", format!("{c} free riders among {} clients", f.n_clients));
        }
        Ok(())
    }
}

/// 1-based line of `section.key` (or a top-level `key`) in `text`, or of
/// the section header when the key itself is absent.
fn locate(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", dotted),
    };
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            let name = line.split('=').next().unwrap_or("").trim();
            if name == key || name == format!("\"{key}\"") {
                return Some(i + 1);
            }
        }
    }
    header_line
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn eta_out_of_range_names_line() {
        let err = parse("seeds = [1]\n\n[fed]\nrounds = 10\neta = 1.5\n").unwrap_err();
        assert_eq!(err.line(), Some(5));
        assert!(err.to_string().contains("eta must lie in (0,1]"), "{err}");
    }

    #[test]
    fn advanced_delta_needs_sigma() {
        let err = parse("[attack]\nkind = \"advanced_delta\"\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "attack.sigma"));
        assert_eq!(err.line(), Some(1));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse("[fed]\netta = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(msg.contains("etta") && msg.contains("line 2"), "{msg}");
        assert!(parse("colour = 1\n").is_err());
        assert!(parse("[sweep]\nlr = [0.1]\n").is_err());
    }

    #[test]
    fn type_errors_rejected() {
        assert!(parse("[fed]\nrounds = \"ten\"\n").is_err());
    }

    #[test]
    fn resolved_form_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.dp = Some(DpConfig::default());
        cfg.attack = AttackConfig::advanced_delta(1e-3);
        cfg.sweep.free_rider_count = vec![1, 5];
        let text = cfg.to_toml();
        assert_eq!(parse(&text).unwrap(), cfg);
    }
}
