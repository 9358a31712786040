//! Experiment orchestration: one seeded run end to end, parameter grids,
//! multi-seed AUC tables and plot-data files.

mod figures;
mod grid;
mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use figures::{figure_data, FigureFile, FigureKind, DEFAULT_HIST_BINS};
pub use grid::{auc_curves, auc_curves_csv, grid_run, AucRow, GridCell, SweepDim, SweepSpec};
pub use output::{load_result, load_snapshot, scores_csv, std_curves_csv, write_experiment, write_snapshot};

use crate::attacks::AttackConfig;
use crate::data::{load_idx, partition_iid, partition_sorted, synth_dataset, DataError, Dataset, Partition};
use crate::detect::{
    auc, flatten, rank_report, run_detector, std_stat, DetectError, DetectorConfig, DetectorKind, DetectorOutput,
    FlatUpdate,
};
use crate::fedsim::{choose_free_riders, FedConfig, FedError, Federation, RoundRecord};
use crate::model::MlpSpec;
use crate::numkit::SgdConfig;
use crate::privacy::DpConfig;
use crate::seeding;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error("detector {detector} failed at round {round}: {source}")]
    Detector {
        detector: &'static str,
        round: usize,
        source: DetectError,
    },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("results do not share a configuration: {0}")]
    Mismatch(String),
    #[error("no data for {0}")]
    Missing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian class blobs; see [`synth_dataset`].
    Synth {
        num_classes: usize,
        per_class: usize,
        feature_dim: usize,
        spread: f64,
    },
    /// IDX image/label files; pixels scaled to [0,1].
    Mnist { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synth {
            num_classes: 10,
            per_class: 200,
            feature_dim: 20,
            spread: 0.15,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset, DataError> {
        match self {
            DatasetSpec::Synth {
                num_classes,
                per_class,
                feature_dim,
                spread,
            } => synth_dataset(
                *num_classes,
                *per_class,
                *feature_dim,
                *spread,
                seeding::derive_seed(seed, &[seeding::DATASET]),
            ),
            DatasetSpec::Mnist { images, labels } => load_idx(images, labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    /// Label-sorted contiguous shards.
    Sorted,
}

impl PartitionKind {
    pub fn name(self) -> &'static str {
        match self {
            PartitionKind::Iid => "iid",
            PartitionKind::Sorted => "sorted",
        }
    }

    pub fn build(self, ds: &Dataset, n_clients: usize, seed: u64) -> Result<Partition, DataError> {
        match self {
            PartitionKind::Iid => partition_iid(ds, n_clients, seeding::derive_seed(seed, &[seeding::PARTITION])),
            PartitionKind::Sorted => partition_sorted(ds, n_clients),
        }
    }
}

/// Fully resolved description of one run. `fed.seed` is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionKind,
    pub hidden: Vec<usize>,
    pub fed: FedConfig,
    pub attack: AttackConfig,
    pub free_rider_count: usize,
    pub detectors: Vec<DetectorKind>,
    pub detector: DetectorConfig,
    pub dp: Option<DpConfig>,
    /// Rank cut-off for flagging; 0 means "number of free riders".
    pub top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            partition: PartitionKind::Iid,
            hidden: vec![16],
            fed: FedConfig {
                n_clients: 100,
                eta: 1.0,
                rounds: 80,
                snapshot_rounds: vec![5, 80],
                local: SgdConfig::default(),
                seed: 0,
            },
            attack: AttackConfig::random(1e-4),
            free_rider_count: 1,
            detectors: DetectorKind::ALL.to_vec(),
            detector: DetectorConfig::default(),
            dp: None,
            top_k: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.fed.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.fed.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.fed.validate()?;
        self.attack.validate().map_err(FedError::from)?;
        if let Some(dp) = &self.dp {
            dp.validate().map_err(FedError::from)?;
        }
        self.detector
            .validate()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        if self.free_rider_count > self.fed.n_clients {
            return Err(HarnessError::Invalid(format!(
                "{} free riders among {} clients",
                self.free_rider_count, self.fed.n_clients
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(HarnessError::Invalid("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_top_k(&self) -> usize {
        if self.top_k == 0 {
            self.free_rider_count
        } else {
            self.top_k
        }
    }

    /// Stable identifier: hash of the canonical JSON form (seed included).
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Detector results on one snapshot round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotResult {
    pub round: usize,
    /// Submitting clients, ascending.
    pub client_ids: Vec<usize>,
    pub is_free_rider: Vec<bool>,
    pub fallback: Vec<bool>,
    pub stds: Vec<f64>,
    pub outputs: Vec<DetectorOutput>,
    /// `None` when the round had only one class of submitter.
    pub aucs: BTreeMap<DetectorKind, Option<f64>>,
    /// 1-based rank of every submitter, per detector, aligned with `client_ids`.
    pub ranks: BTreeMap<DetectorKind, Vec<usize>>,
    /// AUC of the raw STD statistic with free riders scored by low STD.
    pub std_auc: Option<f64>,
}

impl SnapshotResult {
    pub fn output(&self, kind: DetectorKind) -> Option<&DetectorOutput> {
        self.outputs.iter().find(|o| o.kind == kind)
    }

    pub fn free_rider_ranks(&self, kind: DetectorKind) -> Vec<usize> {
        self.ranks
            .get(&kind)
            .map(|r| {
                r.iter()
                    .zip(&self.is_free_rider)
                    .filter(|(_, &fr)| fr)
                    .map(|(&rank, _)| rank)
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub free_riders: BTreeSet<usize>,
    /// `std_series[r][c]`: STD of client `c`'s update in round `r+1`, if it submitted.
    pub std_series: Vec<Vec<Option<f64>>>,
    /// Global-model accuracy on honest clients' data after each round.
    pub accuracy: Vec<f64>,
    pub snapshots: Vec<SnapshotResult>,
}

impl ExperimentResult {
    pub fn snapshot(&self, round: usize) -> Option<&SnapshotResult> {
        self.snapshots.iter().find(|s| s.round == round)
    }
}

/// Result plus the raw records of the snapshot rounds.
pub struct ExperimentRun {
    pub result: ExperimentResult,
    pub records: Vec<RoundRecord>,
}

/// Runs every configured detector on one round's submissions.
pub fn score_round(
    record: &RoundRecord,
    detectors: &[DetectorKind],
    cfg: &DetectorConfig,
    top_k: usize,
    seed: u64,
) -> Result<SnapshotResult, HarnessError> {
    let batch: Vec<FlatUpdate> = record.updates.iter().map(flatten).collect();
    let client_ids: Vec<usize> = batch.iter().map(|u| u.client_id).collect();
    let is_free_rider: Vec<bool> = client_ids.iter().map(|c| record.is_free_rider(*c)).collect();
    let stds = batch
        .iter()
        .map(|u| std_stat(&u.vector))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| HarnessError::Detector {
            detector: "std",
            round: record.round,
            source,
        })?;
    let truth: BTreeSet<usize> = client_ids
        .iter()
        .zip(&is_free_rider)
        .filter(|(_, &f)| f)
        .map(|(&c, _)| c)
        .collect();
    let neg_std: Vec<f64> = stds.iter().map(|s| -s).collect();
    let std_auc = crate::detect::auc_from_labels(&neg_std, &is_free_rider).ok();

    let mut outputs = Vec::new();
    let mut aucs = BTreeMap::new();
    let mut ranks = BTreeMap::new();
    for &kind in detectors {
        let det_seed = seeding::derive_seed(seed, &[seeding::DETECTOR, record.round as u64]);
        let out = run_detector(kind, &batch, cfg, record.round, det_seed).map_err(|source| HarnessError::Detector {
            detector: kind.name(),
            round: record.round,
            source,
        })?;
        aucs.insert(kind, auc(&out, &truth).ok());
        let report = rank_report(&out, &truth, top_k);
        let r: Vec<usize> = client_ids
            .iter()
            .map(|&c| report.rank_of(c).expect("every client ranked"))
            .collect();
        ranks.insert(kind, r);
        outputs.push(out);
    }
    Ok(SnapshotResult {
        round: record.round,
        client_ids,
        is_free_rider,
        fallback: record.updates.iter().map(|u| u.fallback).collect(),
        stds,
        outputs,
        aucs,
        ranks,
        std_auc,
    })
}

/// One full seeded run: federation, per-round STD bookkeeping and
/// detection at every snapshot round.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun, HarnessError> {
    cfg.validate()?;
    let seed = cfg.seed();
    let dataset = cfg.dataset.load(seed)?;
    let partition = cfg.partition.build(&dataset, cfg.fed.n_clients, seed)?;
    let spec = MlpSpec {
        input_dim: dataset.feature_dim(),
        hidden: cfg.hidden.clone(),
        num_classes: dataset.num_classes(),
    };
    let free_riders = choose_free_riders(cfg.fed.n_clients, cfg.free_rider_count, seed);
    let mut fed = Federation::new(
        cfg.fed.clone(),
        spec,
        &dataset,
        &partition,
        free_riders.clone(),
        cfg.attack.clone(),
        cfg.dp.clone(),
    )?;
    let snapshot_rounds: BTreeSet<usize> = cfg.fed.snapshot_rounds.iter().copied().collect();
    let mut std_series = Vec::with_capacity(cfg.fed.rounds);
    let mut accuracy = Vec::with_capacity(cfg.fed.rounds);
    let mut snapshots = Vec::new();
    let mut records = Vec::new();

    for _ in 0..cfg.fed.rounds {
        let record = fed.run_round()?;
        let mut row = vec![None; cfg.fed.n_clients];
        for u in &record.updates {
            row[u.client_id] = Some(crate::fedsim::population_std(u.grad.values()));
        }
        std_series.push(row);
        accuracy.push(fed.train_accuracy().map_err(FedError::from)?);
        if snapshot_rounds.contains(&record.round) {
            if record.updates.len() < 2 {
                info!("[evalharness] round {}: too few submissions to score", record.round);
            } else {
                let snap = score_round(&record, &cfg.detectors, &cfg.detector, cfg.effective_top_k(), seed)?;
                let summary: Vec<String> = snap
                    .aucs
                    .iter()
                    .map(|(k, a)| format!("{}={}", k.name(), a.map_or("-".into(), |v| format!("{v:.4}"))))
                    .collect();
                info!("[evalharness] round {}: {}", record.round, summary.join(" "));
                snapshots.push(snap);
            }
            records.push(record);
        }
    }
    Ok(ExperimentRun {
        result: ExperimentResult {
            fingerprint: cfg.fingerprint(),
            seed,
            config: cfg.clone(),
            free_riders,
            std_series,
            accuracy,
            snapshots,
        },
        records,
    })
}
