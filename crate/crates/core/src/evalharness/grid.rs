//! Parameter sweeps and multi-seed AUC tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::{load_result, write_experiment};
use super::{run_experiment, ExperimentConfig, ExperimentResult, HarnessError, PartitionKind};
use crate::attacks::AttackKind;
use crate::detect::DetectorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDim {
    Eta,
    #[serde(rename = "R")]
    Range,
    Sigma,
    FreeRiderCount,
    Partition,
    Q,
}

impl SweepDim {
    pub fn name(self) -> &'static str {
        match self {
            SweepDim::Eta => "eta",
            SweepDim::Range => "R",
            SweepDim::Sigma => "sigma",
            SweepDim::FreeRiderCount => "free_rider_count",
            SweepDim::Partition => "partition",
            SweepDim::Q => "q",
        }
    }

    /// The value of this dimension in `cfg`, as a display string.
    pub fn read(self, cfg: &ExperimentConfig) -> String {
        match self {
            SweepDim::Eta => cfg.fed.eta.to_string(),
            SweepDim::Range => cfg.attack.range.to_string(),
            SweepDim::Sigma => cfg.attack.sigma.map_or("-".into(), |s| s.to_string()),
            SweepDim::FreeRiderCount => cfg.free_rider_count.to_string(),
            SweepDim::Partition => cfg.partition.name().to_string(),
            SweepDim::Q => cfg
                .dp
                .as_ref()
                .map_or("-".into(), |d| d.participation_ratio.to_string()),
        }
    }

    /// Overwrites this dimension in `cfg` with the base config's value, so
    /// two configs differing only here compare equal.
    fn neutralize(self, cfg: &mut ExperimentConfig, base: &ExperimentConfig) {
        match self {
            SweepDim::Eta => cfg.fed.eta = base.fed.eta,
            SweepDim::Range => cfg.attack.range = base.attack.range,
            SweepDim::Sigma => cfg.attack.sigma = base.attack.sigma,
            SweepDim::FreeRiderCount => {
                cfg.free_rider_count = base.free_rider_count;
                cfg.top_k = base.top_k;
            }
            SweepDim::Partition => cfg.partition = base.partition,
            SweepDim::Q => {
                if let (Some(d), Some(b)) = (cfg.dp.as_mut(), base.dp.as_ref()) {
                    d.participation_ratio = b.participation_ratio;
                }
            }
        }
    }
}

/// Values per swept dimension; empty lists leave the base value in place.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub eta: Vec<f64>,
    #[serde(rename = "R")]
    pub range: Vec<f64>,
    pub sigma: Vec<f64>,
    pub free_rider_count: Vec<usize>,
    pub partition: Vec<PartitionKind>,
    pub q: Vec<f64>,
}

impl SweepSpec {
    pub fn dims(&self) -> Vec<SweepDim> {
        let mut d = Vec::new();
        if !self.eta.is_empty() {
            d.push(SweepDim::Eta);
        }
        if !self.range.is_empty() {
            d.push(SweepDim::Range);
        }
        if !self.sigma.is_empty() {
            d.push(SweepDim::Sigma);
        }
        if !self.free_rider_count.is_empty() {
            d.push(SweepDim::FreeRiderCount);
        }
        if !self.partition.is_empty() {
            d.push(SweepDim::Partition);
        }
        if !self.q.is_empty() {
            d.push(SweepDim::Q);
        }
        d
    }

    /// Cartesian product of the sweep applied to `base`.
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut cells = vec![base.clone()];
        fn apply<T: Clone>(cells: Vec<ExperimentConfig>, values: &[T], set: impl Fn(&mut ExperimentConfig, T)) -> Vec<ExperimentConfig> {
            if values.is_empty() {
                return cells;
            }
            cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(|v| {
                        let mut c = c.clone();
                        set(&mut c, v.clone());
                        c
                    }).collect::<Vec<_>>()
                })
                .collect()
        }
        cells = apply(cells, &self.eta, |c, v| c.fed.eta = v);
        cells = apply(cells, &self.range, |c, v| c.attack.range = v);
        cells = apply(cells, &self.sigma, |c, v| {
            c.attack.sigma = Some(v);
            if c.attack.kind == AttackKind::Random {
                c.attack.range = v;
            }
        });
        cells = apply(cells, &self.free_rider_count, |c, v| c.free_rider_count = v);
        cells = apply(cells, &self.partition, |c, v| c.partition = v);
        cells = apply(cells, &self.q, |c, v| {
            c.dp.get_or_insert_with(Default::default).participation_ratio = v
        });
        cells
    }
}

/// Outcome of one grid cell.
#[derive(Debug)]
pub struct GridCell {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    /// Loaded from an earlier run instead of recomputed.
    pub cached: bool,
    pub outcome: Result<ExperimentResult, HarnessError>,
}

/// Runs every sweep point for every seed. With `out` set, completed cells
/// are written there and cells whose `result.json` already exists are
/// loaded instead of rerun. A failing cell is reported in its
/// [`GridCell`] and does not stop the others.
pub fn grid_run(
    base: &ExperimentConfig,
    sweep: &SweepSpec,
    seeds: &[u64],
    out: Option<&Path>,
    workers: usize,
) -> Vec<GridCell> {
    let configs: Vec<ExperimentConfig> = sweep
        .expand(base)
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| c.with_seed(s)))
        .collect();
    let run_cell = |cfg: ExperimentConfig| -> GridCell {
        let fingerprint = cfg.fingerprint();
        if let Some(out) = out {
            let path = out.join(&fingerprint).join("result.json");
            if path.exists() {
                match load_result(&path) {
                    Ok(r) if r.config == cfg => {
                        info!("[evalharness] cell {fingerprint}: cached");
                        return GridCell {
                            config: cfg,
                            fingerprint,
                            cached: true,
                            outcome: Ok(r),
                        };
                    }
                    _ => warn!("[evalharness] cell {fingerprint}: unreadable cache, recomputing"),
                }
            }
        }
        let outcome = run_experiment(&cfg).and_then(|run| {
            if let Some(out) = out {
                write_experiment(out, &run, false)?;
            }
            Ok(run.result)
        });
        if let Err(e) = &outcome {
            warn!("[evalharness] cell {fingerprint} failed: {e}");
        }
        GridCell {
            config: cfg,
            fingerprint,
            cached: false,
            outcome,
        }
    };
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(|| configs.into_par_iter().map(run_cell).collect()),
        Err(_) => configs.into_iter().map(run_cell).collect(),
    }
}

/// Mean and population standard deviation of one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub value: String,
    pub detector: DetectorKind,
    pub round: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Aggregates AUCs over seeds, keyed by the value of `dim`. Every result
/// must share the same configuration apart from `dim` and the seed.
pub fn auc_curves(results: &[ExperimentResult], dim: Option<SweepDim>) -> Result<Vec<AucRow>, HarnessError> {
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let normalize = |r: &ExperimentResult| {
        let mut c = r.config.with_seed(0);
        if let Some(d) = dim {
            d.neutralize(&mut c, &first.config);
        }
        c
    };
    let reference = normalize(first);
    let mut cells: BTreeMap<(String, DetectorKind, usize), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in results {
        if normalize(r) != reference {
            return Err(HarnessError::Mismatch(format!(
                "run {} differs from {} outside the swept dimension",
                r.fingerprint, first.fingerprint
            )));
        }
        let value = dim.map_or("-".to_string(), |d| d.read(&r.config));
        if !order.contains(&value) {
            order.push(value.clone());
        }
        for snap in &r.snapshots {
            for (&kind, auc) in &snap.aucs {
                if let Some(a) = auc {
                    cells.entry((value.clone(), kind, snap.round)).or_default().push(*a);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for value in &order {
        for ((v, kind, round), xs) in &cells {
            if v != value {
                continue;
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            rows.push(AucRow {
                value: v.clone(),
                detector: *kind,
                round: *round,
                mean,
                std: crate::fedsim::population_std(xs),
                runs: xs.len(),
            });
        }
    }
    Ok(rows)
}

pub fn auc_curves_csv(rows: &[AucRow], dim: Option<SweepDim>) -> String {
    let mut s = format!("{},detector,round,auc_mean,auc_std,runs\n", dim.map_or("cell", SweepDim::name));
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:e},{:e},{}", r.value, r.detector.name(), r.round, r.mean, r.std, r.runs);
    }
    s
}
