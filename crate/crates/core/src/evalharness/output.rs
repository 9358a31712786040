//! On-disk layout: `<out>/<fingerprint>/{result.json, scores_round_<j>.csv,
//! std_curves.csv, round_<j>.snap}`. Every file is written to a temporary
//! name and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ExperimentResult, ExperimentRun, HarnessError, SnapshotResult};
use crate::detect::DetectorKind;
use crate::fedsim::RoundRecord;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

/// One row per submitting client.
pub fn scores_csv(snap: &SnapshotResult) -> String {
    let mut s = String::from(
        "round,client_id,is_free_rider,std,ae_error,dagmm_energy,stddagmm_energy,dagmm_rank,stddagmm_rank\n",
    );
    let score = |kind: DetectorKind, i: usize| snap.output(kind).map(|o| o.scores[i]);
    let rank = |kind: DetectorKind, i: usize| {
        snap.ranks
            .get(&kind)
            .map_or(String::new(), |r| r[i].to_string())
    };
    for (i, &c) in snap.client_ids.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{},{},{},{},{}",
            snap.round,
            c,
            u8::from(snap.is_free_rider[i]),
            snap.stds[i],
            fmt_opt(score(DetectorKind::Autoencoder, i)),
            fmt_opt(score(DetectorKind::Dagmm, i)),
            fmt_opt(score(DetectorKind::Stddagmm, i)),
            rank(DetectorKind::Dagmm, i),
            rank(DetectorKind::Stddagmm, i),
        );
    }
    s
}

/// Header `round,client_0..`, a `truth` row (1 = free rider), then one row
/// of update STDs per round; empty cells for clients that did not submit.
pub fn std_curves_csv(result: &ExperimentResult) -> String {
    let n = result.config.fed.n_clients;
    let mut s = String::from("round");
    for c in 0..n {
        let _ = write!(s, ",client_{c}");
    }
    s.push_str("\ntruth");
    for c in 0..n {
        let _ = write!(s, ",{}", u8::from(result.free_riders.contains(&c)));
    }
    s.push('\n');
    for (r, row) in result.std_series.iter().enumerate() {
        let _ = write!(s, "{}", r + 1);
        for v in row {
            let _ = write!(s, ",{}", fmt_opt(*v));
        }
        s.push('\n');
    }
    s
}

pub fn write_snapshot(path: &Path, record: &RoundRecord) -> Result<(), HarnessError> {
    let json = serde_json::to_vec(record).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_atomic(path, &json)
}

pub fn load_snapshot(path: &Path) -> Result<RoundRecord, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn load_result(path: &Path) -> Result<ExperimentResult, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes the full result directory and returns its path. Snapshot
/// records are written only when `with_snapshots` is set.
pub fn write_experiment(out: &Path, run: &ExperimentRun, with_snapshots: bool) -> Result<PathBuf, HarnessError> {
    let dir = out.join(&run.result.fingerprint);
    for snap in &run.result.snapshots {
        write_atomic(
            &dir.join(format!("scores_round_{}.csv", snap.round)),
            scores_csv(snap).as_bytes(),
        )?;
    }
    write_atomic(&dir.join("std_curves.csv"), std_curves_csv(&run.result).as_bytes())?;
    if with_snapshots {
        for rec in &run.records {
            write_snapshot(&dir.join(format!("round_{}.snap", rec.round)), rec)?;
        }
    }
    // result.json last: its presence marks the cell complete.
    let json = serde_json::to_vec_pretty(&run.result).map_err(|e| HarnessError::Format {
        path: dir.clone(),
        detail: e.to_string(),
    })?;
    write_atomic(&dir.join("result.json"), &json)?;
    Ok(dir)
}
