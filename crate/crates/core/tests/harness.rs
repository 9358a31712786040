use std::collections::BTreeSet;

use fedrider::detect::{auc_from_labels, DetectorKind};
use fedrider::evalharness::{
    auc_curves, figure_data, grid_run, load_result, run_experiment, write_experiment, DatasetSpec, ExperimentConfig,
    FigureKind, SweepDim, SweepSpec,
};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSpec::Synth {
            num_classes: 3,
            per_class: 20,
            feature_dim: 5,
            spread: 0.2,
        },
        hidden: vec![4],
        free_rider_count: 2,
        ..ExperimentConfig::default()
    };
    c.fed.n_clients = 12;
    c.fed.rounds = 3;
    c.fed.snapshot_rounds = vec![2, 3];
    c.detector.epochs = 10;
    c.detector.ae_epochs = 10;
    c
}

#[test]
fn sweep_of_two_etas_and_two_seeds_gives_four_results() {
    let sweep = SweepSpec {
        eta: vec![0.3, 1.0],
        ..SweepSpec::default()
    };
    let cells = grid_run(&tiny(), &sweep, &[0, 1], None, 2);
    assert_eq!(cells.len(), 4);
    let fps: BTreeSet<&str> = cells.iter().map(|c| c.fingerprint.as_str()).collect();
    assert_eq!(fps.len(), 4);
    assert!(cells.iter().all(|c| c.outcome.is_ok()));
}

#[test]
fn rerun_with_cache_computes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = SweepSpec {
        free_rider_count: vec![1, 3],
        ..SweepSpec::default()
    };
    let first = grid_run(&tiny(), &sweep, &[5], Some(dir.path()), 1);
    assert!(first.iter().all(|c| !c.cached && c.outcome.is_ok()));
    let second = grid_run(&tiny(), &sweep, &[5], Some(dir.path()), 1);
    assert!(second.iter().all(|c| c.cached));
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.outcome.as_ref().unwrap(), b.outcome.as_ref().unwrap());
    }
}

#[test]
fn failing_cell_does_not_abort_grid() {
    let sweep = SweepSpec {
        free_rider_count: vec![1, 50],
        ..SweepSpec::default()
    };
    let cells = grid_run(&tiny(), &sweep, &[0], None, 1);
    assert_eq!(cells.len(), 2);
    assert!(cells[0].outcome.is_ok());
    assert!(cells[1].outcome.is_err());
}

#[test]
fn single_cell_table_has_zero_spread() {
    let r = run_experiment(&tiny()).unwrap().result;
    let rows = auc_curves(std::slice::from_ref(&r), None).unwrap();
    assert_eq!(rows.len(), 2 * DetectorKind::ALL.len());
    for row in rows {
        assert_eq!(row.runs, 1);
        assert_eq!(row.std, 0.0);
        let snap = r.snapshot(row.round).unwrap();
        assert_eq!(Some(row.mean), snap.aucs[&row.detector]);
    }
}

#[test]
fn auc_table_matches_emitted_scores() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = SweepSpec {
        eta: vec![0.5, 1.0],
        ..SweepSpec::default()
    };
    let cells = grid_run(&tiny(), &sweep, &[0, 1], Some(dir.path()), 1);
    let results: Vec<_> = cells.into_iter().map(|c| c.outcome.unwrap()).collect();
    let rows = auc_curves(&results, Some(SweepDim::Eta)).unwrap();
    for row in &rows {
        let mut recomputed = Vec::new();
        for r in results.iter().filter(|r| SweepDim::Eta.read(&r.config) == row.value) {
            // re-read the CSV written for this cell
            let csv = std::fs::read_to_string(dir.path().join(&r.fingerprint).join(format!("scores_round_{}.csv", row.round))).unwrap();
            let mut lines = csv.lines();
            let header: Vec<&str> = lines.next().unwrap().split(',').collect();
            let col = match row.detector {
                DetectorKind::Autoencoder => "ae_error",
                DetectorKind::Dagmm => "dagmm_energy",
                DetectorKind::Stddagmm => "stddagmm_energy",
            };
            let ci = header.iter().position(|h| *h == col).unwrap();
            let fi = header.iter().position(|h| *h == "is_free_rider").unwrap();
            let (mut scores, mut labels) = (Vec::new(), Vec::new());
            for line in lines {
                let f: Vec<&str> = line.split(',').collect();
                scores.push(f[ci].parse::<f64>().unwrap());
                labels.push(f[fi] == "1");
            }
            recomputed.push(auc_from_labels(&scores, &labels).unwrap());
        }
        let mean = recomputed.iter().sum::<f64>() / recomputed.len() as f64;
        assert_eq!(row.runs, 2);
        assert_eq!(row.mean, mean);
    }
}

#[test]
fn mismatched_configs_rejected() {
    let a = run_experiment(&tiny()).unwrap().result;
    let mut other = tiny();
    other.fed.eta = 0.5;
    let b = run_experiment(&other).unwrap().result;
    assert!(auc_curves(&[a.clone(), b.clone()], None).is_err());
    assert!(auc_curves(&[a, b], Some(SweepDim::Eta)).is_ok());
}

#[test]
fn result_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&tiny()).unwrap();
    let out = write_experiment(dir.path(), &run, true).unwrap();
    assert_eq!(out.file_name().unwrap().to_str().unwrap(), run.result.fingerprint);
    for name in ["result.json", "std_curves.csv", "scores_round_2.csv", "scores_round_3.csv", "round_2.snap"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    assert_eq!(load_result(&out.join("result.json")).unwrap(), run.result);
}

#[test]
fn figure_files_have_expected_shapes() {
    let r = run_experiment(&tiny()).unwrap().result;
    let std = figure_data(&r, FigureKind::StdCurves, 30).unwrap();
    assert_eq!(std.len(), 1);
    let lines: Vec<&str> = std[0].contents.lines().collect();
    // header, truth row, one row per round
    assert_eq!(lines.len(), 2 + 3);
    assert_eq!(lines[0].split(',').count(), 1 + 12);

    let scatter = figure_data(&r, FigureKind::EnergyScatter, 30).unwrap();
    assert_eq!(scatter.len(), 2 * DetectorKind::ALL.len());
    for f in &scatter {
        assert_eq!(f.contents.lines().count(), 1 + 12, "{}", f.name);
    }
    let hist = figure_data(&r, FigureKind::EnergyHist, 7).unwrap();
    for f in &hist {
        assert_eq!(f.contents.lines().count(), 1 + 7, "{}", f.name);
    }
}

#[test]
fn fingerprint_depends_on_seed_and_config() {
    let a = tiny();
    assert_eq!(a.fingerprint(), a.clone().fingerprint());
    assert_ne!(a.fingerprint(), a.with_seed(1).fingerprint());
    let mut b = a.clone();
    b.detector.epochs += 1;
    assert_ne!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.fingerprint().len(), 16);
}
