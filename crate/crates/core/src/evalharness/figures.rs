//! Plot-data files. Rendering is left to external tools.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::output::std_curves_csv;
use super::{ExperimentResult, HarnessError};

pub const DEFAULT_HIST_BINS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    StdCurves,
    EnergyScatter,
    EnergyHist,
}

impl FigureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "std_curves" => Some(FigureKind::StdCurves),
            "energy_scatter" => Some(FigureKind::EnergyScatter),
            "energy_hist" => Some(FigureKind::EnergyHist),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureFile {
    pub name: String,
    pub contents: String,
}

/// Produces plot data for `kind`. Scatter and histogram files are emitted
/// for every snapshot round and every scored detector.
pub fn figure_data(result: &ExperimentResult, kind: FigureKind, bins: usize) -> Result<Vec<FigureFile>, HarnessError> {
    match kind {
        FigureKind::StdCurves => Ok(vec![FigureFile {
            name: "std_curves.csv".into(),
            contents: std_curves_csv(result),
        }]),
        FigureKind::EnergyScatter | FigureKind::EnergyHist => {
            if bins == 0 {
                return Err(HarnessError::Invalid("histogram needs at least one bin".into()));
            }
            let mut files = Vec::new();
            for snap in &result.snapshots {
                for out in &snap.outputs {
                    let stem = format!("{}_{}_round_{}", figure_stem(kind), out.kind.name(), snap.round);
                    let contents = match kind {
                        FigureKind::EnergyScatter => scatter(&snap.client_ids, &out.scores, &snap.is_free_rider),
                        _ => histogram(&out.scores, &snap.is_free_rider, bins),
                    };
                    files.push(FigureFile {
                        name: format!("{stem}.csv"),
                        contents,
                    });
                }
            }
            if files.is_empty() {
                return Err(HarnessError::Missing("detector scores in any snapshot round".into()));
            }
            Ok(files)
        }
    }
}

fn figure_stem(kind: FigureKind) -> &'static str {
    match kind {
        FigureKind::StdCurves => "std_curves",
        FigureKind::EnergyScatter => "energy_scatter",
        FigureKind::EnergyHist => "energy_hist",
    }
}

fn scatter(ids: &[usize], scores: &[f64], truth: &[bool]) -> String {
    let mut s = String::from("client_id,score,is_free_rider\n");
    for ((c, v), t) in ids.iter().zip(scores).zip(truth) {
        let _ = writeln!(s, "{c},{v:e},{}", u8::from(*t));
    }
    s
}

/// Equal-width bins over `[min, max]` of all scores, the last bin closed.
/// `stacked_top` is the normal count plus the free-rider count, so free
/// riders plot on top of normal clients.
fn histogram(scores: &[f64], truth: &[bool], bins: usize) -> String {
    let (counts_normal, counts_fr, lo, width) = bin_counts(scores, truth, bins);
    let mut s = String::from("bin,lower,upper,normal,free_rider,stacked_top\n");
    for b in 0..bins {
        let _ = writeln!(
            s,
            "{b},{:e},{:e},{},{},{}",
            lo + width * b as f64,
            lo + width * (b + 1) as f64,
            counts_normal[b],
            counts_fr[b],
            counts_normal[b] + counts_fr[b]
        );
    }
    s
}

pub(crate) fn bin_counts(scores: &[f64], truth: &[bool], bins: usize) -> (Vec<usize>, Vec<usize>, f64, f64) {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut normal = vec![0; bins];
    let mut fr = vec![0; bins];
    for (v, t) in scores.iter().zip(truth) {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        if *t {
            fr[b] += 1;
        } else {
            normal[b] += 1;
        }
    }
    (normal, fr, lo, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_covers_every_score() {
        let scores = [0.0, 0.5, 1.0, 1.0, 0.25];
        let truth = [false, false, true, false, false];
        let (n, f, lo, w) = bin_counts(&scores, &truth, 4);
        assert_eq!(n.iter().sum::<usize>() + f.iter().sum::<usize>(), 5);
        assert_eq!(f[3], 1);
        assert_eq!(lo, 0.0);
        assert_eq!(w, 0.25);
    }

    #[test]
    fn constant_scores_fall_in_first_bin() {
        let (n, _, _, _) = bin_counts(&[2.0, 2.0], &[false, false], 30);
        assert_eq!(n[0], 2);
    }
}
