use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use fedrider::config::{load_config, ConfigError, RunConfig};
use fedrider::detect::{DetectorConfig, DetectorKind};
use fedrider::evalharness::{
    auc_curves, auc_curves_csv, figure_data, grid_run, load_result, load_snapshot, run_experiment, score_round,
    scores_csv, write_experiment, ExperimentResult, FigureKind, HarnessError, DEFAULT_HIST_BINS,
};
use fedrider::selftest;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  an experiment or detector failed
  2  unknown flag or bad command-line usage
  3  config file unreadable or invalid
  4  snapshot or result file not found
  5  snapshot or result file malformed
  6  cannot write output
  7  selftest found a failing check
  8  grid finished but some cells failed";

#[derive(Debug, Parser)]
#[command(name = "fedrider", version, about = "Federated free-rider simulation and detection", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment per seed and write its result directory.
    Run(RunArgs),
    /// Run the config's sweep for every seed and write an AUC table.
    Grid(RunArgs),
    /// Re-run detectors on a saved round snapshot; prints CSV.
    Score(ScoreArgs),
    /// Emit plot data from a saved result.
    Figure(FigureArgs),
    /// Gradient checks and oracle comparisons.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Results directory [default: config `output`, else $FEDRIDER_OUT, else ./results]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
    /// Experiments run in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// A `round_<j>.snap` file written by `run`.
    #[arg(long)]
    snapshot: PathBuf,
    /// autoencoder, dagmm, stddagmm or all.
    #[arg(long, default_value = "all")]
    detector: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take detector settings and top-k from this config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FigureArgs {
    /// std_curves, energy_scatter, energy_hist or all.
    #[arg(long, default_value = "all")]
    figure: String,
    /// A result directory or its result.json; alternatively give --config and --seed.
    result: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where figure files go [default: <result dir>/figures]; with --config, the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram bin count.
    #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
    bins: usize,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Harness(HarnessError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("selftest failed: {0}")]
    Selftest(String),
    #[error("{failed} of {total} grid cells failed")]
    Grid { failed: usize, total: usize },
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match &e {
            HarnessError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Missing(format!("{} not found", path.display()))
            }
            _ => CliError::Harness(e),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(HarnessError::Format { .. }) => 5,
            CliError::Harness(HarnessError::Io { .. }) => 6,
            CliError::Harness(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Write { .. } => 6,
            CliError::Selftest(_) => 7,
            CliError::Grid { .. } => 8,
        }
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.or_else(|| cfg.and_then(|c| c.output.clone()))
        .or_else(|| std::env::var_os("FEDRIDER_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn seeds(cfg: &RunConfig, flag: Option<u64>) -> Vec<u64> {
    flag.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let err = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err)?;
    }
    fs::write(path, contents).map_err(err)
}

fn summary_line(r: &ExperimentResult) -> String {
    let mut parts = vec![format!("{} seed {}", r.fingerprint, r.seed)];
    for snap in &r.snapshots {
        for (kind, auc) in &snap.aucs {
            let ranks = snap.free_rider_ranks(*kind);
            let auc = auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            if ranks.len() == 1 {
                parts.push(format!("r{} {} auc={} rank={}", snap.round, kind.name(), auc, ranks[0]));
            } else {
                parts.push(format!("r{} {} auc={}", snap.round, kind.name(), auc));
            }
        }
    }
    parts.join("  ")
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let out = output_dir(args.out.out, Some(&cfg));
    let seeds = seeds(&cfg, args.seed);
    let outcomes: Vec<Result<(PathBuf, ExperimentResult), CliError>> = pool(args.workers).install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let run = run_experiment(&cfg.experiment(seed))?;
                let dir = write_experiment(&out, &run, true)?;
                Ok((dir, run.result))
            })
            .collect()
    });
    for outcome in outcomes {
        let (dir, result) = outcome?;
        println!("{}", summary_line(&result));
        println!("  -> {}", dir.display());
    }
    Ok(())
}

fn cmd_grid(args: RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let out = output_dir(args.out.out, Some(&cfg));
    let seeds = seeds(&cfg, args.seed);
    let base = cfg.experiment(seeds[0]);
    let cells = grid_run(&base, &cfg.sweep, &seeds, Some(&out), args.workers);
    let total = cells.len();
    let mut results = Vec::new();
    for cell in cells {
        match cell.outcome {
            Ok(r) => {
                println!("{}{}", summary_line(&r), if cell.cached { "  (cached)" } else { "" });
                results.push(r);
            }
            Err(e) => println!("{} failed: {e}", cell.fingerprint),
        }
    }
    let dims = cfg.sweep.dims();
    if dims.len() <= 1 && !results.is_empty() {
        let dim = dims.first().copied();
        let rows = auc_curves(&results, dim)?;
        let path = out.join(format!("auc_curves_{}.csv", base.fingerprint()));
        write_file(&path, auc_curves_csv(&rows, dim).as_bytes())?;
        println!("auc table -> {}", path.display());
    } else if dims.len() > 1 {
        warn!("[cli] several swept dimensions; no AUC table written");
    }
    let failed = total - results.len();
    if failed > 0 {
        return Err(CliError::Grid { failed, total });
    }
    Ok(())
}

fn parse_detectors(s: &str) -> Result<Vec<DetectorKind>, CliError> {
    if s == "all" {
        return Ok(DetectorKind::ALL.to_vec());
    }
    s.split(',')
        .map(|name| {
            DetectorKind::parse(name.trim())
                .ok_or_else(|| CliError::Usage(format!("unknown detector '{name}' (autoencoder, dagmm, stddagmm, all)")))
        })
        .collect()
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let detectors = parse_detectors(&args.detector)?;
    let (det_cfg, top_k) = match &args.config {
        Some(path) => {
            let cfg = load_config(path)?;
            (cfg.detector.clone(), cfg.top_k)
        }
        None => (DetectorConfig::default(), 0),
    };
    let record = load_snapshot(&args.snapshot)?;
    let top_k = if top_k == 0 { record.free_rider_ids.len() } else { top_k };
    let snap = score_round(&record, &detectors, &det_cfg, top_k, args.seed)?;
    let csv = scores_csv(&snap);
    match args.out {
        Some(path) => write_file(&path, csv.as_bytes()),
        None => std::io::stdout().write_all(csv.as_bytes()).map_err(|source| CliError::Write {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn cmd_figure(args: FigureArgs) -> Result<(), CliError> {
    let kinds: Vec<FigureKind> = if args.figure == "all" {
        vec![FigureKind::StdCurves, FigureKind::EnergyScatter, FigureKind::EnergyHist]
    } else {
        vec![FigureKind::parse(&args.figure).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown figure '{}' (std_curves, energy_scatter, energy_hist, all)",
                args.figure
            ))
        })?]
    };
    let result_path = match (&args.result, &args.config) {
        (Some(p), _) if p.is_dir() => p.join("result.json"),
        (Some(p), _) => p.clone(),
        (None, Some(cfg_path)) => {
            let cfg = load_config(cfg_path)?;
            let seed = args.seed.unwrap_or_else(|| cfg.first_seed());
            let out = output_dir(args.out.clone(), Some(&cfg));
            out.join(cfg.experiment(seed).fingerprint()).join("result.json")
        }
        (None, None) => return Err(CliError::Usage("figure needs a result path or --config".into())),
    };
    let result = load_result(&result_path)?;
    let dest = match (&args.result, &args.out) {
        (Some(_), Some(o)) => o.clone(),
        _ => result_path.parent().unwrap_or(Path::new(".")).join("figures"),
    };
    for kind in kinds {
        for file in figure_data(&result, kind, args.bins)? {
            let path = dest.join(&file.name);
            write_file(&path, file.contents.as_bytes())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for check in selftest::run_all(args.seed) {
        println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
        if !check.passed {
            failed.push(check.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failed.join(", ")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Score(a) => cmd_score(a),
        Command::Figure(a) => cmd_figure(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => {
            info!("[cli] done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
