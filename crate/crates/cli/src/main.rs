//! `hemosens` command-line interface.
//!
//! Every stage subcommand runs the cached pipeline up to and including its
//! stage, so `evaluate` after `train-agent` reuses all earlier work. Exit
//! codes: 0 success, 1 configuration error, 2 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hemosens::discretize::Anchoring;
use hemosens::harness::{
    output_root, read_results, run_experiment, run_grid, write_report, DataSource, ExperimentConfig, GridConfig,
    HarnessError, RunRecord, RunStatus, OUTPUT_ROOT_ENV,
};
use hemosens::nnkit::CellKind;
use hemosens::reward::RewardSpec;

#[derive(Parser, Debug)]
#[command(name = "hemosens", version, about = "Offline dueling double DQN for hemodynamic management, with sensitivity sweeps")]
struct Cli {
    /// Output root; falls back to $HEMOSENS_OUT, then ./hemosens-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a cohort and cache its event logs.
    Simulate(ExpArgs),
    /// Load event logs from a directory holding events.jsonl (and optionally static.csv).
    Ingest(ExpArgs),
    /// Rebin, featurize, split and fit preprocessing.
    Discretize(ExpArgs),
    /// Train the recurrent autoencoder.
    Embed(ExpArgs),
    /// Train the mortality model used by short-term rewards.
    TrainReward(ExpArgs),
    /// Train one Q-network per seed.
    TrainAgent(ExpArgs),
    /// Run every stage and write a single-cell report.
    Evaluate(ExpArgs),
    /// Run a grid of cells and write the combined report.
    Grid(GridArgs),
    /// Rebuild a report from a results file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RewardKind {
    ShortTerm,
    LongTerm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnchorMode {
    Reanchor,
    FixedGrid,
}

#[derive(Args, Debug, Default)]
struct ExpArgs {
    /// Experiment TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use ingested logs from this directory instead of simulating.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    sim_seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Bin width in hours (1 or 4).
    #[arg(long)]
    bin_hours: Option<f64>,
    #[arg(long, value_enum)]
    anchoring: Option<AnchorMode>,
    /// Include cumulative-dose history features.
    #[arg(long)]
    history: Option<bool>,
    #[arg(long, value_enum)]
    embedding: Option<Arch>,
    #[arg(long, value_enum)]
    reward: Option<RewardKind>,
    /// Weight C of the long-term utility.
    #[arg(long)]
    c: Option<f64>,
    /// Comma-separated restart seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// DQN training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    embed_epochs: Option<usize>,
    #[arg(long)]
    ground_truth_rollouts: Option<usize>,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Grid TOML with `base` and `axes` tables.
    #[arg(long)]
    config: PathBuf,
    /// Concurrent cells (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// results.jsonl, or a directory containing it.
    #[arg(long)]
    from: PathBuf,
    /// Report directory (default: `report` next to the results file).
    #[arg(long)]
    dir: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Stage(e.to_string())
        }
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

impl ExpArgs {
    fn build(&self, ingest: bool) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        match (&self.input, ingest) {
            (Some(path), _) => {
                if self.patients.is_some() || self.sim_seed.is_some() {
                    return Err(config_err("--patients and --sim-seed apply to simulated data only"));
                }
                cfg.data = DataSource::Ingest { path: path.clone() };
            }
            (None, true) if !matches!(cfg.data, DataSource::Ingest { .. }) => {
                return Err(config_err("ingest requires --input or an ingest data source in the config"));
            }
            _ => {}
        }
        if self.patients.is_some() || self.sim_seed.is_some() {
            let DataSource::Simulate { sim } = &mut cfg.data else {
                return Err(config_err("--patients and --sim-seed apply to simulated data only"));
            };
            sim.n_patients = self.patients.unwrap_or(sim.n_patients);
            sim.seed = self.sim_seed.unwrap_or(sim.seed);
        }
        if let Some(v) = self.split_seed {
            cfg.split_seed = v;
        }
        if let Some(v) = self.bin_hours {
            cfg.bin_hours = v;
        }
        if let Some(v) = self.anchoring {
            cfg.anchoring = match v {
                AnchorMode::Reanchor => Anchoring::Reanchor,
                AnchorMode::FixedGrid => Anchoring::FixedGrid,
            };
        }
        if let Some(v) = self.history {
            cfg.include_history = v;
        }
        if let Some(v) = self.embedding {
            cfg.embedding = match v {
                Arch::Lstm => CellKind::Lstm,
                Arch::Gru => CellKind::Gru,
            };
        }
        cfg.reward = match (self.reward, self.c, cfg.reward) {
            (Some(RewardKind::ShortTerm), Some(_), _) => return Err(config_err("--c applies to the long-term reward only")),
            (Some(RewardKind::ShortTerm), None, _) => RewardSpec::ShortTerm,
            (Some(RewardKind::LongTerm), Some(c), _) | (None, Some(c), RewardSpec::LongTerm { .. }) => RewardSpec::LongTerm { c },
            (Some(RewardKind::LongTerm), None, RewardSpec::LongTerm { c }) => RewardSpec::LongTerm { c },
            (Some(RewardKind::LongTerm), None, RewardSpec::ShortTerm) => return Err(config_err("--reward long-term needs --c")),
            (None, Some(_), RewardSpec::ShortTerm) => return Err(config_err("--c applies to the long-term reward only")),
            (None, None, r) => r,
        };
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.steps {
            cfg.agent.steps = v;
        }
        if let Some(v) = self.embed_epochs {
            cfg.embed.epochs = v;
        }
        if let Some(v) = self.ground_truth_rollouts {
            cfg.ground_truth_rollouts = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_record(rec: &RunRecord, root: &Path) {
    println!("run {} ({})", rec.label, &rec.config_hash[..16]);
    for s in &rec.stages {
        println!("  {:<10} {} {}", s.stage, &s.hash[..16], if s.cached { "cached" } else { "built" });
    }
    if let Some(e) = &rec.eval {
        for r in &e.restarts {
            println!("  seed {:>3}: wdr {:.4} mean max Q {:.4}", r.seed, r.wdr, r.mean_max_q);
        }
        if let Some(sel) = e.restarts.get(e.selected) {
            println!("  selected seed {}", sel.seed);
        }
    }
    println!("  record {}", rec.run_dir(root).join("record.json").display());
}

fn stage_run(args: &ExpArgs, stop_after: &str, ingest: bool, root: &Path) -> Result<(), Failure> {
    let cfg = args.build(ingest)?;
    let stop = (stop_after != "evaluate").then_some(stop_after);
    let rec = run_experiment(&cfg, root, stop)?;
    print_record(&rec, root);
    if let RunStatus::Failed { stage, error } = &rec.status {
        return Err(Failure::Stage(format!("stage {stage} failed: {error}")));
    }
    if rec.eval.is_some() {
        let dir = rec.run_dir(root).join("report");
        write_report(std::slice::from_ref(&rec), &dir)?;
        println!("  report {}", dir.join("report.md").display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let root = cli.out.clone().unwrap_or_else(output_root);
    log::debug!("output root {} (env {OUTPUT_ROOT_ENV})", root.display());
    match &cli.command {
        Command::Simulate(a) => {
            if a.input.is_some() {
                return Err(config_err("simulate does not take --input; use ingest"));
            }
            stage_run(a, "data", false, &root)
        }
        Command::Ingest(a) => stage_run(a, "data", true, &root),
        Command::Discretize(a) => stage_run(a, "discretize", false, &root),
        Command::Embed(a) => stage_run(a, "embed", false, &root),
        Command::TrainReward(a) => stage_run(a, "reward", false, &root),
        Command::TrainAgent(a) => stage_run(a, "agent", false, &root),
        Command::Evaluate(a) => stage_run(a, "evaluate", false, &root),
        Command::Grid(g) => {
            let mut grid = GridConfig::load(&g.config)?;
            if let Some(w) = g.workers {
                grid.workers = w;
            }
            let out = run_grid(&grid, &root)?;
            let mut failed = 0;
            for r in &out.records {
                let status = match &r.status {
                    RunStatus::Ok => "ok".to_string(),
                    RunStatus::Failed { stage, error } => {
                        failed += 1;
                        format!("failed at {stage}: {error}")
                    }
                };
                println!("{:<36} {status}", r.label);
            }
            println!("report {}", out.report_dir.join("report.md").display());
            if failed > 0 {
                return Err(Failure::Stage(format!("{failed} of {} cells failed", out.records.len())));
            }
            Ok(())
        }
        Command::Report(r) => {
            let file = if r.from.is_dir() { r.from.join("results.jsonl") } else { r.from.clone() };
            let records = read_results(&file)?;
            let dir = r
                .dir
                .clone()
                .unwrap_or_else(|| file.parent().unwrap_or(Path::new(".")).join("report"));
            let files = write_report(&records, &dir)?;
            println!("wrote {} files under {}", files.len(), dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
