//! `nma`: design-level influence analysis for network meta-analysis.
//!
//! Exit codes: 0 success, 1 other failure, 2 unreadable or invalid input,
//! 3 disconnected network, 4 REML non-convergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nma_core::bootstrap::{with_workers, Statistic, DEFAULT_REPLICATES};
use nma_core::ingest::antihypertensive_csv;
use nma_core::report::{self, AnalysisArtifact, AnalysisConfig, Command};
use nma_core::sim::{self, ScenarioFile};
use nma_core::{FitOptions, NmaError};

#[derive(Parser, Debug)]
#[command(name = "nma", version, about = "Leave-one-design-out influence diagnostics for network meta-analysis")]
struct Cli {
    /// Worker threads for refits, bootstrap and simulation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Directory for result files and charts.
    #[arg(long, global = true, default_value = "nma-out")]
    out_dir: PathBuf,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// REML fit: odds ratios, tau, I² and the global inconsistency test.
    Fit(AnalysisArgs),
    /// Leave-one-design-out influence measures with bootstrap O-values.
    Influence(AnalysisArgs),
    /// Leave-one-design-out Wald tests with bootstrap P-values.
    Test(AnalysisArgs),
    /// Run simulation scenarios and write a metrics table.
    Simulate(SimulateArgs),
    /// Rebuild tables and charts from a saved result file.
    Report(ReportArgs),
    /// Print the bundled antihypertensive dataset as CSV.
    ExampleData,
}

#[derive(Args, Debug)]
struct AnalysisArgs {
    /// Arm-level CSV with columns study_id,treatment,events,total.
    input: PathBuf,

    /// Global reference treatment (default: the treatment in the most studies).
    #[arg(long)]
    reference: Option<String>,

    /// Bootstrap replicates; 0 skips the bootstrap.
    #[arg(long = "B", visible_alias = "bootstrap", default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,

    #[arg(long, env = "NMA_SEED", default_value_t = 1)]
    seed: u64,

    /// Comma-separated design labels to drop, e.g. "ARB vs CT".
    #[arg(long, value_delimiter = ',')]
    exclude_designs: Vec<String>,

    /// Comma-separated study ids to drop.
    #[arg(long, value_delimiter = ',')]
    exclude_studies: Vec<String>,

    /// Influence measures to bootstrap (psi, mdffits, phi, xi).
    #[arg(long, value_delimiter = ',', default_value = "psi,mdffits,phi,xi")]
    measures: Vec<Statistic>,

    /// Use each study's own first arm instead of adding a pseudo reference arm.
    #[arg(long)]
    no_augment: bool,

    /// Upper bound of the tau² search.
    #[arg(long, default_value_t = nma_core::reml::DEFAULT_TAU2_MAX)]
    tau2_max: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Bundled {
    /// The full 24-scenario grid.
    Grid,
    /// Six desk-scale scenarios.
    Desk,
    /// The CCB-family scenarios targeting the three-arm design.
    ThreeArm,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario file (TOML); omit to use --bundled.
    scenarios: Option<PathBuf>,

    #[arg(long, value_enum, conflicts_with = "scenarios")]
    bundled: Option<Bundled>,

    /// Override the replication count of every scenario.
    #[arg(long)]
    replications: Option<usize>,

    /// Override the inner bootstrap size of every scenario.
    #[arg(long = "B", visible_alias = "bootstrap")]
    replicates: Option<usize>,

    /// Override the seed of every scenario.
    #[arg(long, env = "NMA_SEED")]
    seed: Option<u64>,

    /// Run only these scenario ids.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u32>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A result.json written by fit, influence or test.
    result: PathBuf,

    /// Original input CSV; when given, its digest must match the result file.
    #[arg(long)]
    input: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<clap::Error>().is_some() {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<NmaError>()) {
        Some(
            NmaError::EmptyInput
            | NmaError::Parse(_)
            | NmaError::DuplicateStudy(_)
            | NmaError::TooFewArms(_)
            | NmaError::MissingReference { .. }
            | NmaError::InvalidArm { .. }
            | NmaError::UnknownTreatment(_)
            | NmaError::UnknownDesign(_)
            | NmaError::Config(_)
            | NmaError::Json(_),
        ) => 2,
        Some(NmaError::ReferenceDisconnected | NmaError::Disconnected(_) | NmaError::UnderIdentified) => 3,
        Some(NmaError::NotConverged(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    let workers = cli.workers;
    let out_dir = cli.out_dir.clone();
    match cli.command {
        Cmd::Fit(a) => analysis(Command::Fit, a, workers, &out_dir, started),
        Cmd::Influence(a) => analysis(Command::Influence, a, workers, &out_dir, started),
        Cmd::Test(a) => analysis(Command::Test, a, workers, &out_dir, started),
        Cmd::Simulate(s) => simulate(s, workers, &out_dir, started),
        Cmd::Report(r) => regenerate(r, &out_dir),
        Cmd::ExampleData => {
            print!("{}", antihypertensive_csv());
            Ok(())
        }
    }
}

fn analysis(command: Command, a: AnalysisArgs, workers: usize, out_dir: &Path, started: Instant) -> anyhow::Result<()> {
    let input = std::fs::read(&a.input)
        .map_err(NmaError::from)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let statistics = match command {
        Command::Influence => a.measures.clone(),
        Command::Test => vec![Statistic::Wald],
        Command::Fit => Vec::new(),
    };
    if let Some(s) = statistics.iter().find(|s| command == Command::Influence && **s == Statistic::Wald) {
        return Err(NmaError::Config(format!("`{s}` is not an influence measure; use `nma test`")).into());
    }
    let config = AnalysisConfig {
        reference: a.reference,
        augment: !a.no_augment,
        seed: a.seed,
        replicates: if command == Command::Fit { 0 } else { a.replicates },
        statistics,
        excluded_designs: a.exclude_designs,
        excluded_studies: a.exclude_studies,
        fit: FitOptions { tau2_max: a.tau2_max, ..FitOptions::default() },
    };
    let artifact = with_workers(workers, || report::analyze(command, &input, &config))??;
    let paths = report::write_outputs(&artifact, out_dir)?;
    write_sidecar(out_dir, &a.input, workers, started)?;
    print!("{}", report::summary_text(&artifact));
    for p in paths {
        log::info!("wrote {}", p.display());
    }
    println!("Results written to {}", out_dir.display());
    Ok(())
}

/// Run metadata that legitimately differs between identical runs.
fn write_sidecar(out_dir: &Path, input: &Path, workers: usize, started: Instant) -> anyhow::Result<()> {
    let finished = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let info = serde_json::json!({
        "finished_unix": finished,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "input_path": input.display().to_string(),
        "workers": workers,
    });
    std::fs::write(out_dir.join("run-info.json"), format!("{:#}\n", info))?;
    Ok(())
}

fn simulate(s: SimulateArgs, workers: usize, out_dir: &Path, started: Instant) -> anyhow::Result<()> {
    let (mut file, source) = match (&s.scenarios, s.bundled) {
        (Some(p), _) => (ScenarioFile::load(p)?, p.clone()),
        (None, Some(b)) => {
            let text = match b {
                Bundled::Grid => sim::GRID_SCENARIOS,
                Bundled::Desk => sim::DESK_SCENARIOS,
                Bundled::ThreeArm => sim::THREE_ARM_SCENARIOS,
            };
            (ScenarioFile::parse(text)?, PathBuf::from(format!("bundled:{b:?}")))
        }
        (None, None) => return Err(NmaError::Config("give a scenario file or --bundled".into()).into()),
    };
    if !s.only.is_empty() {
        file.scenario.retain(|c| s.only.contains(&c.id));
        if file.scenario.is_empty() {
            return Err(NmaError::Config("--only matched no scenario".into()).into());
        }
    }
    for c in &mut file.scenario {
        if let Some(r) = s.replications {
            c.replications = r;
        }
        if let Some(b) = s.replicates {
            c.bootstrap = b;
        }
        if let Some(seed) = s.seed {
            c.seed = seed;
        }
        c.validate()?;
    }

    let mut metrics = Vec::with_capacity(file.scenario.len());
    for c in &file.scenario {
        let t = Instant::now();
        let m = with_workers(workers, || sim::run_scenario(c))?
            .with_context(|| format!("scenario {} ({})", c.id, c.target_design))?;
        eprintln!(
            "scenario {:>2}: {} omega={} N={} tau={}: {} replicates ({} failed) in {:.1}s",
            c.id,
            c.target_design,
            c.omega,
            c.n_studies,
            c.tau,
            m.completed,
            m.failed,
            t.elapsed().as_secs_f64()
        );
        metrics.push(m);
    }
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("simulation.csv");
    let f = std::fs::File::create(&path)?;
    sim::write_metrics_csv(&metrics, f)?;
    write_sidecar(out_dir, &source, workers, started)?;
    println!("Metrics for {} scenarios written to {}", metrics.len(), path.display());
    Ok(())
}

fn regenerate(r: ReportArgs, out_dir: &Path) -> anyhow::Result<()> {
    let artifact = AnalysisArtifact::load(&r.result).with_context(|| format!("loading {}", r.result.display()))?;
    if let Some(input) = &r.input {
        artifact.check_input(&std::fs::read(input).map_err(NmaError::from)?)?;
    }
    let paths = report::write_report(&artifact, out_dir)?;
    print!("{}", report::summary_text(&artifact));
    println!("Report ({} files) written to {}", paths.len(), out_dir.display());
    Ok(())
}
