use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chronofuzz_core::harness::{
    self, load_campaign, replay, write_campaign, Budget, CampaignConfig, CampaignResult, HarnessError, Mode,
    RunOptions,
};
use chronofuzz_core::novelty;
use chronofuzz_core::report::{Report, RunSummary};
use clap::{Args, Parser, Subcommand};

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_FINDINGS: u8 = 4;

#[derive(Parser)]
#[command(name = "chronofuzz", version, about = "Timeline-guided fault-injection fuzzing of a simulated Raft cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign and write its directory.
    Run(RunArgs),
    /// Pick the similarity threshold from fault-free windows.
    Calibrate(CalibrateArgs),
    /// Re-run recorded campaigns and compare them step by step.
    Replay(ReplayArgs),
    /// Aggregate campaign directories into curves, statistics and a chart.
    Report(ReportArgs),
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct ConfigArg {
    /// Campaign configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Total fault steps, overriding the configured budget.
    #[arg(long)]
    budget: Option<u64>,
    /// Campaign directory to create.
    #[arg(long, short)]
    out: PathBuf,
    /// Choose faults uniformly at random instead of by the learned policy.
    #[arg(long)]
    baseline: bool,
    /// Also write the full event trace (events.jsonl).
    #[arg(long)]
    trace: bool,
    /// Write a DOT timeline snapshot after these global steps.
    #[arg(long, value_delimiter = ',')]
    dot: Vec<u64>,
    /// Run this many campaigns with consecutive seeds, one thread each,
    /// into `<out>/seed-<n>`.
    #[arg(long, default_value_t = 1)]
    replicas: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fault-free windows to sample.
    #[arg(long, default_value_t = 60)]
    windows: usize,
    /// Write the configuration with the calibrated threshold here.
    #[arg(long)]
    write: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Campaign directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Replay each campaign this many times.
    #[arg(long, default_value_t = 1)]
    times: u32,
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign directories (guided and baseline runs may be mixed).
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Where to write curves.csv, runs.csv, summary.json and the chart.
    #[arg(long, short)]
    out: PathBuf,
}

/// Errors that map to a specific exit code.
enum Failure {
    Config(anyhow::Error),
    Diverged(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<HarnessError>() {
            Some(HarnessError::Config(_) | HarnessError::VersionMismatch { .. }) => Failure::Config(e),
            Some(HarnessError::Divergence { .. }) => Failure::Diverged(e),
            _ => Failure::Other(e),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(arg: &ConfigArg) -> Result<CampaignConfig, Failure> {
    let mut cfg = match &arg.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            CampaignConfig::from_toml_str(&text)
                .map_err(|e| Failure::Config(anyhow::Error::from(HarnessError::from(e)).context(path.display().to_string())))?
        }
        None => CampaignConfig::default(),
    };
    if let Some(seed) = arg.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(HarnessError::from)?;
    Ok(cfg)
}

fn summary_line(dir: &Path, r: &CampaignResult) -> String {
    format!(
        "{} seed={} steps={} distinct_states={} findings={} digest={} dir={}",
        r.mode.name(),
        r.config.seed,
        r.steps.len(),
        r.distinct_states(),
        r.findings.len(),
        r.digest(),
        dir.display()
    )
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(steps) = args.budget {
        cfg.budget = Budget { steps: Some(steps), schedules: None };
        cfg.validate().map_err(HarnessError::from)?;
    }
    let mode = if args.baseline { Mode::Random } else { Mode::Guided };
    let dot_steps: BTreeSet<u64> = args.dot.iter().copied().collect();
    let one = |cfg: CampaignConfig, dir: PathBuf| -> Result<CampaignResult, HarnessError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| HarnessError::Io { path: dir.display().to_string(), message: e.to_string() })?;
        let opts = RunOptions {
            keep_events: args.trace,
            dot_steps: dot_steps.clone(),
            checkpoint: Some(dir.join("qtable.json")),
            ..RunOptions::default()
        };
        let result = harness::run(&cfg, mode, opts)?;
        write_campaign(&dir, &result)?;
        println!("{}", summary_line(&dir, &result));
        Ok(result)
    };
    let results: Vec<CampaignResult> = if args.replicas <= 1 {
        vec![one(cfg, args.out.clone())?]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..args.replicas)
                .map(|i| {
                    let seed = cfg.seed + i;
                    let cfg = CampaignConfig { seed, ..cfg.clone() };
                    let dir = args.out.join(format!("seed-{seed}"));
                    s.spawn(move || one(cfg, dir))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("campaign thread panicked")).collect::<Result<Vec<_>, _>>()
        })?
    };
    let findings: usize = results.iter().map(|r| r.findings.len()).sum();
    if findings > 0 {
        for r in &results {
            for f in &r.findings {
                log::warn!("seed {} schedule {}: {:?}: {}", f.trigger.seed, f.schedule, f.kind, f.detail);
            }
        }
        return Ok(EXIT_FINDINGS);
    }
    Ok(0)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<u8, Failure> {
    let mut cfg = load_config(&args.config)?;
    let steady = harness::steady_summaries(&cfg, args.windows)?;
    let cal = novelty::calibrate(&steady, cfg.novelty.k, cfg.novelty.hash_seed).map_err(HarnessError::from)?;
    println!(
        "epsilon={:.2} coinciding={:.3} windows={} degenerate={}",
        cal.epsilon, cal.coincide_fraction, args.windows, cal.degenerate
    );
    if let Some(path) = args.write {
        cfg.novelty.epsilon = cal.epsilon;
        std::fs::write(&path, cfg.to_toml_string()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_replay(args: ReplayArgs) -> Result<u8, Failure> {
    for dir in &args.dirs {
        let rec = load_campaign(dir).map_err(|e| anyhow::Error::from(e).context(dir.display().to_string()))?;
        rec.manifest.check_tool_version()?;
        for i in 0..args.times {
            let again = replay(&rec.config, rec.manifest.mode, &rec.faults, &rec.steps, &rec.findings)
                .map_err(|e| anyhow::Error::from(e).context(format!("{} (repetition {})", dir.display(), i + 1)))?;
            if again.digest() != rec.manifest.digest {
                return Err(Failure::Diverged(anyhow::anyhow!(
                    "{}: digest {} differs from recorded {}",
                    dir.display(),
                    again.digest(),
                    rec.manifest.digest
                )));
            }
        }
        println!("identical: {} ({} steps, {} replays)", dir.display(), rec.steps.len(), args.times);
    }
    Ok(0)
}

fn cmd_report(args: ReportArgs) -> Result<u8, Failure> {
    let mut runs = Vec::with_capacity(args.dirs.len());
    for dir in &args.dirs {
        let c = load_campaign(dir).map_err(|e| anyhow::Error::from(e).context(dir.display().to_string()))?;
        runs.push(RunSummary::from_loaded(dir.display().to_string(), &c));
    }
    let report = Report::build(runs).map_err(anyhow::Error::from)?;
    report.write(&args.out).map_err(anyhow::Error::from)?;
    for c in &report.curves {
        let last = c.points.last().expect("curves are non-empty");
        println!("{}: runs={} steps={} mean_distinct_states={:.2}", c.mode.name(), c.runs, last.step, last.mean);
    }
    if let Some(cmp) = &report.comparison {
        let s = &cmp.speed_up;
        println!(
            "guided vs random: p={:.4} A12={:.2} speed_up={}{:.2}",
            cmp.mann_whitney.p_greater,
            cmp.a12,
            if s.ratio_is_lower_bound { ">=" } else { "" },
            s.ratio
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Report(a) => cmd_report(a),
        Command::DefaultConfig => {
            print!("{}", CampaignConfig::default().to_toml_string());
            Ok(0)
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
