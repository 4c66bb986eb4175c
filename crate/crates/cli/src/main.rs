use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use statarb::factor::FeatureMode;
use statarb::jttw::TestConfig;
use statarb::market_data::{load_riskfree, RiskFreeCurve};
use statarb::pipeline::{self, Mode, RunConfig, Scope};
use statarb::portfolio::Strategy;
use statarb::synthetic::{generate_universe, SyntheticSpec};
use statarb::Error;

/// Statistical arbitrage pipeline: portfolio selection, cointegration
/// screening, backtests and the statistical-arbitrage test.
#[derive(Parser)]
#[command(name = "statarb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline, including the statistical-arbitrage tests.
    Run(RunArgs),
    /// Load and clean the data and report what survived.
    Ingest(IngestArgs),
    /// Candidate generation only.
    Select(RunArgs),
    /// Selection, screening and trading, without the tests.
    Backtest(RunArgs),
    /// Statistical-arbitrage test on an existing PnL file.
    Test(TestArgs),
    /// Re-render the summary tables of a finished run.
    Report(ReportArgs),
    /// Write a synthetic universe with planted groups, plus a config for it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    factors: Option<FactorsArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    /// PnL file: a run's `pnl_*.csv` or a plain `date,pnl` file.
    #[arg(long)]
    pnl: PathBuf,
    /// Risk-free curve used to discount plain files.
    #[arg(long)]
    riskfree: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    replications: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of a finished run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator spec; every field is optional.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Normal,
    Adaptive,
    CrossValidation,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Clustering,
    Glasso,
    ClusteringGlasso,
    GlassoClustering,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FactorsArg {
    Raw,
    Pc,
}

enum Failure {
    Usage(String),
    Stage(String),
}

impl From<pipeline::PipelineError> for Failure {
    fn from(e: pipeline::PipelineError) -> Self {
        Failure::Stage(e.to_string())
    }
}

fn stage(name: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::Stage(format!("stage `{name}` failed: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(a) => run(a, Scope::Full),
        Command::Select(a) => run(a, Scope::Select),
        Command::Backtest(a) => run(a, Scope::Backtest),
        Command::Ingest(a) => ingest(a),
        Command::Test(a) => test(a),
        Command::Report(a) => {
            let text = pipeline::render_report(&a.out).map_err(stage("report"))?;
            print!("{text}");
            Ok(())
        }
        Command::Synth(a) => synth(a),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(stage("config"))
}

fn run(a: RunArgs, scope: Scope) -> Result<(), Failure> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Normal => Mode::Normal,
            ModeArg::Adaptive => Mode::Adaptive,
            ModeArg::CrossValidation => Mode::CrossValidation,
        };
    }
    if let Some(s) = a.strategy {
        cfg.strategies = match s {
            StrategyArg::Clustering => vec![Strategy::Clustering],
            StrategyArg::Glasso => vec![Strategy::Glasso],
            StrategyArg::ClusteringGlasso => vec![Strategy::ClusteringGlasso],
            StrategyArg::GlassoClustering => vec![Strategy::GlassoClustering],
            StrategyArg::All => Strategy::ALL.to_vec(),
        };
    }
    if let Some(f) = a.factors {
        cfg.factors.mode = match f {
            FactorsArg::Raw => FeatureMode::RawFactors,
            FactorsArg::Pc => FeatureMode::PrincipalComponents,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = a
        .out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `output_dir`".into()))?;
    let summary = pipeline::run_to_dir(&cfg, &out, scope)?;
    println!("config_sha256 {}", summary.config_hash);
    for f in &summary.files {
        println!("wrote {}", out.join(f).display());
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let ing = pipeline::ingest(&cfg.data).map_err(stage("ingest"))?;
    let u = &ing.universe;
    println!("dates {} of {}", u.dates.len(), ing.raw_dates);
    println!("tickers {} of {}", u.n_tickers(), ing.raw_tickers.len());
    println!("dropped {}", ing.dropped_tickers().join(" "));
    println!("factors {}", u.factor_names.join(" "));
    if let Some(g) = &ing.groups {
        println!("planted groups {}", g.len());
    }
    Ok(())
}

fn test(a: TestArgs) -> Result<(), Failure> {
    let rf = match &a.riskfree {
        Some(p) => load_riskfree(p).map_err(stage("ingest"))?,
        None => RiskFreeCurve::zero(),
    };
    let tc = TestConfig {
        replications: a.replications,
        seed: a.seed,
    };
    let results = pipeline::test_pnl_file(&a.pnl, &rf, &tc).map_err(stage("statarb"))?;
    println!("series,n,mu,theta,lambda_vol,sigma,phi,min_t,p_value,reject");
    for (s, f, t) in results {
        println!(
            "{},{},{:.6},{:.4},{:.4},{:.6},{:.4},{:.4},{:.4},{}",
            s.label, f.n, f.mu, f.theta, f.lambda_vol, f.sigma, f.phi, t.min_t, t.p_value, t.reject
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| stage("synth")(Error::io(p, e)))?;
            serde_json::from_str(&text).map_err(|e| stage("synth")(e.into()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let u = generate_universe(&spec).map_err(stage("synth"))?;
    u.write(&a.out).map_err(stage("synth"))?;
    let config = serde_json::json!({
        "data": {
            "prices": "prices.csv",
            "factors": "factors.csv",
            "riskfree": "riskfree.csv",
            "groups": "groups.csv",
        },
        "seed": spec.seed,
    });
    let path = a.out.join("config.json");
    let text = serde_json::to_string_pretty(&config).expect("json") + "\n";
    std::fs::write(&path, text).map_err(|e| stage("synth")(Error::io(&path, e)))?;
    println!("wrote {} stocks, {} groups to {}", spec.n_stocks, spec.n_groups, a.out.display());
    Ok(())
}
