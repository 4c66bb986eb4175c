//! Config-driven end-to-end runs: ingest, normalize, select factors, cluster
//! and estimate the precision matrix, generate candidates, screen, trade,
//! summarize and test. Artifacts are written as soon as each stage finishes,
//! so a failing run leaves its partial outputs next to a `FAILED` marker.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backtest::{
    formation_filter, metrics, realized_distributed_pnl, split_halves, trade_selected, JohansenConfig, PnLKind,
    PnLSeries, SimConfig, StrategyReport, StrategyRun, REPORT_ROWS,
};
use crate::cluster::{kmeans, ClusterAssignment};
use crate::error::{Error, Result};
use crate::factor::{pca, select_features, FeatureMode, FeatureSpace, PcaResult};
use crate::glasso::{correlation_from_prices, graphical_lasso, tune_rho, PrecisionEstimate, PriceInput, SparsityTarget};
use crate::jttw::{discount_increments, fit_jttw, test_statarb, StatArbTestResult, TestConfig};
use crate::market_data::{
    clean, load_panel, load_riskfree, snapshot_and_standardize, transform_factors, CleanUniverse, DateRange,
    PanelSchema, PeriodSplit, RiskFreeCurve, DATE_FORMAT,
};
use crate::portfolio::{
    clustering_glasso, from_clusters, from_precision_rows, glasso_clustering, CandidatePortfolio, RowRule, Strategy,
    DEFAULT_CUTOFF,
};
use crate::rng::derive_seed;
use crate::synthetic::{group_recovery, load_groups, GroupRecovery};

pub const UNITS: &str = "profits in dollars on a $2 gross book; rates annualized decimals";
pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST: &str = "run_manifest.json";
/// Width of the trade-profit histogram bins; bins are centered on multiples.
pub const HISTOGRAM_BIN: f64 = 0.05;

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn range(a: NaiveDate, b: NaiveDate) -> DateRange {
    DateRange { start: a, end: b }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Normal,
    /// Trade the first half, force-close at the midpoint, re-select on the
    /// preceding year and trade the second half.
    Adaptive,
    /// Run on the separate cross-validation split.
    CrossValidation,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Adaptive => "adaptive",
            Mode::CrossValidation => "cross-validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format `date,ticker,field,value` price file.
    pub prices: PathBuf,
    /// Long-format factor file.
    pub factors: PathBuf,
    /// `date,rate` file; zero rates when absent.
    #[serde(default)]
    pub riskfree: Option<PathBuf>,
    /// Optional `ticker,group` ground truth for recovery scoring.
    #[serde(default)]
    pub groups: Option<PathBuf>,
    #[serde(default)]
    pub schema: PanelSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub formation: DateRange,
    pub trading: DateRange,
    /// Rebalancing date for adaptive runs.
    pub midpoint: NaiveDate,
    /// Length of the re-selection window that ends at the midpoint.
    pub relearn_months: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            formation: range(date(2004, 1, 1), date(2006, 1, 1)),
            trading: range(date(2006, 1, 1), date(2008, 1, 1)),
            midpoint: date(2007, 1, 1),
            relearn_months: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodConfig {
    pub formation: DateRange,
    pub trading: DateRange,
}

impl Default for PeriodConfig {
    fn default() -> Self {
        Self {
            formation: range(date(2008, 1, 1), date(2010, 1, 1)),
            trading: range(date(2010, 1, 1), date(2012, 1, 1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorConfig {
    pub mode: FeatureMode,
    pub k: usize,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::RawFactors,
            k: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// K for pure clustering.
    pub k: usize,
    /// K for the coarse partition used by the hybrids.
    pub hybrid_k: usize,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 30,
            hybrid_k: 3,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RhoPolicy {
    Fixed { rho: f64 },
    /// Bisect for a mean number of off-diagonal nonzeros per row in
    /// `[min_mean, max_mean]`.
    Tuned { min_mean: f64, max_mean: f64, max_bisections: usize },
}

impl Default for RhoPolicy {
    fn default() -> Self {
        let t = SparsityTarget::default();
        RhoPolicy::Tuned {
            min_mean: t.min_mean,
            max_mean: t.max_mean,
            max_bisections: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlassoConfig {
    pub rho: RhoPolicy,
    pub tol: f64,
    pub max_iter: usize,
    pub price_input: PriceInput,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            rho: RhoPolicy::default(),
            tol: 1e-6,
            max_iter: 500,
            price_input: PriceInput::Levels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    /// Ranked glasso-clustering candidates kept.
    pub cutoff: usize,
    pub row_rule: RowRule,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
            row_rule: RowRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatArbConfig {
    pub enabled: bool,
    pub replications: usize,
    pub pnl_kinds: Vec<PnLKind>,
}

impl Default for StatArbConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            replications: 500,
            pnl_kinds: vec![PnLKind::MarkToMarket, PnLKind::RealizedDistributed],
        }
    }
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

/// Everything a run needs. Only `data` and `seed` are required; every
/// method parameter has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Mandatory: runs are never seeded from the clock.
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub cross_validation: PeriodConfig,
    #[serde(default)]
    pub factors: FactorConfig,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub clustering: ClusterConfig,
    #[serde(default)]
    pub glasso: GlassoConfig,
    #[serde(default)]
    pub candidates: CandidateConfig,
    #[serde(default)]
    pub johansen: JohansenConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub statarb: StatArbConfig,
    /// Worker threads for the parallel stages; all cores when absent.
    /// Results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Default output directory; not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a JSON config; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.prices);
        fix(&mut self.data.factors);
        if let Some(p) = self.data.riskfree.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.groups.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::input("no strategy selected"));
        }
        if self.factors.k == 0 || self.clustering.k == 0 || self.clustering.hybrid_k == 0 {
            return Err(Error::input("k, clustering.k and clustering.hybrid_k must be positive"));
        }
        if self.clustering.restarts == 0 {
            return Err(Error::input("clustering.restarts must be positive"));
        }
        self.sim.validate()?;
        for r in [
            self.split.formation,
            self.split.trading,
            self.cross_validation.formation,
            self.cross_validation.trading,
        ] {
            DateRange::new(r.start, r.end)?;
        }
        PeriodSplit::new(self.split.formation, self.split.trading)?;
        PeriodSplit::new(self.cross_validation.formation, self.cross_validation.trading)?;
        if self.mode == Mode::Adaptive {
            split_halves(&self.split.trading, self.split.midpoint)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (see [`RunConfig::hashable`]).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.hashable()).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The config with data paths reduced to file names, so the hash and the
    /// manifest do not depend on where the tree lives.
    fn hashable(&self) -> RunConfig {
        let name = |p: &Path| PathBuf::from(p.file_name().unwrap_or(p.as_os_str()));
        let mut c = self.clone();
        c.data.prices = name(&c.data.prices);
        c.data.factors = name(&c.data.factors);
        c.data.riskfree = c.data.riskfree.as_deref().map(name);
        c.data.groups = c.data.groups.as_deref().map(name);
        c
    }
}

/// A stage tag plus the underlying error.
#[derive(Debug)]
pub struct PipelineError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, PipelineError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, PipelineError> {
        self.map_err(|error| PipelineError { stage, error })
    }
}

/// How far a run goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Candidate generation only.
    Select,
    /// Through trading and the summary tables.
    Backtest,
    /// Everything, including the statistical-arbitrage tests.
    Full,
}

/// The cleaned universe with bookkeeping from ingestion.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub universe: CleanUniverse,
    pub raw_tickers: Vec<String>,
    pub raw_dates: usize,
    pub riskfree: RiskFreeCurve,
    pub groups: Option<Vec<Vec<String>>>,
}

impl Ingested {
    pub fn dropped_tickers(&self) -> Vec<&str> {
        self.raw_tickers
            .iter()
            .filter(|t| !self.universe.tickers.contains(t))
            .map(String::as_str)
            .collect()
    }
}

pub fn ingest(data: &DataConfig) -> Result<Ingested> {
    let panel = load_panel(&data.prices, &data.factors, &data.schema)?;
    let universe = transform_factors(&clean(&panel)?)?;
    let riskfree = match &data.riskfree {
        Some(p) => load_riskfree(p)?,
        None => RiskFreeCurve::zero(),
    };
    let groups = data.groups.as_deref().map(load_groups).transpose()?;
    Ok(Ingested {
        universe,
        raw_tickers: panel.tickers,
        raw_dates: panel.dates.len(),
        riskfree,
        groups,
    })
}

/// Selection inputs for one formation window.
#[derive(Debug, Clone)]
pub struct Selection {
    pub pca: PcaResult,
    pub features: FeatureSpace,
    pub clusters: Option<ClusterAssignment>,
    pub coarse: Option<ClusterAssignment>,
    pub precision: Option<PrecisionEstimate>,
    pub candidates: Vec<(Strategy, Vec<CandidatePortfolio>)>,
}

fn check_window(u: &CleanUniverse, w: &DateRange, what: &str) -> Result<()> {
    let n = w.indices(&u.dates).len();
    if n < 2 {
        return Err(Error::input(format!(
            "{what} window [{}, {}) holds {n} trading dates",
            w.start, w.end
        )));
    }
    Ok(())
}

/// Runs factor selection, clustering, glasso and candidate generation on a
/// formation window.
pub fn select(
    cfg: &RunConfig,
    u: &CleanUniverse,
    formation: &DateRange,
    block: u64,
) -> std::result::Result<Selection, PipelineError> {
    check_window(u, formation, "formation").stage("split")?;
    let x = snapshot_and_standardize(u, formation).stage("normalize")?;
    let p = pca(&x).stage("factor-select")?;
    let features = select_features(&p, &x, cfg.factors.mode, cfg.factors.k).stage("factor-select")?;

    let wants = |s: Strategy| cfg.strategies.contains(&s);
    let c = &cfg.clustering;
    let clusters = if wants(Strategy::Clustering) {
        Some(kmeans(&features, c.k, c.restarts, derive_seed(cfg.seed, block * 16 + 1)).stage("cluster")?)
    } else {
        None
    };
    let coarse = if cfg.strategies.iter().any(|s| s.is_hybrid()) {
        Some(kmeans(&features, c.hybrid_k, c.restarts, derive_seed(cfg.seed, block * 16 + 2)).stage("cluster")?)
    } else {
        None
    };
    let precision = if cfg.strategies.iter().any(|s| *s != Strategy::Clustering) {
        let all: Vec<usize> = (0..u.n_tickers()).collect();
        let prices = u.price_window(formation, &all);
        let s = correlation_from_prices(&prices, &u.tickers, cfg.glasso.price_input).stage("glasso")?;
        let g = &cfg.glasso;
        let est = match g.rho {
            RhoPolicy::Fixed { rho } => graphical_lasso(&s, rho, g.tol, g.max_iter),
            RhoPolicy::Tuned {
                min_mean,
                max_mean,
                max_bisections,
            } => tune_rho(&s, SparsityTarget { min_mean, max_mean }, g.tol, g.max_iter, max_bisections),
        }
        .stage("glasso")?;
        Some(est)
    } else {
        None
    };

    let rule = cfg.candidates.row_rule;
    let candidates = cfg
        .strategies
        .iter()
        .map(|&s| {
            let list = match s {
                Strategy::Clustering => from_clusters(clusters.as_ref().expect("fine clusters"), &features),
                Strategy::Glasso => from_precision_rows(precision.as_ref().expect("precision"), rule),
                Strategy::ClusteringGlasso => clustering_glasso(
                    coarse.as_ref().expect("coarse clusters"),
                    precision.as_ref().expect("precision"),
                    rule,
                ),
                Strategy::GlassoClustering => glasso_clustering(
                    precision.as_ref().expect("precision"),
                    coarse.as_ref().expect("coarse clusters"),
                    cfg.candidates.cutoff,
                    rule,
                ),
            };
            (s, list)
        })
        .collect();
    Ok(Selection {
        pca: p,
        features,
        clusters,
        coarse,
        precision,
        candidates,
    })
}

#[derive(Debug, Clone)]
pub struct TestedSeries {
    pub strategy: Strategy,
    pub kind: PnLKind,
    pub pnl: PnLSeries,
    pub discounted: Vec<f64>,
    pub riskfree_filled: usize,
    pub test: Option<std::result::Result<StatArbTestResult, String>>,
    pub fit: Option<crate::jttw::JttwFit>,
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub name: String,
    pub formation: DateRange,
    pub trading: DateRange,
    pub selection: Selection,
    pub runs: Vec<StrategyRun>,
    pub reports: Vec<StrategyReport>,
    pub series: Vec<TestedSeries>,
    pub recovery: Vec<(Strategy, GroupRecovery)>,
}

/// The blocks a mode runs: `(name, formation, trading)`.
pub fn blocks(cfg: &RunConfig) -> Result<Vec<(String, DateRange, DateRange)>> {
    let s = &cfg.split;
    Ok(match cfg.mode {
        Mode::Normal => vec![("normal".into(), s.formation, s.trading)],
        Mode::CrossValidation => vec![(
            "cross-validation".into(),
            cfg.cross_validation.formation,
            cfg.cross_validation.trading,
        )],
        Mode::Adaptive => {
            let (h1, h2) = split_halves(&s.trading, s.midpoint)?;
            let relearn_start = s
                .midpoint
                .checked_sub_months(Months::new(s.relearn_months))
                .ok_or_else(|| Error::input("re-selection window starts before the calendar"))?;
            vec![
                ("half-1".into(), s.formation, h1),
                ("half-2".into(), DateRange::new(relearn_start, s.midpoint)?, h2),
            ]
        }
    })
}

fn pnl_series(run: &StrategyRun, kind: PnLKind, rf: &RiskFreeCurve) -> PnLSeries {
    match kind {
        PnLKind::MarkToMarket => run.mtm_pnl(),
        PnLKind::RealizedDistributed => realized_distributed_pnl(&run.trades(), rf, &run.trading_dates).0,
    }
}

/// Writes CSV files with a leading comment naming units and config hash.
struct Artifacts<'a> {
    dir: &'a Path,
    hash: String,
    written: Vec<String>,
}

impl Artifacts<'_> {
    fn writer(&mut self, name: &str) -> Result<csv::Writer<File>> {
        let path = self.dir.join(name);
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "# units: {UNITS}; config_sha256: {}", self.hash).map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(csv::Writer::from_writer(f))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn fmt_date(d: NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}

fn write_candidates(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("candidates.csv")?;
    w.write_record([
        "block", "strategy", "rank", "tickers", "size", "score", "source_row", "pass", "status",
        "formation_profit", "formation_trades",
    ])?;
    for b in blocks {
        for (strategy, list) in &b.selection.candidates {
            let run = b.runs.iter().find(|r| r.strategy == *strategy);
            for (rank, c) in list.iter().enumerate() {
                let (status, profit, trades) = match run {
                    None => ("unscreened".to_string(), String::new(), String::new()),
                    Some(r) => {
                        if let Some(s) = r.filter.selected.iter().find(|s| s.candidate == *c) {
                            ("selected".into(), s.formation_profit.to_string(), s.formation_trades.to_string())
                        } else {
                            let reason = r
                                .filter
                                .rejected
                                .iter()
                                .find(|(rc, _)| rc == c)
                                .map(|(_, why)| why.label())
                                .unwrap_or_default();
                            (reason, String::new(), String::new())
                        }
                    }
                };
                w.write_record([
                    b.name.clone(),
                    strategy.to_string(),
                    (rank + 1).to_string(),
                    c.tickers.join(" "),
                    c.len().to_string(),
                    c.score.to_string(),
                    c.source_row.to_string(),
                    c.pass.map(|p| p.to_string()).unwrap_or_default(),
                    status,
                    profit,
                    trades,
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

fn write_scree(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("scree.csv")?;
    w.write_record(["block", "component", "eigenvalue", "explained_ratio", "cumulative_ratio"])?;
    for b in blocks {
        let p = &b.selection.pca;
        let mut cum = 0.0;
        for (i, (e, r)) in p.eigenvalues.iter().zip(&p.explained_ratio).enumerate() {
            cum += r;
            w.write_record([b.name.clone(), i.to_string(), e.to_string(), r.to_string(), cum.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

fn write_recovery(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("recovery.csv")?;
    w.write_record(["block", "strategy", "groups", "recovered", "recovery", "candidates", "hits", "precision"])?;
    for b in blocks {
        for (s, r) in &b.recovery {
            w.write_record([
                b.name.clone(),
                s.to_string(),
                r.groups.to_string(),
                r.recovered.to_string(),
                fmt_opt(r.recovery()),
                r.candidates.to_string(),
                r.hits.to_string(),
                fmt_opt(r.precision()),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

fn write_trades(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("trades.csv")?;
    w.write_record([
        "block", "strategy", "tickers", "open_date", "close_date", "direction", "entry_z", "exit_reason", "profit",
        "weights",
    ])?;
    for b in blocks {
        for run in &b.runs {
            for r in &run.results {
                for t in &r.outcome.trades {
                    w.write_record([
                        b.name.clone(),
                        run.strategy.to_string(),
                        r.candidate.tickers.join(" "),
                        fmt_date(t.open_date),
                        fmt_date(t.close_date),
                        t.direction.as_str().into(),
                        t.entry_spread_z.to_string(),
                        t.exit_reason.as_str().into(),
                        t.profit.to_string(),
                        t.weights.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

fn write_pnl(a: &mut Artifacts, blocks: &[BlockResult], kind: PnLKind) -> Result<()> {
    let mut w = a.writer(&format!("pnl_{}.csv", kind.as_str()))?;
    w.write_record(["block", "strategy", "date", "pnl", "discounted"])?;
    for b in blocks {
        for s in b.series.iter().filter(|s| s.kind == kind) {
            for ((d, v), dv) in s.pnl.dates.iter().zip(&s.pnl.values).zip(&s.discounted) {
                w.write_record([b.name.clone(), s.strategy.to_string(), fmt_date(*d), v.to_string(), dv.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

fn write_report(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("report.csv")?;
    w.write_record(["block", "strategy", "row", "value", "ratio"])?;
    for b in blocks {
        for rep in &b.reports {
            for (row, value, ratio) in rep.rows() {
                w.write_record([
                    b.name.clone(),
                    rep.strategy.to_string(),
                    row.to_string(),
                    fmt_opt(value),
                    ratio.map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

/// Bin index of a profit: bins are `[(k − ½)·w, (k + ½)·w)`.
pub fn histogram_bin(x: f64) -> i64 {
    (x / HISTOGRAM_BIN + 0.5).floor() as i64
}

/// Counts per bin from the lowest to the highest occupied bin, empty bins
/// included.
pub fn histogram(profits: &[f64]) -> Vec<(i64, usize)> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &p in profits {
        *counts.entry(histogram_bin(p)).or_default() += 1;
    }
    let (Some(&lo), Some(&hi)) = (counts.keys().next(), counts.keys().next_back()) else {
        return vec![];
    };
    (lo..=hi).map(|k| (k, counts.get(&k).copied().unwrap_or(0))).collect()
}

fn write_histogram(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("histogram.csv")?;
    w.write_record(["block", "strategy", "bin_lower", "bin_center", "bin_upper", "count"])?;
    for b in blocks {
        for run in &b.runs {
            let profits: Vec<f64> = run.trades().iter().map(|t| t.profit).collect();
            for (k, n) in histogram(&profits) {
                let c = k as f64 * HISTOGRAM_BIN;
                w.write_record([
                    b.name.clone(),
                    run.strategy.to_string(),
                    format!("{:.3}", c - HISTOGRAM_BIN / 2.0),
                    format!("{c:.3}"),
                    format!("{:.3}", c + HISTOGRAM_BIN / 2.0),
                    n.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

fn write_statarb(a: &mut Artifacts, blocks: &[BlockResult]) -> Result<()> {
    let mut w = a.writer("statarb.csv")?;
    w.write_record([
        "block", "strategy", "pnl_kind", "n", "status", "mu", "theta", "lambda_vol", "sigma", "phi", "loglik",
        "t_mu", "t_lambda", "t_theta", "min_t", "p_value", "reject", "replications", "failed_replications",
        "riskfree_filled",
    ])?;
    for b in blocks {
        for s in &b.series {
            let Some(test) = &s.test else { continue };
            let mut rec = vec![
                b.name.clone(),
                s.strategy.to_string(),
                s.kind.as_str().into(),
                s.discounted.len().to_string(),
            ];
            match (test, &s.fit) {
                (Ok(t), Some(f)) => rec.extend([
                    "ok".into(),
                    f.mu.to_string(),
                    f.theta.to_string(),
                    f.lambda_vol.to_string(),
                    f.sigma.to_string(),
                    f.phi.to_string(),
                    f.loglik.to_string(),
                    t.statistics.t_mu.to_string(),
                    t.statistics.t_lambda.to_string(),
                    t.statistics.t_theta.to_string(),
                    t.min_t.to_string(),
                    t.p_value.to_string(),
                    t.reject.to_string(),
                    t.mc_replications.to_string(),
                    t.failed_replications.to_string(),
                ]),
                (Err(msg), _) => {
                    rec.push(msg.clone());
                    rec.extend(std::iter::repeat_n(String::new(), 14));
                }
                (Ok(_), None) => unreachable!("a test result always comes with its fit"),
            }
            rec.push(s.riskfree_filled.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(a.dir, e))?;
    Ok(())
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config_hash: String,
    pub blocks: Vec<BlockResult>,
    pub files: Vec<String>,
}

fn write_manifest(
    a: &mut Artifacts,
    cfg: &RunConfig,
    ing: &Ingested,
    blocks: &[BlockResult],
    scope: Scope,
) -> Result<()> {
    let block_json: Vec<_> = blocks
        .iter()
        .map(|b| {
            let sel = &b.selection;
            let k = sel.features.k();
            json!({
                "name": b.name,
                "formation": [fmt_date(b.formation.start), fmt_date(b.formation.end)],
                "trading": [fmt_date(b.trading.start), fmt_date(b.trading.end)],
                "features": {
                    "mode": sel.features.mode.to_string(),
                    "columns": sel.features.provenance,
                    "explained_ratio_first_k": sel.pca.explained_ratio.iter().take(k).sum::<f64>(),
                },
                "clusters": sel.clusters.as_ref().map(|c| json!({"k": c.k, "sizes": c.sizes(), "inertia": c.inertia})),
                "hybrid_clusters": sel.coarse.as_ref().map(|c| json!({"k": c.k, "sizes": c.sizes(), "inertia": c.inertia})),
                "glasso": sel.precision.as_ref().map(|p| json!({
                    "rho": p.rho,
                    "iterations": p.iterations,
                    "converged": p.converged,
                    "mean_offdiag_nonzeros": p.mean_offdiag_nonzeros(),
                })),
                "candidates": sel.candidates.iter().map(|(s, l)| (s.to_string(), l.len())).collect::<BTreeMap<_, _>>(),
                "selected": b.runs.iter().map(|r| (r.strategy.to_string(), r.filter.selected.len())).collect::<BTreeMap<_, _>>(),
                "riskfree_filled_dates": b.series.iter().map(|s| s.riskfree_filled).max().unwrap_or(0),
            })
        })
        .collect();
    let manifest = json!({
        "config_sha256": a.hash,
        "config": cfg.hashable(),
        "mode": cfg.mode.as_str(),
        "scope": format!("{scope:?}").to_lowercase(),
        "units": UNITS,
        "version": env!("CARGO_PKG_VERSION"),
        "universe": {
            "raw_dates": ing.raw_dates,
            "dates": ing.universe.dates.len(),
            "raw_tickers": ing.raw_tickers.len(),
            "tickers": ing.universe.n_tickers(),
            "dropped_tickers": ing.dropped_tickers(),
            "factors": ing.universe.factor_names,
        },
        "blocks": block_json,
        "outputs": a.written,
    });
    let path = a.dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Runs the pipeline into `out`. On failure a `FAILED` file holding the
/// stage-tagged message is left next to whatever was already written.
pub fn run_to_dir(cfg: &RunConfig, out: &Path, scope: Scope) -> std::result::Result<RunSummary, PipelineError> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e)).stage("write")?;
    let marker = out.join(FAILED_MARKER);
    let _ = std::fs::remove_file(&marker);
    let result = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::input(format!("worker pool: {e}")))
            .stage("config")
            .and_then(|pool| pool.install(|| execute(cfg, out, scope))),
        None => execute(cfg, out, scope),
    };
    if let Err(e) = &result {
        let _ = std::fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn execute(cfg: &RunConfig, out: &Path, scope: Scope) -> std::result::Result<RunSummary, PipelineError> {
    cfg.validate().stage("config")?;
    let hash = cfg.hash();
    let mut art = Artifacts {
        dir: out,
        hash: hash.clone(),
        written: vec![],
    };
    let ing = ingest(&cfg.data).stage("ingest")?;
    let u = &ing.universe;

    let plan = blocks(cfg).stage("split")?;
    let mut results = Vec::with_capacity(plan.len());
    for (bi, (name, formation, trading)) in plan.into_iter().enumerate() {
        let selection = select(cfg, u, &formation, bi as u64)?;
        let recovery = match &ing.groups {
            Some(groups) => selection
                .candidates
                .iter()
                .map(|(s, l)| {
                    let sets: Vec<Vec<String>> = l.iter().map(|c| c.tickers.clone()).collect();
                    (*s, group_recovery(&sets, groups))
                })
                .collect(),
            None => vec![],
        };
        results.push(BlockResult {
            name,
            formation,
            trading,
            selection,
            runs: vec![],
            reports: vec![],
            series: vec![],
            recovery,
        });
    }
    write_scree(&mut art, &results).stage("write")?;
    if ing.groups.is_some() {
        write_recovery(&mut art, &results).stage("write")?;
    }
    if scope == Scope::Select {
        write_candidates(&mut art, &results).stage("write")?;
        write_manifest(&mut art, cfg, &ing, &results, scope).stage("write")?;
        return Ok(RunSummary {
            config_hash: hash,
            blocks: results,
            files: art.written,
        });
    }

    for b in results.iter_mut() {
        check_window(u, &b.trading, "trading").stage("split")?;
        let trading_dates = u.window_dates(&b.trading).to_vec();
        for (strategy, list) in &b.selection.candidates {
            let filter = formation_filter(list, u, &b.formation, &cfg.johansen, &cfg.sim);
            let trade_results = trade_selected(&filter.selected, u, &b.trading, &cfg.sim).stage("trade")?;
            let run = StrategyRun {
                strategy: *strategy,
                candidates: list.clone(),
                filter,
                results: trade_results,
                trading_dates: trading_dates.clone(),
            };
            b.reports.push(metrics(&run));
            b.runs.push(run);
        }
        for run in &b.runs {
            for &kind in &cfg.statarb.pnl_kinds {
                let pnl = pnl_series(run, kind, &ing.riskfree);
                let (discounted, filled) = discount_increments(&pnl, &ing.riskfree);
                b.series.push(TestedSeries {
                    strategy: run.strategy,
                    kind,
                    pnl,
                    discounted,
                    riskfree_filled: filled,
                    test: None,
                    fit: None,
                });
            }
        }
    }
    write_candidates(&mut art, &results).stage("write")?;
    write_trades(&mut art, &results).stage("write")?;
    for &kind in &cfg.statarb.pnl_kinds {
        write_pnl(&mut art, &results, kind).stage("write")?;
    }
    write_report(&mut art, &results).stage("write")?;
    write_histogram(&mut art, &results).stage("write")?;

    if scope == Scope::Full && cfg.statarb.enabled {
        for (bi, b) in results.iter_mut().enumerate() {
            for s in b.series.iter_mut() {
                let si = Strategy::ALL.iter().position(|x| *x == s.strategy).unwrap_or(0) as u64;
                let ki = (s.kind == PnLKind::RealizedDistributed) as u64;
                let tc = TestConfig {
                    replications: cfg.statarb.replications,
                    seed: derive_seed(cfg.seed, 1_000 + bi as u64 * 100 + si * 10 + ki),
                };
                match fit_jttw(&s.discounted) {
                    Ok(fit) => {
                        // A bad replication count is a config error, not a
                        // property of this series.
                        if tc.replications < crate::jttw::MIN_REPLICATIONS {
                            return Err(Error::input(format!(
                                "statarb.replications must be at least {}",
                                crate::jttw::MIN_REPLICATIONS
                            )))
                            .stage("statarb");
                        }
                        s.test = Some(test_statarb(&s.discounted, &fit, &tc).map_err(|e| e.to_string()));
                        s.fit = Some(fit);
                    }
                    Err(e) => s.test = Some(Err(e.to_string())),
                }
            }
        }
        write_statarb(&mut art, &results).stage("write")?;
    }
    write_manifest(&mut art, cfg, &ing, &results, scope).stage("write")?;
    Ok(RunSummary {
        config_hash: hash,
        blocks: results,
        files: art.written,
    })
}

/// A daily profit series read back from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct PnLInput {
    /// `block/strategy` when the file carries those columns, else the file
    /// stem.
    pub label: String,
    pub values: Vec<f64>,
}

/// Reads a PnL file. Files written by a run (`block,strategy,date,pnl,
/// discounted`) yield one series per block and strategy, using the
/// discounted column. Plain `date,pnl` files are discounted with `riskfree`.
pub fn read_pnl_file(path: &Path, riskfree: &RiskFreeCurve) -> Result<Vec<PnLInput>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (block, strategy, date_col) = (col("block"), col("strategy"), col("date"));
    let discounted = col("discounted");
    let value = discounted
        .or_else(|| col("pnl"))
        .or_else(|| col("value"))
        .ok_or_else(|| Error::Schema(format!("{}: needs a `discounted`, `pnl` or `value` column", path.display())))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut series: Vec<(String, Vec<NaiveDate>, Vec<f64>)> = vec![];
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("").trim();
        let label = match (block, strategy) {
            (None, None) => stem.clone(),
            _ => [get(block), get(strategy)].iter().filter(|s| !s.is_empty()).copied().collect::<Vec<_>>().join("/"),
        };
        let v: f64 = get(Some(value))
            .parse()
            .map_err(|_| Error::input(format!("{}: bad value `{}`", path.display(), get(Some(value)))))?;
        let d = match date_col {
            Some(_) => Some(crate::market_data::parse_date(get(date_col))?),
            None => None,
        };
        if series.last().is_none_or(|(l, _, _)| *l != label) {
            series.push((label, vec![], vec![]));
        }
        let last = series.last_mut().expect("series");
        last.1.extend(d);
        last.2.push(v);
    }
    if series.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    Ok(series
        .into_iter()
        .map(|(label, dates, values)| {
            let values = if discounted.is_none() && dates.len() == values.len() {
                let pnl = PnLSeries {
                    dates,
                    values,
                    kind: PnLKind::MarkToMarket,
                };
                discount_increments(&pnl, riskfree).0
            } else {
                values
            };
            PnLInput { label, values }
        })
        .collect())
}

/// Fits and tests every series of a PnL file.
pub fn test_pnl_file(
    path: &Path,
    riskfree: &RiskFreeCurve,
    cfg: &TestConfig,
) -> Result<Vec<(PnLInput, crate::jttw::JttwFit, StatArbTestResult)>> {
    read_pnl_file(path, riskfree)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let fit = fit_jttw(&s.values).map_err(|e| labelled(&s.label, e))?;
            let tc = TestConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..*cfg
            };
            let t = test_statarb(&s.values, &fit, &tc).map_err(|e| labelled(&s.label, e))?;
            Ok((s, fit, t))
        })
        .collect()
}

fn labelled(label: &str, e: Error) -> Error {
    match e {
        Error::DegenerateSeries(m) => Error::DegenerateSeries(format!("{label}: {m}")),
        Error::FitFailure(m) => Error::FitFailure(format!("{label}: {m}")),
        Error::Input(m) => Error::Input(format!("{label}: {m}")),
        other => other,
    }
}

/// Row name -> (value, ratio) for one strategy.
type ReportCells = BTreeMap<String, (String, String)>;

/// Re-renders `report.csv` from an artifact directory as text tables, one
/// per block, strategies across. Never recomputes anything.
pub fn render_report(dir: &Path) -> Result<String> {
    let path = dir.join("report.csv");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut blocks: Vec<(String, Vec<(String, ReportCells)>)> = vec![];
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        let (block, strategy) = (get(0), get(1));
        if blocks.last().is_none_or(|(b, _)| *b != block) {
            blocks.push((block.clone(), vec![]));
        }
        let strategies = &mut blocks.last_mut().expect("block").1;
        if strategies.last().is_none_or(|(s, _)| *s != strategy) {
            strategies.push((strategy.clone(), BTreeMap::new()));
        }
        strategies.last_mut().expect("strategy").1.insert(get(2), (get(3), get(4)));
    }
    let header = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(&path, e))?
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .unwrap_or_default();

    let cell = |(v, r): &(String, String)| -> String {
        let v = match v.parse::<f64>() {
            Ok(x) if x.fract() == 0.0 && x.abs() < 1e15 => format!("{x:.0}"),
            Ok(x) => format!("{x:.4}"),
            Err(_) => v.clone(),
        };
        match r.parse::<f64>() {
            Ok(x) => format!("{v} ({:.1}%)", 100.0 * x),
            Err(_) => v,
        }
    };
    let width = REPORT_ROWS.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = String::new();
    if !header.is_empty() {
        out.push_str(&format!("{header}\n"));
    }
    for (block, strategies) in &blocks {
        out.push_str(&format!("\n[{block}]\n"));
        out.push_str(&format!("{:width$}", ""));
        for (s, _) in strategies {
            out.push_str(&format!("  {s:>20}"));
        }
        out.push('\n');
        for row in REPORT_ROWS {
            out.push_str(&format!("{row:width$}"));
            for (_, rows) in strategies {
                let c = rows.get(row).map(cell).unwrap_or_else(|| "NA".into());
                out.push_str(&format!("  {c:>20}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}
