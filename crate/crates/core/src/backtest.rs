//! Threshold trading of cointegrated spreads, the formation-period filter,
//! both daily P&L constructions and the summary table.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::johansen::{johansen_test, DetSpec, JohansenResult};
use crate::market_data::{CleanUniverse, DateRange, RiskFreeCurve};
use crate::portfolio::{CandidatePortfolio, Strategy};
use crate::stats;

/// Gross notional of every opened trade.
pub const GROSS_EXPOSURE: f64 = 2.0;
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Long the spread: bought when it is cheap (z very negative).
    LongSpread,
    /// Short the spread: sold when it is rich (z very positive).
    ShortSpread,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LongSpread => "long-spread",
            Direction::ShortSpread => "short-spread",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    Reverted,
    Bailout,
    PeriodEnd,
}

impl ExitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::Reverted => "reverted",
            ExitReason::Bailout => "bailout",
            ExitReason::PeriodEnd => "period-end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Entry threshold in formation standard deviations.
    pub open_k: f64,
    /// Mark-to-market loss (dollars on the $2 book) that forces an exit.
    pub bailout_loss: f64,
    pub force_close_at_end: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            open_k: 2.0,
            bailout_loss: 0.6,
            force_close_at_end: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.open_k > 0.0) {
            return Err(Error::input("open_k must be positive"));
        }
        if !(self.bailout_loss > 0.0) {
            return Err(Error::input("bailout_loss must be positive"));
        }
        Ok(())
    }
}

/// Spread `s = β·p` with its formation-window mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadModel {
    pub beta: Vec<f64>,
    pub mu_s: f64,
    pub sigma_s: f64,
}

impl SpreadModel {
    /// Freezes the spread statistics over `prices` (dates × members).
    pub fn fit(beta: &[f64], prices: &DMatrix<f64>) -> Result<Self> {
        if beta.len() != prices.ncols() {
            return Err(Error::input("beta length does not match the price columns"));
        }
        let s = spread(beta, prices);
        if s.len() < 2 {
            return Err(Error::input("need at least two dates to fit a spread"));
        }
        let mu_s = stats::mean(&s);
        let sigma_s = stats::sample_sd(&s);
        if !(sigma_s > 1e-12 * (1.0 + mu_s.abs())) {
            return Err(Error::DegenerateSeries("spread is constant over the formation window".into()));
        }
        Ok(Self {
            beta: beta.to_vec(),
            mu_s,
            sigma_s,
        })
    }

    pub fn z(&self, prices: &DMatrix<f64>, t: usize) -> f64 {
        let s: f64 = self.beta.iter().enumerate().map(|(i, b)| b * prices[(t, i)]).sum();
        (s - self.mu_s) / self.sigma_s
    }
}

fn spread(beta: &[f64], prices: &DMatrix<f64>) -> Vec<f64> {
    (0..prices.nrows())
        .map(|t| beta.iter().enumerate().map(|(i, b)| b * prices[(t, i)]).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionWeights {
    /// Signed dollar weights, `Σ|w| = 2`.
    pub w: Vec<f64>,
}

/// `w = ±2β / Σ|β|`, positive for a long spread.
pub fn weights_from_beta(beta: &[f64], direction: Direction) -> Result<PositionWeights> {
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    if !(l1 > 0.0) || !l1.is_finite() {
        return Err(Error::input("beta must be a nonzero finite vector"));
    }
    let sign = match direction {
        Direction::LongSpread => 1.0,
        Direction::ShortSpread => -1.0,
    };
    Ok(PositionWeights {
        w: beta.iter().map(|b| sign * GROSS_EXPOSURE * b / l1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub open_date: NaiveDate,
    pub close_date: NaiveDate,
    /// Row indices within the simulated window.
    pub open_index: usize,
    pub close_index: usize,
    pub direction: Direction,
    pub entry_spread_z: f64,
    pub exit_reason: ExitReason,
    /// Dollars on the $2 book, frictionless.
    pub profit: f64,
    pub weights: Vec<f64>,
}

impl Trade {
    pub fn holding_days(&self) -> usize {
        self.close_index - self.open_index
    }
}

/// A position still open at the end of a window simulated without forced
/// closing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenPosition {
    pub open_date: NaiveDate,
    pub open_index: usize,
    pub direction: Direction,
    pub unrealized: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PnLKind {
    MarkToMarket,
    RealizedDistributed,
}

impl PnLKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PnLKind::MarkToMarket => "mark-to-market",
            PnLKind::RealizedDistributed => "realized-distributed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnLSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    pub kind: PnLKind,
}

impl PnLSeries {
    pub fn zeros(dates: &[NaiveDate], kind: PnLKind) -> Self {
        Self {
            dates: dates.to_vec(),
            values: vec![0.0; dates.len()],
            kind,
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Elementwise sum; both series must share dates and kind.
    pub fn add_assign(&mut self, other: &PnLSeries) {
        debug_assert_eq!(self.dates, other.dates);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub trades: Vec<Trade>,
    /// Daily change in the value of the open position.
    pub mtm: PnLSeries,
    pub open_position: Option<OpenPosition>,
}

impl SimOutcome {
    pub fn realized(&self) -> f64 {
        self.trades.iter().map(|t| t.profit).sum()
    }
}

/// Trades one spread over a window. `prices` is dates × members, aligned
/// with `dates` and with the columns of `model.beta`.
///
/// Flat: open short when `z ≥ open_k`, long when `z ≤ −open_k`, never on the
/// last date. Open: close when `z` reaches or crosses 0, else when the
/// position's mark-to-market value is at or below `−bailout_loss`, else on
/// the last date if forced closing is on. A closed position may reopen from
/// the next date.
pub fn simulate(
    prices: &DMatrix<f64>,
    dates: &[NaiveDate],
    model: &SpreadModel,
    cfg: &SimConfig,
) -> Result<SimOutcome> {
    cfg.validate()?;
    let (t_len, m) = prices.shape();
    if dates.len() != t_len {
        return Err(Error::input("dates and price rows differ in length"));
    }
    if model.beta.len() != m {
        return Err(Error::input("beta length does not match the price columns"));
    }
    if !(model.sigma_s > 0.0) {
        return Err(Error::DegenerateSeries("spread standard deviation must be positive".into()));
    }

    struct Open {
        index: usize,
        direction: Direction,
        z: f64,
        weights: Vec<f64>,
        shares: Vec<f64>,
        value: f64,
    }

    let mut trades = Vec::new();
    let mut mtm = vec![0.0; t_len];
    let mut open: Option<Open> = None;

    for t in 0..t_len {
        let z = model.z(prices, t);
        if let Some(pos) = open.as_mut() {
            let value: f64 = (0..m).map(|i| pos.shares[i] * (prices[(t, i)] - prices[(pos.index, i)])).sum();
            mtm[t] = value - pos.value;
            pos.value = value;
            let reverted = match pos.direction {
                Direction::ShortSpread => z <= 0.0,
                Direction::LongSpread => z >= 0.0,
            };
            let exit = if reverted {
                Some(ExitReason::Reverted)
            } else if value <= -cfg.bailout_loss {
                Some(ExitReason::Bailout)
            } else if t + 1 == t_len && cfg.force_close_at_end {
                Some(ExitReason::PeriodEnd)
            } else {
                None
            };
            if let Some(reason) = exit {
                let pos = open.take().expect("position is open");
                trades.push(Trade {
                    open_date: dates[pos.index],
                    close_date: dates[t],
                    open_index: pos.index,
                    close_index: t,
                    direction: pos.direction,
                    entry_spread_z: pos.z,
                    exit_reason: reason,
                    profit: value,
                    weights: pos.weights,
                });
            }
            continue;
        }
        if t + 1 == t_len {
            break;
        }
        let direction = if z >= cfg.open_k {
            Direction::ShortSpread
        } else if z <= -cfg.open_k {
            Direction::LongSpread
        } else {
            continue;
        };
        let weights = weights_from_beta(&model.beta, direction)?.w;
        let shares: Vec<f64> = (0..m).map(|i| weights[i] / prices[(t, i)]).collect();
        open = Some(Open {
            index: t,
            direction,
            z,
            weights,
            shares,
            value: 0.0,
        });
    }

    let open_position = open.map(|p| OpenPosition {
        open_date: dates[p.index],
        open_index: p.index,
        direction: p.direction,
        unrealized: p.value,
    });
    Ok(SimOutcome {
        trades,
        mtm: PnLSeries {
            dates: dates.to_vec(),
            values: mtm,
            kind: PnLKind::MarkToMarket,
        },
        open_position,
    })
}

/// Cointegration settings used when screening candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JohansenConfig {
    pub lagged_differences: usize,
    pub det_spec: DetSpec,
}

impl Default for JohansenConfig {
    fn default() -> Self {
        Self {
            lagged_differences: 1,
            det_spec: DetSpec::UnrestrictedConstant,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPortfolio {
    pub candidate: CandidatePortfolio,
    pub johansen: JohansenResult,
    pub model: SpreadModel,
    pub formation_profit: f64,
    pub formation_trades: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Johansen,
    FormationLoss,
    Degenerate(String),
}

impl RejectReason {
    pub fn label(&self) -> String {
        match self {
            RejectReason::Johansen => "johansen".into(),
            RejectReason::FormationLoss => "formation-loss".into(),
            RejectReason::Degenerate(m) => format!("degenerate: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub identified: usize,
    pub passed_johansen: usize,
    pub selected: Vec<SelectedPortfolio>,
    pub rejected: Vec<(CandidatePortfolio, RejectReason)>,
}

fn screen_one(
    c: &CandidatePortfolio,
    universe: &CleanUniverse,
    formation: &DateRange,
    jc: &JohansenConfig,
    cfg: &SimConfig,
) -> std::result::Result<SelectedPortfolio, (bool, RejectReason)> {
    let prices = universe.price_window(formation, &c.members);
    let dates = universe.window_dates(formation);
    let degenerate = |e: Error| (false, RejectReason::Degenerate(e.to_string()));
    let joh = johansen_test(&prices, jc.lagged_differences, jc.det_spec).map_err(degenerate)?;
    if !joh.cointegrated() {
        return Err((false, RejectReason::Johansen));
    }
    let model = SpreadModel::fit(&joh.beta, &prices).map_err(|e| (true, RejectReason::Degenerate(e.to_string())))?;
    let in_sample = SimConfig {
        force_close_at_end: true,
        ..*cfg
    };
    let out = simulate(&prices, dates, &model, &in_sample).map_err(|e| (true, RejectReason::Degenerate(e.to_string())))?;
    let profit = out.realized();
    if !(profit > 0.0) {
        return Err((true, RejectReason::FormationLoss));
    }
    Ok(SelectedPortfolio {
        candidate: c.clone(),
        johansen: joh,
        model,
        formation_profit: profit,
        formation_trades: out.trades.len(),
    })
}

/// Keeps candidates that are cointegrated over the formation window and
/// whose spread, traded inside that same window, makes money.
pub fn formation_filter(
    candidates: &[CandidatePortfolio],
    universe: &CleanUniverse,
    formation: &DateRange,
    jc: &JohansenConfig,
    cfg: &SimConfig,
) -> FilterOutcome {
    let results: Vec<_> = candidates
        .par_iter()
        .map(|c| screen_one(c, universe, formation, jc, cfg))
        .collect();
    let mut out = FilterOutcome {
        identified: candidates.len(),
        passed_johansen: 0,
        selected: vec![],
        rejected: vec![],
    };
    for (c, r) in candidates.iter().zip(results) {
        match r {
            Ok(s) => {
                out.passed_johansen += 1;
                out.selected.push(s);
            }
            Err((passed, reason)) => {
                if passed {
                    out.passed_johansen += 1;
                }
                out.rejected.push((c.clone(), reason));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioResult {
    pub candidate: CandidatePortfolio,
    pub outcome: SimOutcome,
}

/// Trades every selected portfolio over `trading` with its frozen spread
/// statistics. Output order follows `selected`.
pub fn trade_selected(
    selected: &[SelectedPortfolio],
    universe: &CleanUniverse,
    trading: &DateRange,
    cfg: &SimConfig,
) -> Result<Vec<PortfolioResult>> {
    let dates = universe.window_dates(trading);
    selected
        .par_iter()
        .map(|s| {
            let prices = universe.price_window(trading, &s.candidate.members);
            let outcome = simulate(&prices, dates, &s.model, cfg)?;
            Ok(PortfolioResult {
                candidate: s.candidate.clone(),
                outcome,
            })
        })
        .collect()
}

/// Discount factors `D(i) = Π_{j≤i} (1 + r_j/252)⁻¹` over `dates`, and the
/// number of dates whose rate was carried forward.
pub fn discount_factors(dates: &[NaiveDate], riskfree: &RiskFreeCurve) -> (Vec<f64>, usize) {
    let (rates, filled) = riskfree.rates_for(dates);
    let mut d = 1.0;
    let factors = rates
        .iter()
        .map(|r| {
            d /= 1.0 + r / TRADING_DAYS_PER_YEAR;
            d
        })
        .collect();
    (factors, filled)
}

/// Spreads each trade's realized profit over its holding days `o+1..=c`.
///
/// Day `t` receives `P · D(c) / (h · D(t))`, so after discounting every
/// holding day carries the same present value and the trade contributes its
/// full present value `P · D(c)`. With zero rates this is the plain even split
/// `P / h` and the series sums to the total realized profit. Trades from
/// different portfolios are added.
pub fn realized_distributed_pnl(trades: &[Trade], riskfree: &RiskFreeCurve, dates: &[NaiveDate]) -> (PnLSeries, usize) {
    let (d, filled) = discount_factors(dates, riskfree);
    let mut values = vec![0.0; dates.len()];
    for tr in trades {
        let h = tr.holding_days();
        if h == 0 {
            continue;
        }
        let pv_per_day = tr.profit * d[tr.close_index] / h as f64;
        for t in tr.open_index + 1..=tr.close_index {
            values[t] += pv_per_day / d[t];
        }
    }
    (
        PnLSeries {
            dates: dates.to_vec(),
            values,
            kind: PnLKind::RealizedDistributed,
        },
        filled,
    )
}

/// Everything produced by one strategy over one formation/trading pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub candidates: Vec<CandidatePortfolio>,
    pub filter: FilterOutcome,
    pub results: Vec<PortfolioResult>,
    pub trading_dates: Vec<NaiveDate>,
}

impl StrategyRun {
    pub fn trades(&self) -> Vec<Trade> {
        self.results.iter().flat_map(|r| r.outcome.trades.iter().cloned()).collect()
    }

    pub fn mtm_pnl(&self) -> PnLSeries {
        let mut s = PnLSeries::zeros(&self.trading_dates, PnLKind::MarkToMarket);
        for r in &self.results {
            s.add_assign(&r.outcome.mtm);
        }
        s
    }
}

/// Row names of the summary table, in table order.
pub const REPORT_ROWS: [&str; 10] = [
    "Portfolios identified",
    "Average # of stocks per portfolio",
    "Portfolios passed Johansen test",
    "Portfolios that produce a net positive profit during formation period",
    "Portfolios that produce a net positive profit during trading period",
    "Total # of trades during trading period",
    "Total # of trades that produce a net positive profit during trading period",
    "Average net profit per trade",
    "Average net profit per portfolio",
    "Total net profit",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub portfolios_identified: usize,
    /// `None` when no portfolio was identified.
    pub avg_stocks_per_portfolio: Option<f64>,
    pub passed_johansen: usize,
    pub positive_formation: usize,
    pub positive_trading: usize,
    pub total_trades: usize,
    pub winning_trades: usize,
    pub avg_profit_per_trade: Option<f64>,
    pub avg_profit_per_portfolio: Option<f64>,
    pub total_net_profit: f64,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl StrategyReport {
    /// `(row name, value, ratio)` in table order; ratios follow the
    /// table's footnotes (each count over the preceding stage).
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>, Option<f64>)> {
        vec![
            (REPORT_ROWS[0], Some(self.portfolios_identified as f64), None),
            (REPORT_ROWS[1], self.avg_stocks_per_portfolio, None),
            (
                REPORT_ROWS[2],
                Some(self.passed_johansen as f64),
                ratio(self.passed_johansen, self.portfolios_identified),
            ),
            (
                REPORT_ROWS[3],
                Some(self.positive_formation as f64),
                ratio(self.positive_formation, self.passed_johansen),
            ),
            (
                REPORT_ROWS[4],
                Some(self.positive_trading as f64),
                ratio(self.positive_trading, self.positive_formation),
            ),
            (REPORT_ROWS[5], Some(self.total_trades as f64), None),
            (
                REPORT_ROWS[6],
                Some(self.winning_trades as f64),
                ratio(self.winning_trades, self.total_trades),
            ),
            (REPORT_ROWS[7], self.avg_profit_per_trade, None),
            (REPORT_ROWS[8], self.avg_profit_per_portfolio, None),
            (REPORT_ROWS[9], Some(self.total_net_profit), None),
        ]
    }
}

pub fn metrics(run: &StrategyRun) -> StrategyReport {
    let n_id = run.candidates.len();
    let stocks: usize = run.candidates.iter().map(|c| c.len()).sum();
    let trades = run.trades();
    let total: f64 = trades.iter().map(|t| t.profit).sum();
    let traded = run.results.len();
    StrategyReport {
        strategy: run.strategy,
        portfolios_identified: n_id,
        avg_stocks_per_portfolio: ratio(stocks, n_id),
        passed_johansen: run.filter.passed_johansen,
        positive_formation: run.filter.selected.len(),
        positive_trading: run.results.iter().filter(|r| r.outcome.realized() > 0.0).count(),
        total_trades: trades.len(),
        winning_trades: trades.iter().filter(|t| t.profit > 0.0).count(),
        avg_profit_per_trade: (!trades.is_empty()).then(|| total / trades.len() as f64),
        avg_profit_per_portfolio: (traded > 0).then(|| total / traded as f64),
        total_net_profit: total,
    }
}

/// Splits a trading window at `mid` into `[start, mid)` and `[mid, end)`.
pub fn split_halves(trading: &DateRange, mid: NaiveDate) -> Result<(DateRange, DateRange)> {
    if !(trading.start < mid && mid < trading.end) {
        return Err(Error::input(format!(
            "midpoint {mid} is not strictly inside the trading window"
        )));
    }
    Ok((DateRange::new(trading.start, mid)?, DateRange::new(mid, trading.end)?))
}
