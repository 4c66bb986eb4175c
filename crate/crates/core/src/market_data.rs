//! Factor panel ingestion, cleaning, factor transforms and cross-sectional
//! standardization.
//!
//! Input files are long-format CSV (`date,ticker,field,value`): one file for
//! the price fields (`close`, `ask`, `bid`) and one for the fundamental and
//! technical factors. All nineteen raw dimensions live in one tensor; `close`
//! doubles as the traded price series.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const CLOSE: &str = "close";
pub const ASK: &str = "ask";
pub const BID: &str = "bid";
pub const BUY_RECS: &str = "buy_recommendations";
pub const SELL_RECS: &str = "sell_recommendations";
pub const MARKET_CAP: &str = "market_cap";
pub const SHARES_OUTSTANDING: &str = "shares_outstanding";
pub const REC_SCORE: &str = "rec_score";
pub const LOG_MARKET_CAP: &str = "log_market_cap";
pub const LOG_SHARES_OUTSTANDING: &str = "log_shares_outstanding";

/// The nineteen raw dimensions, in canonical order.
pub const RAW_FACTORS: [&str; 19] = [
    "volatility_60d",
    SHARES_OUTSTANDING,
    "sales_growth",
    "rsi",
    "price_to_book",
    "price_to_sales",
    "price_to_ebitda",
    "pe_ratio",
    "normalized_roe",
    MARKET_CAP,
    "free_cash_flow_growth",
    "cash_flow_growth",
    "dividend_per_share",
    "analyst_rating",
    SELL_RECS,
    BUY_RECS,
    CLOSE,
    ASK,
    BID,
];

/// Fields expected in the price file.
pub const PRICE_FIELDS: [&str; 3] = [CLOSE, ASK, BID];

pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT)
        .map_err(|e| Error::input(format!("bad date `{s}`: {e}")))
}

/// Half-open date interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start >= end {
            return Err(Error::input(format!("empty date range [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d < self.end
    }

    /// Index range of `dates` (sorted ascending) falling inside the window.
    pub fn indices(&self, dates: &[NaiveDate]) -> Range<usize> {
        let lo = dates.partition_point(|d| *d < self.start);
        let hi = dates.partition_point(|d| *d < self.end);
        lo..hi.max(lo)
    }
}

/// Formation window followed by a trading window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSplit {
    pub formation: DateRange,
    pub trading: DateRange,
}

impl PeriodSplit {
    pub fn new(formation: DateRange, trading: DateRange) -> Result<Self> {
        if formation.end > trading.start {
            return Err(Error::input(
                "formation window must end before the trading window starts",
            ));
        }
        Ok(Self { formation, trading })
    }
}

/// Column names and field-name mapping for the long-format inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    pub date_column: String,
    pub ticker_column: String,
    pub field_column: String,
    pub value_column: String,
    /// Canonical factor name -> field label used in the files. Factors not
    /// listed here are expected under their canonical name.
    pub field_names: BTreeMap<String, String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            ticker_column: "ticker".into(),
            field_column: "field".into(),
            value_column: "value".into(),
            field_names: BTreeMap::new(),
        }
    }
}

impl PanelSchema {
    fn file_label<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.field_names
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }
}

/// Raw date × ticker × factor panel with explicit missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub factor_names: Vec<String>,
    /// Closing prices, date-major: `prices[d * n_tickers + t]`.
    pub prices: Vec<Option<f64>>,
    /// `factors[(d * n_tickers + t) * n_factors + f]`.
    pub factors: Vec<Option<f64>>,
}

impl RawPanel {
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn price(&self, d: usize, t: usize) -> Option<f64> {
        self.prices[d * self.n_tickers() + t]
    }

    pub fn factor(&self, d: usize, t: usize, f: usize) -> Option<f64> {
        self.factors[(d * self.n_tickers() + t) * self.n_factors() + f]
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factor_names.iter().position(|n| n == name)
    }

    fn validate(&self) -> Result<()> {
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("panel dates must be strictly increasing"));
        }
        if self.prices.len() != self.n_dates() * self.n_tickers()
            || self.factors.len() != self.n_dates() * self.n_tickers() * self.n_factors()
        {
            return Err(Error::input("panel storage does not match its dimensions"));
        }
        if self.prices.iter().flatten().any(|p| *p <= 0.0) {
            return Err(Error::input("prices must be strictly positive"));
        }
        Ok(())
    }
}

struct LongRecord {
    date: NaiveDate,
    ticker: String,
    field: String,
    value: Option<f64>,
}

fn read_long_csv(path: &Path, schema: &PanelSchema) -> Result<Vec<LongRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let (dc, tc, fc, vc) = (
        col(&schema.date_column)?,
        col(&schema.ticker_column)?,
        col(&schema.field_column)?,
        col(&schema.value_column)?,
    );
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let date = parse_date(get(dc))?;
        let value = get(vc).parse::<f64>().ok().filter(|v| v.is_finite());
        out.push(LongRecord {
            date,
            ticker: get(tc).to_string(),
            field: get(fc).to_string(),
            value,
        });
    }
    if out.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

/// Loads the two long-format CSV files into a [`RawPanel`].
///
/// Tickers are sorted lexicographically and dates ascending. Blank,
/// unparseable or non-positive price cells, and absent rows, become missing
/// cells rather than errors.
pub fn load_panel(prices_path: &Path, factors_path: &Path, schema: &PanelSchema) -> Result<RawPanel> {
    let price_rows = read_long_csv(prices_path, schema)?;
    let factor_rows = read_long_csv(factors_path, schema)?;

    let label_to_canonical: HashMap<&str, usize> = RAW_FACTORS
        .iter()
        .enumerate()
        .map(|(i, c)| (schema.file_label(c), i))
        .collect();

    let close_label = schema.file_label(CLOSE);
    if !price_rows.iter().any(|r| r.field == close_label) {
        return Err(Error::Schema(format!(
            "{}: required field `{close_label}` not present",
            prices_path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for r in price_rows.iter().chain(&factor_rows) {
        if let Some(&i) = label_to_canonical.get(r.field.as_str()) {
            seen.insert(i);
        }
    }
    if let Some(missing) = (0..RAW_FACTORS.len()).find(|i| !seen.contains(i)) {
        return Err(Error::Schema(format!(
            "required field `{}` not present in either input file",
            schema.file_label(RAW_FACTORS[missing])
        )));
    }

    let dates: Vec<NaiveDate> = price_rows
        .iter()
        .chain(&factor_rows)
        .map(|r| r.date)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tickers: Vec<String> = price_rows
        .iter()
        .chain(&factor_rows)
        .map(|r| r.ticker.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let date_ix: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let ticker_ix: HashMap<&str, usize> = tickers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    let (nd, nt, nf) = (dates.len(), tickers.len(), RAW_FACTORS.len());
    let close_f = RAW_FACTORS.iter().position(|f| *f == CLOSE).unwrap_or(0);
    let mut prices = vec![None; nd * nt];
    let mut factors = vec![None; nd * nt * nf];
    for r in price_rows.iter().chain(&factor_rows) {
        let Some(&f) = label_to_canonical.get(r.field.as_str()) else {
            continue;
        };
        let d = date_ix[&r.date];
        let t = ticker_ix[r.ticker.as_str()];
        factors[(d * nt + t) * nf + f] = r.value;
        if f == close_f {
            prices[d * nt + t] = r.value.filter(|p| *p > 0.0);
            if prices[d * nt + t].is_none() {
                factors[(d * nt + t) * nf + f] = None;
            }
        }
    }

    let panel = RawPanel {
        dates,
        tickers,
        factor_names: RAW_FACTORS.iter().map(|s| s.to_string()).collect(),
        prices,
        factors,
    };
    panel.validate()?;
    Ok(panel)
}

/// Writes a panel back out in the long format [`load_panel`] reads.
pub fn write_panel(panel: &RawPanel, prices_path: &Path, factors_path: &Path) -> Result<()> {
    let mut pw = csv::Writer::from_path(prices_path)?;
    let mut fw = csv::Writer::from_path(factors_path)?;
    pw.write_record(["date", "ticker", "field", "value"])?;
    fw.write_record(["date", "ticker", "field", "value"])?;
    for (d, date) in panel.dates.iter().enumerate() {
        let ds = date.format(DATE_FORMAT).to_string();
        for (t, ticker) in panel.tickers.iter().enumerate() {
            for (f, name) in panel.factor_names.iter().enumerate() {
                let v = panel.factor(d, t, f).map(|v| v.to_string()).unwrap_or_default();
                let w = if PRICE_FIELDS.contains(&name.as_str()) {
                    &mut pw
                } else {
                    &mut fw
                };
                w.write_record([ds.as_str(), ticker.as_str(), name.as_str(), v.as_str()])?;
            }
        }
    }
    pw.flush().map_err(|e| Error::io(prices_path, e))?;
    fw.flush().map_err(|e| Error::io(factors_path, e))?;
    Ok(())
}

/// Dense universe: every ticker has every cell over every retained date.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanUniverse {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub factor_names: Vec<String>,
    /// dates × tickers.
    pub prices: DMatrix<f64>,
    /// `factors[(d * n_tickers + t) * n_factors + f]`.
    pub factors: Vec<f64>,
}

impl CleanUniverse {
    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn factor(&self, d: usize, t: usize, f: usize) -> f64 {
        self.factors[(d * self.n_tickers() + t) * self.n_factors() + f]
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factor_names.iter().position(|n| n == name)
    }

    /// Price rows for a date window, restricted to the given tickers
    /// (columns in the given order).
    pub fn price_window(&self, window: &DateRange, members: &[usize]) -> DMatrix<f64> {
        let rows = window.indices(&self.dates);
        DMatrix::from_fn(rows.len(), members.len(), |i, j| {
            self.prices[(rows.start + i, members[j])]
        })
    }

    pub fn window_dates(&self, window: &DateRange) -> &[NaiveDate] {
        &self.dates[window.indices(&self.dates)]
    }
}

impl From<&CleanUniverse> for RawPanel {
    fn from(u: &CleanUniverse) -> Self {
        let (nd, nt) = (u.dates.len(), u.n_tickers());
        let mut prices = Vec::with_capacity(nd * nt);
        for d in 0..nd {
            for t in 0..nt {
                prices.push(Some(u.prices[(d, t)]));
            }
        }
        RawPanel {
            dates: u.dates.clone(),
            tickers: u.tickers.clone(),
            factor_names: u.factor_names.clone(),
            prices,
            factors: u.factors.iter().map(|v| Some(*v)).collect(),
        }
    }
}

/// Drops non-trading days (every price missing), then every ticker with at
/// least one missing price or factor cell on the remaining days.
pub fn clean(panel: &RawPanel) -> Result<CleanUniverse> {
    panel.validate()?;
    let (nt, nf) = (panel.n_tickers(), panel.n_factors());
    if panel.n_dates() == 0 || nt == 0 {
        return Err(Error::input("panel is empty"));
    }
    let kept_dates: Vec<usize> = (0..panel.n_dates())
        .filter(|&d| (0..nt).any(|t| panel.price(d, t).is_some()))
        .collect();
    let kept_tickers: Vec<usize> = (0..nt)
        .filter(|&t| {
            kept_dates.iter().all(|&d| {
                panel.price(d, t).is_some() && (0..nf).all(|f| panel.factor(d, t, f).is_some())
            })
        })
        .collect();
    if kept_tickers.is_empty() || kept_dates.is_empty() {
        return Err(Error::EmptyUniverse);
    }

    let prices = DMatrix::from_fn(kept_dates.len(), kept_tickers.len(), |i, j| {
        panel.price(kept_dates[i], kept_tickers[j]).unwrap_or(f64::NAN)
    });
    let mut factors = Vec::with_capacity(kept_dates.len() * kept_tickers.len() * nf);
    for &d in &kept_dates {
        for &t in &kept_tickers {
            for f in 0..nf {
                factors.push(panel.factor(d, t, f).unwrap_or(f64::NAN));
            }
        }
    }
    Ok(CleanUniverse {
        dates: kept_dates.iter().map(|&d| panel.dates[d]).collect(),
        tickers: kept_tickers.iter().map(|&t| panel.tickers[t].clone()).collect(),
        factor_names: panel.factor_names.clone(),
        prices,
        factors,
    })
}

/// `(buy - sell) / (buy + sell)`, or 0 when the stock has no coverage.
pub fn rec_score(buy: f64, sell: f64) -> f64 {
    let total = buy + sell;
    if total == 0.0 {
        0.0
    } else {
        (buy - sell) / total
    }
}

/// Merges buy/sell recommendation counts into `rec_score` and replaces market
/// cap and shares outstanding by their natural logarithms. The recommendation
/// score takes the position of the sell-count column; the buy-count column is
/// dropped.
pub fn transform_factors(universe: &CleanUniverse) -> Result<CleanUniverse> {
    let idx = |name: &str| {
        universe
            .factor_index(name)
            .ok_or_else(|| Error::Schema(format!("factor `{name}` not present")))
    };
    let (buy, sell, cap, shares) = (
        idx(BUY_RECS)?,
        idx(SELL_RECS)?,
        idx(MARKET_CAP)?,
        idx(SHARES_OUTSTANDING)?,
    );

    let new_names: Vec<String> = universe
        .factor_names
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != buy)
        .map(|(i, n)| match i {
            i if i == sell => REC_SCORE.to_string(),
            i if i == cap => LOG_MARKET_CAP.to_string(),
            i if i == shares => LOG_SHARES_OUTSTANDING.to_string(),
            _ => n.clone(),
        })
        .collect();

    let (nd, nt, nf) = (universe.dates.len(), universe.n_tickers(), universe.n_factors());
    let mut factors = Vec::with_capacity(nd * nt * (nf - 1));
    for d in 0..nd {
        for t in 0..nt {
            let b = universe.factor(d, t, buy);
            let s = universe.factor(d, t, sell);
            if b < 0.0 || s < 0.0 {
                return Err(Error::Domain(format!(
                    "negative recommendation count for {} on {}",
                    universe.tickers[t], universe.dates[d]
                )));
            }
            for f in 0..nf {
                let v = universe.factor(d, t, f);
                let out = if f == buy {
                    continue;
                } else if f == sell {
                    rec_score(b, s)
                } else if f == cap || f == shares {
                    if v <= 0.0 {
                        return Err(Error::Domain(format!(
                            "non-positive {} for {} on {}",
                            universe.factor_names[f], universe.tickers[t], universe.dates[d]
                        )));
                    }
                    v.ln()
                } else {
                    v
                };
                factors.push(out);
            }
        }
    }
    Ok(CleanUniverse {
        dates: universe.dates.clone(),
        tickers: universe.tickers.clone(),
        factor_names: new_names,
        prices: universe.prices.clone(),
        factors,
    })
}

/// Tickers × factors, each column z-scored across tickers.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFactorMatrix {
    pub tickers: Vec<String>,
    pub factor_names: Vec<String>,
    pub values: DMatrix<f64>,
}

/// Averages each factor over `window` per ticker, then z-scores every factor
/// column across tickers with the sample standard deviation.
pub fn snapshot_and_standardize(
    universe: &CleanUniverse,
    window: &DateRange,
) -> Result<NormalizedFactorMatrix> {
    let rows = window.indices(&universe.dates);
    if rows.is_empty() {
        return Err(Error::input("standardization window contains no dates"));
    }
    let (nt, nf) = (universe.n_tickers(), universe.n_factors());
    if nt < 2 {
        return Err(Error::input("need at least two tickers to standardize"));
    }
    let len = rows.len() as f64;
    let mut values = DMatrix::zeros(nt, nf);
    for t in 0..nt {
        for f in 0..nf {
            values[(t, f)] = rows.clone().map(|d| universe.factor(d, t, f)).sum::<f64>() / len;
        }
    }
    for f in 0..nf {
        let col: Vec<f64> = values.column(f).iter().copied().collect();
        let m = stats::mean(&col);
        let sd = stats::sample_sd(&col);
        let scale = m.abs().max(1.0);
        if !(sd > 1e-12 * scale) {
            return Err(Error::DegenerateFactor(universe.factor_names[f].clone()));
        }
        for t in 0..nt {
            values[(t, f)] = (values[(t, f)] - m) / sd;
        }
    }
    Ok(NormalizedFactorMatrix {
        tickers: universe.tickers.clone(),
        factor_names: universe.factor_names.clone(),
        values,
    })
}

/// Annualized decimal risk-free rates keyed by date.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RiskFreeCurve {
    rates: BTreeMap<NaiveDate, f64>,
}

impl RiskFreeCurve {
    pub fn new(rates: BTreeMap<NaiveDate, f64>) -> Self {
        Self { rates }
    }

    pub fn constant(dates: &[NaiveDate], rate: f64) -> Self {
        Self {
            rates: dates.iter().map(|d| (*d, rate)).collect(),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NaiveDate, &f64)> {
        self.rates.iter()
    }

    /// Rate on `date`; when absent the nearest prior observation is carried
    /// forward (or, before the first observation, the first one is used).
    /// The flag reports whether a fill happened. An empty curve is zero.
    pub fn rate_on(&self, date: NaiveDate) -> (f64, bool) {
        if self.rates.is_empty() {
            return (0.0, false);
        }
        if let Some(r) = self.rates.get(&date) {
            return (*r, false);
        }
        if let Some((_, r)) = self.rates.range(..date).next_back() {
            return (*r, true);
        }
        (*self.rates.values().next().unwrap_or(&0.0), true)
    }

    /// Rates for a date sequence plus the number of filled dates.
    pub fn rates_for(&self, dates: &[NaiveDate]) -> (Vec<f64>, usize) {
        let mut filled = 0;
        let rates = dates
            .iter()
            .map(|d| {
                let (r, f) = self.rate_on(*d);
                filled += f as usize;
                r
            })
            .collect();
        (rates, filled)
    }
}

/// Reads a two-column `date,rate` CSV of annualized decimal rates.
pub fn load_riskfree(path: &Path) -> Result<RiskFreeCurve> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut rates = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let d = parse_date(rec.get(0).unwrap_or(""))?;
        if let Some(r) = rec.get(1).and_then(|s| s.trim().parse::<f64>().ok()) {
            rates.insert(d, r);
        }
    }
    if rates.is_empty() {
        return Err(Error::input(format!("{}: no risk-free rates", path.display())));
    }
    Ok(RiskFreeCurve { rates })
}

pub fn write_riskfree(curve: &RiskFreeCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "rate"])?;
    for (d, r) in &curve.rates {
        w.write_record([d.format(DATE_FORMAT).to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
