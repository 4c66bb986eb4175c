//! Seeded synthetic universes with planted cointegrated groups.
//!
//! Every planted group shares a geometric random-walk driver `D` and a
//! factor-space centroid. Member `i` trades at `cᵢ · (D + 100 uᵢ)` where `uᵢ`
//! is a stationary AR(1) deviation with standard deviation `coint_noise_sd`,
//! so `p_i / c_i − p_j / c_j` is stationary for every pair in the group.
//! Stocks outside the groups are independent random walks with independent
//! factor profiles. Observed factors load on the latent profile through one
//! random loading matrix, so they are correlated the way real fundamentals
//! are and the leading principal components carry the group structure.

use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{
    self, RawPanel, RiskFreeCurve, ASK, BID, BUY_RECS, CLOSE, MARKET_CAP, RAW_FACTORS, SELL_RECS,
    SHARES_OUTSTANDING,
};
use crate::rng::stream_rng;

/// Observed non-price factor slots: the sixteen non-price raw factors with
/// the two recommendation counts sharing one.
pub const FACTOR_SLOTS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_groups: usize,
    pub group_size: usize,
    /// Dimension of the latent factor profile (at most [`FACTOR_SLOTS`]).
    pub factor_dim: usize,
    /// Stationary standard deviation of each member's deviation from the
    /// group driver, relative to a driver level of 100.
    pub coint_noise_sd: f64,
    pub horizon_days: usize,
    pub seed: u64,
    /// AR(1) coefficient of the planted deviations.
    pub spread_ar: f64,
    /// Daily log-return volatility of drivers and independent stocks.
    pub driver_vol: f64,
    /// Spread of group centroids (and of independent profiles) per latent
    /// dimension.
    pub centroid_sd: f64,
    /// Spread of members around their centroid.
    pub within_sd: f64,
    /// Stock-specific noise added to every observed factor slot.
    pub idio_sd: f64,
    /// Day-to-day jitter of factor values around a stock's profile.
    pub jitter_sd: f64,
    pub start_date: NaiveDate,
    /// Flat annualized risk-free rate emitted alongside the panel.
    pub riskfree_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_stocks: 60,
            n_groups: 10,
            group_size: 3,
            factor_dim: 5,
            coint_noise_sd: 0.01,
            horizon_days: 1044,
            seed: 0,
            spread_ar: 0.9,
            driver_vol: 0.01,
            centroid_sd: 1.0,
            within_sd: 0.05,
            idio_sd: 0.05,
            jitter_sd: 0.02,
            start_date: NaiveDate::from_ymd_opt(2004, 1, 2).expect("valid date"),
            riskfree_rate: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_stocks", self.n_stocks),
            ("n_groups", self.n_groups),
            ("group_size", self.group_size),
            ("factor_dim", self.factor_dim),
            ("horizon_days", self.horizon_days),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::input(format!("{name} must be at least 1")));
        }
        if self.n_groups * self.group_size > self.n_stocks {
            return Err(Error::input(format!(
                "{} groups of {} do not fit in {} stocks",
                self.n_groups, self.group_size, self.n_stocks
            )));
        }
        if self.factor_dim > FACTOR_SLOTS {
            return Err(Error::input(format!("factor_dim must be at most {FACTOR_SLOTS}")));
        }
        if !(self.spread_ar.abs() < 1.0) {
            return Err(Error::input("spread_ar must lie in (-1, 1)"));
        }
        let scales = [
            self.coint_noise_sd,
            self.driver_vol,
            self.centroid_sd,
            self.within_sd,
            self.idio_sd,
            self.jitter_sd,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::input("scale parameters must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// A generated panel plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUniverse {
    pub panel: RawPanel,
    pub riskfree: RiskFreeCurve,
    /// Planted groups as sorted ticker indices.
    pub groups: Vec<Vec<usize>>,
    /// Per ticker: its planted group, if any.
    pub labels: Vec<Option<usize>>,
    /// Group centroids in the latent factor space (`n_groups × factor_dim`).
    pub centroids: Vec<Vec<f64>>,
    /// Per ticker: its profile in the latent factor space.
    pub profiles: Vec<Vec<f64>>,
}

impl SyntheticUniverse {
    pub fn group_tickers(&self) -> Vec<Vec<String>> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&i| self.panel.tickers[i].clone()).collect())
            .collect()
    }

    /// Writes `prices.csv`, `factors.csv`, `riskfree.csv` and `groups.csv`
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        market_data::write_panel(&self.panel, &dir.join("prices.csv"), &dir.join("factors.csv"))?;
        market_data::write_riskfree(&self.riskfree, &dir.join("riskfree.csv"))?;
        let path = dir.join("groups.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["ticker", "group"])?;
        for (t, l) in self.panel.tickers.iter().zip(&self.labels) {
            w.write_record([t.clone(), l.map(|g| g.to_string()).unwrap_or_default()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Reads a `ticker,group` file written by [`SyntheticUniverse::write`] into
/// groups of ticker names (ordered by group id).
pub fn load_groups(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut groups: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
    for rec in rdr.records() {
        let rec = rec?;
        let ticker = rec.get(0).unwrap_or("").trim().to_string();
        if let Some(g) = rec.get(1).and_then(|s| s.trim().parse::<usize>().ok()) {
            groups.entry(g).or_default().push(ticker);
        }
    }
    Ok(groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect())
}

/// How well a candidate list covers the planted groups. A group counts as
/// recovered when some candidate contains all of its members; a candidate is
/// a hit when it contains some complete group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRecovery {
    pub groups: usize,
    pub recovered: usize,
    pub candidates: usize,
    pub hits: usize,
}

impl GroupRecovery {
    pub fn recovery(&self) -> Option<f64> {
        (self.groups > 0).then(|| self.recovered as f64 / self.groups as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        (self.candidates > 0).then(|| self.hits as f64 / self.candidates as f64)
    }
}

/// Scores candidate ticker lists against planted groups (both by name).
pub fn group_recovery<S: AsRef<str>>(candidates: &[Vec<S>], groups: &[Vec<String>]) -> GroupRecovery {
    let contains = |c: &[S], g: &[String]| g.iter().all(|t| c.iter().any(|x| x.as_ref() == t));
    GroupRecovery {
        groups: groups.len(),
        recovered: groups.iter().filter(|g| candidates.iter().any(|c| contains(c, g))).count(),
        candidates: candidates.len(),
        hits: candidates.iter().filter(|c| groups.iter().any(|g| contains(c, g))).count(),
    }
}

/// Monday-to-Friday dates starting at (or after) `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    start
        .iter_days()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .take(n)
        .collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Geometric random walk from `start` with daily log volatility `vol`.
fn random_walk(rng: &mut impl Rng, n: usize, start: f64, vol: f64) -> Vec<f64> {
    let mut w = 0.0;
    (0..n)
        .map(|t| {
            if t > 0 {
                w += vol * normal(rng);
            }
            start * f64::exp(w)
        })
        .collect()
}

/// Stationary AR(1) path with marginal standard deviation `sd`.
fn ar1(rng: &mut impl Rng, n: usize, phi: f64, sd: f64) -> Vec<f64> {
    let innov = sd * (1.0 - phi * phi).sqrt();
    let mut u = sd * normal(rng);
    (0..n)
        .map(|t| {
            if t > 0 {
                u = phi * u + innov * normal(rng);
            }
            u
        })
        .collect()
}

/// Maps one day's slot values and price to the nineteen raw factors.
fn raw_factors(latent: &[f64], price: f64, out: &mut [Option<f64>]) {
    let mut slot = latent.iter();
    for (f, name) in RAW_FACTORS.iter().enumerate() {
        out[f] = Some(match *name {
            CLOSE => price,
            ASK => price * 1.0005,
            BID => price * 0.9995,
            // One latent slot drives both counts so that the merged score
            // (b − s)/(b + s) equals tanh(x / 3).
            SELL_RECS => continue,
            BUY_RECS => {
                let t = (slot.next().copied().unwrap_or(0.0) / 3.0).tanh();
                let i = RAW_FACTORS.iter().position(|n| *n == SELL_RECS).expect("sell column");
                out[i] = Some(5.0 * (1.0 - t));
                5.0 * (1.0 + t)
            }
            MARKET_CAP => (22.0 + slot.next().copied().unwrap_or(0.0)).exp(),
            SHARES_OUTSTANDING => (19.0 + slot.next().copied().unwrap_or(0.0)).exp(),
            _ => slot.next().copied().unwrap_or(0.0),
        });
    }
}

/// Generates a synthetic universe; identical specs give identical output.
///
/// Group `g` occupies tickers `g·group_size .. (g+1)·group_size`; tickers
/// are named `S000`, `S001`, ... so lexicographic order is index order.
pub fn generate_universe(spec: &SyntheticSpec) -> Result<SyntheticUniverse> {
    spec.validate()?;
    let (n, t_len) = (spec.n_stocks, spec.horizon_days);
    let dates = business_days(spec.start_date, t_len);
    let tickers: Vec<String> = (0..n).map(|i| format!("S{i:03}")).collect();

    let mut labels = vec![None; n];
    let mut groups = Vec::with_capacity(spec.n_groups);
    for g in 0..spec.n_groups {
        let members: Vec<usize> = (g * spec.group_size..(g + 1) * spec.group_size).collect();
        for &m in &members {
            labels[m] = Some(g);
        }
        groups.push(members);
    }

    // Latent profiles, loadings and per-stock slot offsets.
    let mut rng = stream_rng(spec.seed, 0);
    let d = spec.factor_dim;
    let centroids: Vec<Vec<f64>> = (0..spec.n_groups)
        .map(|_| (0..d).map(|_| spec.centroid_sd * normal(&mut rng)).collect())
        .collect();
    let profiles: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|k| match labels[i] {
                    Some(g) => centroids[g][k] + spec.within_sd * normal(&mut rng),
                    None => spec.centroid_sd * normal(&mut rng),
                })
                .collect()
        })
        .collect();
    let loadings: Vec<Vec<f64>> = (0..FACTOR_SLOTS)
        .map(|_| (0..d).map(|_| normal(&mut rng) / (d as f64).sqrt()).collect())
        .collect();
    let slots: Vec<Vec<f64>> = profiles
        .iter()
        .map(|z| {
            loadings
                .iter()
                .map(|l| l.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + spec.idio_sd * normal(&mut rng))
                .collect()
        })
        .collect();

    // Price paths.
    let mut rng = stream_rng(spec.seed, 1);
    let mut prices = vec![0.0; t_len * n];
    for (g, members) in groups.iter().enumerate() {
        let driver = random_walk(&mut rng, t_len, 100.0, spec.driver_vol);
        let scale = (0.5 + rng.random::<f64>()) * (1.0 + 0.1 * g as f64);
        for &i in members {
            let c = scale * (1.0 + 0.05 * normal(&mut rng)).clamp(0.8, 1.2);
            let u = ar1(&mut rng, t_len, spec.spread_ar, spec.coint_noise_sd);
            for t in 0..t_len {
                prices[t * n + i] = (c * (driver[t] + 100.0 * u[t])).max(0.01);
            }
        }
    }
    for i in (0..n).filter(|&i| labels[i].is_none()) {
        let start = 50.0 + 100.0 * rng.random::<f64>();
        for (t, p) in random_walk(&mut rng, t_len, start, spec.driver_vol).into_iter().enumerate() {
            prices[t * n + i] = p;
        }
    }

    // Factor tensor: profile plus daily jitter.
    let mut rng = stream_rng(spec.seed, 2);
    let nf = RAW_FACTORS.len();
    let mut factors = vec![None; t_len * n * nf];
    let mut latent = vec![0.0; FACTOR_SLOTS];
    for t in 0..t_len {
        for i in 0..n {
            for (l, p) in latent.iter_mut().zip(&slots[i]) {
                *l = p + spec.jitter_sd * normal(&mut rng);
            }
            let cell = (t * n + i) * nf;
            raw_factors(&latent, prices[t * n + i], &mut factors[cell..cell + nf]);
        }
    }

    let panel = RawPanel {
        dates: dates.clone(),
        tickers,
        factor_names: RAW_FACTORS.iter().map(|s| s.to_string()).collect(),
        prices: prices.into_iter().map(Some).collect(),
        factors,
    };
    Ok(SyntheticUniverse {
        panel,
        riskfree: RiskFreeCurve::constant(&dates, spec.riskfree_rate),
        groups,
        labels,
        centroids,
        profiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::johansen::{johansen_test, DetSpec};
    use crate::market_data::{clean, transform_factors};
    use nalgebra::DMatrix;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_stocks: 8,
            n_groups: 2,
            group_size: 2,
            horizon_days: 500,
            seed: 3,
            ..Default::default()
        }
    }

    fn pair_prices(u: &SyntheticUniverse, a: usize, b: usize) -> DMatrix<f64> {
        let p = &u.panel;
        DMatrix::from_fn(p.n_dates(), 2, |t, j| p.price(t, [a, b][j]).unwrap())
    }

    #[test]
    fn same_seed_same_universe() {
        let a = generate_universe(&small()).unwrap();
        let b = generate_universe(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_universe(&SyntheticSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.panel.prices, c.panel.prices);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SyntheticSpec { n_groups: 5, group_size: 2, n_stocks: 9, ..small() },
            SyntheticSpec { group_size: 0, ..small() },
            SyntheticSpec { factor_dim: 16, ..small() },
            SyntheticSpec { spread_ar: 1.0, ..small() },
        ] {
            assert!(generate_universe(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn pair_with_small_noise_is_cointegrated() {
        let spec = SyntheticSpec {
            n_stocks: 2,
            n_groups: 1,
            group_size: 2,
            horizon_days: 500,
            coint_noise_sd: 0.01,
            ..Default::default()
        };
        for seed in 0..5 {
            let u = generate_universe(&SyntheticSpec { seed, ..spec.clone() }).unwrap();
            let r = johansen_test(&pair_prices(&u, 0, 1), 1, DetSpec::UnrestrictedConstant).unwrap();
            assert!(r.rank >= 1, "seed {seed}: {:?}", r.trace_stats);
        }
    }

    #[test]
    fn members_sit_nearest_their_own_centroid() {
        let spec = SyntheticSpec { seed: 11, ..Default::default() };
        let u = generate_universe(&spec).unwrap();
        let d2 = |x: &[f64], c: &[f64]| -> f64 { c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() };
        for (i, l) in u.labels.iter().enumerate() {
            let Some(g) = *l else { continue };
            let own = d2(&u.profiles[i], &u.centroids[g]).sqrt();
            let other = (0..spec.n_groups)
                .filter(|&h| h != g)
                .map(|h| d2(&u.profiles[i], &u.centroids[h]).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(other - own >= 3.0 * spec.within_sd, "ticker {i}: {own} vs {other}");
        }
    }

    #[test]
    fn panel_is_dense_and_transforms() {
        let u = generate_universe(&small()).unwrap();
        assert_eq!(u.panel.dates.len(), 500);
        assert!(u.panel.dates.iter().all(|d| d.weekday().num_days_from_monday() < 5));
        let c = clean(&u.panel).unwrap();
        assert_eq!(c.n_tickers(), 8);
        let t = transform_factors(&c).unwrap();
        assert_eq!(t.n_factors(), 18);
        let close = u.panel.factor_index(CLOSE).unwrap();
        assert_eq!(u.panel.factor(7, 3, close), u.panel.price(7, 3));
    }

    #[test]
    fn recovery_counts_containment() {
        let groups = vec![vec!["A".to_string(), "B".to_string()], vec!["C".to_string(), "D".to_string()]];
        let cands = vec![vec!["A", "B", "E"], vec!["C", "E"], vec!["A", "B"]];
        let r = group_recovery(&cands, &groups);
        assert_eq!((r.groups, r.recovered, r.candidates, r.hits), (2, 1, 3, 2));
        assert_eq!(r.recovery(), Some(0.5));
        assert_eq!(group_recovery::<&str>(&[], &groups).precision(), None);
    }

    #[test]
    fn csv_round_trip() {
        let u = generate_universe(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        u.write(dir.path()).unwrap();
        let back = market_data::load_panel(
            &dir.path().join("prices.csv"),
            &dir.path().join("factors.csv"),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(back.tickers, u.panel.tickers);
        assert_eq!(back.dates, u.panel.dates);
        for (a, b) in back.prices.iter().zip(&u.panel.prices) {
            let (a, b) = (a.unwrap(), b.unwrap());
            assert!((a - b).abs() <= 1e-12 * b, "{a} vs {b}");
        }
        let groups = load_groups(&dir.path().join("groups.csv")).unwrap();
        assert_eq!(groups, u.group_tickers());
        let rf = market_data::load_riskfree(&dir.path().join("riskfree.csv")).unwrap();
        assert_eq!(rf, u.riskfree);
    }
}
