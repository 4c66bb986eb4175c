//! Statistical-arbitrage test on a discounted daily profit series.
//!
//! The increments are modelled as
//!
//! ```text
//! v_i = μ i^θ + σ i^λ z_i,    z_i = φ z_{i−1} + ε_i,    i = 1..n,
//! ```
//!
//! with standard normal `ε` and a stationary start for `z`. A strategy is a
//! statistical arbitrage when `μ > 0`, `λ < 0` and `θ > max(λ − ½, −1)`.
//! The test statistic is the smallest of the three one-sided t-type
//! statistics (Min-t); its null distribution is simulated by a parametric
//! bootstrap at the boundary `μ = 0, λ = 0`.
//!
//! Fitting profiles out `μ` and `σ` in closed form and `φ` by a scalar
//! search, leaving a two-dimensional Nelder-Mead over `(θ, λ)`.

use std::cell::RefCell;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backtest::{discount_factors, PnLSeries};
use crate::error::{Error, Result};
use crate::market_data::RiskFreeCurve;
use crate::optim::{maximize_scalar, nelder_mead, NelderMeadOptions};
use crate::rng::stream_rng;

pub const MIN_LENGTH: usize = 30;
pub const MIN_REPLICATIONS: usize = 200;
pub const SIGNIFICANCE: f64 = 0.05;
/// Box for θ and λ.
pub const EXPONENT_BOUND: f64 = 2.0;
pub const PHI_BOUND: f64 = 0.995;

/// Multiplies each increment by its discount factor.
/// Returns the discounted values and how many dates had carried-forward rates.
pub fn discount_increments(pnl: &PnLSeries, riskfree: &RiskFreeCurve) -> (Vec<f64>, usize) {
    let (d, filled) = discount_factors(&pnl.dates, riskfree);
    (pnl.values.iter().zip(&d).map(|(v, f)| v * f).collect(), filled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JttwParams {
    pub mu: f64,
    pub theta: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub phi: f64,
}

/// Draws `n` increments from the model.
pub fn simulate_jttw(p: &JttwParams, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut z = rng.sample::<f64, _>(StandardNormal) / (1.0 - p.phi * p.phi).sqrt();
    (1..=n)
        .map(|i| {
            if i > 1 {
                z = p.phi * z + rng.sample::<f64, _>(StandardNormal);
            }
            let li = (i as f64).ln();
            p.mu * (p.theta * li).exp() + p.sigma * (p.lambda * li).exp() * z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JttwFit {
    pub mu: f64,
    pub theta: f64,
    pub lambda_vol: f64,
    pub sigma: f64,
    pub phi: f64,
    pub loglik: f64,
    pub n: usize,
    /// Starts whose simplex met the tolerances.
    pub converged_starts: usize,
    pub starts: usize,
}

impl JttwFit {
    pub fn params(&self) -> JttwParams {
        JttwParams {
            mu: self.mu,
            theta: self.theta,
            lambda: self.lambda_vol,
            sigma: self.sigma,
            phi: self.phi,
        }
    }
}

/// Sums that make the AR(1)-transformed least squares problem O(1) in φ
/// once `(θ, λ)` are fixed.
struct ArSums {
    y1: f64,
    g1: f64,
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 4],
}

struct Profile {
    ll: f64,
    mu: f64,
    sigma: f64,
    phi: f64,
    /// `Σ g̃²` at the chosen φ, for step sizing.
    sgg: f64,
}

struct Series {
    v: Vec<f64>,
    ln_i: Vec<f64>,
    sum_ln: f64,
    /// For `i = k + 1`: `(0, 0)` when `i` is 1 or prime, otherwise the
    /// zero-based slots of a factor pair `p · q = i`.
    factors: Vec<(u32, u32)>,
    scratch: RefCell<(Vec<f64>, Vec<f64>)>,
}

impl Series {
    fn new(v: &[f64]) -> Self {
        let n = v.len();
        let ln_i: Vec<f64> = (1..=n).map(|i| (i as f64).ln()).collect();
        let sum_ln = ln_i.iter().sum();
        let mut spf = vec![0; n + 1];
        for i in 2..=n {
            if spf[i] == 0 {
                for j in (i..=n).step_by(i) {
                    if spf[j] == 0 {
                        spf[j] = i;
                    }
                }
            }
        }
        let factors = (1..=n)
            .map(|i| {
                if i < 2 || spf[i] == i {
                    (0, 0)
                } else {
                    ((spf[i] - 1) as u32, (i / spf[i] - 1) as u32)
                }
            })
            .collect();
        Self {
            v: v.to_vec(),
            ln_i,
            sum_ln,
            factors,
            scratch: RefCell::new((Vec::with_capacity(n), Vec::with_capacity(n))),
        }
    }

    fn n(&self) -> usize {
        self.v.len()
    }

    /// `out[i − 1] = i^a` for `i = 1..=n`. Only primes go through `exp`;
    /// composites are products of earlier entries, which is several times
    /// cheaper and accurate to a few ulps.
    fn powers(&self, a: f64, out: &mut Vec<f64>) {
        let n = self.n();
        out.clear();
        out.resize(n, 1.0);
        for k in 1..n {
            let (p, q) = self.factors[k];
            out[k] = if p == 0 {
                (a * self.ln_i[k]).exp()
            } else {
                out[p as usize] * out[q as usize]
            };
        }
    }

    fn sums(&self, theta: f64, lambda: f64) -> ArSums {
        let mut s = ArSums {
            y1: 0.0,
            g1: 0.0,
            a: [0.0; 3],
            b: [0.0; 3],
            c: [0.0; 4],
        };
        let mut scratch = self.scratch.borrow_mut();
        let (py, pg) = &mut *scratch;
        self.powers(-lambda, py);
        self.powers(theta - lambda, pg);
        s.y1 = self.v[0] * py[0];
        s.g1 = pg[0];
        let (mut yp, mut gp) = (s.y1, s.g1);
        for ((&v, &py), &g) in self.v.iter().zip(py.iter()).zip(pg.iter()).skip(1) {
            let y = v * py;
            {
                s.a[0] += y * y;
                s.a[1] += y * yp;
                s.a[2] += yp * yp;
                s.b[0] += g * g;
                s.b[1] += g * gp;
                s.b[2] += gp * gp;
                s.c[0] += y * g;
                s.c[1] += y * gp;
                s.c[2] += yp * g;
                s.c[3] += yp * gp;
            }
            yp = y;
            gp = g;
        }
        s
    }

    /// `(ll, μ, S, Σg̃²)` at a given φ with μ and σ profiled out.
    fn at_phi(&self, s: &ArSums, lambda: f64, phi: f64) -> (f64, f64, f64, f64) {
        let n = self.n() as f64;
        let q = 1.0 - phi * phi;
        let syy = q * s.y1 * s.y1 + s.a[0] - 2.0 * phi * s.a[1] + phi * phi * s.a[2];
        let sgg = q * s.g1 * s.g1 + s.b[0] - 2.0 * phi * s.b[1] + phi * phi * s.b[2];
        let syg = q * s.y1 * s.g1 + s.c[0] - phi * (s.c[1] + s.c[2]) + phi * phi * s.c[3];
        let mu = syg / sgg;
        let ss = (syy - syg * mu).max(syy * 1e-300);
        let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * ss / n).ln() + 1.0) + 0.5 * q.ln() - lambda * self.sum_ln;
        (ll, mu, ss, sgg)
    }

    fn profile(&self, theta: f64, lambda: f64) -> Profile {
        let s = self.sums(theta, lambda);
        let (phi, ll) = maximize_scalar(|p| self.at_phi(&s, lambda, p).0, -PHI_BOUND, PHI_BOUND, 16, 1e-7);
        let (_, mu, ss, sgg) = self.at_phi(&s, lambda, phi);
        Profile {
            ll,
            mu,
            sigma: (ss / self.n() as f64).sqrt(),
            phi,
            sgg,
        }
    }

    /// Unprofiled log-likelihood in `(μ, λ, ln σ, atanh φ)` given the
    /// powers `i^θ` and `i^−λ`.
    fn loglik(&self, pt: &[f64], pl: &[f64], mu: f64, lambda: f64, s: f64, c: f64) -> f64 {
        let phi = c.tanh();
        let sigma2 = (2.0 * s).exp();
        let e0 = (self.v[0] - mu * pt[0]) * pl[0];
        let mut ss = (1.0 - phi * phi) * e0 * e0;
        let mut prev = e0;
        for ((&v, &t), &l) in self.v.iter().zip(pt).zip(pl).skip(1) {
            let e = (v - mu * t) * l;
            ss += (e - phi * prev).powi(2);
            prev = e;
        }
        let n = self.n() as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI).ln() - n * s + 0.5 * (1.0 - phi * phi).ln()
            - ss / (2.0 * sigma2)
            - lambda * self.sum_ln
    }
}

fn check_series(v: &[f64]) -> Result<()> {
    if v.len() < MIN_LENGTH {
        return Err(Error::input(format!(
            "series of length {} is shorter than {MIN_LENGTH}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("series contains non-finite values"));
    }
    let first = v[0];
    if v.iter().all(|&x| x == first) {
        return Err(Error::DegenerateSeries(if first == 0.0 {
            "profit series is all zeros".into()
        } else {
            "profit series is constant".into()
        }));
    }
    Ok(())
}

/// Starting points for `(θ, λ)` on the observed series.
pub const START_GRID: [(f64, f64); 9] = [
    (-0.5, -0.3),
    (-0.5, 0.0),
    (-0.5, 0.3),
    (0.0, -0.3),
    (0.0, 0.0),
    (0.0, 0.3),
    (0.5, -0.3),
    (0.5, 0.0),
    (0.5, 0.3),
];

fn nm_options() -> NelderMeadOptions {
    NelderMeadOptions {
        initial_step: 0.2,
        f_tol: 1e-6,
        x_tol: 1e-3,
        max_iter: 1000,
    }
}

fn fit_from(series: &Series, starts: &[(f64, f64)]) -> Result<(JttwFit, Profile)> {
    let objective = |x: &[f64]| {
        if x[0].abs() > EXPONENT_BOUND || x[1].abs() > EXPONENT_BOUND {
            return f64::INFINITY;
        }
        -series.profile(x[0], x[1]).ll
    };
    let mut best: Option<(f64, [f64; 2])> = None;
    let mut converged = 0;
    for &(t0, l0) in starts {
        let m = nelder_mead(objective, &[t0, l0], &nm_options());
        if m.converged {
            converged += 1;
        }
        if m.value.is_finite() && best.is_none_or(|(v, _)| m.value < v) {
            best = Some((m.value, [m.x[0], m.x[1]]));
        }
    }
    let Some((_, [theta, lambda])) = best else {
        return Err(Error::FitFailure("no start produced a finite likelihood".into()));
    };
    if converged == 0 {
        return Err(Error::FitFailure("optimizer did not converge from any start".into()));
    }
    let p = series.profile(theta, lambda);
    Ok((
        JttwFit {
            mu: p.mu,
            theta,
            lambda_vol: lambda,
            sigma: p.sigma,
            phi: p.phi,
            loglik: p.ll,
            n: series.n(),
            converged_starts: converged,
            starts: starts.len(),
        },
        p,
    ))
}

/// Maximum-likelihood fit with a multi-start over [`START_GRID`].
pub fn fit_jttw(v: &[f64]) -> Result<JttwFit> {
    check_series(v)?;
    Ok(fit_from(&Series::new(v), &START_GRID)?.0)
}

/// Profiled log-likelihood at fixed `(θ, λ)`, maximized over μ, σ and φ.
pub fn profile_loglik(v: &[f64], theta: f64, lambda: f64) -> f64 {
    Series::new(v).profile(theta, lambda).ll
}

/// Which branch of the θ constraint was tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaBranch {
    /// `θ − λ + ½ > 0`, used when `λ ≥ −½`.
    LambdaMinusHalf,
    /// `θ + 1 > 0`, used when `λ < −½`.
    MinusOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinT {
    pub t_mu: f64,
    pub t_lambda: f64,
    pub t_theta: f64,
    pub branch: ThetaBranch,
    /// Standard errors of `(μ, θ, λ, ln σ, atanh φ)`.
    pub se: [f64; 5],
}

impl MinT {
    pub fn value(&self) -> f64 {
        self.t_mu.min(self.t_lambda).min(self.t_theta)
    }
}

/// Covariance of the estimates from a central-difference Hessian of the
/// full log-likelihood. Eigenvalues of the observed information are floored
/// before inversion so flat directions get large, finite variances.
fn covariance(series: &Series, fit: &JttwFit, sgg: f64) -> DMatrix<f64> {
    let x0 = [
        fit.mu,
        fit.theta,
        fit.lambda_vol,
        fit.sigma.ln(),
        fit.phi.clamp(-0.999_999, 0.999_999).atanh(),
    ];
    let se_mu = fit.sigma / sgg.sqrt();
    let h = [1e-2 * se_mu.max(1e-300), 1e-3, 1e-3, 1e-3, 1e-3];
    // θ and λ only take three values each, so their powers are shared.
    let table = |a0: f64, sign: f64, hk: f64| {
        [-1.0, 0.0, 1.0].map(|d| {
            let mut out = Vec::new();
            series.powers(sign * (a0 + d * hk), &mut out);
            out
        })
    };
    let pt = table(x0[1], 1.0, h[1]);
    let pl = table(x0[2], -1.0, h[2]);
    let f = |d: &[(usize, f64)]| {
        let mut x = x0;
        let mut step = [1usize; 5];
        for &(k, s) in d {
            x[k] += s * h[k];
            step[k] = if s > 0.0 { 2 } else { 0 };
        }
        series.loglik(&pt[step[1]], &pl[step[2]], x[0], x[2], x[3], x[4])
    };
    let f0 = f(&[]);
    let mut hess = DMatrix::zeros(5, 5);
    for j in 0..5 {
        hess[(j, j)] = (f(&[(j, 1.0)]) - 2.0 * f0 + f(&[(j, -1.0)])) / (h[j] * h[j]);
        for k in 0..j {
            let v = (f(&[(j, 1.0), (k, 1.0)]) - f(&[(j, 1.0), (k, -1.0)]) - f(&[(j, -1.0), (k, 1.0)])
                + f(&[(j, -1.0), (k, -1.0)]))
                / (4.0 * h[j] * h[k]);
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    let info = -hess;
    let eig = SymmetricEigen::new(info);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let floor = 1e-10 * max;
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(floor)));
    &eig.eigenvectors * inv * eig.eigenvectors.transpose()
}

fn min_t(series: &Series, fit: &JttwFit, sgg: f64) -> MinT {
    let c = covariance(series, fit, sgg);
    let se = [0, 1, 2, 3, 4].map(|k| c[(k, k)].max(0.0).sqrt());
    let t_mu = fit.mu / se[0];
    let t_lambda = -fit.lambda_vol / se[2];
    let (t_theta, branch) = if fit.lambda_vol >= -0.5 {
        let var = (c[(1, 1)] + c[(2, 2)] - 2.0 * c[(1, 2)]).max(0.0);
        ((fit.theta - fit.lambda_vol + 0.5) / var.sqrt(), ThetaBranch::LambdaMinusHalf)
    } else {
        ((fit.theta + 1.0) / se[1], ThetaBranch::MinusOne)
    };
    MinT {
        t_mu,
        t_lambda,
        t_theta,
        branch,
        se,
    }
}

/// Min-t statistics at a fit of `v`.
pub fn min_t_statistics(v: &[f64], fit: &JttwFit) -> MinT {
    let series = Series::new(v);
    let p = series.profile(fit.theta, fit.lambda_vol);
    min_t(&series, fit, p.sgg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub replications: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            replications: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatArbTestResult {
    pub p_value: f64,
    pub reject: bool,
    pub statistics: MinT,
    pub min_t: f64,
    pub mc_replications: usize,
    /// Replications whose refit failed; they count against rejection.
    pub failed_replications: usize,
}

/// `#{null ≥ observed} / B`, with failed replications (NaN) counted as
/// exceeding.
pub fn bootstrap_p_value(null_stats: &[f64], observed: f64) -> f64 {
    let exceed = null_stats.iter().filter(|s| s.is_nan() || **s >= observed).count();
    exceed as f64 / null_stats.len() as f64
}

/// Min-t values of `b` series simulated at the null boundary of `fit`.
pub fn null_distribution(fit: &JttwFit, b: usize, seed: u64) -> Vec<f64> {
    let null = JttwParams {
        mu: 0.0,
        lambda: 0.0,
        ..fit.params()
    };
    let starts = [(fit.theta, 0.0), (0.0, 0.0)];
    (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let sim = simulate_jttw(&null, fit.n, &mut rng);
            let series = Series::new(&sim);
            match fit_from(&series, &starts) {
                Ok((f, p)) => min_t(&series, &f, p.sgg).value(),
                Err(_) => f64::NAN,
            }
        })
        .collect()
}

/// Min-t test of the no-statistical-arbitrage null.
pub fn test_statarb(v: &[f64], fit: &JttwFit, cfg: &TestConfig) -> Result<StatArbTestResult> {
    if cfg.replications < MIN_REPLICATIONS {
        return Err(Error::input(format!(
            "need at least {MIN_REPLICATIONS} bootstrap replications, got {}",
            cfg.replications
        )));
    }
    check_series(v)?;
    if v.len() != fit.n {
        return Err(Error::input("fit and series lengths differ"));
    }
    let statistics = min_t_statistics(v, fit);
    let observed = statistics.value();
    let null = null_distribution(fit, cfg.replications, cfg.seed);
    let p_value = bootstrap_p_value(&null, observed);
    Ok(StatArbTestResult {
        p_value,
        reject: p_value < SIGNIFICANCE,
        min_t: observed,
        statistics,
        mc_replications: cfg.replications,
        failed_replications: null.iter().filter(|s| s.is_nan()).count(),
    })
}
