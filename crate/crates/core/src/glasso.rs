//! Sparse inverse correlation estimation with the graphical lasso.
//!
//! The solver works on the primal precision matrix one row/column block at a
//! time. For column `j`, with the rest of the matrix `Θ₁₁` held fixed, the
//! exact block maximizer of
//!
//! ```text
//! log det Θ − tr(SΘ) − ρ Σ_{i≠j} |Θ_ij|
//! ```
//!
//! is obtained from the box-constrained quadratic program
//!
//! ```text
//! min_u  uᵀ Θ₁₁ u   subject to  |u − s₁₂|_∞ ≤ ρ
//! ```
//!
//! via `θ₁₂ = −Θ₁₁ u / s₂₂` and `θ₂₂ = (1 − uᵀθ₁₂) / s₂₂`. Each block update
//! keeps the Schur complement equal to `1 / s₂₂ > 0`, so every iterate is
//! positive definite and the objective never decreases; stopping early
//! still yields a usable estimate. Coordinates strictly inside the box have
//! a zero gradient, which is where the exact zeros come from.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries with magnitude at or below this count as zero.
pub const NONZERO_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceInput {
    /// Correlation of price levels.
    #[default]
    Levels,
    /// Correlation of daily log returns.
    Returns,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceCorrelation {
    pub tickers: Vec<String>,
    pub matrix: DMatrix<f64>,
}

/// Pearson correlation of the columns of a dates × tickers price matrix.
pub fn correlation_from_prices(
    prices: &DMatrix<f64>,
    tickers: &[String],
    input: PriceInput,
) -> Result<PriceCorrelation> {
    let (t, n) = prices.shape();
    if t < n + 2 {
        return Err(Error::input(format!(
            "window of {t} dates is too short for {n} tickers (need {})",
            n + 2
        )));
    }
    let series = match input {
        PriceInput::Levels => prices.clone(),
        PriceInput::Returns => DMatrix::from_fn(t - 1, n, |i, j| {
            (prices[(i + 1, j)] / prices[(i, j)]).ln()
        }),
    };
    let rows = series.nrows() as f64;
    let mut centered = series;
    let mut sds = Vec::with_capacity(n);
    for j in 0..n {
        let m = centered.column(j).sum() / rows;
        centered.column_mut(j).add_scalar_mut(-m);
        let ss = centered.column(j).norm_squared();
        let scale = m.abs().max(1e-300);
        if !(ss.sqrt() > 1e-12 * scale * rows.sqrt()) {
            return Err(Error::DegenerateSeries(format!(
                "price series of `{}` is constant",
                tickers.get(j).map(String::as_str).unwrap_or("?")
            )));
        }
        sds.push(ss.sqrt());
    }
    let mut matrix = centered.transpose() * &centered;
    for i in 0..n {
        for j in 0..n {
            matrix[(i, j)] /= sds[i] * sds[j];
        }
    }
    for i in 0..n {
        matrix[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(PriceCorrelation {
        tickers: tickers.to_vec(),
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionEstimate {
    pub tickers: Vec<String>,
    pub theta: DMatrix<f64>,
    pub rho: f64,
    /// Completed sweeps over all columns.
    pub iterations: usize,
    pub converged: bool,
    /// Penalized log-likelihood after the initial point and every sweep.
    pub objective_trace: Vec<f64>,
}

impl PrecisionEstimate {
    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_nonzero(&self, i: usize, j: usize) -> bool {
        self.theta[(i, j)].abs() > NONZERO_THRESHOLD
    }

    /// Mean number of off-diagonal nonzeros per row.
    pub fn mean_offdiag_nonzeros(&self) -> f64 {
        let n = self.n();
        let count = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.is_nonzero(i, j))
            .count();
        count as f64 / n as f64
    }

    pub fn offdiag_nonzero_count(&self) -> usize {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.is_nonzero(i, j))
            .count()
    }
}

/// `log det Θ − tr(SΘ) − ρ Σ_{i≠j} |Θ_ij|`, or −∞ when Θ is not positive
/// definite.
pub fn objective(s: &DMatrix<f64>, theta: &DMatrix<f64>, rho: f64) -> f64 {
    let Some(chol) = Cholesky::new(theta.clone()) else {
        return f64::NEG_INFINITY;
    };
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = s.nrows();
    let mut trace = 0.0;
    let mut l1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += s[(i, j)] * theta[(j, i)];
            if i != j {
                l1 += theta[(i, j)].abs();
            }
        }
    }
    logdet - trace - rho * l1
}

fn check_input(s: &DMatrix<f64>, rho: f64, tol: f64) -> Result<()> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::input("covariance must be a non-empty square matrix"));
    }
    if !(rho >= 0.0) {
        return Err(Error::input("rho must be non-negative"));
    }
    if !(tol > 0.0) {
        return Err(Error::input("tol must be positive"));
    }
    if (0..n).any(|i| !(s[(i, i)] > 0.0)) {
        return Err(Error::input("covariance diagonal must be positive"));
    }
    let min_eig = SymmetricEigen::new(s.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-6 {
        return Err(Error::input(format!(
            "covariance is not positive semidefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

/// Solver state kept between calls so a path of penalties can warm start.
#[derive(Debug, Clone)]
pub struct WarmStart {
    theta: DMatrix<f64>,
    /// Column `j` holds the box-QP solution `u` from the last update of `j`.
    dual: DMatrix<f64>,
}

pub fn graphical_lasso(s: &PriceCorrelation, rho: f64, tol: f64, max_iter: usize) -> Result<PrecisionEstimate> {
    let (est, _) = solve(&s.matrix, &s.tickers, rho, tol, max_iter, None)?;
    Ok(est)
}

/// Same as [`graphical_lasso`] on a raw symmetric matrix.
pub fn graphical_lasso_matrix(s: &DMatrix<f64>, rho: f64, tol: f64, max_iter: usize) -> Result<PrecisionEstimate> {
    let tickers: Vec<String> = (0..s.nrows()).map(|i| format!("X{i}")).collect();
    let (est, _) = solve(s, &tickers, rho, tol, max_iter, None)?;
    Ok(est)
}

fn solve(
    s: &DMatrix<f64>,
    tickers: &[String],
    rho: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&WarmStart>,
) -> Result<(PrecisionEstimate, WarmStart)> {
    check_input(s, rho, tol)?;
    let n = s.nrows();
    let (mut theta, mut dual) = match warm {
        Some(w) if w.theta.nrows() == n => (w.theta.clone(), w.dual.clone()),
        _ => (
            DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 }),
            DMatrix::zeros(n, n),
        ),
    };

    let mut trace = vec![objective(s, &theta, rho)];
    let mut converged = false;
    let mut sweeps = 0;
    let mut q = vec![0.0; n];
    let mut col_new = vec![0.0; n];

    if n == 1 {
        theta[(0, 0)] = 1.0 / s[(0, 0)];
        converged = true;
    }

    while !converged && sweeps < max_iter {
        let mut max_change: f64 = 0.0;
        for j in 0..n {
            let s_jj = s[(j, j)];
            // Box bounds and warm-started point.
            for k in 0..n {
                if k == j {
                    continue;
                }
                let lo = s[(k, j)] - rho;
                let hi = s[(k, j)] + rho;
                dual[(k, j)] = dual[(k, j)].clamp(lo, hi);
            }
            for k in 0..n {
                if k == j {
                    continue;
                }
                let mut acc = 0.0;
                for l in 0..n {
                    if l != j {
                        acc += theta[(k, l)] * dual[(l, j)];
                    }
                }
                q[k] = acc;
            }
            // Coordinate descent on the box QP.
            for _pass in 0..10_000 {
                let mut max_step: f64 = 0.0;
                for k in 0..n {
                    if k == j {
                        continue;
                    }
                    let lo = s[(k, j)] - rho;
                    let hi = s[(k, j)] + rho;
                    let u = dual[(k, j)];
                    let target = (u - q[k] / theta[(k, k)]).clamp(lo, hi);
                    let step = target - u;
                    if step != 0.0 {
                        dual[(k, j)] = target;
                        for l in 0..n {
                            if l != j {
                                q[l] += theta[(l, k)] * step;
                            }
                        }
                        max_step = max_step.max(step.abs());
                    }
                }
                if max_step < 1e-13 {
                    break;
                }
            }
            // Recover the column of Θ.
            let interior_eps = 1e-12 * rho.max(1e-300);
            let mut ut_theta = 0.0;
            for k in 0..n {
                if k == j {
                    continue;
                }
                let gamma = dual[(k, j)] - s[(k, j)];
                let interior = rho > 0.0 && gamma.abs() < rho - interior_eps;
                col_new[k] = if interior { 0.0 } else { -q[k] / s_jj };
                ut_theta += dual[(k, j)] * col_new[k];
            }
            col_new[j] = (1.0 - ut_theta) / s_jj;
            for k in 0..n {
                max_change = max_change.max((theta[(k, j)] - col_new[k]).abs());
                theta[(k, j)] = col_new[k];
                theta[(j, k)] = col_new[k];
            }
        }
        sweeps += 1;
        trace.push(objective(s, &theta, rho));
        if max_change < tol {
            converged = true;
        }
    }

    let theta = (&theta + theta.transpose()) * 0.5;
    let est = PrecisionEstimate {
        tickers: tickers.to_vec(),
        theta: theta.clone(),
        rho,
        iterations: sweeps,
        converged,
        objective_trace: trace,
    };
    Ok((est, WarmStart { theta, dual }))
}

/// Target band for the mean number of off-diagonal nonzeros per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget {
    pub min_mean: f64,
    pub max_mean: f64,
}

impl Default for SparsityTarget {
    fn default() -> Self {
        Self {
            min_mean: 2.0,
            max_mean: 5.0,
        }
    }
}

/// Bisects the penalty until the mean off-diagonal nonzeros per row falls in
/// the target band. If the band is never hit within `max_bisections`, the
/// estimate whose mean lies closest to the band is returned.
pub fn tune_rho(
    s: &PriceCorrelation,
    target: SparsityTarget,
    tol: f64,
    max_iter: usize,
    max_bisections: usize,
) -> Result<PrecisionEstimate> {
    let n = s.matrix.nrows();
    let mut hi = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| s.matrix[(i, j)].abs())
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    let distance = |m: f64| {
        if m < target.min_mean {
            target.min_mean - m
        } else if m > target.max_mean {
            m - target.max_mean
        } else {
            0.0
        }
    };

    let mut warm: Option<WarmStart> = None;
    let mut best: Option<(f64, PrecisionEstimate)> = None;
    for _ in 0..max_bisections.max(1) {
        let rho = 0.5 * (lo + hi);
        let (est, w) = solve(&s.matrix, &s.tickers, rho, tol, max_iter, warm.as_ref())?;
        warm = Some(w);
        let m = est.mean_offdiag_nonzeros();
        let d = distance(m);
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, est));
        }
        if d == 0.0 {
            break;
        }
        if m > target.max_mean {
            lo = rho;
        } else {
            hi = rho;
        }
    }
    Ok(best.expect("at least one bisection step").1)
}
