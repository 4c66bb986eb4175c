//! Johansen trace test on a small vector of price series.
//!
//! The VECM
//!
//! ```text
//! Δy_t = Π y_{t−1} + Σ_{i=1..p} Γ_i Δy_{t−i} + μ + ε_t
//! ```
//!
//! is concentrated by regressing `Δy_t` and `y_{t−1}` on the lagged
//! differences, and the reduced-rank problem becomes the symmetric
//! eigenproblem `L⁻¹ S₁₀ S₀₀⁻¹ S₀₁ L⁻ᵀ`, where `L Lᵀ = S₁₁`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_OBSERVATIONS: usize = 50;
pub const MAX_SERIES: usize = 4;

/// Deterministic terms in the VECM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetSpec {
    /// No constant anywhere.
    None,
    /// Constant inside the cointegrating relation only.
    RestrictedConstant,
    /// Constant in the VAR: drifting levels, no trend in the relation.
    #[default]
    UnrestrictedConstant,
}

/// 95% trace critical values indexed by `n − r` (1 through 4), from the
/// MacKinnon, Haug and Michelis (1999) response surfaces as tabulated in
/// common econometrics packages.
pub fn critical_value_95(spec: DetSpec, n_minus_r: usize) -> f64 {
    const NONE: [f64; 4] = [4.1299, 12.3212, 24.2760, 40.1749];
    const RESTRICTED: [f64; 4] = [9.1645, 20.2618, 35.1928, 53.9358];
    const UNRESTRICTED: [f64; 4] = [3.8415, 15.4943, 29.7961, 47.8545];
    let table = match spec {
        DetSpec::None => &NONE,
        DetSpec::RestrictedConstant => &RESTRICTED,
        DetSpec::UnrestrictedConstant => &UNRESTRICTED,
    };
    table[n_minus_r - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JohansenResult {
    /// Descending, in `[0, 1)`.
    pub eigenvalues: Vec<f64>,
    /// Trace statistic for `H0: rank ≤ r`, `r = 0..n`.
    pub trace_stats: Vec<f64>,
    pub critical_values: Vec<f64>,
    pub rank: usize,
    /// Cointegrating vector of the largest eigenvalue, first nonzero
    /// component `+1`. One weight per series.
    pub beta: Vec<f64>,
    /// Constant of the cointegrating relation under
    /// [`DetSpec::RestrictedConstant`], on the same normalization.
    pub beta_constant: Option<f64>,
    pub det_spec: DetSpec,
    pub lagged_differences: usize,
    /// Observations used after differencing and lagging.
    pub n_obs: usize,
}

impl JohansenResult {
    pub fn cointegrated(&self) -> bool {
        self.rank >= 1
    }
}

/// Residuals of regressing the columns of `y` on `x` (no-op when `x` has no
/// columns).
fn residuals(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Ok(y.clone());
    }
    let xtx = x.transpose() * x;
    let chol = Cholesky::new(xtx)
        .ok_or_else(|| Error::DegenerateInput("lagged-difference regressors are collinear".into()))?;
    let coef = chol.solve(&(x.transpose() * y));
    Ok(y - x * coef)
}

/// Normalizes so the first component that is not negligibly small is `+1`.
fn normalize_first(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        for x in v.iter_mut() {
            *x /= first;
        }
    }
}

/// Runs the trace test. `prices` is `T × n` with one column per series.
pub fn johansen_test(prices: &DMatrix<f64>, lagged_differences: usize, det_spec: DetSpec) -> Result<JohansenResult> {
    let (t, n) = prices.shape();
    if !(2..=MAX_SERIES).contains(&n) {
        return Err(Error::input(format!("Johansen test needs 2..={MAX_SERIES} series, got {n}")));
    }
    if t < MIN_OBSERVATIONS {
        return Err(Error::input(format!(
            "Johansen test needs at least {MIN_OBSERVATIONS} observations, got {t}"
        )));
    }
    let k = lagged_differences;
    if t <= k + 1 + n * (k + 1) + 1 {
        return Err(Error::input(format!("{t} observations cannot support {k} lagged differences")));
    }
    if prices.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("prices contain non-finite values"));
    }

    let start = k + 1;
    let m = t - start;
    let restricted = det_spec == DetSpec::RestrictedConstant;
    let unrestricted = det_spec == DetSpec::UnrestrictedConstant;
    let p1 = n + usize::from(restricted);
    let p2 = n * k + usize::from(unrestricted);

    let z0 = DMatrix::from_fn(m, n, |i, j| prices[(start + i, j)] - prices[(start + i - 1, j)]);
    let z1 = DMatrix::from_fn(m, p1, |i, j| {
        if j < n {
            prices[(start + i - 1, j)]
        } else {
            1.0
        }
    });
    let z2 = DMatrix::from_fn(m, p2, |i, c| {
        if c < n * k {
            let (lag, j) = (c / n + 1, c % n);
            let row = start + i - lag;
            prices[(row, j)] - prices[(row - 1, j)]
        } else {
            1.0
        }
    });

    let r0 = residuals(&z0, &z2)?;
    let r1 = residuals(&z1, &z2)?;
    let mf = m as f64;
    let s00 = r0.transpose() * &r0 / mf;
    let s11 = r1.transpose() * &r1 / mf;
    let s01 = r0.transpose() * &r1 / mf;

    let s00_chol = Cholesky::new(s00)
        .ok_or_else(|| Error::DegenerateInput("differenced series have a singular covariance".into()))?;
    let s11_chol = Cholesky::new(s11)
        .ok_or_else(|| Error::DegenerateInput("lagged levels have a singular covariance".into()))?;
    let l = s11_chol.l();
    // A = L⁻¹ S₁₀ S₀₀⁻¹ S₀₁ L⁻ᵀ
    let s00_inv_s01 = s00_chol.solve(&s01);
    let inner = s01.transpose() * s00_inv_s01;
    let l_inv_inner = l
        .solve_lower_triangular(&inner)
        .ok_or_else(|| Error::DegenerateInput("singular Cholesky factor".into()))?;
    let a = l
        .solve_lower_triangular(&l_inv_inner.transpose())
        .ok_or_else(|| Error::DegenerateInput("singular Cholesky factor".into()))?;
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);

    let mut order: Vec<usize> = (0..p1).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let eigenvalues: Vec<f64> = order[..n]
        .iter()
        .map(|&i| eig.eigenvalues[i].clamp(0.0, 1.0 - 1e-15))
        .collect();

    let trace_stats: Vec<f64> = (0..n)
        .map(|r| -mf * eigenvalues[r..].iter().map(|l| (1.0 - l).ln()).sum::<f64>())
        .collect();
    let critical_values: Vec<f64> = (0..n).map(|r| critical_value_95(det_spec, n - r)).collect();
    let rank = (0..n).find(|&r| trace_stats[r] < critical_values[r]).unwrap_or(n);

    let v: DVector<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let lt = l.transpose();
    let b = lt
        .solve_upper_triangular(&v)
        .ok_or_else(|| Error::DegenerateInput("singular Cholesky factor".into()))?;
    let mut full: Vec<f64> = b.iter().copied().collect();
    // Normalize on the price weights only; the constant follows along.
    let mut head = full[..n].to_vec();
    let scale_before = head.clone();
    normalize_first(&mut head);
    let factor = scale_before
        .iter()
        .zip(&head)
        .find(|(_, h)| **h != 0.0)
        .map(|(b, h)| h / b)
        .unwrap_or(1.0);
    for x in full.iter_mut() {
        *x *= factor;
    }
    let beta_constant = restricted.then(|| full[n]);

    Ok(JohansenResult {
        eigenvalues,
        trace_stats,
        critical_values,
        rank,
        beta: head,
        beta_constant,
        det_spec,
        lagged_differences,
        n_obs: m,
    })
}

/// Convenience: Johansen on selected columns of a wider matrix.
pub fn johansen_on(
    prices: &DMatrix<f64>,
    members: &[usize],
    lagged_differences: usize,
    det_spec: DetSpec,
) -> Result<JohansenResult> {
    let sub = prices.select_columns(members);
    let sub: DMatrix<f64> = sub.reshape_generic(Dyn(prices.nrows()), Dyn(members.len()));
    johansen_test(&sub, lagged_differences, det_spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic pseudo-noise that is cheap to reproduce elsewhere.
    fn hash_noise(i: usize, salt: f64) -> f64 {
        let x = ((i as f64 + salt) * 12.9898).sin() * 43758.5453;
        x - x.floor() - 0.5
    }

    fn fixture() -> DMatrix<f64> {
        let t = 200;
        let mut y = DMatrix::zeros(t, 3);
        let (mut w, mut u, mut v) = (0.0, 0.0, 0.0);
        for i in 0..t {
            w += hash_noise(i, 0.0);
            u = 0.5 * u + hash_noise(i, 100.0);
            v += hash_noise(i, 200.0);
            y[(i, 0)] = 10.0 + w;
            y[(i, 1)] = 5.0 + 2.0 * w + u;
            y[(i, 2)] = 20.0 + v;
        }
        y
    }

    // Values below come from an independent NumPy/SciPy implementation
    // (scipy.linalg.eigh on the generalized problem S₁₀S₀₀⁻¹S₀₁ v = λ S₁₁ v)
    // run on the same fixture.
    /// (spec, eigenvalues, trace statistics, beta)
    type Reference = (DetSpec, [f64; 3], [f64; 3], &'static [f64]);

    #[test]
    fn matches_reference_implementation() {
        let y = fixture();
        let cases: [Reference; 3] = [
            (
                DetSpec::UnrestrictedConstant,
                [0.3010250966429481, 0.014976543223527547, 0.006355494864335113],
                [75.1619963439236, 4.250189019813736, 1.262403846562349],
                &[1.0, -0.4994823287999855, -0.004301970125872971],
            ),
            (
                DetSpec::RestrictedConstant,
                [0.30103563882087125, 0.027759301877628994, 0.013704666008170082],
                [79.22115406334397, 8.306360413172916, 2.7322894870502816],
                &[1.0, -0.49947959326595526, -0.004291880844523989, -7.3818155454504195],
            ),
            (
                DetSpec::None,
                [0.030685504458013834, 0.013706363415709737, 0.005263000820408769],
                [9.948356547931912, 3.777456284690928, 1.0448260406985153],
                &[1.0, -0.5536190009299901, -0.28812730105198975],
            ),
        ];
        for (spec, eig, trace, beta) in cases {
            let r = johansen_test(&y, 1, spec).unwrap();
            for (a, b) in r.eigenvalues.iter().zip(eig) {
                assert!((a - b).abs() < 1e-9, "{spec:?}: {:?}", r.eigenvalues);
            }
            for (a, b) in r.trace_stats.iter().zip(trace) {
                assert!((a - b).abs() < 1e-7, "{spec:?}: {:?}", r.trace_stats);
            }
            for (a, b) in r.beta.iter().zip(beta) {
                assert!((a - b).abs() < 1e-7, "{spec:?}: {:?}", r.beta);
            }
            if let Some(c) = r.beta_constant {
                assert!((c - beta[3]).abs() < 1e-6, "{c}");
            }
        }
        // Unrestricted: 75.16 > 29.80 rejects r = 0, 4.25 < 15.49 stops at 1.
        assert_eq!(johansen_test(&y, 1, DetSpec::UnrestrictedConstant).unwrap().rank, 1);
    }

    #[test]
    fn beta_normalized_first_component() {
        let y = fixture();
        for spec in [DetSpec::None, DetSpec::RestrictedConstant, DetSpec::UnrestrictedConstant] {
            let r = johansen_test(&y, 1, spec).unwrap();
            assert_eq!(r.beta[0], 1.0);
            assert_eq!(r.beta_constant.is_some(), spec == DetSpec::RestrictedConstant);
        }
    }

    #[test]
    fn invariants() {
        let y = fixture();
        let r = johansen_test(&y, 2, DetSpec::UnrestrictedConstant).unwrap();
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.eigenvalues.iter().all(|l| (0.0..1.0).contains(l)));
        assert!(r.trace_stats.windows(2).all(|w| w[0] > w[1]));
        assert!(r.rank <= 3);
        assert_eq!(r.n_obs, 200 - 3);
    }

    #[test]
    fn planted_pair_detected() {
        let y = fixture();
        let r = johansen_test(&y, 1, DetSpec::UnrestrictedConstant).unwrap();
        assert!(r.rank >= 1);
        // Spread y1 − 2 y0 is the planted relation.
        let target = [1.0, -0.5, 0.0];
        let dot: f64 = r.beta.iter().zip(&target).map(|(a, b)| a * b).sum();
        let na = r.beta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = target.iter().map(|x| x * x).sum::<f64>().sqrt();
        let angle = (dot.abs() / (na * nb)).min(1.0).acos().to_degrees();
        assert!(angle < 5.0, "angle {angle}, beta {:?}", r.beta);
    }

    #[test]
    fn scaling_and_shift_invariance() {
        let y = fixture();
        let base = johansen_test(&y, 1, DetSpec::UnrestrictedConstant).unwrap();
        let mut z = y.clone();
        for i in 0..z.nrows() {
            z[(i, 1)] = 3.0 * z[(i, 1)] + 7.0;
        }
        let scaled = johansen_test(&z, 1, DetSpec::UnrestrictedConstant).unwrap();
        for (a, b) in base.eigenvalues.iter().zip(&scaled.eigenvalues) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in base.trace_stats.iter().zip(&scaled.trace_stats) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((scaled.beta[1] - base.beta[1] / 3.0).abs() < 1e-8);
        assert!((scaled.beta[2] - base.beta[2]).abs() < 1e-8);
    }

    #[test]
    fn permutation_invariance() {
        let y = fixture();
        let base = johansen_test(&y, 1, DetSpec::UnrestrictedConstant).unwrap();
        let perm = [2, 0, 1];
        let p = johansen_on(&y, &perm, 1, DetSpec::UnrestrictedConstant).unwrap();
        for (a, b) in base.trace_stats.iter().zip(&p.trace_stats) {
            assert!((a - b).abs() < 1e-8);
        }
        // Same direction, possibly renormalized on a different first entry.
        let permuted: Vec<f64> = perm.iter().map(|&j| base.beta[j]).collect();
        let s = p.beta[1] / permuted[1];
        for (a, b) in p.beta.iter().zip(&permuted) {
            assert!((a - s * b).abs() < 1e-8, "{:?} vs {:?}", p.beta, permuted);
        }
    }

    #[test]
    fn input_errors() {
        let y = fixture();
        let short = y.rows(0, 40).into_owned();
        assert!(matches!(johansen_test(&short, 1, DetSpec::default()), Err(Error::Input(_))));
        let one = y.columns(0, 1).into_owned();
        assert!(matches!(johansen_test(&one, 1, DetSpec::default()), Err(Error::Input(_))));
        let five = DMatrix::from_fn(100, 5, |i, j| (i * (j + 1)) as f64);
        assert!(matches!(johansen_test(&five, 1, DetSpec::default()), Err(Error::Input(_))));
    }

    #[test]
    fn duplicate_series_is_degenerate() {
        let y = fixture();
        let d = DMatrix::from_fn(y.nrows(), 2, |i, _| y[(i, 0)]);
        assert!(matches!(
            johansen_test(&d, 1, DetSpec::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn critical_table_lookup() {
        assert_eq!(critical_value_95(DetSpec::UnrestrictedConstant, 1), 3.8415);
        assert_eq!(critical_value_95(DetSpec::UnrestrictedConstant, 2), 15.4943);
        assert_eq!(critical_value_95(DetSpec::RestrictedConstant, 4), 53.9358);
        assert_eq!(critical_value_95(DetSpec::None, 3), 24.2760);
    }
}
