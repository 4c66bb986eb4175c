//! Principal component analysis of the standardized factor matrix and the two
//! ways of turning it into a clustering feature space.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::NormalizedFactorMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub tickers: Vec<String>,
    pub factor_names: Vec<String>,
    /// Descending; tiny negative round-off clamped to zero.
    pub eigenvalues: Vec<f64>,
    /// factors × components, unit-norm columns, largest-magnitude entry
    /// positive in each column.
    pub loadings: DMatrix<f64>,
    pub explained_ratio: Vec<f64>,
    /// tickers × components projection of the input matrix.
    pub scores: DMatrix<f64>,
}

/// Eigendecomposition of the sample covariance `XᵀX / (n - 1)` of a
/// standardized matrix (which is its correlation matrix).
pub fn pca(x: &NormalizedFactorMatrix) -> Result<PcaResult> {
    let (n, p) = x.values.shape();
    if n < 2 {
        return Err(Error::input("PCA needs at least two tickers"));
    }
    if p < 2 {
        return Err(Error::input("PCA needs at least two factors"));
    }
    let cov = x.values.transpose() * &x.values / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);

    // Descending eigenvalue, ties by original index.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut loadings = DMatrix::zeros(p, p);
    let mut eigenvalues = Vec::with_capacity(p);
    for (c, &k) in order.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        eigenvalues.push(if lam < 0.0 { 0.0 } else { lam });
        let mut v = eig.eigenvectors.column(k).into_owned();
        let norm = v.norm();
        v /= norm;
        let pivot = (0..p)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        if v[pivot] < 0.0 {
            v = -v;
        }
        loadings.set_column(c, &v);
    }
    let total: f64 = eigenvalues.iter().sum();
    let explained_ratio = eigenvalues.iter().map(|l| l / total).collect();
    let scores = &x.values * &loadings;

    Ok(PcaResult {
        tickers: x.tickers.clone(),
        factor_names: x.factor_names.clone(),
        eigenvalues,
        loadings,
        explained_ratio,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// The z-scored columns of the most influential raw factors.
    #[serde(alias = "raw")]
    RawFactors,
    /// Projections on the leading principal components.
    #[serde(alias = "pc")]
    PrincipalComponents,
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMode::RawFactors => "raw",
            FeatureMode::PrincipalComponents => "pc",
        })
    }
}

/// The matrix handed to K-means, with a record of where its columns came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    pub mode: FeatureMode,
    pub tickers: Vec<String>,
    /// tickers × k.
    pub matrix: DMatrix<f64>,
    /// Factor names (raw mode) or `pc0`, `pc1`, … (component mode).
    pub provenance: Vec<String>,
}

impl FeatureSpace {
    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }

    /// A feature space over an arbitrary matrix, mostly for tests and
    /// synthetic experiments.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let tickers = (0..matrix.nrows()).map(|i| format!("X{i}")).collect();
        let provenance = (0..matrix.ncols()).map(|i| format!("f{i}")).collect();
        Self {
            mode: FeatureMode::RawFactors,
            tickers,
            matrix,
            provenance,
        }
    }
}

fn check_k(k: usize, p: usize) -> Result<()> {
    if k == 0 || k > p {
        return Err(Error::input(format!("k = {k} outside 1..={p}")));
    }
    Ok(())
}

/// Scores on the first `k` principal components.
pub fn select_components(p: &PcaResult, k: usize) -> Result<FeatureSpace> {
    check_k(k, p.eigenvalues.len())?;
    Ok(FeatureSpace {
        mode: FeatureMode::PrincipalComponents,
        tickers: p.tickers.clone(),
        matrix: p.scores.columns(0, k).into_owned(),
        provenance: (0..k).map(|i| format!("pc{i}")).collect(),
    })
}

/// Indices of the raw factors picked by walking components in
/// descending-eigenvalue order and taking, from each, the not-yet-chosen
/// factor with the largest absolute loading.
pub fn raw_factor_choice(p: &PcaResult, k: usize) -> Result<Vec<usize>> {
    let nf = p.loadings.nrows();
    check_k(k, nf)?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for c in 0..p.loadings.ncols() {
        if chosen.len() == k {
            break;
        }
        let pick = (0..nf)
            .filter(|f| !chosen.contains(f))
            .max_by(|&a, &b| {
                p.loadings[(a, c)]
                    .abs()
                    .total_cmp(&p.loadings[(b, c)].abs())
                    .then(b.cmp(&a))
            });
        if let Some(f) = pick {
            chosen.push(f);
        }
    }
    Ok(chosen)
}

pub fn select_raw_factors(p: &PcaResult, x: &NormalizedFactorMatrix, k: usize) -> Result<FeatureSpace> {
    let chosen = raw_factor_choice(p, k)?;
    let matrix = DMatrix::from_fn(x.values.nrows(), k, |i, j| x.values[(i, chosen[j])]);
    Ok(FeatureSpace {
        mode: FeatureMode::RawFactors,
        tickers: x.tickers.clone(),
        matrix,
        provenance: chosen.iter().map(|&f| x.factor_names[f].clone()).collect(),
    })
}

pub fn select_features(
    p: &PcaResult,
    x: &NormalizedFactorMatrix,
    mode: FeatureMode,
    k: usize,
) -> Result<FeatureSpace> {
    match mode {
        FeatureMode::RawFactors => select_raw_factors(p, x, k),
        FeatureMode::PrincipalComponents => select_components(p, k),
    }
}
