//! Candidate portfolios of 2 to 4 stocks from cluster assignments and from
//! the rows of a sparse precision matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::error::Error;
use crate::factor::FeatureSpace;
use crate::glasso::{PrecisionEstimate, NONZERO_THRESHOLD};

pub const MIN_PORTFOLIO: usize = 2;
pub const MAX_PORTFOLIO: usize = 4;
pub const DEFAULT_CUTOFF: usize = 55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Clustering,
    Glasso,
    ClusteringGlasso,
    GlassoClustering,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Clustering,
        Strategy::Glasso,
        Strategy::ClusteringGlasso,
        Strategy::GlassoClustering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Clustering => "clustering",
            Strategy::Glasso => "glasso",
            Strategy::ClusteringGlasso => "clustering-glasso",
            Strategy::GlassoClustering => "glasso-clustering",
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Strategy::ClusteringGlasso | Strategy::GlassoClustering)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePortfolio {
    /// Sorted ascending.
    pub tickers: Vec<String>,
    /// Universe column indices, sorted ascending (same order as `tickers`).
    pub members: Vec<usize>,
    pub strategy: Strategy,
    /// Sum of |Θ| over the source row's nonzeros; 0 for pure clustering.
    pub score: f64,
    /// Precision row, or cluster id for pure clustering.
    pub source_row: usize,
    /// Masking pass (cluster id) for glasso-clustering candidates.
    pub pass: Option<usize>,
}

impl CandidatePortfolio {
    fn new(members: Vec<usize>, names: &[String], strategy: Strategy, score: f64, source_row: usize) -> Self {
        let mut members = members;
        members.sort_unstable();
        members.dedup();
        debug_assert!((MIN_PORTFOLIO..=MAX_PORTFOLIO).contains(&members.len()));
        Self {
            tickers: members.iter().map(|&i| names[i].clone()).collect(),
            members,
            strategy,
            score,
            source_row,
            pass: None,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// How a row with five or more nonzeros is cut down to four stocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowRule {
    /// The row's own stock plus the three largest off-diagonal entries.
    #[default]
    AnchorPlusTop3,
    /// The four largest absolute entries, diagonal included in the race.
    TopFourAbsolute,
}

/// Score order: descending score, then lexicographic ticker list.
fn rank(c: &mut [CandidatePortfolio]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tickers.cmp(&b.tickers)));
}

/// Keeps the higher-scoring copy of each ticker set (first in rank order on
/// equal scores), then ranks.
fn dedup_ranked(mut c: Vec<CandidatePortfolio>) -> Vec<CandidatePortfolio> {
    rank(&mut c);
    let mut seen = std::collections::BTreeSet::new();
    c.retain(|p| seen.insert(p.members.clone()));
    c
}

/// Applies the row rules to one row of Θ (masked entries already zeroed).
fn row_candidate(row: &[f64], anchor: usize, rule: RowRule) -> Option<(Vec<usize>, f64)> {
    let nz: Vec<usize> = (0..row.len()).filter(|&j| row[j].abs() > NONZERO_THRESHOLD).collect();
    if nz.len() < MIN_PORTFOLIO {
        return None;
    }
    let score: f64 = nz.iter().map(|&j| row[j].abs()).sum();
    if nz.len() <= MAX_PORTFOLIO {
        return Some((nz, score));
    }
    let by_size = |v: &mut Vec<usize>| {
        v.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
    };
    let anchor_present = nz.contains(&anchor);
    let members = match rule {
        RowRule::AnchorPlusTop3 if anchor_present => {
            let mut others: Vec<usize> = nz.iter().copied().filter(|&j| j != anchor).collect();
            by_size(&mut others);
            let mut m = vec![anchor];
            m.extend_from_slice(&others[..MAX_PORTFOLIO - 1]);
            m
        }
        _ => {
            let mut all = nz;
            by_size(&mut all);
            all.truncate(MAX_PORTFOLIO);
            all
        }
    };
    Some((members, score))
}

fn theta_row(t: &PrecisionEstimate, i: usize) -> Vec<f64> {
    (0..t.n()).map(|j| t.theta[(i, j)]).collect()
}

/// One candidate per qualifying row of Θ, deduplicated and ranked.
pub fn from_precision_rows(t: &PrecisionEstimate, rule: RowRule) -> Vec<CandidatePortfolio> {
    let c = (0..t.n())
        .filter_map(|i| {
            row_candidate(&theta_row(t, i), i, rule)
                .map(|(m, s)| CandidatePortfolio::new(m, &t.tickers, Strategy::Glasso, s, i))
        })
        .collect();
    dedup_ranked(c)
}

/// Row candidates whose members all carry the same coarse cluster label.
pub fn clustering_glasso(a: &ClusterAssignment, t: &PrecisionEstimate, rule: RowRule) -> Vec<CandidatePortfolio> {
    from_precision_rows(t, rule)
        .into_iter()
        .filter(|c| c.members.iter().all(|&m| a.labels[m] == a.labels[c.members[0]]))
        .map(|mut c| {
            c.strategy = Strategy::ClusteringGlasso;
            c
        })
        .collect()
}

/// One masked pass per coarse cluster: columns of stocks outside the cluster
/// are zeroed before the row rules run, so each row can yield up to one
/// candidate per cluster. The pooled candidates are ranked and cut off.
pub fn glasso_clustering(
    t: &PrecisionEstimate,
    a: &ClusterAssignment,
    cutoff: usize,
    rule: RowRule,
) -> Vec<CandidatePortfolio> {
    let n = t.n();
    let mut pooled = Vec::new();
    for c in 0..a.k {
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| if a.labels[j] == c { t.theta[(i, j)] } else { 0.0 })
                .collect();
            if let Some((m, s)) = row_candidate(&row, i, rule) {
                let mut p = CandidatePortfolio::new(m, &t.tickers, Strategy::GlassoClustering, s, i);
                p.pass = Some(c);
                pooled.push(p);
            }
        }
    }
    let mut ranked = dedup_ranked(pooled);
    ranked.truncate(cutoff);
    ranked
}

/// Splits `m ≥ 5` ordered members into runs of 3, absorbing a remainder of
/// 2 as a final pair and a remainder of 1 by ending with two pairs.
fn partition_sizes(m: usize) -> Vec<usize> {
    if m <= MAX_PORTFOLIO {
        return vec![m];
    }
    let (q, r) = (m / 3, m % 3);
    match r {
        0 => vec![3; q],
        2 => {
            let mut v = vec![3; q];
            v.push(2);
            v
        }
        _ => {
            let mut v = vec![3; q - 1];
            v.extend([2, 2]);
            v
        }
    }
}

/// Pure clustering candidates. Big clusters are cut into consecutive groups
/// after ordering members by distance to their centroid.
pub fn from_clusters(a: &ClusterAssignment, features: &FeatureSpace) -> Vec<CandidatePortfolio> {
    let x = &features.matrix;
    let dist = |i: usize, c: usize| -> f64 {
        (0..x.ncols()).map(|j| (x[(i, j)] - a.centroids[(c, j)]).powi(2)).sum()
    };
    let mut out = Vec::new();
    for c in 0..a.k {
        let mut members = a.members(c);
        if members.len() < MIN_PORTFOLIO {
            continue;
        }
        if members.len() > MAX_PORTFOLIO {
            members.sort_by(|&p, &q| dist(p, c).total_cmp(&dist(q, c)).then(p.cmp(&q)));
        }
        let mut start = 0;
        for size in partition_sizes(members.len()) {
            let group = members[start..start + size].to_vec();
            start += size;
            out.push(CandidatePortfolio::new(group, &features.tickers, Strategy::Clustering, 0.0, c));
        }
    }
    dedup_ranked(out)
}

/// Candidate counts per strategy, for reports.
pub fn count_by_strategy(c: &[CandidatePortfolio]) -> BTreeMap<Strategy, usize> {
    let mut m = BTreeMap::new();
    for p in c {
        *m.entry(p.strategy).or_insert(0) += 1;
    }
    m
}
