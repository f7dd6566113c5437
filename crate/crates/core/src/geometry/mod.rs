//! Dissimilarities between activation patterns, their MDS embedding and
//! silhouette scoring.

pub mod eigen;
pub mod mds;
pub mod silhouette;

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::ActivationPatternSet;
use crate::stats::StatKey;

pub use eigen::{jacobi_eigen, SymmetricEigen};
pub use mds::{classical_mds, Embedding};
pub use silhouette::{silhouette, silhouette_with};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Hamming,
    Jaccard,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hamming" => Ok(Metric::Hamming),
            "jaccard" => Ok(Metric::Jaccard),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Symmetric, zero-diagonal, non-negative `n x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DissimilarityMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                if !(v >= 0.0) {
                    return Err(Error::Data {
                        location: format!("dissimilarity ({i}, {j})"),
                        reason: format!("value {v} is negative or NaN"),
                    });
                }
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(DissimilarityMatrix { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.d
    }
}

pub fn binary_distance(a: &[u8], b: &[u8], metric: Metric) -> f64 {
    match metric {
        Metric::Hamming => a.iter().zip(b).filter(|(x, y)| x != y).count() as f64,
        Metric::Jaccard => {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&x, &y) in a.iter().zip(b) {
                inter += usize::from(x == 1 && y == 1);
                union += usize::from(x == 1 || y == 1);
            }
            if union == 0 {
                0.0
            } else {
                1.0 - inter as f64 / union as f64
            }
        }
    }
}

/// Pairwise distances between the rows of a pattern set, in key order.
pub fn pairwise_dissimilarity(patterns: &ActivationPatternSet, metric: Metric) -> Result<DissimilarityMatrix> {
    let rows: Vec<&[u8]> = patterns.rows().map(|(_, v)| v).collect();
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 patterns, got {}",
            rows.len()
        )));
    }
    let n = rows.len();
    let d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (0..n).map(move |j| if i == j { 0.0 } else { binary_distance(rows[i], rows[j], metric) })
        })
        .collect();
    Ok(DissimilarityMatrix { n, d })
}

/// MDS embedding of a pattern set with per-key group labels and their silhouette.
#[derive(Debug, Clone)]
pub struct PatternEmbedding {
    pub keys: Vec<StatKey>,
    pub groups: Vec<String>,
    pub embedding: Embedding,
    /// `None` when fewer than two groups are present.
    pub silhouette: Option<f64>,
}

/// Embeds every pattern row and scores how well `group_of` separates them.
pub fn embed_patterns<F>(patterns: &ActivationPatternSet, metric: Metric, dim: usize, group_of: F) -> Result<PatternEmbedding>
where
    F: Fn(&StatKey) -> Option<String>,
{
    let d = pairwise_dissimilarity(patterns, metric)?;
    let embedding = classical_mds(&d, dim)?;
    let keys: Vec<StatKey> = patterns.keys().cloned().collect();
    let groups: Vec<String> = keys.iter().map(|k| group_of(k).unwrap_or_else(|| "-".to_owned())).collect();
    let distinct = groups.iter().collect::<std::collections::BTreeSet<_>>().len();
    let silhouette = if distinct >= 2 { Some(silhouette(&embedding.points(), &groups)?) } else { None };
    Ok(PatternEmbedding { keys, groups, embedding, silhouette })
}
