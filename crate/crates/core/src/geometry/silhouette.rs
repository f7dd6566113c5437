//! Mean silhouette coefficient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Mean silhouette over all points, given any pairwise distance function.
///
/// Points alone in their cluster score 0, as do points with `a = b = 0`.
pub fn silhouette_with<L, F>(n: usize, labels: &[L], dist: F) -> Result<f64>
where
    L: Ord,
    F: Fn(usize, usize) -> f64,
{
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} points", labels.len())));
    }
    let mut ids: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    if ids.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "silhouette needs at least 2 distinct labels, got {}",
            ids.len()
        )));
    }
    let group: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; ids.len()];
    for &g in &group {
        sizes[g] += 1;
    }

    let mut total = 0.0;
    let mut sums = vec![0.0; ids.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[group[j]] += dist(i, j);
            }
        }
        let own = group[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&g| g != own)
            .map(|g| sums[g] / sizes[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Silhouette with Euclidean distances between the given points.
pub fn silhouette<L: Ord>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    silhouette_with(points.len(), labels, |i, j| euclidean(&points[i], &points[j]))
}
