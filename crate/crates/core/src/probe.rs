//! Nearest-centroid readout: a linear classifier fit in closed form.
//!
//! `argmin_c |x - mu_c|^2 = argmax_c (2 x·mu_c - |mu_c|^2)`, so the decision
//! rule is linear in `x`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidReadout {
    pub dim: usize,
    pub labels: Vec<String>,
    /// `labels.len() x dim`, row-major.
    pub centroids: Vec<f64>,
}

impl CentroidReadout {
    /// Fits one centroid per label over `rows` (`n x dim`, row-major).
    pub fn fit(rows: &[f32], dim: usize, labels: &[String]) -> Result<Self> {
        if dim == 0 || rows.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} values for {} labels of width {dim}",
                rows.len(),
                labels.len()
            )));
        }
        let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for (x, l) in rows.chunks_exact(dim).zip(labels) {
            let (sum, n) = acc.entry(l.as_str()).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, &v) in sum.iter_mut().zip(x) {
                *s += f64::from(v);
            }
            *n += 1;
        }
        if acc.is_empty() {
            return Err(Error::InsufficientData("readout needs at least one labeled row".into()));
        }
        let mut out = CentroidReadout { dim, labels: Vec::new(), centroids: Vec::new() };
        for (l, (sum, n)) in acc {
            out.labels.push(l.to_owned());
            out.centroids.extend(sum.iter().map(|s| s / n as f64));
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[f32]) -> &str {
        let dist = |c: usize| -> f64 {
            self.centroids[c * self.dim..(c + 1) * self.dim]
                .iter()
                .zip(x)
                .map(|(m, &v)| (f64::from(v) - m).powi(2))
                .sum()
        };
        let best = (0..self.labels.len())
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)))
            .expect("at least one centroid");
        &self.labels[best]
    }

    /// Fraction of rows whose prediction equals the label.
    pub fn accuracy(&self, rows: &[f32], labels: &[String]) -> Result<f64> {
        if rows.len() != labels.len() * self.dim {
            return Err(Error::Dimension(format!(
                "{} values for {} labels of width {}",
                rows.len(),
                labels.len(),
                self.dim
            )));
        }
        if labels.is_empty() {
            return Err(Error::InsufficientData("no rows to score".into()));
        }
        let hits = rows
            .chunks_exact(self.dim)
            .zip(labels)
            .filter(|(x, l)| self.predict(x) == l.as_str())
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| (*x).to_owned()).collect()
    }

    #[test]
    fn separates_two_clouds() {
        let rows = [0.0f32, 0.0, 0.5, 0.0, 5.0, 5.0, 5.5, 4.5];
        let labels = s(&["a", "a", "b", "b"]);
        let r = CentroidReadout::fit(&rows, 2, &labels).unwrap();
        assert_eq!(r.centroids, [0.25, 0.0, 5.25, 4.75]);
        assert_eq!(r.accuracy(&rows, &labels).unwrap(), 1.0);
        assert_eq!(r.predict(&[4.0, 4.0]), "b");
    }

    #[test]
    fn ties_go_to_first_label() {
        let r = CentroidReadout::fit(&[-1.0, 1.0], 1, &s(&["x", "y"])).unwrap();
        assert_eq!(r.predict(&[0.0]), "x");
    }

    #[test]
    fn shape_errors() {
        assert!(CentroidReadout::fit(&[1.0, 2.0, 3.0], 2, &s(&["a"])).is_err());
        assert!(CentroidReadout::fit(&[], 2, &[]).is_err());
    }
}
