//! Classical (Torgerson) multidimensional scaling.

use serde::{Deserialize, Serialize};

use super::eigen::jacobi_eigen;
use super::DissimilarityMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub n: usize,
    pub dim: usize,
    /// Row-major `n x dim`.
    pub coords: Vec<f64>,
    /// Retained eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Share of total absolute eigenvalue mass carried by negative eigenvalues.
    pub clamped_eigenmass: f64,
}

impl Embedding {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.point(i).to_vec()).collect()
    }
}

/// Embeds `d` into `dim` dimensions via the double-centered Gram matrix.
pub fn classical_mds(d: &DissimilarityMatrix, dim: usize) -> Result<Embedding> {
    let n = d.n();
    if n < 3 {
        return Err(Error::InsufficientData(format!("MDS needs at least 3 points, got {n}")));
    }
    if dim == 0 || dim > n {
        return Err(Error::Config(format!("embedding dimension {dim} invalid for {n} points")));
    }

    // B = -1/2 J (D∘D) J, computed through row, column and grand means
    let sq: Vec<f64> = d.values().iter().map(|x| x * x).collect();
    let row_mean: Vec<f64> = (0..n)
        .map(|i| sq[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // D is symmetric, so column means equal row means
            b[i * n + j] = -0.5 * (sq[i * n + j] - row_mean[i] - row_mean[j] + grand);
        }
    }

    let eig = jacobi_eigen(&b, n)?;
    let negative: f64 = eig.values.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    let total: f64 = eig.values.iter().map(|v| v.abs()).sum();
    let clamped_eigenmass = if total > 0.0 { negative / total } else { 0.0 };

    let mut coords = vec![0.0; n * dim];
    let mut kept = Vec::with_capacity(dim);
    for c in 0..dim {
        let lambda = eig.values[c].max(0.0);
        kept.push(lambda);
        let scale = lambda.sqrt();
        let mut col = eig.vector(c);
        // largest |entry| positive; first index wins ties
        let mut pivot = 0;
        for r in 1..n {
            if col[r].abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            coords[r * dim + c] = col[r] * scale;
        }
    }
    Ok(Embedding { n, dim, coords, eigenvalues: kept, clamped_eigenmass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn euclid(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    fn from_points(pts: &[[f64; 2]]) -> DissimilarityMatrix {
        DissimilarityMatrix::from_fn(pts.len(), |i, j| euclid(&pts[i], &pts[j])).unwrap()
    }

    #[test]
    fn equilateral_triangle() {
        let d = DissimilarityMatrix::from_fn(3, |i, j| if i == j { 0.0 } else { 1.0 }).unwrap();
        let e = classical_mds(&d, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 };
                assert!((euclid(e.point(i), e.point(j)) - want).abs() < 1e-9);
            }
        }
        assert!(e.clamped_eigenmass < 1e-12);
    }

    #[test]
    fn all_zero_matrix() {
        let d = DissimilarityMatrix::from_fn(4, |_, _| 0.0).unwrap();
        let e = classical_mds(&d, 2).unwrap();
        assert!(e.coords.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sign_convention() {
        let pts = [[0.0, 0.0], [1.0, 0.2], [5.0, -0.3], [2.0, 1.0]];
        let e = classical_mds(&from_points(&pts), 2).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| e.coords[r * 2 + c]).collect();
            let max = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn non_euclidean_reports_clamped_mass() {
        // violates the triangle inequality
        let raw = [[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]];
        let d = DissimilarityMatrix::from_fn(3, |i, j| raw[i][j]).unwrap();
        let e = classical_mds(&d, 2).unwrap();
        assert!(e.clamped_eigenmass > 0.0);
        assert!(e.eigenvalues.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn too_few_points() {
        let d = DissimilarityMatrix::from_fn(2, |i, j| if i == j { 0.0 } else { 1.0 }).unwrap();
        assert!(classical_mds(&d, 2).is_err());
    }

    proptest! {
        #[test]
        fn recovers_planar_distances(pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40)) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let d = from_points(&pts);
            let e = classical_mds(&d, 2).unwrap();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    prop_assert!((euclid(e.point(i), e.point(j)) - d.get(i, j)).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn permutation_equivariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4..20),
            rot in 1usize..19,
        ) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let n = pts.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let permuted: Vec<[f64; 2]> = perm.iter().map(|&p| pts[p]).collect();
            let a = classical_mds(&from_points(&pts), 2).unwrap();
            let b = classical_mds(&from_points(&permuted), 2).unwrap();
            // skip near-degenerate spectra where the eigenbasis is not unique
            let gap = (a.eigenvalues[0] - a.eigenvalues[1]).abs() / a.eigenvalues[0].max(1e-12);
            prop_assume!(gap > 1e-3 && a.eigenvalues[1] > 1e-6);
            for (i, &p) in perm.iter().enumerate() {
                for c in 0..2 {
                    prop_assert!((b.point(i)[c] - a.point(p)[c]).abs() < 1e-6);
                }
            }
        }
    }
}
