//! Sparse matrices in coordinate form and a direct solver backed by faer.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

/// Square sparse matrix stored as unsorted triplets; duplicates add up.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletMatrix {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// Adds `scale · other` with `other` placed at offset `(row, col)`.
    pub fn add_block(&mut self, row: usize, col: usize, other: &TripletMatrix, scale: f64) {
        for &(i, j, v) in &other.entries {
            self.add(row + i, col + j, scale * v);
        }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Merged entries sorted by (row, col), with duplicates summed.
    pub fn compressed(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (i, j, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            if i == j {
                d[i] += v;
            }
        }
        d
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    /// Largest absolute difference between the matrix and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let c = self.compressed();
        let map: std::collections::HashMap<(usize, usize), f64> = c.iter().map(|&(i, j, v)| ((i, j), v)).collect();
        c.iter()
            .map(|&(i, j, v)| (v - map.get(&(j, i)).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max)
    }
}

/// Sparse LU factorization kept for repeated solves.
pub struct Factorization {
    matrix: TripletMatrix,
    lu: Lu<usize, f64>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("size", &self.matrix.size()).finish()
    }
}

impl Factorization {
    pub fn new(a: &TripletMatrix) -> Result<Self> {
        let n = a.size();
        let triplets: Vec<Triplet<usize, usize, f64>> = a.entries.iter().map(|&(i, j, v)| Triplet::new(i, j, v)).collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::SingularSystem(format!("matrix assembly failed: {e:?}")))?;
        let lu = mat.sp_lu().map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
        Ok(Self { matrix: a.clone(), lu })
    }

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let x = self.lu.solve(faer::Col::<f64>::from_fn(rhs.len(), |i| rhs[i]));
        (0..rhs.len()).map(|i| x[i]).collect()
    }

    /// Solves with two steps of iterative refinement.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.size();
        if b.len() != n {
            return Err(Error::DimensionMismatch { what: "right-hand side length", expected: n, got: b.len() });
        }
        let mut x = self.raw_solve(b);
        for _ in 0..2 {
            let ax = self.matrix.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let dx = self.raw_solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularSystem("solution is not finite".into()));
        }
        Ok(x)
    }
}

/// Solves `A x = b` by sparse LU with two steps of iterative refinement.
pub fn solve(a: &TripletMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.size() {
        return Err(Error::DimensionMismatch { what: "right-hand side length", expected: a.size(), got: b.len() });
    }
    Factorization::new(a)?.solve(b)
}

/// `‖A x - b‖₂`.
pub fn residual_norm(a: &TripletMatrix, x: &[f64], b: &[f64]) -> f64 {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| (ax - bi).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_indefinite_system() {
        let mut a = TripletMatrix::new(3);
        for &(i, j, v) in &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, -3.0), (2, 2, 4.0), (0, 2, 0.5), (2, 0, 0.5)] {
            a.add(i, j, v);
        }
        a.add(2, 2, 1.0);
        let b = [1.0, 2.0, 3.0];
        let x = solve(&a, &b).unwrap();
        assert!(residual_norm(&a, &x, &b) < 1e-14);
        let dense = a.to_dense().lu().solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
        for i in 0..3 {
            assert!((x[i] - dense[i]).abs() < 1e-14);
        }
        assert_eq!(a.diagonal(), vec![2.0, -3.0, 5.0]);
        assert_eq!(a.asymmetry(), 0.0);
    }

    #[test]
    fn singular_is_reported() {
        let mut a = TripletMatrix::new(2);
        a.add(0, 0, 1.0);
        a.add(0, 1, 1.0);
        a.add(1, 0, 1.0);
        a.add(1, 1, 1.0);
        assert!(solve(&a, &[1.0, 0.0]).is_err());
    }
}
