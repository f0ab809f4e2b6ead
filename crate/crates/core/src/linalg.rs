//! Small dense helpers shared by the statistics modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Subtracts the column means; returns the centered matrix and the means.
pub fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let means = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (c, means)
}

/// Symmetric inverse square root. Fails when an eigenvalue falls below
/// `rel_floor · trace`.
pub fn inverse_sqrt(m: &DMatrix<f64>, rel_floor: f64) -> std::result::Result<DMatrix<f64>, f64> {
    let eig = m.clone().symmetric_eigen();
    let floor = rel_floor * m.trace().abs();
    let min = eig.eigenvalues.min();
    if !(min > floor) {
        return Err(min);
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Orthonormal basis of the column span of `a` under the inner product
/// `⟨x, y⟩ = xᵀ W y` with `W` symmetric positive definite.
fn weighted_orthonormal(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = a.transpose() * w * a;
    let inv = inverse_sqrt(&gram, 1e-14).map_err(|_| Error::InvalidParameter("subspace basis is rank deficient".into()))?;
    Ok(a * inv)
}

/// Principal angles (radians, ascending) between the column spans of `a`
/// and `b` under the inner product defined by `w` (identity if `None`).
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>, w: Option<&DMatrix<f64>>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch { what: "subspace ambient dimension", expected: a.nrows(), got: b.nrows() });
    }
    let id;
    let w = match w {
        Some(w) => w,
        None => {
            id = DMatrix::identity(a.nrows(), a.nrows());
            &id
        }
    };
    let qa = weighted_orthonormal(a, w)?;
    let qb = weighted_orthonormal(b, w)?;
    let s = (qa.transpose() * w * qb).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Sample Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
