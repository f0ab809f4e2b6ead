//! Principal components of deformations (snapshot method in the RKHS) and of
//! scalar fields on a fixed surface (penalized alternating least squares).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lddmm::InitialMomenta;
use crate::mesh::{TriangleMesh, Vec3};
use crate::sparse::{Factorization, TripletMatrix};
use crate::surface::{consistent_mass, cotan_stiffness};

/// Makes the entry of largest magnitude positive; returns the sign applied.
fn fix_sign(v: &mut [f64]) -> f64 {
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        -1.0
    } else {
        1.0
    }
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

#[derive(Debug, Clone)]
pub struct GeometricPcResult {
    pub mean: InitialMomenta,
    /// Unit-norm principal directions as momenta on the shared control points.
    pub components: Vec<InitialMomenta>,
    pub variances: Vec<f64>,
    /// Scores, one row per subject.
    pub scores: DMatrix<f64>,
    /// Number of components requested when fewer could be returned.
    pub truncated_from: Option<usize>,
}

impl GeometricPcResult {
    /// Momenta `c · ψ_j` for visualizing mode `j`.
    pub fn mode_momenta(&self, j: usize, c: f64) -> InitialMomenta {
        self.components[j].scaled(c)
    }
}

/// RKHS inner products between flattened momenta on common control points.
fn rkhs_gram(kernel: &DMatrix<f64>, rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let kv: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| {
            let m = kernel.nrows();
            let mut out = vec![0.0; 3 * m];
            for k in 0..m {
                for l in 0..m {
                    let w = kernel[(k, l)];
                    for d in 0..3 {
                        out[3 * k + d] += w * a[3 * l + d];
                    }
                }
            }
            out
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i].iter().zip(&kv[j]).map(|(a, b)| a * b).sum())
}

/// Snapshot fPCA of initial momenta that share control points and kernel.
pub fn geometric_fpca(momenta: &[InitialMomenta], k: usize) -> Result<GeometricPcResult> {
    let n = momenta.len();
    if n < 2 {
        return Err(Error::InvalidParameter("geometric fPCA needs at least two subjects".into()));
    }
    let first = &momenta[0];
    for m in &momenta[1..] {
        if m.control_points != first.control_points || m.kernel != first.kernel {
            return Err(Error::InvalidParameter("all momenta must share control points and kernel".into()));
        }
    }
    let flat: Vec<Vec<f64>> = momenta.iter().map(|m| m.flat()).collect();
    let dim = flat[0].len();
    let mean: Vec<f64> = (0..dim).map(|d| flat.iter().map(|f| f[d]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = flat.iter().map(|f| f.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let kernel = first.kernel.gram_symmetric(&first.control_points);
    let gram = rkhs_gram(&kernel, &centered);

    let eig = (&gram / n as f64).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum::<f64>();
    let usable = order.iter().take_while(|&&j| eig.eigenvalues[j] > 1e-12 * trace.max(f64::MIN_POSITIVE)).count();
    let kept = k.min(n - 1).min(usable);
    let truncated_from = (kept < k).then_some(k);

    let mut components = Vec::with_capacity(kept);
    let mut variances = Vec::with_capacity(kept);
    let mut scores = DMatrix::zeros(n, kept);
    for (c, &j) in order.iter().take(kept).enumerate() {
        let mu = eig.eigenvalues[j];
        let e = eig.eigenvectors.column(j);
        let coef = e / (n as f64 * mu).sqrt();
        let mut psi = vec![0.0; dim];
        for (i, row) in centered.iter().enumerate() {
            psi.iter_mut().zip(row).for_each(|(p, x)| *p += coef[i] * x);
        }
        let sign = fix_sign(&mut psi);
        for i in 0..n {
            scores[(i, c)] = sign * (n as f64 * mu).sqrt() * e[i];
        }
        components.push(first.with_momenta(unflatten(&psi))?);
        variances.push(mu);
    }
    Ok(GeometricPcResult { mean: first.with_momenta(unflatten(&mean))?, components, variances, scores, truncated_from })
}

/// `Σ_i ‖v_i − v̄ − Σ_j A_ij ψ_j‖²_V` using the first `k` components.
pub fn geometric_reconstruction_error(momenta: &[InitialMomenta], pcs: &GeometricPcResult, k: usize) -> f64 {
    let kernel = pcs.mean.kernel.gram_symmetric(&pcs.mean.control_points);
    let mean = pcs.mean.flat();
    let residuals: Vec<Vec<f64>> = momenta
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut r: Vec<f64> = m.flat().iter().zip(&mean).map(|(a, b)| a - b).collect();
            for j in 0..k.min(pcs.components.len()) {
                let psi = pcs.components[j].flat();
                r.iter_mut().zip(&psi).for_each(|(x, p)| *x -= pcs.scores[(i, j)] * p);
            }
            r
        })
        .collect();
    rkhs_gram(&kernel, &residuals).trace()
}

/// Mass and stiffness of the template used by the functional fPCA.
#[derive(Debug)]
pub struct FunctionalOperators {
    pub mass: TripletMatrix,
    pub stiffness: TripletMatrix,
    mass_lu: Factorization,
}

impl FunctionalOperators {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        let mass = consistent_mass(mesh);
        let mass_lu = Factorization::new(&mass)?;
        Ok(Self { mass, stiffness: cotan_stiffness(mesh), mass_lu })
    }

    pub fn size(&self) -> usize {
        self.mass.size()
    }

    pub fn mass_norm(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.mass.mul_vec(v)).map(|(a, b)| a * b).sum::<f64>().sqrt()
    }

    /// Factorization of `[[I, λ A], [λ A, −λ M]]`, whose solve with
    /// right-hand side `[b; 0]` gives `(I + λ A M⁻¹ A)⁻¹ b` in the first block.
    fn smoother(&self, lambda: f64) -> Result<Option<Factorization>> {
        if lambda == 0.0 {
            return Ok(None);
        }
        let n = self.size();
        let mut a = TripletMatrix::new(2 * n);
        for i in 0..n {
            a.add(i, i, 1.0);
        }
        a.add_block(0, n, &self.stiffness, lambda);
        a.add_block(n, 0, &self.stiffness, lambda);
        a.add_block(n, n, &self.mass, -lambda);
        Factorization::new(&a).map(Some)
    }

    /// `‖Δψ‖²` in the discrete sense `ψᵀ A M⁻¹ A ψ`.
    pub fn laplacian_energy(&self, psi: &[f64]) -> Result<f64> {
        let apsi = self.stiffness.mul_vec(psi);
        let h = self.mass_lu.solve(&apsi)?;
        Ok(apsi.iter().zip(&h).map(|(a, b)| a * b).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlternationConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for AlternationConfig {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct FunctionalPcResult {
    pub mean: Vec<f64>,
    /// Principal functions, each of unit L² norm on the template.
    pub components: Vec<Vec<f64>>,
    pub scores: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub converged: Vec<bool>,
}

fn data_matrix(fields: &[Vec<f64>]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = fields.len();
    if n < 2 {
        return Err(Error::InvalidParameter("functional fPCA needs at least two fields".into()));
    }
    let m = fields[0].len();
    if let Some(f) = fields.iter().find(|f| f.len() != m) {
        return Err(Error::DimensionMismatch { what: "field length", expected: m, got: f.len() });
    }
    let x = DMatrix::from_fn(n, m, |i, j| fields[i][j]);
    let (c, mean) = crate::linalg::center_columns(&x);
    Ok((c, mean.iter().copied().collect()))
}

/// One penalized component of the residual matrix `r`; returns the unit
/// L² component, its scores and whether the alternation converged.
fn one_component(
    ops: &FunctionalOperators,
    r: &DMatrix<f64>,
    lambda: f64,
    alt: &AlternationConfig,
) -> Result<(Vec<f64>, DVector<f64>, bool)> {
    // start from the leading right singular vector
    let gram = r * r.transpose();
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let mut psi: DVector<f64> = r.transpose() * eig.eigenvectors.column(top);
    if psi.norm() == 0.0 {
        return Err(Error::InvalidParameter("residual data are identically zero".into()));
    }
    psi /= psi.norm();

    // the penalty is weighted by ‖a‖² so the problem is invariant to
    // trading scale between scores and component
    let objective = |psi: &DVector<f64>, a: &DVector<f64>| -> Result<f64> {
        let fit = (r - a * psi.transpose()).norm_squared();
        let pen = if lambda > 0.0 { lambda * a.norm_squared() * ops.laplacian_energy(psi.as_slice())? } else { 0.0 };
        Ok(fit + pen)
    };
    let smoother = ops.smoother(lambda)?;
    let n = ops.size();
    let mut a = r * &psi / psi.norm_squared();
    let mut prev = objective(&psi, &a)?;
    let mut converged = false;
    for _ in 0..alt.max_iterations {
        let s = a.norm_squared();
        if s == 0.0 {
            break;
        }
        let b = r.transpose() * &a / s;
        psi = match &smoother {
            None => b,
            Some(f) => {
                let mut rhs = b.as_slice().to_vec();
                rhs.resize(2 * n, 0.0);
                let mut x = f.solve(&rhs)?;
                x.truncate(n);
                DVector::from_vec(x)
            }
        };
        a = r * &psi / psi.norm_squared();
        let obj = objective(&psi, &a)?;
        if (prev - obj).abs() <= alt.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = obj;
    }
    let scale = ops.mass_norm(psi.as_slice());
    psi /= scale;
    fix_sign(psi.as_mut_slice());
    let a = r * &psi / psi.norm_squared();
    Ok((psi.as_slice().to_vec(), a, converged))
}

/// Penalized fPCA of fields on a common template: components are estimated
/// one at a time on the deflated residuals.
pub fn functional_fpca(
    ops: &FunctionalOperators,
    fields: &[Vec<f64>],
    k: usize,
    lambda: f64,
    alt: &AlternationConfig,
) -> Result<FunctionalPcResult> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter("fPCA lambda must be non-negative and finite".into()));
    }
    let (mut r, mean) = data_matrix(fields)?;
    if r.ncols() != ops.size() {
        return Err(Error::DimensionMismatch { what: "field length", expected: ops.size(), got: r.ncols() });
    }
    let k = k.min(fields.len() - 1);
    let mut components = Vec::with_capacity(k);
    let mut scores = DMatrix::zeros(fields.len(), k);
    let mut converged = Vec::with_capacity(k);
    for c in 0..k {
        let (psi, a, ok) = one_component(ops, &r, lambda, alt)?;
        let psi_v = DVector::from_column_slice(&psi);
        r -= &a * psi_v.transpose();
        scores.set_column(c, &a);
        components.push(psi);
        converged.push(ok);
    }
    Ok(FunctionalPcResult { mean, components, scores, lambdas: vec![lambda; k], converged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub lambda: f64,
    /// `(λ, held-out squared error)` for every grid value, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Chooses λ by subject-level K-fold cross-validation of the reconstruction
/// error with `k` components. Ties go to the smaller λ.
pub fn cross_validate_lambda(
    ops: &FunctionalOperators,
    fields: &[Vec<f64>],
    k: usize,
    grid: &[f64],
    folds: usize,
    seed: u64,
    alt: &AlternationConfig,
) -> Result<CrossValidation> {
    let n = fields.len();
    if grid.is_empty() {
        return Err(Error::InvalidParameter("lambda grid is empty".into()));
    }
    if folds < 2 || folds > n {
        return Err(Error::InvalidParameter(format!("folds must lie in 2..={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment: Vec<usize> = {
        let mut a = vec![0; n];
        for (pos, &i) in idx.iter().enumerate() {
            a[i] = pos % folds;
        }
        a
    };
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut err = 0.0;
        for f in 0..folds {
            let train: Vec<Vec<f64>> = (0..n).filter(|&i| assignment[i] != f).map(|i| fields[i].clone()).collect();
            let pcs = functional_fpca(ops, &train, k, lambda, alt)?;
            let basis = DMatrix::from_fn(ops.size(), pcs.components.len(), |p, c| pcs.components[c][p]);
            let normal = basis.transpose() * &basis;
            let chol = normal.cholesky().ok_or_else(|| Error::SingularSystem("fPCA basis is degenerate".into()))?;
            for i in (0..n).filter(|&i| assignment[i] == f) {
                let r = DVector::from_iterator(ops.size(), fields[i].iter().zip(&pcs.mean).map(|(x, m)| x - m));
                let a = chol.solve(&(basis.transpose() * &r));
                err += (r - &basis * a).norm_squared();
            }
        }
        curve.push((lambda, err));
    }
    let best = curve.iter().fold(curve[0], |b, &c| if c.1 < b.1 { c } else { b });
    Ok(CrossValidation { lambda: best.0, curve })
}
