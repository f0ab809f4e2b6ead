//! Canonical correlation between geometric and functional scores, Bartlett's
//! sequential test, regression of functional on geometric scores and the
//! co-variation sequence used for visualization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::fpca::{FunctionalPcResult, GeometricPcResult};
use crate::lddmm::{deform_mesh, inverted_faces, InitialMomenta};
use crate::linalg::{center_columns, inverse_sqrt};
use crate::mesh::TriangleMesh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BartlettResult {
    pub statistics: Vec<f64>,
    pub degrees_of_freedom: Vec<usize>,
    pub p_values: Vec<f64>,
    /// Set when some correlation equals one and a statistic is infinite.
    pub saturated: bool,
}

#[derive(Debug, Clone)]
pub struct CcaResult {
    pub correlations: Vec<f64>,
    /// Geometric weights, one vector per mode.
    pub weights_g: Vec<DVector<f64>>,
    pub weights_f: Vec<DVector<f64>>,
    /// Covariances of each score block with the mode's canonical variate.
    pub loadings_g: Vec<DVector<f64>>,
    pub loadings_f: Vec<DVector<f64>>,
    pub bartlett: BartlettResult,
    pub n: usize,
}

impl CcaResult {
    pub fn mode_count(&self) -> usize {
        self.correlations.len()
    }

    /// Canonical variates `(X_G w_G, X_F w_F)` for mode `l` of centered scores.
    pub fn variates(&self, scores_g: &DMatrix<f64>, scores_f: &DMatrix<f64>, l: usize) -> (DVector<f64>, DVector<f64>) {
        let (g, _) = center_columns(scores_g);
        let (f, _) = center_columns(scores_f);
        (g * &self.weights_g[l], f * &self.weights_f[l])
    }
}

fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b / (a.nrows() as f64 - 1.0)
}

/// CCA through the SVD of the whitened cross-covariance.
pub fn cca(scores_g: &DMatrix<f64>, scores_f: &DMatrix<f64>) -> Result<CcaResult> {
    let n = scores_g.nrows();
    let (p, q) = (scores_g.ncols(), scores_f.ncols());
    if scores_f.nrows() != n {
        return Err(Error::DimensionMismatch { what: "functional score rows", expected: n, got: scores_f.nrows() });
    }
    if p == 0 || q == 0 {
        return Err(Error::InvalidParameter("both score blocks need at least one column".into()));
    }
    if n <= p + q {
        return Err(Error::InvalidParameter(format!("CCA needs more subjects ({n}) than score columns ({})", p + q)));
    }
    let (g, _) = center_columns(scores_g);
    let (f, _) = center_columns(scores_f);
    let sgg = covariance(&g, &g);
    let sff = covariance(&f, &f);
    let sgf = covariance(&g, &f);
    let wg = inverse_sqrt(&sgg, 1e-12).map_err(|_| Error::RankDeficient { block: "geometric" })?;
    let wf = inverse_sqrt(&sff, 1e-12).map_err(|_| Error::RankDeficient { block: "functional" })?;
    let svd = (&wg * &sgf * &wf).svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let modes = p.min(q);
    let mut result = CcaResult {
        correlations: Vec::with_capacity(modes),
        weights_g: Vec::with_capacity(modes),
        weights_f: Vec::with_capacity(modes),
        loadings_g: Vec::with_capacity(modes),
        loadings_f: Vec::with_capacity(modes),
        bartlett: BartlettResult { statistics: vec![], degrees_of_freedom: vec![], p_values: vec![], saturated: false },
        n,
    };
    for &j in order.iter().take(modes) {
        let mut a = &wg * u.column(j);
        let mut b = &wf * vt.row(j).transpose();
        let big = a.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            a.neg_mut();
            b.neg_mut();
        }
        result.correlations.push(svd.singular_values[j].clamp(0.0, 1.0));
        result.loadings_g.push(&sgg * &a);
        result.loadings_f.push(&sff * &b);
        result.weights_g.push(a);
        result.weights_f.push(b);
    }
    result.bartlett = bartlett_test(&result.correlations, n, p, q)?;
    Ok(result)
}

/// Sequential tests of `ρ_{l+1} = … = 0` for `l = 0 … min(p, q) − 1`.
pub fn bartlett_test(correlations: &[f64], n: usize, p: usize, q: usize) -> Result<BartlettResult> {
    let modes = p.min(q);
    if correlations.len() != modes {
        return Err(Error::DimensionMismatch { what: "canonical correlation count", expected: modes, got: correlations.len() });
    }
    if correlations.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidParameter("canonical correlations must lie in [0, 1]".into()));
    }
    let factor = n as f64 - 1.0 - (p + q + 1) as f64 / 2.0;
    let mut out = BartlettResult { statistics: vec![], degrees_of_freedom: vec![], p_values: vec![], saturated: false };
    for l in 0..modes {
        let tail: f64 = correlations[l..].iter().map(|r| (1.0 - r * r).ln()).sum();
        let stat = -factor * tail;
        let df = (p - l) * (q - l);
        let pv = if stat.is_infinite() {
            out.saturated = true;
            0.0
        } else if stat <= 0.0 {
            1.0
        } else {
            let chi = ChiSquared::new(df as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            chi.sf(stat)
        };
        out.statistics.push(stat);
        out.degrees_of_freedom.push(df);
        out.p_values.push(pv);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Regression {
    /// Row 0 is the intercept; rows 1..=p multiply the geometric scores.
    /// One column per functional score.
    pub coefficients: DMatrix<f64>,
    pub r_squared: Vec<f64>,
}

/// Ordinary least squares of each functional score on the geometric scores.
pub fn regress(scores_g: &DMatrix<f64>, scores_f: &DMatrix<f64>) -> Result<Regression> {
    let n = scores_g.nrows();
    let p = scores_g.ncols();
    if scores_f.nrows() != n {
        return Err(Error::DimensionMismatch { what: "functional score rows", expected: n, got: scores_f.nrows() });
    }
    if n <= p + 1 {
        return Err(Error::InvalidParameter("regression needs more subjects than predictors".into()));
    }
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { scores_g[(i, j - 1)] });
    let chol = (x.transpose() * &x).cholesky().ok_or(Error::RankDeficient { block: "geometric" })?;
    let coefficients = chol.solve(&(x.transpose() * scores_f));
    let fitted = &x * &coefficients;
    let r_squared = (0..scores_f.ncols())
        .map(|j| {
            let y = scores_f.column(j);
            let mean = y.mean();
            let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            let rss = (y - fitted.column(j)).norm_squared();
            if tss > 0.0 {
                1.0 - rss / tss
            } else {
                0.0
            }
        })
        .collect();
    Ok(Regression { coefficients, r_squared })
}

#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub c: f64,
    pub mesh: TriangleMesh,
    pub field: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CovariationSequence {
    pub frames: Vec<SequenceFrame>,
    /// Grid values dropped because shooting failed or folded the mesh.
    pub dropped: Vec<f64>,
}

/// Geometric and functional directions of mode `l`, in score units of one
/// canonical-variate standard deviation.
pub fn mode_directions(
    l: usize,
    pc_g: &GeometricPcResult,
    pc_f: &FunctionalPcResult,
    cca: &CcaResult,
) -> Result<(InitialMomenta, Vec<f64>)> {
    if l >= cca.mode_count() {
        return Err(Error::InvalidParameter(format!("mode {l} out of range ({} modes)", cca.mode_count())));
    }
    let (lg, lf) = (&cca.loadings_g[l], &cca.loadings_f[l]);
    if lg.len() > pc_g.components.len() || lf.len() > pc_f.components.len() {
        return Err(Error::InvalidParameter("CCA used more components than the PC results provide".into()));
    }
    let first = &pc_g.components[0];
    let mut momenta = vec![nalgebra::Vector3::zeros(); first.len()];
    for (j, w) in lg.iter().enumerate() {
        for (m, a) in momenta.iter_mut().zip(&pc_g.components[j].momenta) {
            *m += *w * a;
        }
    }
    let mut field = vec![0.0; pc_f.components[0].len()];
    for (j, w) in lf.iter().enumerate() {
        field.iter_mut().zip(&pc_f.components[j]).for_each(|(f, v)| *f += w * v);
    }
    Ok((first.with_momenta(momenta)?, field))
}

/// Template deformed by `c · ψ_G` carrying `c · ψ_F` for every `c` in the grid.
pub fn covariation_sequence(
    l: usize,
    grid: &[f64],
    pc_g: &GeometricPcResult,
    pc_f: &FunctionalPcResult,
    cca: &CcaResult,
    template: &TriangleMesh,
    steps: usize,
) -> Result<CovariationSequence> {
    let (psi_g, psi_f) = mode_directions(l, pc_g, pc_f, cca)?;
    if psi_f.len() != template.vertex_count() {
        return Err(Error::DimensionMismatch { what: "functional mode length", expected: template.vertex_count(), got: psi_f.len() });
    }
    let mut out = CovariationSequence { frames: vec![], dropped: vec![] };
    for &c in grid {
        match deform_mesh(template, &psi_g.scaled(c), steps) {
            Ok(mesh) if inverted_faces(template, mesh.vertices()) == 0 => {
                out.frames.push(SequenceFrame { c, mesh, field: psi_f.iter().map(|v| c * v).collect() })
            }
            _ => out.dropped.push(c),
        }
    }
    Ok(out)
}
