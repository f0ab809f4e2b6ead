//! Registration of the template to a target surface by optimizing the
//! initial momenta of a geodesic, plus pull-back of target functions and
//! re-encoding of arbitrary vertex displacements as momenta.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GaussianKernel;
use crate::lddmm::{shoot, InitialMomenta};
use crate::mesh::{ScalarField, TriangleMesh, Vec3};
use crate::optimize::{minimize, OptimizerConfig};
use crate::similarity::{landmark_distance, CurrentMatcher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Landmark,
    Current,
    Fcurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub similarity: SimilarityKind,
    pub lambda: f64,
    /// When set, the effective weight is `lambda` times the similarity of
    /// the undeformed template.
    #[serde(default = "default_true")]
    pub lambda_relative: bool,
    pub kernel: GaussianKernel,
    #[serde(default)]
    pub sigma_z: Option<f64>,
    #[serde(default)]
    pub sigma_f: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_true() -> bool {
    true
}

fn default_steps() -> usize {
    20
}

impl RegistrationConfig {
    pub fn new(similarity: SimilarityKind, kernel: GaussianKernel) -> Self {
        Self {
            similarity,
            lambda: 1e-3,
            lambda_relative: true,
            kernel,
            sigma_z: None,
            sigma_f: None,
            steps: default_steps(),
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.steps < 1 {
            return Err(Error::InvalidParameter("shooting steps must be at least 1".into()));
        }
        self.kernel.validate()?;
        self.optimizer.validate()?;
        match self.similarity {
            SimilarityKind::Landmark => {}
            SimilarityKind::Current | SimilarityKind::Fcurrent => {
                if !self.sigma_z.is_some_and(|s| s > 0.0) {
                    return Err(Error::InvalidParameter("current similarity needs a positive sigma_z".into()));
                }
                if self.similarity == SimilarityKind::Fcurrent && !self.sigma_f.is_some_and(|s| s > 0.0) {
                    return Err(Error::InvalidParameter("functional current needs a positive sigma_f".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationDiagnostics {
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub similarity: f64,
    pub regularization: f64,
    pub lambda_used: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

enum Matcher<'a> {
    Landmarks(&'a [Vec3]),
    Current { matcher: CurrentMatcher, faces: &'a [[usize; 3]], values: Option<Vec<f64>> },
}

impl Matcher<'_> {
    fn eval(&self, points: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        let r = match self {
            Matcher::Landmarks(t) => landmark_distance(points, t)?,
            Matcher::Current { matcher, faces, values } => matcher.evaluate(points, faces, values.as_deref())?,
        };
        Ok((r.value, r.gradient))
    }
}

fn unflatten(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// `Σ_l K(c_k, c_l) α_l` at every control point.
fn kernel_apply(kernel: &GaussianKernel, points: &[Vec3], momenta: &[Vec3]) -> Vec<Vec3> {
    kernel.apply(points, points, momenta)
}

/// Objective `D²(φ(template)) + λ‖v₀‖²` and its gradient in the momenta.
pub struct RegistrationObjective<'a> {
    template: &'a TriangleMesh,
    matcher: Matcher<'a>,
    kernel: GaussianKernel,
    steps: usize,
    lambda: f64,
}

impl<'a> RegistrationObjective<'a> {
    fn with_matcher(template: &'a TriangleMesh, matcher: Matcher<'a>, cfg: &RegistrationConfig) -> Result<Self> {
        let mut obj = Self { template, matcher, kernel: cfg.kernel, steps: cfg.steps, lambda: cfg.lambda };
        if cfg.lambda_relative {
            let (d0, _) = obj.matcher.eval(template.vertices())?;
            obj.lambda = cfg.lambda * d0;
        }
        Ok(obj)
    }

    /// Objective for matching a target mesh with the configured similarity.
    /// `values` carries per-face values of template and target for the
    /// functional current.
    pub fn for_mesh(
        template: &'a TriangleMesh,
        target: &'a TriangleMesh,
        values: Option<(&[f64], &[f64])>,
        cfg: &RegistrationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let matcher = match cfg.similarity {
            SimilarityKind::Landmark => {
                if target.vertex_count() != template.vertex_count() {
                    return Err(Error::DimensionMismatch {
                        what: "landmark registration vertex count",
                        expected: template.vertex_count(),
                        got: target.vertex_count(),
                    });
                }
                Matcher::Landmarks(target.vertices())
            }
            SimilarityKind::Current => Matcher::Current {
                matcher: CurrentMatcher::new(target, cfg.sigma_z.unwrap())?,
                faces: template.faces(),
                values: None,
            },
            SimilarityKind::Fcurrent => {
                let (tv, gv) = values.ok_or_else(|| {
                    Error::InvalidParameter("functional current needs template and target face values".into())
                })?;
                if tv.len() != template.face_count() {
                    return Err(Error::DimensionMismatch {
                        what: "template per-face values",
                        expected: template.face_count(),
                        got: tv.len(),
                    });
                }
                Matcher::Current {
                    matcher: CurrentMatcher::functional(target, gv, cfg.sigma_z.unwrap(), cfg.sigma_f.unwrap())?,
                    faces: template.faces(),
                    values: Some(tv.to_vec()),
                }
            }
        };
        Self::with_matcher(template, matcher, cfg)
    }

    /// Objective for matching explicit per-vertex target positions.
    pub fn for_landmarks(template: &'a TriangleMesh, targets: &'a [Vec3], cfg: &RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        if targets.len() != template.vertex_count() {
            return Err(Error::DimensionMismatch {
                what: "landmark target count",
                expected: template.vertex_count(),
                got: targets.len(),
            });
        }
        Self::with_matcher(template, Matcher::Landmarks(targets), cfg)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Value, similarity term, regularization term and gradient at the
    /// flattened momenta `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, f64, f64, Vec<f64>)> {
        let momenta = unflatten(x);
        let points = self.template.vertices();
        let v0 = InitialMomenta::new(points.to_vec(), momenta, self.kernel)?;
        let path = shoot(&v0, self.steps)?;
        let (sim, d_end) = self.matcher.eval(&path.endpoint().points)?;
        let mut grad = path.momenta_gradient(&d_end);
        let k_alpha = kernel_apply(&self.kernel, points, &v0.momenta);
        let reg: f64 = v0.momenta.iter().zip(&k_alpha).map(|(a, ka)| a.dot(ka)).sum();
        for (g, ka) in grad.iter_mut().zip(&k_alpha) {
            *g += ka * (2.0 * self.lambda);
        }
        let flat = grad.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        Ok((sim + self.lambda * reg, sim, reg, flat))
    }

    /// Runs the optimizer from `start` (zero momenta when `None`).
    pub fn run(&self, start: Option<&InitialMomenta>, opt: &OptimizerConfig) -> Result<(InitialMomenta, RegistrationDiagnostics)> {
        let n = self.template.vertex_count();
        let x0 = match start {
            Some(m) => {
                if m.len() != n {
                    return Err(Error::DimensionMismatch { what: "warm-start momenta", expected: n, got: m.len() });
                }
                m.flat()
            }
            None => vec![0.0; 3 * n],
        };
        let out = minimize(
            |x| {
                let (v, _, _, g) = self.evaluate(x)?;
                Ok((v, g))
            },
            x0,
            opt,
        )?;
        let (value, sim, reg, _) = self.evaluate(&out.x)?;
        let momenta = InitialMomenta::new(self.template.vertices().to_vec(), unflatten(&out.x), self.kernel)?;
        let diagnostics = RegistrationDiagnostics {
            objective_trace: out.trace,
            final_objective: value,
            similarity: sim,
            regularization: reg,
            lambda_used: self.lambda,
            iterations: out.iterations,
            converged: out.converged,
            line_search_failed: out.line_search_failed,
        };
        Ok((momenta, diagnostics))
    }
}

/// Estimates momenta on the template vertices whose flow carries the
/// template onto `target`.
pub fn register_geometry(
    template: &TriangleMesh,
    target: &TriangleMesh,
    cfg: &RegistrationConfig,
) -> Result<(InitialMomenta, RegistrationDiagnostics)> {
    RegistrationObjective::for_mesh(template, target, None, cfg)?.run(None, &cfg.optimizer)
}

/// Functional-current registration; `template_values` and `target_values`
/// are per-vertex fields averaged onto faces internally.
pub fn register_geometry_functional(
    template: &TriangleMesh,
    template_values: &ScalarField,
    target: &TriangleMesh,
    target_values: &ScalarField,
    cfg: &RegistrationConfig,
    start: Option<&InitialMomenta>,
) -> Result<(InitialMomenta, RegistrationDiagnostics)> {
    let tv = template_values.face_means(template);
    let gv = target_values.face_means(target);
    RegistrationObjective::for_mesh(template, target, Some((&tv, &gv)), cfg)?.run(start, &cfg.optimizer)
}

/// Nearest-vertex pull-back of a target field onto the template:
/// `X̂(ξ_k) = Y(nearest target vertex to φ(ξ_k))`.
pub fn pull_back_function(target: &TriangleMesh, target_field: &ScalarField, deformed_template_vertices: &[Vec3]) -> Result<Vec<f64>> {
    if target_field.len() != target.vertex_count() {
        return Err(Error::DimensionMismatch {
            what: "target field length",
            expected: target.vertex_count(),
            got: target_field.len(),
        });
    }
    let y = target_field.values();
    Ok(deformed_template_vertices.iter().map(|p| y[target.nearest_vertex(p)]).collect())
}

/// Represents a per-vertex displacement of the template as momenta by
/// landmark registration against `targets`. `lambda` is absolute here.
pub fn reencode_deformation(
    template: &TriangleMesh,
    targets: &[Vec3],
    lambda: f64,
    cfg: &RegistrationConfig,
    warm_start: Option<&InitialMomenta>,
) -> Result<(InitialMomenta, RegistrationDiagnostics)> {
    let mut cfg = cfg.clone();
    cfg.similarity = SimilarityKind::Landmark;
    cfg.lambda = lambda;
    cfg.lambda_relative = false;
    RegistrationObjective::for_landmarks(template, targets, &cfg)?.run(warm_start, &cfg.optimizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lddmm::deform_mesh;
    use crate::shapes;

    fn template() -> TriangleMesh {
        shapes::ellipsoid_cap(3, Vec3::new(2.0, 1.5, 1.0), 1.0)
    }

    #[test]
    fn identity_target_stops_at_iteration_zero() {
        let t = template();
        let cfg = RegistrationConfig::new(SimilarityKind::Landmark, GaussianKernel::new(1.0).unwrap());
        let (m, d) = register_geometry(&t, &t, &cfg).unwrap();
        assert_eq!(d.iterations, 0);
        assert_eq!(d.final_objective, 0.0);
        assert!(m.momenta.iter().all(|a| *a == Vec3::zeros()));
    }

    #[test]
    fn recovers_small_shift() {
        let t = template();
        let shift = Vec3::new(0.05, -0.03, 0.02);
        let target = t.with_vertices(t.vertices().iter().map(|p| p + shift).collect()).unwrap();
        let mut cfg = RegistrationConfig::new(SimilarityKind::Landmark, GaussianKernel::new(3.0).unwrap());
        cfg.lambda = 1e-6;
        cfg.steps = 10;
        cfg.optimizer.max_iterations = 200;
        let (m, d) = register_geometry(&t, &target, &cfg).unwrap();
        assert!(d.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        let moved = deform_mesh(&t, &m, cfg.steps).unwrap();
        let rms = (moved.vertices().iter().zip(target.vertices()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()
            / t.vertex_count() as f64)
            .sqrt();
        assert!(rms <= 0.05 * shift.norm(), "{rms}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let t = template();
        let target = t.with_vertices(t.vertices().iter().map(|p| Vec3::new(p.x * 1.1, p.y, p.z + 0.1 * p.x)).collect()).unwrap();
        for kind in [SimilarityKind::Landmark, SimilarityKind::Current] {
            let mut cfg = RegistrationConfig::new(kind, GaussianKernel::two_scale(1.0, 0.5, 1.0).unwrap());
            cfg.sigma_z = Some(0.5);
            cfg.steps = 6;
            cfg.lambda = 0.1;
            let obj = RegistrationObjective::for_mesh(&t, &target, None, &cfg).unwrap();
            let x: Vec<f64> = (0..3 * t.vertex_count()).map(|i| 0.05 * ((i as f64) * 0.7).sin()).collect();
            let (_, _, _, g) = obj.evaluate(&x).unwrap();
            let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in (0..x.len()).step_by(5) {
                let h = 1e-6;
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (obj.evaluate(&p).unwrap().0 - obj.evaluate(&m).unwrap().0) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-3 * scale, "{kind:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn reencode_round_trip() {
        let t = template();
        let k = GaussianKernel::new(1.5).unwrap();
        let truth = InitialMomenta::new(
            t.vertices().to_vec(),
            t.vertices().iter().map(|p| Vec3::new(0.02 * p.x, 0.0, -0.01 * p.y)).collect(),
            k,
        )
        .unwrap();
        let targets = deform_mesh(&t, &truth, 10).unwrap().vertices().to_vec();
        let mut cfg = RegistrationConfig::new(SimilarityKind::Landmark, k);
        cfg.steps = 10;
        cfg.optimizer.max_iterations = 300;
        let (m, d) = reencode_deformation(&t, &targets, 1e-8, &cfg, None).unwrap();
        assert!(d.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        let got = deform_mesh(&t, &m, 10).unwrap();
        let disp_rms = (targets.iter().zip(t.vertices()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()).sqrt();
        let err = (targets.iter().zip(got.vertices()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()).sqrt();
        assert!(err <= 0.01 * disp_rms, "{err} vs {disp_rms}");

        let (zero, _) = reencode_deformation(&t, t.vertices(), 1e-3, &cfg, None).unwrap();
        assert!(zero.momenta.iter().all(|a| *a == Vec3::zeros()));
    }

    #[test]
    fn pull_back_identity_and_constants() {
        let t = template();
        let f = ScalarField::new(&t, (0..t.vertex_count()).map(|i| i as f64).collect()).unwrap();
        assert_eq!(pull_back_function(&t, &f, t.vertices()).unwrap(), f.values());
        let c = ScalarField::constant(&t, 2.5);
        let moved: Vec<Vec3> = t.vertices().iter().map(|p| p * 1.3).collect();
        assert!(pull_back_function(&t, &c, &moved).unwrap().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn heavy_regularization_suppresses_deformation() {
        let t = template();
        let target = t.with_vertices(t.vertices().iter().map(|p| p * 1.1).collect()).unwrap();
        let mut cfg = RegistrationConfig::new(SimilarityKind::Landmark, GaussianKernel::new(1.0).unwrap());
        cfg.steps = 5;
        cfg.lambda_relative = false;
        cfg.lambda = 1e-6;
        let (free, _) = register_geometry(&t, &target, &cfg).unwrap();
        cfg.lambda = 1e8;
        let (stiff, _) = register_geometry(&t, &target, &cfg).unwrap();
        assert!(stiff.energy() <= 1e-6 * free.energy(), "{} vs {}", stiff.energy(), free.energy());
    }

    #[test]
    fn validation() {
        let mut cfg = RegistrationConfig::new(SimilarityKind::Current, GaussianKernel::new(1.0).unwrap());
        assert!(cfg.validate().is_err());
        cfg.sigma_z = Some(0.5);
        cfg.validate().unwrap();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }
}
