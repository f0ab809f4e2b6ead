//! Diffeomorphic alignment of functions on a fixed surface: each iteration
//! solves the linearized matching problem for a stationary tangent field,
//! flows the vertices along it and composes the result with the previous
//! map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lddmm::GeodesicPath;
use crate::mesh::{TriangleMesh, Vec3};
use crate::sparse::TripletMatrix;
use crate::surface::{vertex_gradients, SurfaceLocator, SurfacePoint};
use crate::tangent_fem::{assemble_connection_matrices, solve_update, FemSystem, TangentField, TangentFrameAtlas};

/// A fixed surface together with everything the flow and the solver reuse.
#[derive(Debug, Clone)]
pub struct SurfaceDomain {
    mesh: TriangleMesh,
    atlas: TangentFrameAtlas,
    locator: SurfaceLocator,
    r0: TripletMatrix,
    r1: TripletMatrix,
}

impl SurfaceDomain {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        let atlas = TangentFrameAtlas::build(&mesh)?;
        let locator = SurfaceLocator::new(&mesh);
        let (r0, r1) = assemble_connection_matrices(&mesh, &atlas);
        Ok(Self { mesh, atlas, locator, r0, r1 })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn atlas(&self) -> &TangentFrameAtlas {
        &self.atlas
    }

    pub fn locator(&self) -> &SurfaceLocator {
        &self.locator
    }

    fn system(&self, j: &TangentField, residual: &[f64], penalty: Option<f64>) -> Result<FemSystem> {
        let (theta2, rhs) = crate::tangent_fem::assemble_data_matrices(j, residual)?;
        let mut sys = FemSystem::new(self.r0.clone(), self.r1.clone(), theta2, rhs, self.mesh.boundary_vertices())?;
        sys.apply_dirichlet(penalty);
        Ok(sys)
    }

    fn check_field(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.mesh.vertex_count() {
            return Err(Error::DimensionMismatch { what: "field length", expected: self.mesh.vertex_count(), got: values.len() });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("field values must be finite".into()));
        }
        Ok(())
    }
}

/// Discrete surface gradient of a vertex field, in local frames.
pub fn surface_gradient(domain: &SurfaceDomain, values: &[f64]) -> Result<TangentField> {
    domain.check_field(values)?;
    TangentField::from_ambient(&domain.atlas, &vertex_gradients(&domain.mesh, values))
}

/// Image of every template vertex under a map of the surface onto itself.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexMap {
    images: Vec<SurfacePoint>,
    /// Number of projections that needed the exhaustive search.
    pub fallbacks: usize,
}

impl VertexMap {
    pub fn identity(mesh: &TriangleMesh) -> Self {
        Self { images: (0..mesh.vertex_count()).map(|v| SurfacePoint::at_vertex(mesh, v)).collect(), fallbacks: 0 }
    }

    pub fn images(&self) -> &[SurfacePoint] {
        &self.images
    }

    pub fn positions(&self, mesh: &TriangleMesh) -> Vec<Vec3> {
        self.images.iter().map(|p| p.position(mesh)).collect()
    }

    /// `f ∘ s` at every template vertex, by barycentric interpolation.
    pub fn pull_back(&self, mesh: &TriangleMesh, values: &[f64]) -> Vec<f64> {
        self.images.iter().map(|p| p.interpolate(mesh, values)).collect()
    }

    /// Largest violation of the barycentric constraints.
    pub fn barycentric_error(&self) -> f64 {
        self.images
            .iter()
            .map(|p| {
                let lo = p.bary.iter().fold(0.0f64, |m, &b| m.max(-b).max(b - 1.0));
                lo.max((p.bary.iter().sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Moves `starts` along the stationary field `u` (ambient vectors at the
/// vertices) for unit time with explicit Euler steps, projecting back onto
/// the surface after every step.
pub fn flow_points(domain: &SurfaceDomain, u: &[Vec3], starts: &[SurfacePoint], steps: usize) -> (Vec<SurfacePoint>, usize) {
    let mesh = &domain.mesh;
    let dt = 1.0 / steps.max(1) as f64;
    let mut fallbacks = 0;
    let out = starts
        .iter()
        .map(|&s| {
            let mut sp = s;
            for _ in 0..steps.max(1) {
                let x = sp.position(mesh) + sp.interpolate_vec(mesh, u) * dt;
                let (next, fb) = domain.locator.project(mesh, &x, sp.face);
                fallbacks += fb as usize;
                sp = next;
            }
            sp
        })
        .collect();
    (out, fallbacks)
}

/// The time-one flow of `u` applied to every template vertex.
pub fn flow_on_surface(domain: &SurfaceDomain, u: &TangentField, steps: usize) -> Result<VertexMap> {
    if u.vertex_count() != domain.mesh.vertex_count() {
        return Err(Error::DimensionMismatch { what: "tangent field vertices", expected: domain.mesh.vertex_count(), got: u.vertex_count() });
    }
    let amb = u.ambient(&domain.atlas);
    let start = VertexMap::identity(&domain.mesh);
    let (images, fallbacks) = flow_points(domain, &amb, &start.images, steps);
    Ok(VertexMap { images, fallbacks })
}

fn flow_sequence<'a>(domain: &SurfaceDomain, fields: impl Iterator<Item = &'a Vec<Vec3>>, sign: f64, steps: usize) -> VertexMap {
    let mut map = VertexMap::identity(&domain.mesh);
    for u in fields {
        let scaled: Vec<Vec3> = u.iter().map(|v| v * sign).collect();
        let (images, fb) = flow_points(domain, &scaled, &map.images, steps);
        map = VertexMap { images, fallbacks: map.fallbacks + fb };
    }
    map
}

/// Applies `s = φ₁ ∘ … ∘ φ_k` to every template vertex, where `φ_i` is the
/// time-one flow of `updates[i]`: flows `u_k` first and `u₁` last.
pub fn forward_map(domain: &SurfaceDomain, updates: &[Vec<Vec3>], steps: usize) -> VertexMap {
    flow_sequence(domain, updates.iter().rev(), 1.0, steps)
}

/// Applies `s⁻¹` to every template vertex, where `s = φ₁ ∘ … ∘ φ_k` is given
/// by its update fields: flows `−u₁` first and `−u_k` last.
pub fn inverse_map(domain: &SurfaceDomain, updates: &[Vec<Vec3>], steps: usize) -> VertexMap {
    flow_sequence(domain, updates.iter(), -1.0, steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JMode {
    /// Gradient of the moving function only.
    Moving,
    /// Average of the moving and fixed gradients.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemonsConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    pub min_iterations: usize,
    pub flow_steps: usize,
    pub j_mode: JMode,
    /// Stop once the leading eigenvalues of the aligned fields change by
    /// less than `stop_tolerance` (relative) for `stop_window` iterations in
    /// a row. Zero disables the rule.
    pub stop_window: usize,
    pub stop_tolerance: f64,
    pub stop_leading: usize,
    /// Boundary penalty; `None` picks it from the system diagonal.
    pub dirichlet_penalty: Option<f64>,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_iterations: 15,
            min_iterations: 2,
            flow_steps: 10,
            j_mode: JMode::Symmetric,
            stop_window: 2,
            stop_tolerance: 0.01,
            stop_leading: 3,
            dirichlet_penalty: None,
        }
    }
}

impl DemonsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter("demons lambda must be positive and finite".into()));
        }
        if self.max_iterations == 0 || self.flow_steps == 0 {
            return Err(Error::InvalidParameter("max_iterations and flow_steps must be at least 1".into()));
        }
        if self.dirichlet_penalty.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::InvalidParameter("dirichlet_penalty must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrace {
    /// `Σ_k (X₀ − X̂∘s)²` against the template in use at the start of each
    /// iteration, followed by the value after the last iteration.
    pub fidelity: Vec<f64>,
    /// Largest vertex norm of each update field.
    pub update_norms: Vec<f64>,
    pub fallbacks: usize,
    /// Solver failures, as `(iteration, message)`.
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Clone)]
pub struct DemonsResult {
    pub maps: Vec<VertexMap>,
    /// Ambient update fields of every subject in the order they were applied.
    pub updates: Vec<Vec<Vec<Vec3>>>,
    pub aligned: Vec<Vec<f64>>,
    /// Aligned fields before the first iteration and after each one.
    pub history: Vec<Vec<Vec<f64>>>,
    /// Template before the first iteration and after each one.
    pub templates: Vec<Vec<f64>>,
    pub subjects: Vec<SubjectTrace>,
    /// Leading eigenvalues of the aligned fields after each iteration.
    pub eigenvalues: Vec<Vec<f64>>,
    pub iterations: usize,
    pub stopped_early: bool,
}

fn fidelity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean_field(fields: &[Vec<f64>]) -> Vec<f64> {
    let n = fields.len() as f64;
    let mut m = vec![0.0; fields[0].len()];
    for f in fields {
        m.iter_mut().zip(f).for_each(|(a, b)| *a += b / n);
    }
    m
}

/// Leading eigenvalues of the area-weighted sample covariance of `fields`.
pub fn leading_eigenvalues(weights: &[f64], fields: &[Vec<f64>], count: usize) -> Vec<f64> {
    let n = fields.len();
    if n < 2 {
        return Vec::new();
    }
    let mean = mean_field(fields);
    let centered: Vec<Vec<f64>> = fields.iter().map(|f| f.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let gram = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        centered[i].iter().zip(&centered[j]).zip(weights).map(|((a, b), w)| a * b * w).sum::<f64>() / n as f64
    });
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(count);
    ev
}

struct Subject<'a> {
    values: &'a [f64],
    map: VertexMap,
    updates: Vec<Vec<Vec3>>,
    aligned: Vec<f64>,
    trace: SubjectTrace,
}

impl Subject<'_> {
    /// One linearized solve, flow and composition against `template`.
    fn step(&mut self, domain: &SurfaceDomain, template: &[f64], cfg: &DemonsConfig, iteration: usize) {
        let mesh = &domain.mesh;
        let grad_m = vertex_gradients(mesh, &self.aligned);
        let j: Vec<Vec3> = match cfg.j_mode {
            JMode::Moving => grad_m.iter().map(|g| -g).collect(),
            JMode::Symmetric => {
                let grad_f = vertex_gradients(mesh, template);
                grad_m.iter().zip(&grad_f).map(|(a, b)| -(a + b) * 0.5).collect()
            }
        };
        let residual: Vec<f64> = template.iter().zip(&self.aligned).map(|(f, m)| f - m).collect();
        let solved = TangentField::from_ambient(&domain.atlas, &j)
            .and_then(|j| domain.system(&j, &residual, cfg.dirichlet_penalty))
            .and_then(|sys| solve_update(&sys, cfg.lambda));
        let u = match solved {
            Ok(u) => u,
            Err(e) => {
                self.trace.failures.push((iteration, e.to_string()));
                self.trace.update_norms.push(0.0);
                return;
            }
        };
        self.trace.update_norms.push(u.max_norm());
        if u.max_norm() == 0.0 {
            return;
        }
        self.updates.push(u.ambient(&domain.atlas));
        self.map = forward_map(domain, &self.updates, cfg.flow_steps);
        self.trace.fallbacks += self.map.fallbacks;
        self.aligned = self.map.pull_back(mesh, self.values);
    }
}

fn run(domain: &SurfaceDomain, functions: &[&[f64]], fixed: Option<&[f64]>, cfg: &DemonsConfig) -> Result<DemonsResult> {
    cfg.validate()?;
    for f in functions {
        domain.check_field(f)?;
    }
    if let Some(f) = fixed {
        domain.check_field(f)?;
    }
    let mesh = &domain.mesh;
    let weights = mesh.vertex_areas();
    let mut subjects: Vec<Subject> = functions
        .iter()
        .map(|&values| Subject {
            values,
            map: VertexMap::identity(mesh),
            updates: Vec::new(),
            aligned: values.to_vec(),
            trace: SubjectTrace::default(),
        })
        .collect();
    let aligned_now = |s: &[Subject]| s.iter().map(|s| s.aligned.clone()).collect::<Vec<_>>();
    let mut template = match fixed {
        Some(f) => f.to_vec(),
        None => mean_field(&aligned_now(&subjects)),
    };
    let mut templates = vec![template.clone()];
    let mut history = vec![aligned_now(&subjects)];
    let mut eigenvalues = Vec::new();
    let mut stable = 0;
    let mut iterations = 0;
    let mut stopped_early = false;

    for it in 0..cfg.max_iterations {
        for s in subjects.iter_mut() {
            s.trace.fidelity.push(fidelity(&template, &s.aligned));
            s.step(domain, &template, cfg, it);
        }
        iterations = it + 1;
        let aligned = aligned_now(&subjects);
        if fixed.is_none() {
            template = mean_field(&aligned);
        }
        templates.push(template.clone());
        history.push(aligned.clone());
        let ev = leading_eigenvalues(&weights, &aligned, cfg.stop_leading);
        if let Some(prev) = eigenvalues.last() {
            let prev: &Vec<f64> = prev;
            let steady = !ev.is_empty()
                && ev.iter().zip(prev).all(|(a, b)| (a - b).abs() <= cfg.stop_tolerance * b.abs().max(f64::MIN_POSITIVE));
            stable = if steady { stable + 1 } else { 0 };
        }
        eigenvalues.push(ev);
        if cfg.stop_window > 0 && stable >= cfg.stop_window && iterations >= cfg.min_iterations && iterations < cfg.max_iterations {
            stopped_early = true;
            break;
        }
    }
    for s in subjects.iter_mut() {
        s.trace.fidelity.push(fidelity(&template, &s.aligned));
    }
    Ok(DemonsResult {
        maps: subjects.iter().map(|s| s.map.clone()).collect(),
        updates: subjects.iter().map(|s| s.updates.clone()).collect(),
        aligned: aligned_now(&subjects),
        history,
        templates,
        subjects: subjects.into_iter().map(|s| s.trace).collect(),
        eigenvalues,
        iterations,
        stopped_early,
    })
}

/// Aligns every function to their evolving cross-sectional mean.
pub fn register_functions(domain: &SurfaceDomain, functions: &[Vec<f64>], cfg: &DemonsConfig) -> Result<DemonsResult> {
    if functions.len() < 2 {
        return Err(Error::InvalidParameter("functional registration needs at least two functions".into()));
    }
    let refs: Vec<&[f64]> = functions.iter().map(|f| f.as_slice()).collect();
    run(domain, &refs, None, cfg)
}

/// Aligns one moving function to a fixed one.
pub fn register_to_fixed(domain: &SurfaceDomain, moving: &[f64], fixed: &[f64], cfg: &DemonsConfig) -> Result<DemonsResult> {
    let cfg = DemonsConfig { stop_window: 0, ..cfg.clone() };
    run(domain, &[moving], Some(fixed), &cfg)
}

/// Angle in degrees between the leading principal directions of two sets
/// of fields (area-weighted).
pub fn leading_direction_angle(weights: &[f64], a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let dir = |fields: &[Vec<f64>]| -> Vec<f64> {
        let n = fields.len();
        let mean = mean_field(fields);
        let c: Vec<Vec<f64>> = fields.iter().map(|f| f.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
        let gram = nalgebra::DMatrix::from_fn(n, n, |i, j| c[i].iter().zip(&c[j]).zip(weights).map(|((x, y), w)| x * y * w).sum::<f64>());
        let eig = gram.symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let coef = eig.eigenvectors.column(top);
        let mut v = vec![0.0; mean.len()];
        for (i, f) in c.iter().enumerate() {
            v.iter_mut().zip(f).for_each(|(acc, x)| *acc += coef[i] * x);
        }
        v
    };
    let (u, v) = (dir(a), dir(b));
    let ip = |x: &[f64], y: &[f64]| x.iter().zip(y).zip(weights).map(|((p, q), w)| p * q * w).sum::<f64>();
    let c = ip(&u, &v).abs() / (ip(&u, &u) * ip(&v, &v)).sqrt();
    c.min(1.0).acos().to_degrees()
}

/// Picks the smallest λ among `candidates` whose leading principal direction
/// rotates by at most `max_degrees` per iteration over `iterations`
/// iterations. Falls back to the largest candidate.
pub fn select_lambda(
    domain: &SurfaceDomain,
    functions: &[Vec<f64>],
    cfg: &DemonsConfig,
    candidates: &[f64],
    iterations: usize,
    max_degrees: f64,
) -> Result<f64> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weights = domain.mesh.vertex_areas();
    for &lambda in &sorted {
        let trial = DemonsConfig { lambda, max_iterations: iterations, stop_window: 0, ..cfg.clone() };
        let refs: Vec<&[f64]> = functions.iter().map(|f| f.as_slice()).collect();
        let res = run(domain, &refs, None, &trial)?;
        let ok = res.history.windows(2).all(|w| leading_direction_angle(&weights, &w[0], &w[1]) <= max_degrees);
        if ok {
            return Ok(lambda);
        }
    }
    sorted.last().copied().ok_or_else(|| Error::InvalidParameter("no lambda candidates given".into()))
}

/// Targets `φ(s⁻¹(ξ_k))` for the geometric flow `path` composed with the
/// inverse of the functional map given by its update fields, together with
/// the inverse map itself.
pub fn compose_with_geometry(
    domain: &SurfaceDomain,
    path: &GeodesicPath,
    updates: &[Vec<Vec3>],
    flow_steps: usize,
) -> Result<(Vec<Vec3>, VertexMap)> {
    let inv = inverse_map(domain, updates, flow_steps);
    let targets = path.flow_points(&inv.positions(&domain.mesh))?;
    Ok((targets, inv))
}

/// Largest distance between `s(s⁻¹(ξ_k))` and `ξ_k`, with both maps
/// evaluated by flowing the update fields.
pub fn inverse_consistency(domain: &SurfaceDomain, updates: &[Vec<Vec3>], steps: usize) -> f64 {
    let inv = inverse_map(domain, updates, steps);
    let mut pts = inv.images;
    for u in updates.iter().rev() {
        pts = flow_points(domain, u, &pts, steps).0;
    }
    pts.iter().zip(domain.mesh.vertices()).map(|(p, v)| (p.position(&domain.mesh) - v).norm()).fold(0.0, f64::max)
}

/// Smoothed indicator pair on a sphere: a half ring ("moving") and a C
/// covering three quarters of the same ring ("fixed"). Both are built from
/// the geodesic polar coordinates around the north pole.
pub fn c_shape_benchmark(level: usize) -> (TriangleMesh, Vec<f64>, Vec<f64>) {
    let mesh = crate::shapes::icosphere(level, 1.0);
    let width = 0.5 * mesh.mean_edge_length();
    let smooth = |d: f64| 0.5 * (1.0 - (d / width).tanh());
    let band = |p: &Vec3, span: f64| {
        let r = p.z.clamp(-1.0, 1.0).acos();
        let theta = p.y.atan2(p.x).abs();
        let radial = (r - 0.75).abs() - 0.25;
        let angular = (theta - span) * r.sin();
        smooth(radial.max(angular))
    };
    let moving = mesh.vertices().iter().map(|p| band(p, std::f64::consts::FRAC_PI_2)).collect();
    let fixed = mesh.vertices().iter().map(|p| band(p, 0.75 * std::f64::consts::PI)).collect();
    (mesh, moving, fixed)
}
