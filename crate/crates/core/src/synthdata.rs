//! Synthetic functions on surfaces: a parametric template, two orthonormal
//! deformation modes, one localized functional mode, and noisy subjects
//! drawn from the generative model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rkhs_inner, GaussianKernel};
use crate::lddmm::{deform_mesh, inverted_faces, InitialMomenta};
use crate::mesh::{TriangleMesh, Vec3};
use crate::shapes;
use crate::surface::consistent_mass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    EllipsoidPatch,
    Hemisphere,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSpec {
    pub kind: TemplateKind,
    /// Ring count for patches (`1 + 3R(R+1)` vertices) or subdivision
    /// level for the sphere.
    pub resolution: usize,
    /// Semi-axes; the sphere and hemisphere use the first entry only.
    pub radii: [f64; 3],
    /// Polar extent of the ellipsoid patch in radians.
    pub cap_angle: f64,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self { kind: TemplateKind::EllipsoidPatch, resolution: 10, radii: [60.0, 35.0, 30.0], cap_angle: 1.2 }
    }
}

impl TemplateSpec {
    pub fn build(&self) -> Result<TriangleMesh> {
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidParameter("template radii must be positive".into()));
        }
        let r = Vec3::from(self.radii);
        Ok(match self.kind {
            TemplateKind::EllipsoidPatch => {
                if !(self.cap_angle > 0.0 && self.cap_angle < std::f64::consts::PI) {
                    return Err(Error::InvalidParameter("cap angle must lie in (0, π)".into()));
                }
                shapes::ellipsoid_cap(self.resolution.max(1), r, self.cap_angle)
            }
            TemplateKind::Hemisphere => shapes::ellipsoid_cap(self.resolution.max(1), Vec3::repeat(r.x), std::f64::consts::FRAC_PI_2),
            TemplateKind::Sphere => shapes::icosphere(self.resolution, r.x),
        })
    }
}

/// Gaussian bump of geodesic radius `width` around the vertex nearest to
/// `center`, where `center` is given in units of the template radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 3],
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeSpec {
    pub kernel_sigma: f64,
    /// Exponent `p` of the stretch profile `sign(t)|t|^p` along the axis;
    /// larger values concentrate the elongation at the ends.
    pub elongation_exponent: f64,
    /// Keep only the normal component of the mode momenta, the part of a
    /// deformation that changes the shape rather than sliding along it.
    pub normal_only: bool,
    pub functional_bump: Bump,
    pub mean_offset: f64,
    pub mean_bumps: Vec<Bump>,
}

impl Default for ModeSpec {
    fn default() -> Self {
        Self {
            kernel_sigma: 25.0,
            elongation_exponent: 1.0,
            normal_only: true,
            functional_bump: Bump { center: [0.45, 0.3, 1.0], width: 12.0, height: 1.0 },
            mean_offset: 1.0,
            mean_bumps: vec![
                Bump { center: [-0.45, 0.3, 1.0], width: 10.0, height: 3.0 },
                Bump { center: [0.1, -0.5, 1.0], width: 10.0, height: 2.0 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub n: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub delta: f64,
    /// Standard deviation of the per-vertex noise.
    pub noise_sd: f64,
    pub seed: u64,
    pub template: TemplateSpec,
    pub modes: ModeSpec,
    pub shooting_steps: usize,
    pub max_redraws: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n: 50,
            sigma1: 15.0,
            sigma2: 10.0,
            delta: 0.1,
            noise_sd: 0.3,
            seed: 0,
            template: TemplateSpec::default(),
            modes: ModeSpec::default(),
            shooting_steps: 20,
            max_redraws: 10,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter("simulation needs at least two subjects".into()));
        }
        for (name, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("noise_sd", self.noise_sd), ("delta", self.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.modes.elongation_exponent >= 1.0) {
            return Err(Error::InvalidParameter("elongation exponent must be at least 1".into()));
        }
        if !(self.modes.kernel_sigma > 0.0) {
            return Err(Error::InvalidParameter("kernel sigma must be positive".into()));
        }
        let bumps = std::iter::once(&self.modes.functional_bump).chain(&self.modes.mean_bumps);
        if bumps.into_iter().any(|b| !(b.width > 0.0)) {
            return Err(Error::InvalidParameter("bump widths must be positive".into()));
        }
        if self.shooting_steps < 1 {
            return Err(Error::InvalidParameter("shooting steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest edge-path distances from `source`.
pub fn edge_geodesic(mesh: &TriangleMesh, source: usize) -> Vec<f64> {
    let n = mesh.vertex_count();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in mesh.edges() {
        let d = (mesh.vertices()[a] - mesh.vertices()[b]).norm();
        adj[a].push((b, d));
        adj[b].push((a, d));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier(0.0, source));
    while let Some(Frontier(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(w, l) in &adj[v] {
            if d + l < dist[w] {
                dist[w] = d + l;
                heap.push(Frontier(d + l, w));
            }
        }
    }
    dist
}

fn bump_field(mesh: &TriangleMesh, radii: &[f64; 3], bump: &Bump) -> Vec<f64> {
    let c = Vec3::new(bump.center[0] * radii[0], bump.center[1] * radii[1], bump.center[2] * radii[2]);
    let d = edge_geodesic(mesh, mesh.nearest_vertex(&c));
    d.iter().map(|d| bump.height * (-(d * d) / (2.0 * bump.width * bump.width)).exp()).collect()
}

/// `(1/|M|) ∫ f²`, the area-normalized squared L² norm.
pub fn normalized_l2_sq(mesh: &TriangleMesh, f: &[f64]) -> f64 {
    let mf = consistent_mass(mesh).mul_vec(f);
    f.iter().zip(&mf).map(|(a, b)| a * b).sum::<f64>() / mesh.total_area()
}

#[derive(Debug, Clone)]
pub struct SyntheticModes {
    /// Elongation and scaling, orthonormal in the RKHS.
    pub psi_g: [InitialMomenta; 2],
    /// Localized functional mode with unit area-normalized L² norm.
    pub psi_f: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Builds the modes on the template vertices used as control points.
pub fn make_modes(template: &TriangleMesh, spec: &SimSpec) -> Result<SyntheticModes> {
    spec.validate()?;
    let kernel = GaussianKernel::new(spec.modes.kernel_sigma)?;
    let points = template.vertices().to_vec();
    let c = template.centroid();
    let areas = template.vertex_areas();
    let total = template.total_area();

    // principal axis of the vertex cloud
    let mut cov = nalgebra::Matrix3::zeros();
    for (p, a) in points.iter().zip(&areas) {
        let d = p - c;
        cov += *a * d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let imax = eig.eigenvalues.imax();
    let mut axis: Vec3 = eig.eigenvectors.column(imax).into();
    let big = axis.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        axis = -axis;
    }

    let reach = points.iter().map(|p| (p - c).dot(&axis).abs()).fold(0.0, f64::max);
    let profile = |t: f64| t.signum() * reach * (t.abs() / reach).powf(spec.modes.elongation_exponent);
    let normals = template.vertex_normals();
    let weigh = |k: usize, v: Vec3| {
        let v = if spec.modes.normal_only { normals[k] * v.dot(&normals[k]) } else { v };
        v * (areas[k] / total)
    };
    let elong: Vec<Vec3> = (0..points.len()).map(|k| weigh(k, axis * profile((points[k] - c).dot(&axis)))).collect();
    let scale: Vec<Vec3> = (0..points.len()).map(|k| weigh(k, points[k] - c)).collect();
    let inner = |u: &[Vec3], v: &[Vec3]| rkhs_inner(&kernel, &points, u, v);
    let n1 = inner(&elong, &elong).sqrt();
    let e1: Vec<Vec3> = elong.iter().map(|v| v / n1).collect();
    let proj = inner(&scale, &e1);
    let s2: Vec<Vec3> = scale.iter().zip(&e1).map(|(s, e)| s - proj * e).collect();
    let n2 = inner(&s2, &s2).sqrt();
    if !(n2 > 1e-12 * n1) {
        return Err(Error::InvalidParameter("scaling mode is parallel to the elongation mode".into()));
    }
    let e2: Vec<Vec3> = s2.iter().map(|v| v / n2).collect();

    let radii = &spec.template.radii;
    let raw = bump_field(template, radii, &spec.modes.functional_bump);
    let norm = normalized_l2_sq(template, &raw).sqrt();
    let psi_f = raw.iter().map(|v| v / norm).collect();
    let mut mean = vec![spec.modes.mean_offset; template.vertex_count()];
    for b in &spec.modes.mean_bumps {
        mean.iter_mut().zip(bump_field(template, radii, b)).for_each(|(m, v)| *m += v);
    }
    Ok(SyntheticModes {
        psi_g: [InitialMomenta::new(points.clone(), e1, kernel)?, InitialMomenta::new(points, e2, kernel)?],
        psi_f,
        mean,
    })
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub mesh: TriangleMesh,
    /// Observed values at the deformed vertices.
    pub field: Vec<f64>,
    /// Noise-free values, indexed like the template vertices.
    pub true_field: Vec<f64>,
    pub a1: f64,
    pub a2: f64,
    pub redraws: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: TriangleMesh,
    pub modes: SyntheticModes,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn total_redraws(&self) -> usize {
        self.subjects.iter().map(|s| s.redraws).sum()
    }
}

fn subject(i: usize, spec: &SimSpec, template: &TriangleMesh, modes: &SyntheticModes) -> Result<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
    let g1 = Normal::new(0.0, spec.sigma1).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let g2 = Normal::new(0.0, spec.sigma2).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for redraws in 0..=spec.max_redraws {
        let (a1, a2) = (g1.sample(&mut rng), g2.sample(&mut rng));
        let m: Vec<Vec3> = modes.psi_g[0].momenta.iter().zip(&modes.psi_g[1].momenta).map(|(u, v)| a1 * u + a2 * v).collect();
        let v0 = modes.psi_g[0].with_momenta(m)?;
        let mesh = match deform_mesh(template, &v0, spec.shooting_steps) {
            Ok(mesh) if inverted_faces(template, mesh.vertices()) == 0 => mesh,
            _ => continue,
        };
        let true_field: Vec<f64> = modes.mean.iter().zip(&modes.psi_f).map(|(m, p)| m + spec.delta * a2 * p).collect();
        let field = true_field.iter().map(|v| v + noise.sample(&mut rng)).collect();
        return Ok(Subject { mesh, field, true_field, a1, a2, redraws });
    }
    Err(Error::InvalidParameter(format!("subject {i}: every draw diverged or folded the template")))
}

/// Draws `spec.n` subjects; subject `i` uses the seed `spec.seed + i`.
pub fn generate_dataset(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let template = spec.template.build()?;
    let modes = make_modes(&template, spec)?;
    let subjects = (0..spec.n).map(|i| subject(i, spec, &template, &modes)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { template, modes, subjects })
}
