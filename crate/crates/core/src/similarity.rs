//! Mismatch functionals between a deformed template and a target, with
//! gradients with respect to the deformed vertex positions.

use crate::error::{Error, Result};
use crate::kernels::GaussianKernel;
use crate::mesh::{TriangleMesh, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityResult {
    pub value: f64,
    pub gradient: Vec<Vec3>,
}

/// `Σ_l ‖x_l - y_l‖²` with index correspondence.
pub fn landmark_distance(deformed: &[Vec3], targets: &[Vec3]) -> Result<SimilarityResult> {
    if deformed.len() != targets.len() {
        return Err(Error::DimensionMismatch { what: "landmark count", expected: targets.len(), got: deformed.len() });
    }
    let mut value = 0.0;
    let gradient = deformed
        .iter()
        .zip(targets)
        .map(|(x, y)| {
            let d = x - y;
            value += d.norm_squared();
            d * 2.0
        })
        .collect();
    Ok(SimilarityResult { value, gradient })
}

/// Face centers, area-weighted normals and optional per-face values of a
/// surface seen as a current.
#[derive(Debug, Clone)]
struct FaceCurrent {
    centers: Vec<Vec3>,
    normals: Vec<Vec3>,
    values: Option<Vec<f64>>,
}

impl FaceCurrent {
    fn from_parts(vertices: &[Vec3], faces: &[[usize; 3]], values: Option<&[f64]>) -> Self {
        let mut centers = Vec::with_capacity(faces.len());
        let mut normals = Vec::with_capacity(faces.len());
        for f in faces {
            let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            centers.push((a + b + c) / 3.0);
            normals.push((b - a).cross(&(c - a)) * 0.5);
        }
        Self { centers, normals, values: values.map(<[f64]>::to_vec) }
    }
}

/// Kernel-metric distance to a fixed target surface, optionally weighted by a
/// Gaussian kernel on per-face function values.
///
/// The target self-term is computed once at construction, so repeated
/// evaluations during registration cost one self and one cross sum.
#[derive(Debug, Clone)]
pub struct CurrentMatcher {
    kernel: GaussianKernel,
    sigma_f: f64,
    target: FaceCurrent,
    target_self: f64,
}

impl CurrentMatcher {
    /// Plain current similarity with width `sigma_z`.
    pub fn new(target: &TriangleMesh, sigma_z: f64) -> Result<Self> {
        Self::build(target.vertices(), target.faces(), None, sigma_z, f64::INFINITY)
    }

    /// Functional current with value-kernel width `sigma_f`; infinity gives
    /// the plain current.
    pub fn functional(target: &TriangleMesh, target_values: &[f64], sigma_z: f64, sigma_f: f64) -> Result<Self> {
        if target_values.len() != target.face_count() {
            return Err(Error::DimensionMismatch {
                what: "target per-face values",
                expected: target.face_count(),
                got: target_values.len(),
            });
        }
        Self::build(target.vertices(), target.faces(), Some(target_values), sigma_z, sigma_f)
    }

    fn build(vertices: &[Vec3], faces: &[[usize; 3]], values: Option<&[f64]>, sigma_z: f64, sigma_f: f64) -> Result<Self> {
        let kernel = GaussianKernel::new(sigma_z)?;
        if !(sigma_f > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_F must be positive, got {sigma_f}")));
        }
        let target = FaceCurrent::from_parts(vertices, faces, values);
        let mut matcher = Self { kernel, sigma_f, target, target_self: 0.0 };
        let (self_value, _, _) = matcher.self_term(&matcher.target, false);
        matcher.target_self = self_value;
        Ok(matcher)
    }

    pub fn sigma_z(&self) -> f64 {
        self.kernel.sigma
    }

    #[inline]
    fn value_weight(&self, a: Option<&Vec<f64>>, i: usize, b: Option<&Vec<f64>>, j: usize) -> f64 {
        match (a, b) {
            (Some(a), Some(b)) if self.sigma_f.is_finite() => {
                let d = a[i] - b[j];
                (-d * d / (2.0 * self.sigma_f * self.sigma_f)).exp()
            }
            _ => 1.0,
        }
    }

    /// `Σ_lg K(l,g) η_l·η_g` and, when asked, its gradients with respect to
    /// centers and normals.
    fn self_term(&self, s: &FaceCurrent, with_grad: bool) -> (f64, Vec<Vec3>, Vec<Vec3>) {
        let n = s.centers.len();
        let k0 = self.kernel.eval_sq(0.0);
        let mut value = 0.0;
        let (mut gc, mut gn) = if with_grad {
            (vec![Vec3::zeros(); n], vec![Vec3::zeros(); n])
        } else {
            (Vec::new(), Vec::new())
        };
        let vals = s.values.as_ref();
        for l in 0..n {
            value += k0 * s.normals[l].norm_squared();
            if with_grad {
                gn[l] += s.normals[l] * (2.0 * k0);
            }
            for g in l + 1..n {
                let d = s.centers[l] - s.centers[g];
                let t = self.kernel.pair_terms(d.norm_squared());
                let kf = self.value_weight(vals, l, vals, g);
                let dot = s.normals[l].dot(&s.normals[g]);
                value += 2.0 * t.k * kf * dot;
                if with_grad {
                    let w = t.k * kf;
                    gn[l] += s.normals[g] * (2.0 * w);
                    gn[g] += s.normals[l] * (2.0 * w);
                    let dc = d * (-2.0 * t.g1 * kf * dot);
                    gc[l] += dc;
                    gc[g] -= dc;
                }
            }
        }
        (value, gc, gn)
    }

    /// Distance from the surface `(vertices, faces)` with optional per-face
    /// values to the target, and its gradient with respect to `vertices`.
    pub fn evaluate(&self, vertices: &[Vec3], faces: &[[usize; 3]], values: Option<&[f64]>) -> Result<SimilarityResult> {
        if let Some(v) = values {
            if v.len() != faces.len() {
                return Err(Error::DimensionMismatch { what: "per-face values", expected: faces.len(), got: v.len() });
            }
        }
        let src = FaceCurrent::from_parts(vertices, faces, values);
        let (self_value, mut gc, mut gn) = self.self_term(&src, true);

        let tgt = &self.target;
        let mut cross = 0.0;
        for l in 0..src.centers.len() {
            let (cl, nl) = (src.centers[l], src.normals[l]);
            let mut acc_n = Vec3::zeros();
            let mut acc_c = Vec3::zeros();
            for q in 0..tgt.centers.len() {
                let d = cl - tgt.centers[q];
                let t = self.kernel.pair_terms(d.norm_squared());
                let kf = self.value_weight(src.values.as_ref(), l, tgt.values.as_ref(), q);
                let w = t.k * kf;
                let dot = nl.dot(&tgt.normals[q]);
                cross += w * dot;
                acc_n += tgt.normals[q] * w;
                acc_c += d * (t.g1 * kf * dot);
            }
            gn[l] -= acc_n * 2.0;
            // ∇₁K = -g1·d, and the cross term enters with -2
            gc[l] += acc_c * 2.0;
        }

        let value = self_value - 2.0 * cross + self.target_self;
        let mut gradient = vec![Vec3::zeros(); vertices.len()];
        for (f, face) in faces.iter().enumerate() {
            let (v0, v1, v2) = (vertices[face[0]], vertices[face[1]], vertices[face[2]]);
            let a = gn[f] * 0.5;
            let c = gc[f] / 3.0;
            gradient[face[0]] += a.cross(&(v2 - v1)) + c;
            gradient[face[1]] += a.cross(&(v0 - v2)) + c;
            gradient[face[2]] += a.cross(&(v1 - v0)) + c;
        }
        Ok(SimilarityResult { value, gradient })
    }
}

/// Current distance between two oriented meshes with area-weighted normals.
pub fn current_distance(deformed: &TriangleMesh, target: &TriangleMesh, sigma_z: f64) -> Result<SimilarityResult> {
    CurrentMatcher::new(target, sigma_z)?.evaluate(deformed.vertices(), deformed.faces(), None)
}

/// Current distance with each kernel term weighted by a Gaussian of width
/// `sigma_f` on the per-face function values.
pub fn fcurrent_distance(
    deformed: &TriangleMesh,
    deformed_values: &[f64],
    target: &TriangleMesh,
    target_values: &[f64],
    sigma_z: f64,
    sigma_f: f64,
) -> Result<SimilarityResult> {
    CurrentMatcher::functional(target, target_values, sigma_z, sigma_f)?.evaluate(
        deformed.vertices(),
        deformed.faces(),
        Some(deformed_values),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jitter(mesh: &TriangleMesh, amp: f64, seed: u64) -> TriangleMesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = mesh
            .vertices()
            .iter()
            .map(|p| p + Vec3::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
            .collect();
        mesh.with_vertices(v).unwrap()
    }

    /// A 24-face disk patch bent out of plane.
    fn patch() -> TriangleMesh {
        let d = shapes::flat_disk(2, 1.0);
        let v = d.vertices().iter().map(|p| Vec3::new(p.x, p.y, 0.3 * p.x * p.x - 0.2 * p.y)).collect();
        d.with_vertices(v).unwrap()
    }

    fn check_gradient<F: Fn(&[Vec3]) -> f64>(f: F, x: &[Vec3], g: &[Vec3], h: f64, tol: f64) {
        let scale = g.iter().map(|v| v.amax()).fold(0.0, f64::max);
        for i in 0..x.len() {
            for c in 0..3 {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i][c] += h;
                m[i][c] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - g[i][c]).abs() <= tol * scale, "vertex {i} axis {c}: fd {fd} analytic {}", g[i][c]);
            }
        }
    }

    #[test]
    fn landmark_basics() {
        let x = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, 0.0, 0.0)];
        let r = landmark_distance(&x, &x).unwrap();
        assert_eq!(r.value, 0.0);
        let y = vec![x[0], Vec3::new(-1.0, 0.0, 0.0)];
        let r = landmark_distance(&x, &y).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.gradient[1], Vec3::new(2.0, 0.0, 0.0));
        assert!(landmark_distance(&x, &x[..1]).is_err());
    }

    #[test]
    fn landmark_gradient_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = || (0..10).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect::<Vec<_>>();
        let (x, y) = (pts(), pts());
        let r = landmark_distance(&x, &y).unwrap();
        check_gradient(|p| landmark_distance(p, &y).unwrap().value, &x, &r.gradient, 1e-5, 1e-7);
    }

    #[test]
    fn current_of_mesh_with_itself_is_zero() {
        let m = patch();
        let r = current_distance(&m, &m, 0.5).unwrap();
        assert!(r.value.abs() <= 1e-10, "{}", r.value);
        assert!(r.gradient.iter().all(|g| g.norm() < 1e-10));
    }

    #[test]
    fn distant_triangles_decouple() {
        let t = |z: f64| {
            TriangleMesh::new(
                vec![Vec3::new(0.0, 0.0, z), Vec3::new(1.0, 0.0, z), Vec3::new(0.0, 1.0, z)],
                vec![[0, 1, 2]],
            )
            .unwrap()
        };
        let r = current_distance(&t(0.0), &t(50.0), 0.5).unwrap();
        // each self-term is |η|² = 1/4
        assert!((r.value - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn current_symmetry_and_rigid_invariance() {
        let a = patch();
        let b = jitter(&a, 0.1, 2);
        let ab = current_distance(&a, &b, 0.4).unwrap().value;
        let ba = current_distance(&b, &a, 0.4).unwrap().value;
        assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        let rot = Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let shift = Vec3::new(2.0, -1.0, 0.5);
        let mv = |m: &TriangleMesh| m.with_vertices(m.vertices().iter().map(|p| rot * p + shift).collect()).unwrap();
        let moved = current_distance(&mv(&a), &mv(&b), 0.4).unwrap().value;
        assert!((moved - ab).abs() <= 1e-10 * ab, "{moved} vs {ab}");
    }

    #[test]
    fn current_gradient_fd() {
        let target = patch();
        let src = jitter(&target, 0.15, 3);
        let sigma = 0.4;
        let r = current_distance(&src, &target, sigma).unwrap();
        let m = CurrentMatcher::new(&target, sigma).unwrap();
        check_gradient(|p| m.evaluate(p, src.faces(), None).unwrap().value, src.vertices(), &r.gradient, 1e-5 * sigma, 1e-5);
    }

    #[test]
    fn fcurrent_limits_and_gradient() {
        let target = patch();
        let src = jitter(&target, 0.15, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tv: Vec<f64> = (0..target.face_count()).map(|_| rng.random_range(0.0..2.0)).collect();
        let sv: Vec<f64> = (0..src.face_count()).map(|_| rng.random_range(0.0..2.0)).collect();

        let same = fcurrent_distance(&target, &tv, &target, &tv, 0.4, 0.7).unwrap();
        assert!(same.value.abs() <= 1e-10);

        let plain = current_distance(&src, &target, 0.4).unwrap();
        let inf = fcurrent_distance(&src, &sv, &target, &tv, 0.4, f64::INFINITY).unwrap();
        assert!((plain.value - inf.value).abs() <= 1e-10);

        let sigma_f = 0.8;
        let r = fcurrent_distance(&src, &sv, &target, &tv, 0.4, sigma_f).unwrap();
        let m = CurrentMatcher::functional(&target, &tv, 0.4, sigma_f).unwrap();
        check_gradient(|p| m.evaluate(p, src.faces(), Some(&sv)).unwrap().value, src.vertices(), &r.gradient, 1e-5 * 0.4, 1e-5);

        assert!(fcurrent_distance(&src, &sv[1..], &target, &tv, 0.4, 1.0).is_err());
    }
}
