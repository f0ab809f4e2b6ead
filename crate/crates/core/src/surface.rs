//! Scalar P1 finite elements, surface gradients and on-surface point
//! location for triangle meshes.

use crate::mesh::{TriangleMesh, Vec3};
use crate::sparse::TripletMatrix;

/// Cotangent of the angle at `a` in triangle `(a, b, c)`.
#[inline]
pub fn cot_at(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let (u, v) = (b - a, c - a);
    u.dot(&v) / u.cross(&v).norm()
}

/// P1 stiffness matrix `A_ij = ∫ ∇φ_i·∇φ_j` (cotangent formula).
pub fn cotan_stiffness(mesh: &TriangleMesh) -> TripletMatrix {
    let v = mesh.vertices();
    let mut a = TripletMatrix::new(mesh.vertex_count());
    for f in mesh.faces() {
        for e in 0..3 {
            let (i, j, k) = (f[e], f[(e + 1) % 3], f[(e + 2) % 3]);
            let w = 0.5 * cot_at(&v[k], &v[i], &v[j]);
            a.add(i, j, -w);
            a.add(j, i, -w);
            a.add(i, i, w);
            a.add(j, j, w);
        }
    }
    a
}

/// Consistent P1 mass matrix `M_ij = ∫ φ_i φ_j`.
pub fn consistent_mass(mesh: &TriangleMesh) -> TripletMatrix {
    let mut m = TripletMatrix::new(mesh.vertex_count());
    for (f, g) in mesh.faces().iter().zip(mesh.face_geometries()) {
        for a in 0..3 {
            for b in 0..3 {
                m.add(f[a], f[b], g.area * if a == b { 1.0 / 6.0 } else { 1.0 / 12.0 });
            }
        }
    }
    m
}

/// Constant gradient of the linear interpolant of `values` on each face.
pub fn face_gradients(mesh: &TriangleMesh, values: &[f64]) -> Vec<Vec3> {
    let v = mesh.vertices();
    mesh.faces()
        .iter()
        .zip(mesh.face_geometries())
        .map(|(f, g)| {
            let mut grad = Vec3::zeros();
            for e in 0..3 {
                let (i, j, k) = (f[e], f[(e + 1) % 3], f[(e + 2) % 3]);
                // ∇φ_i = n × (v_k - v_j) / 2A
                grad += g.normal.cross(&(v[k] - v[j])) * values[i];
            }
            grad / (2.0 * g.area)
        })
        .collect()
}

/// Area-weighted average of the incident face gradients, projected onto the
/// tangent plane of each vertex.
pub fn vertex_gradients(mesh: &TriangleMesh, values: &[f64]) -> Vec<Vec3> {
    let fg = face_gradients(mesh, values);
    let geo = mesh.face_geometries();
    mesh.vertex_faces()
        .iter()
        .zip(mesh.vertex_normals())
        .map(|(faces, n)| {
            let mut acc = Vec3::zeros();
            let mut w = 0.0;
            for &f in faces {
                acc += fg[f] * geo[f].area;
                w += geo[f].area;
            }
            let g = if w > 0.0 { acc / w } else { acc };
            g - n * n.dot(&g)
        })
        .collect()
}

/// Closest point to `p` on triangle `(a, b, c)` and its barycentric
/// coordinates.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (a + ab * t, [1.0 - t, t, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (a + ac * t, [1.0 - t, 0.0, t]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * t, [0.0, 1.0 - t, t]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// A point on a mesh given by a face and barycentric coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub face: usize,
    pub bary: [f64; 3],
}

impl SurfacePoint {
    /// The point sitting exactly on vertex `v`, attached to its first face.
    pub fn at_vertex(mesh: &TriangleMesh, v: usize) -> Self {
        let face = mesh.vertex_faces()[v][0];
        let mut bary = [0.0; 3];
        let slot = mesh.faces()[face].iter().position(|&i| i == v).unwrap();
        bary[slot] = 1.0;
        Self { face, bary }
    }

    pub fn position(&self, mesh: &TriangleMesh) -> Vec3 {
        let f = mesh.faces()[self.face];
        let v = mesh.vertices();
        v[f[0]] * self.bary[0] + v[f[1]] * self.bary[1] + v[f[2]] * self.bary[2]
    }

    pub fn interpolate(&self, mesh: &TriangleMesh, values: &[f64]) -> f64 {
        let f = mesh.faces()[self.face];
        values[f[0]] * self.bary[0] + values[f[1]] * self.bary[1] + values[f[2]] * self.bary[2]
    }

    pub fn interpolate_vec(&self, mesh: &TriangleMesh, values: &[Vec3]) -> Vec3 {
        let f = mesh.faces()[self.face];
        values[f[0]] * self.bary[0] + values[f[1]] * self.bary[1] + values[f[2]] * self.bary[2]
    }

    /// Barycentric coordinates lie in [0, 1] and sum to one.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.bary.iter().all(|&b| b >= -tol && b <= 1.0 + tol) && (self.bary.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Closest-point projection onto a mesh, searching outward from a hint face
/// and falling back to an exhaustive scan when the local search is not
/// conclusive.
#[derive(Debug, Clone)]
pub struct SurfaceLocator {
    face_neighbors: Vec<Vec<usize>>,
    max_rings: usize,
}

impl SurfaceLocator {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let vf = mesh.vertex_faces();
        let face_neighbors = mesh
            .faces()
            .iter()
            .enumerate()
            .map(|(f, face)| {
                let mut n: Vec<usize> = face.iter().flat_map(|&v| vf[v].iter().copied()).filter(|&g| g != f).collect();
                n.sort_unstable();
                n.dedup();
                n
            })
            .collect();
        Self { face_neighbors, max_rings: 6 }
    }

    fn test_face(mesh: &TriangleMesh, f: usize, p: &Vec3) -> (f64, SurfacePoint) {
        let face = mesh.faces()[f];
        let v = mesh.vertices();
        let (q, bary) = closest_point_on_triangle(p, &v[face[0]], &v[face[1]], &v[face[2]]);
        ((q - p).norm_squared(), SurfacePoint { face: f, bary })
    }

    /// Projects `p`; the flag is set when the exhaustive fallback was used.
    pub fn project(&self, mesh: &TriangleMesh, p: &Vec3, hint: usize) -> (SurfacePoint, bool) {
        let mut seen = vec![false; mesh.face_count()];
        let mut frontier = vec![hint];
        seen[hint] = true;
        let (mut best_d, mut best) = Self::test_face(mesh, hint, p);
        for _ in 0..self.max_rings {
            let mut next = Vec::new();
            let mut improved = false;
            for &f in &frontier {
                for &g in &self.face_neighbors[f] {
                    if !seen[g] {
                        seen[g] = true;
                        next.push(g);
                        let (d, sp) = Self::test_face(mesh, g, p);
                        if d < best_d {
                            best_d = d;
                            best = sp;
                            improved = true;
                        }
                    }
                }
            }
            if !improved || next.is_empty() {
                return (best, false);
            }
            frontier = next;
        }
        let mut global = (best_d, best);
        for f in 0..mesh.face_count() {
            let (d, sp) = Self::test_face(mesh, f, p);
            if d < global.0 {
                global = (d, sp);
            }
        }
        (global.1, true)
    }
}
