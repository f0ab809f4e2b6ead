//! Tangent vector fields on triangle meshes: per-vertex frames, the vector
//! mass and connection-stiffness matrices, data terms and the mixed solve
//! used by the functional registration.
//!
//! Frames follow the angle-normalized construction: the angles of the
//! wedges around an interior vertex are rescaled to sum to 2π and every
//! incident edge receives a polar angle measured from the first edge.
//! Boundary vertices keep their true angles.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::mesh::{TriangleMesh, Vec3};
use crate::sparse::{self, TripletMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexFrame {
    pub normal: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wedge {
    face: usize,
    /// Polar angle of the first edge of the wedge (counter-clockwise order).
    start: f64,
    /// Normalized opening angle.
    span: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrameAtlas {
    frames: Vec<VertexFrame>,
    wedges: Vec<Vec<Wedge>>,
    neighbors: Vec<Vec<(usize, f64)>>,
    angle_sums: Vec<f64>,
}

fn corner_angle(mesh: &TriangleMesh, face: usize, slot: usize) -> f64 {
    let f = mesh.faces()[face];
    let v = mesh.vertices();
    let p = v[f[slot]];
    let a = v[f[(slot + 1) % 3]] - p;
    let b = v[f[(slot + 2) % 3]] - p;
    a.cross(&b).norm().atan2(a.dot(&b))
}

/// Unit normal at vertex `k` from an algebraic sphere fit
/// `c|x|² + a·x + b = 0` through the vertex and its one-ring, oriented like
/// `fallback`. Exact for vertices on a sphere or a plane; the area-weighted
/// normal is used when the fit is underdetermined or disagrees strongly.
fn fitted_normal(verts: &[Vec3], k: usize, ring: &[usize], fallback: &Vec3) -> Vec3 {
    if ring.len() < 4 {
        return *fallback;
    }
    let p = verts[k];
    let h = ring.iter().map(|&j| (verts[j] - p).norm()).sum::<f64>() / ring.len() as f64;
    let rows = ring.len() + 1;
    let mut a = nalgebra::DMatrix::zeros(rows, 5);
    a[(0, 4)] = 1.0;
    for (r, &j) in ring.iter().enumerate() {
        let q = (verts[j] - p) / h;
        a[(r + 1, 0)] = q.norm_squared();
        a[(r + 1, 1)] = q.x;
        a[(r + 1, 2)] = q.y;
        a[(r + 1, 3)] = q.z;
        a[(r + 1, 4)] = 1.0;
    }
    let eig = (a.transpose() * &a).symmetric_eigen();
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (lo, next, top) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[4]]);
    if next <= 1e-10 * top || lo > 1e-2 * next {
        return *fallback;
    }
    let w = eig.eigenvectors.column(order[0]);
    let g = Vec3::new(w[1], w[2], w[3]);
    let len = g.norm();
    if !(len > 0.0) {
        return *fallback;
    }
    let n = if g.dot(fallback) < 0.0 { -g / len } else { g / len };
    if n.dot(fallback) < 0.9 {
        *fallback
    } else {
        n
    }
}

impl TangentFrameAtlas {
    /// Builds frames with e₁ seeded by the first edge of each vertex fan.
    pub fn build(mesh: &TriangleMesh) -> Result<Self> {
        if let Some(&(a, b)) = mesh.non_manifold_edges().first() {
            return Err(Error::NonManifold(a, b));
        }
        let faces = mesh.faces();
        let verts = mesh.vertices();
        let n = mesh.vertex_count();
        let mut frames = Vec::with_capacity(n);
        let mut wedges = Vec::with_capacity(n);
        let mut neighbors = Vec::with_capacity(n);
        let mut angle_sums = Vec::with_capacity(n);

        for k in 0..n {
            // (face, first neighbor, second neighbor, angle)
            let raw: Vec<(usize, usize, usize, f64)> = mesh.vertex_faces()[k]
                .iter()
                .map(|&f| {
                    let slot = faces[f].iter().position(|&i| i == k).unwrap();
                    (f, faces[f][(slot + 1) % 3], faces[f][(slot + 2) % 3], corner_angle(mesh, f, slot))
                })
                .collect();
            if raw.is_empty() {
                return Err(Error::InvalidMesh(format!("vertex {k} belongs to no face")));
            }
            let first = if mesh.is_boundary(k) {
                raw.iter()
                    .position(|w| !raw.iter().any(|o| o.2 == w.1))
                    .ok_or_else(|| Error::InvalidMesh(format!("inconsistent orientation around vertex {k}")))?
            } else {
                0
            };
            let mut chain = vec![first];
            let mut used = vec![false; raw.len()];
            used[first] = true;
            while chain.len() < raw.len() {
                let end = raw[*chain.last().unwrap()].2;
                match (0..raw.len()).find(|&w| !used[w] && raw[w].1 == end) {
                    Some(w) => {
                        used[w] = true;
                        chain.push(w);
                    }
                    None => {
                        return Err(Error::InvalidMesh(format!(
                            "faces around vertex {k} do not form a single consistently oriented fan"
                        )))
                    }
                }
            }
            let total: f64 = raw.iter().map(|w| w.3).sum();
            let scale = if mesh.is_boundary(k) { 1.0 } else { TAU / total };

            let mut ring: Vec<usize> = raw.iter().flat_map(|w| [w.1, w.2]).collect();
            ring.sort_unstable();
            ring.dedup();
            let normal = fitted_normal(verts, k, &ring, &mesh.vertex_normals()[k]);
            let seed = verts[raw[first].1] - verts[k];
            let e1 = (seed - normal * normal.dot(&seed)).normalize();
            let e2 = normal.cross(&e1);
            frames.push(VertexFrame { normal, e1, e2 });

            let mut phi = 0.0;
            let mut ws = Vec::with_capacity(chain.len());
            let mut nb = Vec::with_capacity(chain.len() + 1);
            for &w in &chain {
                let (face, a, _, ang) = raw[w];
                nb.push((a, phi));
                ws.push(Wedge { face, start: phi, span: ang * scale });
                phi += ang * scale;
            }
            if mesh.is_boundary(k) {
                nb.push((raw[*chain.last().unwrap()].2, phi));
            }
            nb.sort_by_key(|e| e.0);
            wedges.push(ws);
            neighbors.push(nb);
            angle_sums.push(total);
        }
        Ok(Self { frames, wedges, neighbors, angle_sums })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[VertexFrame] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &VertexFrame {
        &self.frames[k]
    }

    /// Sum of the true corner angles at vertex `k`.
    pub fn angle_sum(&self, k: usize) -> f64 {
        self.angle_sums[k]
    }

    /// Sum of the normalized wedge angles at vertex `k`.
    pub fn normalized_angle_sum(&self, k: usize) -> f64 {
        self.wedges[k].iter().map(|w| w.span).sum()
    }

    /// Polar angle of edge `i → j` in the frame of `i`.
    pub fn edge_angle(&self, i: usize, j: usize) -> Option<f64> {
        let nb = &self.neighbors[i];
        nb.binary_search_by_key(&j, |e| e.0).ok().map(|p| nb[p].1)
    }

    /// Angle by which frame coordinates of a vector at `i` rotate when the
    /// vector is transported to `j` along their shared edge.
    pub fn transport_angle(&self, i: usize, j: usize) -> Option<f64> {
        Some((self.edge_angle(j, i)? + PI - self.edge_angle(i, j)?).rem_euclid(TAU))
    }

    /// Rotates the frame of every vertex `k` by `betas[k]`; edge angles shift
    /// by `-betas[k]` so the geometry described is unchanged.
    pub fn rotated(&self, betas: &[f64]) -> Result<Self> {
        if betas.len() != self.len() {
            return Err(Error::DimensionMismatch { what: "frame rotations", expected: self.len(), got: betas.len() });
        }
        let mut out = self.clone();
        for (k, &b) in betas.iter().enumerate() {
            let f = &mut out.frames[k];
            let e1 = f.e1 * b.cos() + f.e2 * b.sin();
            f.e2 = f.normal.cross(&e1);
            f.e1 = e1;
            out.wedges[k].iter_mut().for_each(|w| w.start -= b);
            out.neighbors[k].iter_mut().for_each(|e| e.1 -= b);
        }
        Ok(out)
    }

    /// Coordinates of the tangential part of `v` in the frame of `k`.
    pub fn to_frame(&self, k: usize, v: &Vec3) -> [f64; 2] {
        let f = &self.frames[k];
        [v.dot(&f.e1), v.dot(&f.e2)]
    }

    pub fn to_ambient(&self, k: usize, c: [f64; 2]) -> Vec3 {
        let f = &self.frames[k];
        f.e1 * c[0] + f.e2 * c[1]
    }

    /// For every face corner, the angle of the rotation from the vertex frame
    /// into a frame lying in the face plane whose first axis is the first
    /// edge of the face.
    fn corner_rotations(&self, mesh: &TriangleMesh) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; mesh.face_count()];
        let faces = mesh.faces();
        let verts = mesh.vertices();
        let geo = mesh.face_geometries();
        for (k, ws) in self.wedges.iter().enumerate() {
            for w in ws {
                let f = faces[w.face];
                let slot = f.iter().position(|&i| i == k).unwrap();
                let f1 = (verts[f[1]] - verts[f[0]]).normalize();
                let f2 = geo[w.face].normal.cross(&f1);
                let edge = verts[f[(slot + 1) % 3]] - verts[k];
                let alpha = edge.dot(&f2).atan2(edge.dot(&f1));
                let theta = corner_angle(mesh, w.face, slot);
                out[w.face][slot] = (alpha + 0.5 * theta) - (w.start + 0.5 * w.span);
            }
        }
        out
    }
}

/// Coefficients of a tangent field, two per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentField {
    coefficients: Vec<f64>,
}

impl TangentField {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() % 2 != 0 {
            return Err(Error::InvalidParameter("tangent field needs two coefficients per vertex".into()));
        }
        if !coefficients.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParameter("tangent field coefficients must be finite".into()));
        }
        Ok(Self { coefficients })
    }

    pub fn zeros(vertices: usize) -> Self {
        Self { coefficients: vec![0.0; 2 * vertices] }
    }

    /// Projects ambient vectors onto the vertex tangent planes.
    pub fn from_ambient(atlas: &TangentFrameAtlas, vectors: &[Vec3]) -> Result<Self> {
        if vectors.len() != atlas.len() {
            return Err(Error::DimensionMismatch { what: "tangent vectors", expected: atlas.len(), got: vectors.len() });
        }
        let coefficients = vectors.iter().enumerate().flat_map(|(k, v)| atlas.to_frame(k, v)).collect();
        Self::new(coefficients)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn vertex_count(&self) -> usize {
        self.coefficients.len() / 2
    }

    pub fn at(&self, k: usize) -> [f64; 2] {
        [self.coefficients[2 * k], self.coefficients[2 * k + 1]]
    }

    pub fn ambient(&self, atlas: &TangentFrameAtlas) -> Vec<Vec3> {
        (0..self.vertex_count()).map(|k| atlas.to_ambient(k, self.at(k))).collect()
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.vertex_count()).map(|k| self.at(k)[0].hypot(self.at(k)[1])).fold(0.0, f64::max)
    }
}

/// Lumped vector mass `R₀` and connection stiffness `R₁`, both 2K × 2K.
///
/// On each face the vertex coefficients are rotated into a common face
/// frame and the scalar cotangent Dirichlet energy is applied to each
/// component, so `uᵀR₁u = Σ_f Σ_edges ½ cot θ |Q_j u_j − Q_i u_i|²`.
pub fn assemble_connection_matrices(mesh: &TriangleMesh, atlas: &TangentFrameAtlas) -> (TripletMatrix, TripletMatrix) {
    let n = mesh.vertex_count();
    let mut r0 = TripletMatrix::new(2 * n);
    for (k, a) in mesh.vertex_areas().into_iter().enumerate() {
        r0.add(2 * k, 2 * k, a);
        r0.add(2 * k + 1, 2 * k + 1, a);
    }
    let rot = atlas.corner_rotations(mesh);
    let verts = mesh.vertices();
    let mut r1 = TripletMatrix::new(2 * n);
    for (f, face) in mesh.faces().iter().enumerate() {
        for e in 0..3 {
            let (si, sj, sk) = (e, (e + 1) % 3, (e + 2) % 3);
            let (i, j, k) = (face[si], face[sj], face[sk]);
            let w = 0.5 * crate::surface::cot_at(&verts[k], &verts[i], &verts[j]);
            // Q_iᵀ Q_j is a rotation by δ_j − δ_i
            let d = rot[f][sj] - rot[f][si];
            let (c, s) = (d.cos(), d.sin());
            for t in 0..2 {
                r1.add(2 * i + t, 2 * i + t, w);
                r1.add(2 * j + t, 2 * j + t, w);
            }
            let block = [[c, -s], [s, c]];
            for a in 0..2 {
                for b in 0..2 {
                    r1.add(2 * i + a, 2 * j + b, -w * block[a][b]);
                    r1.add(2 * j + b, 2 * i + a, -w * block[a][b]);
                }
            }
        }
    }
    (r0, r1)
}

/// Data matrix `Θ₂` and right-hand side `Θ₁ z` for the linearized matching
/// term. `j` is the linearization direction and `residual` holds
/// `z_k = X₀(p_k) − X̂∘s(p_k)`.
pub fn assemble_data_matrices(j: &TangentField, residual: &[f64]) -> Result<(TripletMatrix, Vec<f64>)> {
    let n = j.vertex_count();
    if residual.len() != n {
        return Err(Error::DimensionMismatch { what: "residual length", expected: n, got: residual.len() });
    }
    let mut theta2 = TripletMatrix::new(2 * n);
    let mut rhs = vec![0.0; 2 * n];
    for k in 0..n {
        let jk = j.at(k);
        for a in 0..2 {
            for b in 0..2 {
                theta2.add(2 * k + a, 2 * k + b, jk[a] * jk[b]);
            }
            // Θ₁ entries are −g(J, e), applied to z
            rhs[2 * k + a] = -jk[a] * residual[k];
        }
    }
    Ok((theta2, rhs))
}

/// Assembled linear system for one update step.
#[derive(Debug, Clone)]
pub struct FemSystem {
    pub r0: TripletMatrix,
    pub r1: TripletMatrix,
    pub theta2: TripletMatrix,
    pub rhs: Vec<f64>,
    pub boundary: Vec<usize>,
    dirichlet: Option<Option<f64>>,
}

impl FemSystem {
    pub fn new(r0: TripletMatrix, r1: TripletMatrix, theta2: TripletMatrix, rhs: Vec<f64>, boundary: Vec<usize>) -> Result<Self> {
        let n = r0.size();
        for (what, m) in [("R1 size", r1.size()), ("Theta2 size", theta2.size()), ("rhs length", rhs.len())] {
            if m != n {
                return Err(Error::DimensionMismatch { what, expected: n, got: m });
            }
        }
        Ok(Self { r0, r1, theta2, rhs, boundary, dirichlet: None })
    }

    /// Assembles every block for `mesh` from a linearization direction and
    /// a residual.
    pub fn assemble(mesh: &TriangleMesh, atlas: &TangentFrameAtlas, j: &TangentField, residual: &[f64]) -> Result<Self> {
        let (r0, r1) = assemble_connection_matrices(mesh, atlas);
        let (theta2, rhs) = assemble_data_matrices(j, residual)?;
        Self::new(r0, r1, theta2, rhs, mesh.boundary_vertices())
    }

    /// Same mass and stiffness, new data term. Boundary handling is kept.
    pub fn with_data(&self, j: &TangentField, residual: &[f64]) -> Result<Self> {
        let (theta2, rhs) = assemble_data_matrices(j, residual)?;
        let mut out = Self::new(self.r0.clone(), self.r1.clone(), theta2, rhs, self.boundary.clone())?;
        if let Some(p) = self.dirichlet {
            out.apply_dirichlet(p);
        }
        Ok(out)
    }

    pub fn vertex_count(&self) -> usize {
        self.r0.size() / 2
    }

    /// Imposes homogeneous Dirichlet conditions on the boundary vertices by
    /// penalty. With `None` the penalty is 1e8 times the largest absolute
    /// diagonal entry of the block matrix, chosen at solve time.
    pub fn apply_dirichlet(&mut self, penalty: Option<f64>) {
        if self.boundary.is_empty() {
            return;
        }
        for &k in &self.boundary {
            self.rhs[2 * k] = 0.0;
            self.rhs[2 * k + 1] = 0.0;
        }
        self.dirichlet = Some(penalty);
    }

    /// The full 4K × 4K matrix `[[Θ₂, λR₁], [λR₁, −λR₀]]` including any
    /// boundary penalty.
    pub fn block_matrix(&self, lambda: f64) -> TripletMatrix {
        let m = self.r0.size();
        let mut a = TripletMatrix::new(2 * m);
        a.add_block(0, 0, &self.theta2, 1.0);
        a.add_block(0, m, &self.r1, lambda);
        a.add_block(m, 0, &self.r1, lambda);
        a.add_block(m, m, &self.r0, -lambda);
        if let Some(p) = self.dirichlet {
            let penalty = p.unwrap_or_else(|| 1e8 * a.diagonal().iter().fold(0.0, |x: f64, d| x.max(d.abs())));
            for &k in &self.boundary {
                a.add(2 * k, 2 * k, penalty);
                a.add(2 * k + 1, 2 * k + 1, penalty);
            }
        }
        a
    }

    pub fn block_rhs(&self) -> Vec<f64> {
        let mut b = self.rhs.clone();
        b.resize(2 * self.rhs.len(), 0.0);
        b
    }
}

/// Solves the mixed system for the update field `û`.
pub fn solve_update(system: &FemSystem, lambda: f64) -> Result<TangentField> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter("lambda must be positive and finite".into()));
    }
    let n = system.vertex_count();
    if system.rhs.iter().all(|&r| r == 0.0) {
        return Ok(TangentField::zeros(n));
    }
    let a = system.block_matrix(lambda);
    let b = system.block_rhs();
    let suggest = |e: Error| match e {
        Error::SingularSystem(m) => Error::SingularSystem(format!("{m}; try a larger lambda")),
        other => other,
    };
    let x = sparse::solve(&a, &b).map_err(suggest)?;
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let res = sparse::residual_norm(&a, &x, &b);
    if !(res <= 1e-8 * bnorm) {
        return Err(Error::SingularSystem(format!(
            "linear solve residual {res:.3e} exceeds tolerance for rhs norm {bnorm:.3e}; try a larger lambda"
        )));
    }
    TangentField::new(x[..2 * n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> TangentField {
        TangentField::new((0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn aligning_rotations(atlas: &TangentFrameAtlas, dir: Vec3) -> Vec<f64> {
        atlas.frames().iter().map(|f| dir.dot(&f.e2).atan2(dir.dot(&f.e1))).collect()
    }

    #[test]
    fn frames_are_orthonormal_and_tangent() {
        for mesh in [shapes::icosphere(2, 1.0), shapes::ellipsoid_cap(4, Vec3::new(3.0, 2.0, 1.0), 1.2)] {
            let atlas = TangentFrameAtlas::build(&mesh).unwrap();
            for f in atlas.frames() {
                assert!((f.e1.norm() - 1.0).abs() < 1e-12 && (f.e2.norm() - 1.0).abs() < 1e-12);
                assert!(f.e1.dot(&f.e2).abs() < 1e-12);
                assert!(f.e1.dot(&f.normal).abs() < 1e-10 && f.e2.dot(&f.normal).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sphere_frames_are_orthogonal_to_radius() {
        let mesh = shapes::icosphere(2, 2.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        for (p, f) in mesh.vertices().iter().zip(atlas.frames()) {
            let r = p.normalize();
            let (a, b) = (f.e1.dot(&r).abs(), f.e2.dot(&r).abs()); assert!(a < 1e-8 && b < 1e-8, "{a} {b}"); assert!(f.e1.dot(&r).abs() < 1e-8 && f.e2.dot(&r).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_frames_are_coplanar() {
        let mesh = shapes::flat_grid(5, 4, 0.3);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        for f in atlas.frames() {
            assert!(f.e1.z.abs() < 1e-14 && f.e2.z.abs() < 1e-14);
        }
    }

    #[test]
    fn interior_angles_are_normalized() {
        let mesh = shapes::ellipsoid_cap(5, Vec3::new(2.0, 1.5, 1.0), 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        for k in 0..mesh.vertex_count() {
            if mesh.is_boundary(k) {
                assert!((atlas.normalized_angle_sum(k) - atlas.angle_sum(k)).abs() < 1e-12);
            } else {
                assert!((atlas.normalized_angle_sum(k) - TAU).abs() < 1e-12);
                assert!(atlas.angle_sum(k) < TAU);
            }
        }
    }

    #[test]
    fn transport_on_flat_mesh_is_frame_difference() {
        let mesh = shapes::flat_disk(3, 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        for (i, j) in mesh.edges() {
            let rho = atlas.transport_angle(i, j).unwrap();
            let fi = atlas.frame(i);
            let fj = atlas.frame(j);
            // e₁ of i has angle ρ in the frame of j
            let rotated = fj.e1 * rho.cos() + fj.e2 * rho.sin();
            assert!((rotated - fi.e1).norm() < 1e-10, "edge {i}-{j}");
        }
    }

    #[test]
    fn matrices_are_symmetric_and_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mesh in [shapes::icosphere(1, 1.0), shapes::ellipsoid_cap(3, Vec3::new(2.0, 1.0, 1.0), 1.1)] {
            let atlas = TangentFrameAtlas::build(&mesh).unwrap();
            let (r0, r1) = assemble_connection_matrices(&mesh, &atlas);
            assert!(r1.asymmetry() <= 1e-12);
            let e0 = r0.to_dense().symmetric_eigen().eigenvalues;
            let e1 = r1.to_dense().symmetric_eigen().eigenvalues;
            assert!(e0.min() > 0.0);
            assert!(e1.min() > -1e-10 * e1.max(), "{}", e1.min());
            let trace: f64 = r0.diagonal().iter().sum();
            assert!((trace - 2.0 * mesh.total_area()).abs() < 0.01 * trace);
            let u = random_field(&mut rng, mesh.vertex_count());
            let (t2, _) = assemble_data_matrices(&u, &vec![1.0; mesh.vertex_count()]).unwrap();
            assert!(t2.to_dense().symmetric_eigen().eigenvalues.min() > -1e-12);
        }
    }

    #[test]
    fn aligned_constant_field_has_no_energy() {
        for mesh in [shapes::flat_disk(4, 1.0), shapes::flat_grid(6, 5, 0.2)] {
            let atlas = TangentFrameAtlas::build(&mesh).unwrap();
            let atlas = atlas.rotated(&aligning_rotations(&atlas, Vec3::x())).unwrap();
            let (_, r1) = assemble_connection_matrices(&mesh, &atlas);
            for c in [[1.0, 0.0], [0.3, -2.0]] {
                let u: Vec<f64> = (0..mesh.vertex_count()).flat_map(|_| c).collect();
                let e: f64 = u.iter().zip(r1.mul_vec(&u)).map(|(a, b)| a * b).sum();
                assert!(e.abs() <= 1e-10, "{e}");
            }
        }
    }

    #[test]
    fn energy_is_frame_independent_for_a_fixed_ambient_field() {
        let mesh = shapes::flat_disk(3, 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let field: Vec<Vec3> = mesh.vertices().iter().map(|p| Vec3::new(1.0, 0.0, 0.0) * (1.0 + p.y)).collect();
        let energy = |a: &TangentFrameAtlas| {
            let (_, r1) = assemble_connection_matrices(&mesh, a);
            let u = TangentField::from_ambient(a, &field).unwrap();
            u.coefficients().iter().zip(r1.mul_vec(u.coefficients())).map(|(a, b)| a * b).sum::<f64>()
        };
        let aligned = atlas.rotated(&aligning_rotations(&atlas, Vec3::x())).unwrap();
        // linear field: ∫|∇u|² = area of the disk
        assert!((energy(&aligned) - mesh.total_area()).abs() < 1e-10);
        assert!((energy(&atlas) - mesh.total_area()).abs() < 1e-10);
    }

    #[test]
    fn data_matrices_match_pointwise_sums() {
        let mesh = shapes::icosphere(1, 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = mesh.vertex_count();
        let j = random_field(&mut rng, n);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (t2, rhs) = assemble_data_matrices(&j, &r).unwrap();
        let (u, v) = (random_field(&mut rng, n), random_field(&mut rng, n));
        let lhs: f64 = v.coefficients().iter().zip(t2.mul_vec(u.coefficients())).map(|(a, b)| a * b).sum();
        let (ja, ua, va) = (j.ambient(&atlas), u.ambient(&atlas), v.ambient(&atlas));
        let oracle: f64 = (0..n).map(|k| va[k].dot(&ja[k]) * ua[k].dot(&ja[k])).sum();
        assert!((lhs - oracle).abs() < 1e-12);
        let rhs_dot: f64 = v.coefficients().iter().zip(&rhs).map(|(a, b)| a * b).sum();
        let rhs_oracle: f64 = (0..n).map(|k| -r[k] * va[k].dot(&ja[k])).sum();
        assert!((rhs_dot - rhs_oracle).abs() < 1e-12);

        let single = TangentField::new(vec![1.0, 0.0]).unwrap();
        let (t2, rhs) = assemble_data_matrices(&single, &[0.7]).unwrap();
        assert_eq!(t2.to_dense(), nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(rhs, vec![-0.7, 0.0]);

        let (t2, rhs) = assemble_data_matrices(&TangentField::zeros(n), &r).unwrap();
        assert!(t2.entries().is_empty() && rhs.iter().all(|&x| x == 0.0));
    }

    fn two_triangles() -> TriangleMesh {
        let v = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.1), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.1, 0.9, 0.3)];
        TriangleMesh::new(v, vec![[0, 1, 2], [1, 3, 2]]).unwrap()
    }

    #[test]
    fn solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mesh in [two_triangles(), shapes::icosphere(1, 1.0)] {
            let atlas = TangentFrameAtlas::build(&mesh).unwrap();
            let n = mesh.vertex_count();
            let j = random_field(&mut rng, n);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sys = FemSystem::assemble(&mesh, &atlas, &j, &r).unwrap();
            let u = solve_update(&sys, 0.5).unwrap();
            let a = sys.block_matrix(0.5).to_dense();
            let x = a.lu().solve(&nalgebra::DVector::from_vec(sys.block_rhs())).unwrap();
            for k in 0..2 * n {
                assert!((u.coefficients()[k] - x[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_rhs_gives_zero_update() {
        let mesh = shapes::icosphere(1, 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let n = mesh.vertex_count();
        let sys = FemSystem::assemble(&mesh, &atlas, &TangentField::zeros(n), &vec![0.3; n]).unwrap();
        assert_eq!(solve_update(&sys, 1.0).unwrap().max_norm(), 0.0);
    }

    #[test]
    fn update_shrinks_as_lambda_grows() {
        let mesh = shapes::icosphere(2, 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = mesh.vertex_count();
        let j = random_field(&mut rng, n);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sys = FemSystem::assemble(&mesh, &atlas, &j, &r).unwrap();
        let norms: Vec<f64> = [1e-2, 1e-1, 1.0, 1e1, 1e2]
            .iter()
            .map(|&l| {
                let u = solve_update(&sys, l).unwrap();
                u.coefficients().iter().map(|c| c * c).sum::<f64>().sqrt()
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    }

    #[test]
    fn solution_is_frame_invariant() {
        let mesh = shapes::ellipsoid_cap(3, Vec3::new(2.0, 1.0, 1.0), 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = mesh.vertex_count();
        let j_amb: Vec<Vec3> = mesh
            .vertices()
            .iter()
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let betas: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
        let solve = |a: &TangentFrameAtlas| {
            let j = TangentField::from_ambient(a, &j_amb).unwrap();
            let mut sys = FemSystem::assemble(&mesh, a, &j, &r).unwrap();
            sys.apply_dirichlet(Some(1e8));
            solve_update(&sys, 0.1).unwrap().ambient(a)
        };
        let (u0, u1) = (solve(&atlas), solve(&atlas.rotated(&betas).unwrap()));
        for (a, b) in u0.iter().zip(&u1) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn dirichlet_pins_boundary_and_is_penalty_insensitive() {
        let mesh = shapes::ellipsoid_cap(5, Vec3::new(2.0, 2.0, 1.0), 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let n = mesh.vertex_count();
        let j_amb: Vec<Vec3> = mesh.vertices().iter().map(|p| Vec3::new(1.0, 0.5, 0.0) + p * 0.2).collect();
        let j = TangentField::from_ambient(&atlas, &j_amb).unwrap();
        let r: Vec<f64> = mesh.vertices().iter().map(|p| (2.0 * p.x).sin() + p.y).collect();
        let base = FemSystem::assemble(&mesh, &atlas, &j, &r).unwrap();
        let solve_with = |p: Option<f64>| {
            let mut s = base.clone();
            s.apply_dirichlet(p);
            solve_update(&s, 0.05).unwrap()
        };
        let u = solve_with(None);
        let norm = |k: usize| u.at(k)[0].hypot(u.at(k)[1]);
        let interior = (0..n).filter(|&k| !mesh.is_boundary(k)).map(norm).fold(0.0, f64::max);
        let boundary = mesh.boundary_vertices().into_iter().map(norm).fold(0.0, f64::max);
        assert!(interior > 0.0 && boundary <= 1e-4 * interior, "{boundary} {interior}");

        let lo = solve_with(Some(1e6));
        let hi = solve_with(Some(1e10));
        let diff = lo.coefficients().iter().zip(hi.coefficients()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let size = hi.coefficients().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * size, "{diff} {size}");
    }

    #[test]
    fn closed_mesh_ignores_dirichlet() {
        let mesh = shapes::icosphere(1, 1.0);
        let atlas = TangentFrameAtlas::build(&mesh).unwrap();
        let n = mesh.vertex_count();
        let mut sys = FemSystem::assemble(&mesh, &atlas, &TangentField::zeros(n), &vec![0.0; n]).unwrap();
        let before = sys.block_matrix(1.0).compressed();
        sys.apply_dirichlet(None);
        assert_eq!(sys.block_matrix(1.0).compressed(), before);
    }

    #[test]
    fn non_manifold_edge_is_rejected() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(0.5, -1.0, -1.0)];
        let mesh = TriangleMesh::new(v, vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]]).unwrap();
        assert!(matches!(TangentFrameAtlas::build(&mesh), Err(Error::NonManifold(0, 1))));
    }
}
