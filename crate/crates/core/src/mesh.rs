//! Triangulated surfaces and per-vertex scalar fields.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Center, unit normal and area of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    pub center: Vec3,
    pub normal: Vec3,
    pub area: f64,
}

/// Geometry of the triangle `(a, b, c)`; the normal follows the right-hand
/// rule, so counter-clockwise winding seen from outside gives the outward
/// normal.
pub fn triangle_geometry(a: &Vec3, b: &Vec3, c: &Vec3) -> FaceGeometry {
    let cross = (b - a).cross(&(c - a));
    let norm = cross.norm();
    FaceGeometry {
        center: (a + b + c) / 3.0,
        normal: cross / norm,
        area: 0.5 * norm,
    }
}

/// An immutable indexed triangle mesh embedded in 3-space.
///
/// Derived per-face and per-vertex quantities are computed once at
/// construction. Deformations produce new meshes through
/// [`TriangleMesh::with_vertices`].
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_geometry: Vec<FaceGeometry>,
    vertex_normals: Vec<Vec3>,
    vertex_faces: Vec<Vec<usize>>,
    boundary: Vec<bool>,
    locator: OnceLock<VertexGrid>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidMesh("mesh has no vertices".into()));
        }
        if let Some(k) = vertices.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {k} is not finite")));
        }
        let n = vertices.len();
        let mut face_geometry = Vec::with_capacity(faces.len());
        for (f, face) in faces.iter().enumerate() {
            if let Some(&bad) = face.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {f} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            let g = triangle_geometry(&vertices[face[0]], &vertices[face[1]], &vertices[face[2]]);
            if !(g.area > 0.0) || !g.normal.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidMesh(format!("face {f} is degenerate")));
            }
            face_geometry.push(g);
        }

        let mut vertex_faces = vec![Vec::new(); n];
        let mut vertex_normals = vec![Vec3::zeros(); n];
        for (f, face) in faces.iter().enumerate() {
            let g = &face_geometry[f];
            for &i in face {
                vertex_faces[i].push(f);
                vertex_normals[i] += g.normal * g.area;
            }
        }
        for nrm in vertex_normals.iter_mut() {
            let len = nrm.norm();
            if len > 0.0 {
                *nrm /= len;
            }
        }

        let mut boundary = vec![false; n];
        for ((a, b), count) in edge_face_counts(&faces) {
            if count == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }

        Ok(Self {
            vertices,
            faces,
            face_geometry,
            vertex_normals,
            vertex_faces,
            boundary,
            locator: OnceLock::new(),
        })
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch {
                what: "vertex count",
                expected: self.vertices.len(),
                got: vertices.len(),
            });
        }
        Self::new(vertices, self.faces.clone())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Center, unit normal and area of face `face`.
    pub fn face_geometry(&self, face: usize) -> FaceGeometry {
        self.face_geometry[face]
    }

    pub fn face_geometries(&self) -> &[FaceGeometry] {
        &self.face_geometry
    }

    /// Area-weighted average of incident face normals, normalised.
    pub fn vertex_normals(&self) -> &[Vec3] {
        &self.vertex_normals
    }

    /// Faces incident to each vertex, in increasing face order.
    pub fn vertex_faces(&self) -> &[Vec<usize>] {
        &self.vertex_faces
    }

    pub fn is_boundary(&self, vertex: usize) -> bool {
        self.boundary[vertex]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&i| self.boundary[i]).collect()
    }

    pub fn total_area(&self) -> f64 {
        self.face_geometry.iter().map(|g| g.area).sum()
    }

    /// Barycentric (one third of incident face areas) vertex areas.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (face, g) in self.faces.iter().zip(&self.face_geometry) {
            for &i in face {
                areas[i] += g.area / 3.0;
            }
        }
        areas
    }

    /// Unique undirected edges as `(min, max)` pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<_> = edge_face_counts(&self.faces).into_keys().collect();
        edges.sort_unstable();
        edges
    }

    /// Edges shared by more than two faces.
    pub fn non_manifold_edges(&self) -> Vec<(usize, usize)> {
        let mut bad: Vec<_> = edge_face_counts(&self.faces)
            .into_iter()
            .filter(|&(_, c)| c > 2)
            .map(|(e, _)| e)
            .collect();
        bad.sort_unstable();
        bad
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .sum();
        total / edges.len().max(1) as f64
    }

    pub fn centroid(&self) -> Vec3 {
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Index of the vertex closest to `point`; ties go to the lowest index.
    pub fn nearest_vertex(&self, point: &Vec3) -> usize {
        self.locator
            .get_or_init(|| VertexGrid::new(&self.vertices))
            .nearest(&self.vertices, point)
    }
}

fn edge_face_counts(faces: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::with_capacity(faces.len() * 3 / 2 + 1);
    for face in faces {
        for e in 0..3 {
            let (a, b) = (face[e], face[(e + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

pub(crate) fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Linear scan for the nearest point with lowest-index tie-break.
pub fn nearest_linear_scan(points: &[Vec3], query: &Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - query).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Uniform grid over the vertex bounding box, searched in growing shells.
#[derive(Debug, Clone)]
struct VertexGrid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl VertexGrid {
    fn new(points: &[Vec3]) -> Self {
        let (lo, hi) = bounding_box(points);
        let extent = hi - lo;
        let max_extent = extent.max().max(1e-12);
        // roughly two points per occupied cell for surface-like sets
        let target = (points.len() as f64 / 2.0).max(1.0);
        let mut cell = max_extent / target.sqrt().max(1.0);
        if cell <= 0.0 || !cell.is_finite() {
            cell = 1.0;
        }
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).min(1024));
        let cell_count = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; cell_count + 1];
        let index_of = |p: &Vec3| -> usize {
            let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        for p in points {
            counts[index_of(p) + 1] += 1;
        }
        for i in 0..cell_count {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = index_of(p);
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self { origin: lo, cell, dims, starts, items }
    }

    fn nearest(&self, points: &[Vec3], query: &Vec3) -> usize {
        let center = [0, 1, 2].map(|a| {
            let c = ((query[a] - self.origin[a]) / self.cell).floor();
            c.clamp(0.0, (self.dims[a] - 1) as f64) as i64
        });
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap() as i64;
        for r in 0..=max_r {
            let lo = [0, 1, 2].map(|a| (center[a] - r).max(0));
            let hi = [0, 1, 2].map(|a| (center[a] + r).min(self.dims[a] as i64 - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = (x - center[0]).abs() == r
                            || (y - center[1]).abs() == r
                            || (z - center[2]).abs() == r;
                        if !on_shell {
                            continue;
                        }
                        let c = ((z as usize) * self.dims[1] + y as usize) * self.dims[0] + x as usize;
                        for &i in &self.items[self.starts[c]..self.starts[c + 1]] {
                            let d = (points[i] - query).norm_squared();
                            if d < best_d || (d == best_d && i < best) {
                                best_d = d;
                                best = i;
                            }
                        }
                    }
                }
            }
            let covers_all = (0..3).all(|a| lo[a] == 0 && hi[a] == self.dims[a] as i64 - 1);
            if covers_all {
                break;
            }
            if best != usize::MAX {
                // distance from the query to the outside of the searched block
                let mut margin = f64::INFINITY;
                for a in 0..3 {
                    let block_lo = self.origin[a] + (center[a] - r) as f64 * self.cell;
                    let block_hi = self.origin[a] + (center[a] + r + 1) as f64 * self.cell;
                    if center[a] - r > 0 {
                        margin = margin.min(query[a] - block_lo);
                    }
                    if center[a] + r < self.dims[a] as i64 - 1 {
                        margin = margin.min(block_hi - query[a]);
                    }
                }
                if margin > 0.0 && best_d < margin * margin {
                    break;
                }
            }
        }
        best
    }
}

/// Real values attached to the vertices of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(mesh: &TriangleMesh, values: Vec<f64>) -> Result<Self> {
        Self::with_len(mesh.vertex_count(), values)
    }

    pub fn with_len(vertex_count: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != vertex_count {
            return Err(Error::DimensionMismatch {
                what: "scalar field length",
                expected: vertex_count,
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("scalar field value {k} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn constant(mesh: &TriangleMesh, value: f64) -> Self {
        Self { values: vec![value; mesh.vertex_count()] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-face values as the mean of the three vertex values, which is the
    /// linear interpolant evaluated at the face center.
    pub fn face_means(&self, mesh: &TriangleMesh) -> Vec<f64> {
        face_means(mesh.faces(), &self.values)
    }
}

pub fn face_means(faces: &[[usize; 3]], values: &[f64]) -> Vec<f64> {
    faces
        .iter()
        .map(|f| (values[f[0]] + values[f[1]] + values[f[2]]) / 3.0)
        .collect()
}
