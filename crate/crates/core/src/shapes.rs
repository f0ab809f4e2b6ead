//! Parametric test and template surfaces.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::mesh::{TriangleMesh, Vec3};

fn build(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> TriangleMesh {
    TriangleMesh::new(vertices, faces).expect("generated mesh is valid")
}

/// Regular tetrahedron with edge length `edge`, outward-oriented.
pub fn regular_tetrahedron(edge: f64) -> TriangleMesh {
    let s = edge / (2.0 * 2f64.sqrt());
    let v = vec![
        Vec3::new(1.0, 1.0, 1.0) * s,
        Vec3::new(1.0, -1.0, -1.0) * s,
        Vec3::new(-1.0, 1.0, -1.0) * s,
        Vec3::new(-1.0, -1.0, 1.0) * s,
    ];
    build(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
}

/// Subdivided icosahedron projected to a sphere of radius `radius`.
/// Level `l` has `10·4^l + 2` vertices.
pub fn icosphere(level: usize, radius: f64) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
        (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
        (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    for p in v.iter_mut() {
        *p *= radius;
    }
    build(v, faces)
}

/// Concentric-ring triangulation of the unit disk in the xy-plane.
///
/// Ring `r` (1..=rings) carries `6r` vertices at radius `r / rings`; vertex 0
/// is the center. Faces are counter-clockwise seen from +z.
pub fn ring_disk(rings: usize) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
    assert!(rings >= 1);
    let mut uv = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize];
    for r in 1..=rings {
        ring_start.push(uv.len());
        let n = 6 * r;
        let radius = r as f64 / rings as f64;
        for j in 0..n {
            let a = 2.0 * PI * j as f64 / n as f64;
            uv.push([radius * a.cos(), radius * a.sin()]);
        }
    }
    let mut faces = Vec::new();
    for r in 1..=rings {
        let (m, n) = (if r == 1 { 1 } else { 6 * (r - 1) }, 6 * r);
        let (inner, outer) = (ring_start[r - 1], ring_start[r]);
        let inner_idx = |i: usize| inner + i % m;
        let outer_idx = |j: usize| outer + j % n;
        if m == 1 {
            for j in 0..n {
                faces.push([inner, outer_idx(j), outer_idx(j + 1)]);
            }
            continue;
        }
        let (mut i, mut j) = (0, 0);
        while i < m || j < n {
            let next_outer = (j + 1) as f64 / n as f64;
            let next_inner = (i + 1) as f64 / m as f64;
            if j < n && (i == m || next_outer <= next_inner) {
                faces.push([inner_idx(i), outer_idx(j), outer_idx(j + 1)]);
                j += 1;
            } else {
                faces.push([inner_idx(i), outer_idx(j), inner_idx(i + 1)]);
                i += 1;
            }
        }
    }
    (uv, faces)
}

/// Flat disk of radius `radius` in the z = 0 plane.
pub fn flat_disk(rings: usize, radius: f64) -> TriangleMesh {
    let (uv, faces) = ring_disk(rings);
    build(uv.iter().map(|p| Vec3::new(p[0] * radius, p[1] * radius, 0.0)).collect(), faces)
}

/// Cap of the ellipsoid with semi-axes `radii` around the +z pole, spanning
/// polar angles up to `cap_angle` (radians). Vertex count is `1 + 3R(R+1)`
/// for `R = rings`. Normals point away from the ellipsoid center.
pub fn ellipsoid_cap(rings: usize, radii: Vec3, cap_angle: f64) -> TriangleMesh {
    let (uv, faces) = ring_disk(rings);
    let vertices = uv
        .iter()
        .map(|p| {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let theta = rho * cap_angle;
            let phi = p[1].atan2(p[0]);
            Vec3::new(
                radii.x * theta.sin() * phi.cos(),
                radii.y * theta.sin() * phi.sin(),
                radii.z * theta.cos(),
            )
        })
        .collect();
    build(vertices, faces)
}

/// Regular `nx × ny` vertex grid with spacing `h` in the z = 0 plane.
pub fn flat_grid(nx: usize, ny: usize, h: f64) -> TriangleMesh {
    assert!(nx >= 2 && ny >= 2);
    let mut v = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            v.push(Vec3::new(i as f64 * h, j as f64 * h, 0.0));
        }
    }
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let (b, c, d) = (a + 1, a + nx, a + nx + 1);
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    build(v, faces)
}
