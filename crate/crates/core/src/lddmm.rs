//! Geodesic shooting of control points and momenta, point flows along the
//! resulting path, and the adjoint of the shooting map.
//!
//! The Hamiltonian is `H = ½ Σ_kl α_k·α_l K(c_k, c_l)`, so
//!
//! ```text
//! dc_k/dt = Σ_l K(c_k, c_l) α_l
//! dα_k/dt = -Σ_l (α_k·α_l) ∇₁K(c_k, c_l)
//! ```
//!
//! integrated with the explicit midpoint rule on a uniform grid over [0, 1].

use crate::error::{Error, Result};
use crate::kernels::GaussianKernel;
use crate::mesh::{TriangleMesh, Vec3};

/// Control points with attached momentum vectors; parameterizes the initial
/// velocity field `v₀(x) = Σ_k K(x, c_k) α_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialMomenta {
    pub control_points: Vec<Vec3>,
    pub momenta: Vec<Vec3>,
    pub kernel: GaussianKernel,
}

impl InitialMomenta {
    pub fn new(control_points: Vec<Vec3>, momenta: Vec<Vec3>, kernel: GaussianKernel) -> Result<Self> {
        kernel.validate()?;
        if control_points.is_empty() {
            return Err(Error::InvalidParameter("momenta need at least one control point".into()));
        }
        if control_points.len() != momenta.len() {
            return Err(Error::DimensionMismatch {
                what: "momenta count",
                expected: control_points.len(),
                got: momenta.len(),
            });
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !control_points.iter().all(finite) || !momenta.iter().all(finite) {
            return Err(Error::InvalidParameter("momenta contain non-finite entries".into()));
        }
        Ok(Self { control_points, momenta, kernel })
    }

    pub fn zeros(control_points: Vec<Vec3>, kernel: GaussianKernel) -> Result<Self> {
        let n = control_points.len();
        Self::new(control_points, vec![Vec3::zeros(); n], kernel)
    }

    pub fn len(&self) -> usize {
        self.momenta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.momenta.is_empty()
    }

    /// Same control points and kernel, different momenta.
    pub fn with_momenta(&self, momenta: Vec<Vec3>) -> Result<Self> {
        Self::new(self.control_points.clone(), momenta, self.kernel)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            control_points: self.control_points.clone(),
            momenta: self.momenta.iter().map(|a| a * c).collect(),
            kernel: self.kernel,
        }
    }

    /// Momenta flattened as `[α_0x, α_0y, α_0z, α_1x, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.momenta.iter().flat_map(|a| [a.x, a.y, a.z]).collect()
    }

    /// RKHS norm squared `Σ_kl α_kᵀ K(c_k, c_l) α_l`.
    pub fn energy(&self) -> f64 {
        deformation_energy(self)
    }

    /// Velocity field `v₀` evaluated at `x`.
    pub fn velocity(&self, x: &Vec3) -> Vec3 {
        velocity(&self.kernel, &self.control_points, &self.momenta, x)
    }
}

pub fn deformation_energy(v0: &InitialMomenta) -> f64 {
    instantaneous_energy(&v0.kernel, &v0.control_points, &v0.momenta)
}

fn instantaneous_energy(kernel: &GaussianKernel, points: &[Vec3], momenta: &[Vec3]) -> f64 {
    let n = points.len();
    let k0 = kernel.eval_sq(0.0);
    let mut e = 0.0;
    for i in 0..n {
        e += k0 * momenta[i].norm_squared();
        for j in i + 1..n {
            e += 2.0 * kernel.eval(&points[i], &points[j]) * momenta[i].dot(&momenta[j]);
        }
    }
    e
}

#[inline]
fn velocity(kernel: &GaussianKernel, points: &[Vec3], momenta: &[Vec3], x: &Vec3) -> Vec3 {
    let mut v = Vec3::zeros();
    for (c, a) in points.iter().zip(momenta) {
        v += a * kernel.eval(c, x);
    }
    v
}

/// Position and momentum of every control point at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub points: Vec<Vec3>,
    pub momenta: Vec<Vec3>,
}

impl State {
    fn axpy(&self, h: f64, d: &State) -> State {
        State {
            points: self.points.iter().zip(&d.points).map(|(p, q)| p + q * h).collect(),
            momenta: self.momenta.iter().zip(&d.momenta).map(|(p, q)| p + q * h).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.points.iter().chain(&self.momenta).all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn zeros(n: usize) -> State {
        State { points: vec![Vec3::zeros(); n], momenta: vec![Vec3::zeros(); n] }
    }
}

/// Right-hand side of the Hamiltonian system.
fn hamiltonian_rhs(kernel: &GaussianKernel, s: &State) -> State {
    let n = s.points.len();
    let k0 = kernel.eval_sq(0.0);
    let mut out = State::zeros(n);
    for k in 0..n {
        out.points[k] += s.momenta[k] * k0;
        for l in k + 1..n {
            let d = s.points[k] - s.points[l];
            let t = kernel.pair_terms(d.norm_squared());
            out.points[k] += s.momenta[l] * t.k;
            out.points[l] += s.momenta[k] * t.k;
            let f = d * (t.g1 * s.momenta[k].dot(&s.momenta[l]));
            out.momenta[k] += f;
            out.momenta[l] -= f;
        }
    }
    out
}

/// Transposed Jacobian of `hamiltonian_rhs` at `s` applied to `adj`.
fn hamiltonian_vjp(kernel: &GaussianKernel, s: &State, adj: &State) -> State {
    let n = s.points.len();
    let k0 = kernel.eval_sq(0.0);
    let mut out = State::zeros(n);
    let (c, a) = (&s.points, &s.momenta);
    let (ac, aa) = (&adj.points, &adj.momenta);
    for k in 0..n {
        out.momenta[k] += ac[k] * k0;
        for l in k + 1..n {
            let d = c[k] - c[l];
            let t = kernel.pair_terms(d.norm_squared());

            out.momenta[l] += ac[k] * t.k;
            out.momenta[k] += ac[l] * t.k;
            let gc = d * (-t.g1 * (ac[k].dot(&a[l]) + ac[l].dot(&a[k])));
            out.points[k] += gc;
            out.points[l] -= gc;

            let da = aa[k] - aa[l];
            let s_ = t.g1 * da.dot(&d);
            out.momenta[k] += a[l] * s_;
            out.momenta[l] += a[k] * s_;
            let jv = (da * t.g1 - d * (t.g2 * d.dot(&da))) * a[k].dot(&a[l]);
            out.points[k] += jv;
            out.points[l] -= jv;
        }
    }
    out
}

/// Discrete geodesic: the states at every grid time and at every midpoint.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    kernel: GaussianKernel,
    states: Vec<State>,
    mids: Vec<State>,
}

/// Integrates the Hamiltonian system from `v0` over [0, 1] with `steps`
/// midpoint steps.
pub fn shoot(v0: &InitialMomenta, steps: usize) -> Result<GeodesicPath> {
    if steps == 0 {
        return Err(Error::InvalidParameter("shooting needs at least one step".into()));
    }
    let kernel = v0.kernel;
    let h = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut mids = Vec::with_capacity(steps);
    states.push(State { points: v0.control_points.clone(), momenta: v0.momenta.clone() });
    for step in 0..steps {
        let s = states.last().unwrap();
        let mid = s.axpy(0.5 * h, &hamiltonian_rhs(&kernel, s));
        let next = s.axpy(h, &hamiltonian_rhs(&kernel, &mid));
        if !mid.is_finite() || !next.is_finite() {
            return Err(Error::ShootingDiverged { step: step + 1 });
        }
        mids.push(mid);
        states.push(next);
    }
    Ok(GeodesicPath { kernel, states, mids })
}

impl GeodesicPath {
    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    pub fn steps(&self) -> usize {
        self.mids.len()
    }

    /// Uniform grid `t_0 = 0, …, t_T = 1`.
    pub fn time_grid(&self) -> Vec<f64> {
        let t = self.steps() as f64;
        (0..=self.steps()).map(|i| i as f64 / t).collect()
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn endpoint(&self) -> &State {
        self.states.last().unwrap()
    }

    /// `Σ_kl α_k(t)ᵀ K(c_k(t), c_l(t)) α_l(t)` at every grid time.
    pub fn energies(&self) -> Vec<f64> {
        self.states
            .iter()
            .map(|s| instantaneous_energy(&self.kernel, &s.points, &s.momenta))
            .collect()
    }

    /// Advects points through `v_t` from t = 0 to t = 1.
    pub fn flow_points(&self, points: &[Vec3]) -> Result<Vec<Vec3>> {
        let h = 1.0 / self.steps() as f64;
        let k = &self.kernel;
        let mut x = points.to_vec();
        for (step, (s, mid)) in self.states.iter().zip(&self.mids).enumerate() {
            for p in x.iter_mut() {
                let pm = *p + velocity(k, &s.points, &s.momenta, p) * (0.5 * h);
                *p += velocity(k, &mid.points, &mid.momenta, &pm) * h;
            }
            check_finite(&x, step)?;
        }
        Ok(x)
    }

    /// Integrates the same velocity backward from t = 1 to t = 0.
    pub fn flow_points_inverse(&self, points: &[Vec3]) -> Result<Vec<Vec3>> {
        let h = 1.0 / self.steps() as f64;
        let k = &self.kernel;
        let mut x = points.to_vec();
        for step in (0..self.steps()).rev() {
            let (s, mid) = (&self.states[step + 1], &self.mids[step]);
            for p in x.iter_mut() {
                let pm = *p - velocity(k, &s.points, &s.momenta, p) * (0.5 * h);
                *p -= velocity(k, &mid.points, &mid.momenta, &pm) * h;
            }
            check_finite(&x, step)?;
        }
        Ok(x)
    }

    /// Gradient with respect to the initial momenta of a loss that depends
    /// on the final control-point positions, given `∂L/∂c_k(1)`.
    pub fn momenta_gradient(&self, d_end_points: &[Vec3]) -> Vec<Vec3> {
        let n = self.endpoint().points.len();
        assert_eq!(d_end_points.len(), n);
        let h = 1.0 / self.steps() as f64;
        let mut p = State { points: d_end_points.to_vec(), momenta: vec![Vec3::zeros(); n] };
        for step in (0..self.steps()).rev() {
            let q = scale(&hamiltonian_vjp(&self.kernel, &self.mids[step], &p), h);
            let back = hamiltonian_vjp(&self.kernel, &self.states[step], &q);
            p = p.axpy(1.0, &q).axpy(0.5 * h, &back);
        }
        p.momenta
    }
}

fn scale(s: &State, h: f64) -> State {
    State {
        points: s.points.iter().map(|v| v * h).collect(),
        momenta: s.momenta.iter().map(|v| v * h).collect(),
    }
}

fn check_finite(x: &[Vec3], step: usize) -> Result<()> {
    if x.iter().all(|v| v.iter().all(|c| c.is_finite())) {
        Ok(())
    } else {
        Err(Error::ShootingDiverged { step: step + 1 })
    }
}

/// Deforms `template` by the flow of `v0`; faces are unchanged.
pub fn deform_mesh(template: &TriangleMesh, v0: &InitialMomenta, steps: usize) -> Result<TriangleMesh> {
    let path = shoot(v0, steps)?;
    template.with_vertices(path.flow_points(template.vertices())?)
}

/// Number of faces whose normal flips between `before` and `after`, or whose
/// area collapses to zero.
pub fn inverted_faces(before: &TriangleMesh, after_vertices: &[Vec3]) -> usize {
    before
        .faces()
        .iter()
        .zip(before.face_geometries())
        .filter(|(f, g)| {
            let (a, b, c) = (after_vertices[f[0]], after_vertices[f[1]], after_vertices[f[2]]);
            let n = (b - a).cross(&(c - a));
            !(n.dot(&g.normal) > 0.0)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
            .collect()
    }

    fn random_momenta(seed: u64, n: usize, sigma: f64, amp: f64) -> InitialMomenta {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_vecs(&mut rng, n, sigma);
        let a = random_vecs(&mut rng, n, amp);
        InitialMomenta::new(c, a, GaussianKernel::new(sigma).unwrap()).unwrap()
    }

    #[test]
    fn zero_momenta_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_vecs(&mut rng, 6, 1.0);
        let v0 = InitialMomenta::zeros(c.clone(), GaussianKernel::new(1.0).unwrap()).unwrap();
        let path = shoot(&v0, 10).unwrap();
        for s in path.states() {
            assert_eq!(s.points, c);
            assert!(s.momenta.iter().all(|a| *a == Vec3::zeros()));
        }
        let x = random_vecs(&mut rng, 20, 3.0);
        assert_eq!(path.flow_points(&x).unwrap(), x);
        assert_eq!(path.flow_points_inverse(&x).unwrap(), x);
        assert_eq!(deformation_energy(&v0), 0.0);
    }

    #[test]
    fn single_particle_straight_line() {
        let k = GaussianKernel::two_scale(1.0, 3.0, 0.5).unwrap();
        let c0 = Vec3::new(0.5, -1.0, 2.0);
        let a = Vec3::new(0.3, 0.1, -0.2);
        let v0 = InitialMomenta::new(vec![c0], vec![a], k).unwrap();
        let path = shoot(&v0, 7).unwrap();
        for (t, s) in path.time_grid().iter().zip(path.states()) {
            assert!((s.points[0] - (c0 + a * 1.5 * *t)).norm() < 1e-14);
            assert_eq!(s.momenta[0], a);
        }
        let x = path.endpoint().points[0];
        let inv = path.flow_points_inverse(&[x]).unwrap();
        assert!((inv[0] - (x - a * 1.5)).norm() < 1e-14);
        let one = InitialMomenta::new(vec![c0], vec![a], GaussianKernel::new(2.0).unwrap()).unwrap();
        assert!((one.energy() - a.norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn self_convergence() {
        let v0 = random_momenta(2, 5, 1.0, 0.5);
        let coarse = shoot(&v0, 20).unwrap();
        let fine = shoot(&v0, 2000).unwrap();
        for (a, b) in coarse.endpoint().points.iter().zip(&fine.endpoint().points) {
            assert!((a - b).norm() <= 1e-4, "{}", (a - b).norm());
        }
    }

    #[test]
    fn convergence_order_is_two() {
        // one particle plus a weak perturbing neighbour
        let v0 = InitialMomenta::new(
            vec![Vec3::zeros(), Vec3::new(0.3, 0.4, -0.2)],
            vec![Vec3::new(0.8, 0.2, 0.0), Vec3::new(-0.1, 0.05, 0.1)],
            GaussianKernel::new(1.0).unwrap(),
        )
        .unwrap();
        let reference = shoot(&v0, 4096).unwrap().endpoint().points.clone();
        let err = |t: usize| {
            let p = shoot(&v0, t).unwrap();
            p.endpoint().points.iter().zip(&reference).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(16), err(32), err(64));
        for order in [(e1 / e2).log2(), (e2 / e3).log2()] {
            assert!((1.7..=2.3).contains(&order), "order {order}");
        }
    }

    #[test]
    fn energy_is_conserved() {
        let v0 = random_momenta(4, 8, 1.0, 0.6);
        let e = shoot(&v0, 200).unwrap().energies();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let sd = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
        assert!(sd / mean <= 5e-3, "{}", sd / mean);
        assert!((e[0] - v0.energy()).abs() < 1e-12 * e[0]);
    }

    #[test]
    fn control_points_follow_their_own_flow() {
        let v0 = random_momenta(5, 10, 1.0, 0.5);
        let path = shoot(&v0, 20).unwrap();
        let flowed = path.flow_points(&v0.control_points).unwrap();
        for (a, b) in flowed.iter().zip(&path.endpoint().points) {
            assert!((a - b).norm() <= 1e-10);
        }
    }

    #[test]
    fn far_points_do_not_move() {
        let v0 = random_momenta(6, 10, 1.0, 0.5);
        let path = shoot(&v0, 20).unwrap();
        let far = vec![Vec3::new(50.0, 0.0, 0.0), Vec3::new(0.0, -40.0, 30.0)];
        for (a, b) in path.flow_points(&far).unwrap().iter().zip(&far) {
            assert!((a - b).norm() <= 1e-10);
        }
    }

    #[test]
    fn forward_then_inverse_is_identity() {
        let v0 = random_momenta(7, 10, 1.0, 0.5);
        let path = shoot(&v0, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = random_vecs(&mut rng, 100, 1.5);
        let back = path.flow_points_inverse(&path.flow_points(&x).unwrap()).unwrap();
        let worst = x.iter().zip(&back).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let k = GaussianKernel::two_scale(1.0, 0.6, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 5;
        let s = State { points: random_vecs(&mut rng, n, 1.0), momenta: random_vecs(&mut rng, n, 0.5) };
        let adj = State { points: random_vecs(&mut rng, n, 1.0), momenta: random_vecs(&mut rng, n, 1.0) };
        let g = hamiltonian_vjp(&k, &s, &adj);
        let dot = |a: &State, b: &State| -> f64 {
            a.points.iter().zip(&b.points).map(|(x, y)| x.dot(y)).sum::<f64>()
                + a.momenta.iter().zip(&b.momenta).map(|(x, y)| x.dot(y)).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..n {
            for c in 0..3 {
                for which in 0..2 {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    let (vp, vm) = if which == 0 { (&mut sp.points, &mut sm.points) } else { (&mut sp.momenta, &mut sm.momenta) };
                    vp[i][c] += h;
                    vm[i][c] -= h;
                    let fd = (dot(&adj, &hamiltonian_rhs(&k, &sp)) - dot(&adj, &hamiltonian_rhs(&k, &sm))) / (2.0 * h);
                    let an = if which == 0 { g.points[i][c] } else { g.momenta[i][c] };
                    assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()), "{which} {i} {c}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let v0 = random_momenta(10, 6, 1.0, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let target = random_vecs(&mut rng, 6, 1.0);
        let loss = |v: &InitialMomenta| -> f64 {
            let p = shoot(v, 8).unwrap();
            p.endpoint().points.iter().zip(&target).map(|(a, b)| (a - b).norm_squared()).sum()
        };
        let path = shoot(&v0, 8).unwrap();
        let d_end: Vec<Vec3> = path.endpoint().points.iter().zip(&target).map(|(a, b)| (a - b) * 2.0).collect();
        let g = path.momenta_gradient(&d_end);
        let h = 1e-6;
        for i in 0..6 {
            for c in 0..3 {
                let mut p = v0.clone();
                let mut m = v0.clone();
                p.momenta[i][c] += h;
                m.momenta[i][c] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g[i][c]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i][c]);
            }
        }
    }
}
