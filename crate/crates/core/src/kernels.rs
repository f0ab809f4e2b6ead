//! Isotropic Gaussian kernels, stored as scalars.
//!
//! A kernel is `exp(-r²/2σ₁²) + w·exp(-r²/2σ₂²)` where the second term is
//! optional. Matrix-valued kernels act as this scalar times the identity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<SecondComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondComponent {
    pub sigma: f64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Kernel value and the two radial derivative factors at one pair.
///
/// With `d = x - y`: `∇ₓk = -g1·d` and the Hessian is `g2·d dᵀ - g1·I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms {
    pub k: f64,
    pub g1: f64,
    pub g2: f64,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        let k = Self { sigma, second: None };
        k.validate()?;
        Ok(k)
    }

    pub fn two_scale(sigma: f64, sigma2: f64, weight: f64) -> Result<Self> {
        let k = Self { sigma, second: Some(SecondComponent { sigma: sigma2, weight }) };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel sigma must be positive, got {}", self.sigma)));
        }
        if let Some(s) = self.second {
            if !(s.sigma > 0.0 && s.sigma.is_finite()) {
                return Err(Error::InvalidParameter(format!("second kernel sigma must be positive, got {}", s.sigma)));
            }
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(Error::InvalidParameter(format!("kernel weight must be non-negative, got {}", s.weight)));
            }
        }
        Ok(())
    }

    /// The largest length scale, used to scale tolerances.
    pub fn max_sigma(&self) -> f64 {
        self.second.map_or(self.sigma, |s| s.sigma.max(self.sigma))
    }

    /// Kernel value at squared distance `r2`.
    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        let mut v = (-r2 / (2.0 * self.sigma * self.sigma)).exp();
        if let Some(s) = self.second {
            v += s.weight * (-r2 / (2.0 * s.sigma * s.sigma)).exp();
        }
        v
    }

    #[inline]
    pub fn pair_terms(&self, r2: f64) -> PairTerms {
        let s2 = self.sigma * self.sigma;
        let e = (-r2 / (2.0 * s2)).exp();
        let mut t = PairTerms { k: e, g1: e / s2, g2: e / (s2 * s2) };
        if let Some(s) = self.second {
            let s2 = s.sigma * s.sigma;
            let e = s.weight * (-r2 / (2.0 * s2)).exp();
            t.k += e;
            t.g1 += e / s2;
            t.g2 += e / (s2 * s2);
        }
        t
    }

    #[inline]
    pub fn eval(&self, x: &Vec3, y: &Vec3) -> f64 {
        self.eval_sq((x - y).norm_squared())
    }

    /// Gradient of `eval` with respect to `x`.
    #[inline]
    pub fn gradient(&self, x: &Vec3, y: &Vec3) -> Vec3 {
        let d = x - y;
        -d * self.pair_terms(d.norm_squared()).g1
    }

    pub fn gram_matrix(&self, a: &[Vec3], b: &[Vec3]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }

    /// Symmetric Gram matrix of one point set; only the upper triangle is
    /// evaluated so the result is exactly symmetric.
    pub fn gram_symmetric(&self, a: &[Vec3]) -> DMatrix<f64> {
        let n = a.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            g[(i, i)] = self.eval_sq(0.0);
            for j in i + 1..n {
                let v = self.eval(&a[i], &a[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// `Σ_j K(a_i, b_j) w_j` for each `i`, with 3-vector weights.
    pub fn apply(&self, a: &[Vec3], b: &[Vec3], w: &[Vec3]) -> Vec<Vec3> {
        a.iter()
            .map(|x| b.iter().zip(w).map(|(y, wj)| wj * self.eval(x, y)).sum())
            .collect()
    }
}

/// `Σ_ij wᵢᵀ K(pᵢ, pⱼ) vⱼ`, the RKHS inner product of two vector fields
/// carried by the same points.
pub fn rkhs_inner(kernel: &GaussianKernel, points: &[Vec3], w: &[Vec3], v: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut row = Vec3::zeros();
        for j in 0..points.len() {
            row += v[j] * kernel.eval(&points[i], &points[j]);
        }
        total += w[i].dot(&row);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
            .collect()
    }

    #[test]
    fn analytic_values() {
        let k = GaussianKernel::new(0.7).unwrap();
        let x = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(k.eval(&x, &x), 1.0);
        let y = x + Vec3::new(0.0, 0.7 * 2f64.sqrt(), 0.0);
        assert!((k.eval(&x, &y) - (-1f64).exp()).abs() < 1e-15);
        let two = GaussianKernel::two_scale(1.0, 4.0, 1.0).unwrap();
        assert_eq!(two.eval(&x, &x), 2.0);
    }

    #[test]
    fn gradient_analytic() {
        let s = 1.3;
        let k = GaussianKernel::new(s).unwrap();
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(k.gradient(&x, &x), Vec3::zeros());
        let g = k.gradient(&(x + Vec3::new(s, 0.0, 0.0)), &x);
        assert!((g.x + (-0.5f64).exp() / s).abs() < 1e-15);
        assert_eq!((g.y, g.z), (0.0, 0.0));
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &n in &[1usize, 50, 200] {
            let p = random_points(&mut rng, n, 2.0);
            let k = GaussianKernel::two_scale(0.8, 0.3, 0.5).unwrap();
            let g = k.gram_matrix(&p, &p);
            if n == 1 {
                assert_eq!(g[(0, 0)], 1.5);
            }
            let min = SymmetricEigen::new(g).eigenvalues.min();
            assert!(min >= -1e-10, "{min}");
        }
    }

    #[test]
    fn separated_clusters_decouple() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_points(&mut rng, 10, 1.0);
        let b: Vec<Vec3> = random_points(&mut rng, 10, 1.0).iter().map(|p| p + Vec3::new(100.0, 0.0, 0.0)).collect();
        let g = GaussianKernel::new(1.0).unwrap().gram_matrix(&a, &b);
        assert!(g.iter().all(|&v| v <= 1e-12));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GaussianKernel::new(0.0).is_err());
        assert!(GaussianKernel::new(-1.0).is_err());
        assert!(GaussianKernel::two_scale(1.0, 2.0, -0.5).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(x in prop::array::uniform3(-5.0f64..5.0), y in prop::array::uniform3(-5.0f64..5.0), s in 0.1f64..3.0) {
            let k = GaussianKernel::two_scale(s, 2.0 * s, 0.7).unwrap();
            let (x, y) = (Vec3::from(x), Vec3::from(y));
            prop_assert_eq!(k.eval(&x, &y), k.eval(&y, &x));
        }

        #[test]
        fn gradient_matches_finite_differences(
            x in prop::array::uniform3(-2.0f64..2.0),
            y in prop::array::uniform3(-2.0f64..2.0),
            s in 0.5f64..2.0,
        ) {
            let k = GaussianKernel::two_scale(s, 0.5 * s, 1.0).unwrap();
            let (x, y) = (Vec3::from(x), Vec3::from(y));
            let g = k.gradient(&x, &y);
            let h = 1e-5 * s;
            let mut fd = Vec3::zeros();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                fd[a] = (k.eval(&(x + e), &y) - k.eval(&(x - e), &y)) / (2.0 * h);
            }
            // relative to the gradient scale, which also covers near-zero components
            let scale = g.norm().max(1e-3 / s);
            prop_assert!((g - fd).norm() <= 1e-6 * scale, "{} vs {}", g, fd);
        }
    }
}
