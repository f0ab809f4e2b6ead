//! Limited-memory quasi-Newton descent with Armijo backtracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Length of the first step measured in the max-norm of the variables.
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo_c: f64,
    pub max_shrinks: usize,
    /// Stop once the max-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Stop once one iteration lowers the objective by less than this
    /// fraction of its current value.
    pub relative_tolerance: f64,
    /// Number of correction pairs kept; 0 gives plain gradient descent.
    pub memory: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_step: 1e-2,
            shrink: 0.5,
            armijo_c: 1e-4,
            max_shrinks: 30,
            gradient_tolerance: 1e-10,
            relative_tolerance: 1e-9,
            memory: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidParameter("max_iterations must be at least 1".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidParameter("initial_step must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidParameter("shrink must lie in (0, 1)".into()));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidParameter("armijo_c must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective after each accepted iterate, starting with the initial one.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point.
///
/// Evaluation errors during the line search count as rejected steps; an
/// error at the starting point is returned.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &OptimizerConfig) -> Result<OptimizeOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut trace = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if max_abs(&g) <= cfg.gradient_tolerance {
            converged = true;
            break;
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let mut t = 1.0;
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
            for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &d);
                for (di, si) in d.iter_mut().zip(s) {
                    *di += (a - b) * si;
                }
            }
        } else {
            t = cfg.initial_step / max_abs(&d);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            t = cfg.initial_step / max_abs(&d);
        }

        let mut accepted = None;
        for _ in 0..=cfg.max_shrinks {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            if let Ok((ft, gt)) = f(&xt) {
                if ft.is_finite() && ft <= fx + cfg.armijo_c * t * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            t *= cfg.shrink;
        }
        let Some((xn, fn_, gn)) = accepted else {
            line_search_failed = true;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if cfg.memory > 0 && sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        iterations += 1;
        if decrease <= cfg.relative_tolerance * fx.abs() {
            converged = true;
            break;
        }
    }
    if !converged && max_abs(&g) <= cfg.gradient_tolerance {
        converged = true;
    }
    Ok(OptimizeOutcome { x, value: fx, trace, iterations, converged, line_search_failed })
}
