//! Deterministic quadrature on boxes in R^n (n = 1, 2) for integrands of
//! the form e^(-Q(x)) with Q convex-ish: locate the peak by descent on Q,
//! grow a box until the integrand has dropped below ~e^-40 of its peak, and
//! integrate with tensor-product panelled Gauss-Legendre rules.
//!
//! The grids are plain data (`GridNd`) so iterative callers can freeze one
//! grid and reuse it across iterations: the resulting numerical map is then
//! smooth and deterministic in its inputs, which is what lets fixed-point
//! residuals reach 1e-10 and discrete second differences stay clean.

use crate::error::{Error, Result};
use std::sync::{Mutex, OnceLock};

/// Nodes and weights of the `order`-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<Mutex<std::collections::HashMap<usize, (Vec<f64>, Vec<f64>)>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(order)
        .or_insert_with(|| compute_gauss_legendre(order))
        .clone()
}

/// Newton iteration on Legendre polynomials from Chebyshev initial guesses.
fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Panelled Gauss-Legendre rule along one axis.
#[derive(Clone, Debug)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub panels: usize,
    pub order: usize,
}

impl Axis {
    pub fn nodes_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let (xs, ws) = gauss_legendre(self.order);
        let h = (self.hi - self.lo) / self.panels as f64;
        let mut nodes = Vec::with_capacity(self.panels * self.order);
        let mut weights = Vec::with_capacity(self.panels * self.order);
        for p in 0..self.panels {
            let a = self.lo + p as f64 * h;
            let mid = a + 0.5 * h;
            for (x, w) in xs.iter().zip(&ws) {
                nodes.push(mid + 0.5 * h * x);
                weights.push(0.5 * h * w);
            }
        }
        (nodes, weights)
    }
}

/// Tensor-product grid over a box in R^n.
#[derive(Clone, Debug)]
pub struct GridNd {
    pub axes: Vec<Axis>,
}

impl GridNd {
    /// Grid over a box with the same panel count and order on every axis.
    pub fn uniform(bounds: &[(f64, f64)], panels: usize, order: usize) -> Self {
        GridNd {
            axes: bounds
                .iter()
                .map(|&(lo, hi)| Axis { lo, hi, panels, order })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.panels * a.order).product()
    }

    /// Materialized nodes (row-major over axes) and product weights.
    pub fn nodes_weights(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let per_axis: Vec<(Vec<f64>, Vec<f64>)> =
            self.axes.iter().map(|a| a.nodes_weights()).collect();
        match per_axis.len() {
            1 => {
                let (xs, ws) = &per_axis[0];
                (xs.iter().map(|&x| vec![x]).collect(), ws.clone())
            }
            2 => {
                let (xs, wx) = &per_axis[0];
                let (ys, wy) = &per_axis[1];
                let mut nodes = Vec::with_capacity(xs.len() * ys.len());
                let mut weights = Vec::with_capacity(xs.len() * ys.len());
                for (x, wxi) in xs.iter().zip(wx) {
                    for (y, wyi) in ys.iter().zip(wy) {
                        nodes.push(vec![*x, *y]);
                        weights.push(wxi * wyi);
                    }
                }
                (nodes, weights)
            }
            d => panic!("GridNd supports dim 1 and 2, got {d}"),
        }
    }

    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let (nodes, weights) = self.nodes_weights();
        nodes.iter().zip(&weights).map(|(x, w)| w * f(x)).sum()
    }

    /// log of the integral of e^(log_f), evaluated stably.
    pub fn integrate_log(&self, mut log_f: impl FnMut(&[f64]) -> f64) -> f64 {
        let (nodes, weights) = self.nodes_weights();
        let vals: Vec<f64> = nodes.iter().map(|x| log_f(x)).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return f64::NEG_INFINITY;
        }
        let s: f64 = vals.iter().zip(&weights).map(|(v, w)| w * (v - m).exp()).sum();
        m + s.ln()
    }
}

/// Minimize a smooth convex function by gradient descent with backtracking.
/// Good enough for the well-conditioned peak problems that arise here; the
/// 1-D cases converge in a handful of steps.
pub fn minimize_convex(
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut step = 1.0f64;
    for _ in 0..max_iter {
        let g = grad(&x);
        let gnorm = g.iter().map(|c| c * c).sum::<f64>().sqrt();
        if gnorm <= tol {
            break;
        }
        // Backtracking line search along -g.
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            let fc = f(&cand);
            if fc < fx - 0.25 * t * gnorm * gnorm {
                x = cand;
                fx = fc;
                step = (t * 2.0).min(1e6);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

/// Box around `peak` on which `neg_log` has risen by at least `drop` in
/// every axis direction (so the integrand e^(-neg_log) has decayed to
/// e^(-drop) of its peak by the boundary). Assumes level sets of `neg_log`
/// grow along rays from the peak, which holds for convex integrand logs.
pub fn box_for(neg_log: &dyn Fn(&[f64]) -> f64, peak: &[f64], drop: f64) -> Vec<(f64, f64)> {
    let base = neg_log(peak);
    let dim = peak.len();
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut bounds = [0.0f64; 2];
        for (side, sign) in [(0usize, -1.0f64), (1usize, 1.0f64)] {
            let mut t = 1.0f64;
            let mut x = peak.to_vec();
            for _ in 0..200 {
                x[d] = peak[d] + sign * t;
                if neg_log(&x) - base >= drop {
                    break;
                }
                t *= 2.0;
            }
            bounds[side] = peak[d] + sign * t;
        }
        out.push((bounds[0], bounds[1]));
    }
    out
}

/// Build a grid over `bounds` and refine panel counts until the log-integral
/// of e^(log_f) changes by at most `rel_tol` between refinements.
pub fn adaptive_log_grid(
    log_f: &dyn Fn(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    order: usize,
    rel_tol: f64,
) -> Result<(f64, GridNd)> {
    let dim = bounds.len();
    let max_panels = if dim == 1 { 2048 } else { 256 };
    let mut panels = if dim == 1 { 4 } else { 2 };
    let mut prev: Option<f64> = None;
    let mut last_diff = f64::NAN;
    loop {
        let grid = GridNd {
            axes: bounds
                .iter()
                .map(|&(lo, hi)| Axis { lo, hi, panels, order })
                .collect(),
        };
        let val = grid.integrate_log(&mut |x: &[f64]| log_f(x));
        if let Some(p) = prev {
            last_diff = (val - p).abs();
            if last_diff <= rel_tol {
                return Ok((val, grid));
            }
        }
        prev = Some(val);
        if panels >= max_panels {
            return Err(Error::NonConvergence { iterations: panels, residual: last_diff });
        }
        panels *= 2;
    }
}
