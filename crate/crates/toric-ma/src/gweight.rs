//! Weight functions g on the moment polytope.
//!
//! The measure-side weight g >= 0 enters every weighted Monge-Ampere
//! object through integrals of g (optionally times an affine function)
//! over convex subsets of P and over segments. Four kinds are supported:
//! constants, exponentials of linear functions e^(<xi,p>)/C (the
//! vector-field weights), step indicators 1_{p >= lambda} (superlevel
//! weights), and tabulated grids with multilinear interpolation.
//!
//! Constant and step integrals are exact rational volumes; exp-linear
//! integrals use the closed-form divided-difference formula per simplex;
//! table integrals fall back to per-simplex Gauss quadrature.

use crate::polytope::{integrate_exp_linear_over_simplex, LatticePolytope};
use crate::quadrature::gauss_legendre;
use crate::rational::{rat, to_f64, to_f64_vec, ConvexBody, Rat};
use num::Zero;

#[derive(Clone, Debug)]
enum GKind {
    Constant(f64),
    /// g(p) = exp(<xi, p> - log_norm).
    ExpLinear { xi: Vec<f64>, log_norm: f64 },
    /// g(p) = 1 if p >= lambda componentwise, else 0.
    Step { lambda: Vec<f64> },
    /// Multilinear interpolation of values on a regular grid over a box.
    Table { lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, values: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct GWeight {
    kind: GKind,
}

impl GWeight {
    pub fn one() -> Self {
        GWeight { kind: GKind::Constant(1.0) }
    }

    pub fn constant(c: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite());
        GWeight { kind: GKind::Constant(c) }
    }

    /// Unnormalized g(p) = e^(<xi, p>).
    pub fn exp_linear_raw(xi: Vec<f64>) -> Self {
        GWeight { kind: GKind::ExpLinear { xi, log_norm: 0.0 } }
    }

    /// g(p) = e^(<xi, p>)/C with C chosen so that g dnu is a probability
    /// measure on P (nu = normalized Lebesgue on P).
    pub fn exp_linear_normalized(xi: Vec<f64>, p: &LatticePolytope) -> Self {
        let zero_moment = vec![0u32; p.dim()];
        let c = p.integrate_exp_linear(&xi, &zero_moment) / p.volume();
        GWeight { kind: GKind::ExpLinear { xi, log_norm: c.ln() } }
    }

    /// g(p) = e^(<xi, p> - log_norm) with an explicitly chosen log
    /// normalizer (used by discrete quantized normalizations that pin
    /// the weight's lattice sum rather than its integral).
    pub fn exp_linear_with_log_norm(xi: Vec<f64>, log_norm: f64) -> Self {
        assert!(log_norm.is_finite());
        GWeight { kind: GKind::ExpLinear { xi, log_norm } }
    }

    pub fn step(lambda: Vec<f64>) -> Self {
        GWeight { kind: GKind::Step { lambda } }
    }

    /// Tabulate `f` on a `shape` grid over the bounding box of P.
    pub fn table_sampling(
        f: impl Fn(&[f64]) -> f64,
        p: &LatticePolytope,
        shape: Vec<usize>,
    ) -> Self {
        let boxes = p.bounding_box();
        let lo: Vec<f64> = boxes.iter().map(|b| b.0).collect();
        let hi: Vec<f64> = boxes.iter().map(|b| b.1).collect();
        assert_eq!(shape.len(), lo.len());
        assert!(shape.iter().all(|&s| s >= 2));
        let mut values = Vec::new();
        match shape.len() {
            1 => {
                for i in 0..shape[0] {
                    let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (shape[0] - 1) as f64;
                    values.push(f(&[x]));
                }
            }
            2 => {
                for i in 0..shape[0] {
                    for j in 0..shape[1] {
                        let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (shape[0] - 1) as f64;
                        let y = lo[1] + (hi[1] - lo[1]) * j as f64 / (shape[1] - 1) as f64;
                        values.push(f(&[x, y]));
                    }
                }
            }
            d => panic!("table weights cover n = 1, 2, got {d}"),
        }
        assert!(values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        GWeight { kind: GKind::Table { lo, hi, shape, values } }
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        match &self.kind {
            GKind::Constant(c) => *c,
            GKind::ExpLinear { xi, log_norm } => {
                let e: f64 = xi.iter().zip(p).map(|(a, b)| a * b).sum();
                (e - log_norm).exp()
            }
            GKind::Step { lambda } => {
                if lambda.iter().zip(p).all(|(l, x)| x >= l) {
                    1.0
                } else {
                    0.0
                }
            }
            GKind::Table { lo, hi, shape, values } => {
                table_eval(lo, hi, shape, values, p)
            }
        }
    }

    /// int_body g(p) dp.
    pub fn integral_over_body(&self, body: &ConvexBody) -> f64 {
        match &self.kind {
            GKind::Constant(c) => c * to_f64(&body.volume()),
            GKind::ExpLinear { xi, log_norm } => {
                let zero_moment = vec![0u32; body.dim];
                let scale = (-log_norm).exp();
                body.triangulate()
                    .iter()
                    .map(|t| {
                        let verts: Vec<Vec<f64>> = t.iter().map(|v| to_f64_vec(v)).collect();
                        integrate_exp_linear_over_simplex(&verts, xi, &zero_moment)
                    })
                    .sum::<f64>()
                    * scale
            }
            GKind::Step { lambda } => to_f64(&clip_to_superlevel(body, lambda).volume()),
            GKind::Table { .. } => self.quadrature_over_body(body, |_| 1.0),
        }
    }

    /// int_body g(p) (<lin, p> + cst) dp.
    pub fn integral_affine_over_body(&self, body: &ConvexBody, lin: &[f64], cst: f64) -> f64 {
        match &self.kind {
            GKind::Constant(c) => {
                let (vol, first) = body_volume_and_first_moments(body);
                c * (lin.iter().zip(&first).map(|(a, b)| a * b).sum::<f64>() + cst * vol)
            }
            GKind::ExpLinear { xi, log_norm } => {
                let scale = (-log_norm).exp();
                let tris = body.triangulate();
                let tri_f64: Vec<Vec<Vec<f64>>> = tris
                    .iter()
                    .map(|t| t.iter().map(|v| to_f64_vec(v)).collect())
                    .collect();
                let mut acc = 0.0;
                let zero_moment = vec![0u32; body.dim];
                for t in &tri_f64 {
                    acc += cst * integrate_exp_linear_over_simplex(t, xi, &zero_moment);
                    for (d, &ld) in lin.iter().enumerate() {
                        if ld != 0.0 {
                            let mut m = zero_moment.clone();
                            m[d] = 1;
                            acc += ld * integrate_exp_linear_over_simplex(t, xi, &m);
                        }
                    }
                }
                acc * scale
            }
            GKind::Step { lambda } => {
                let clipped = clip_to_superlevel(body, lambda);
                let (vol, first) = body_volume_and_first_moments(&clipped);
                lin.iter().zip(&first).map(|(a, b)| a * b).sum::<f64>() + cst * vol
            }
            GKind::Table { .. } => self.quadrature_over_body(body, |p| {
                lin.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + cst
            }),
        }
    }

    /// int over the segment [a, b] of g with respect to arclength.
    pub fn integral_over_segment(&self, a: &[f64], b: &[f64]) -> f64 {
        let len = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if len == 0.0 {
            return 0.0;
        }
        match &self.kind {
            GKind::Constant(c) => c * len,
            GKind::ExpLinear { xi, log_norm } => {
                let ta: f64 = xi.iter().zip(a).map(|(u, v)| u * v).sum();
                let tb: f64 = xi.iter().zip(b).map(|(u, v)| u * v).sum();
                len * crate::expdd::exp_dd(&[ta, tb]) * (-log_norm).exp()
            }
            GKind::Step { lambda } => {
                // Fraction of [0,1] where a + t(b-a) >= lambda, an interval.
                let (mut t_lo, mut t_hi) = (0.0f64, 1.0f64);
                for d in 0..a.len() {
                    let da = a[d] - lambda[d];
                    let db = b[d] - lambda[d];
                    // da + t (db - da) >= 0.
                    let slope = db - da;
                    if slope.abs() < 1e-300 {
                        if da < 0.0 {
                            return 0.0;
                        }
                    } else {
                        let t0 = -da / slope;
                        if slope > 0.0 {
                            t_lo = t_lo.max(t0);
                        } else {
                            t_hi = t_hi.min(t0);
                        }
                    }
                }
                if t_hi <= t_lo {
                    0.0
                } else {
                    len * (t_hi - t_lo)
                }
            }
            GKind::Table { .. } => {
                let (xs, ws) = gauss_legendre(16);
                let mut acc = 0.0;
                for (x, w) in xs.iter().zip(&ws) {
                    let t = 0.5 * (x + 1.0);
                    let p: Vec<f64> =
                        a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect();
                    acc += 0.5 * w * self.eval(&p);
                }
                acc * len
            }
        }
    }

    /// A certified lower bound of g on P (exact for constant, exp-linear,
    /// and step; a grid lower bound for tables).
    pub fn lower_bound_on(&self, p: &LatticePolytope) -> f64 {
        match &self.kind {
            GKind::Constant(c) => *c,
            GKind::ExpLinear { xi, log_norm } => {
                // e^linear is minimized over P at a vertex.
                p.vertices()
                    .iter()
                    .map(|v| xi.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() - log_norm)
                    .fold(f64::INFINITY, f64::min)
                    .exp()
            }
            GKind::Step { lambda } => {
                let inside = p
                    .vertices()
                    .iter()
                    .all(|v| lambda.iter().zip(v).all(|(l, x)| x >= l));
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
            GKind::Table { values, .. } => {
                values.iter().cloned().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Per-simplex Gauss quadrature of g(p) * extra(p) (table weights).
    fn quadrature_over_body(&self, body: &ConvexBody, extra: impl Fn(&[f64]) -> f64) -> f64 {
        let (xs, ws) = gauss_legendre(12);
        let mut acc = 0.0;
        match body.dim {
            1 => {
                if body.verts.len() < 2 {
                    return 0.0;
                }
                let a = to_f64(&body.verts[0][0]);
                let b = to_f64(&body.verts[1][0]);
                for (x, w) in xs.iter().zip(&ws) {
                    let t = a + 0.5 * (x + 1.0) * (b - a);
                    acc += 0.5 * (b - a) * w * self.eval(&[t]) * extra(&[t]);
                }
            }
            2 => {
                for tri in body.triangulate() {
                    let v: Vec<Vec<f64>> = tri.iter().map(|t| to_f64_vec(t)).collect();
                    let det = ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
                        - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]))
                        .abs();
                    // Duffy map of the unit square onto the triangle.
                    for (u, wu) in xs.iter().zip(&ws) {
                        let uu = 0.5 * (u + 1.0);
                        for (s, wsq) in xs.iter().zip(&ws) {
                            let ss = 0.5 * (s + 1.0);
                            let l1 = uu * (1.0 - ss);
                            let l2 = uu * ss;
                            let p = [
                                v[0][0] + l1 * (v[1][0] - v[0][0]) + l2 * (v[2][0] - v[0][0]),
                                v[0][1] + l1 * (v[1][1] - v[0][1]) + l2 * (v[2][1] - v[0][1]),
                            ];
                            let jac = det * uu * 0.25;
                            acc += wu * wsq * jac * self.eval(&p) * extra(&p);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        acc
    }
}

fn clip_to_superlevel(body: &ConvexBody, lambda: &[f64]) -> ConvexBody {
    let mut clipped = body.clone();
    for (d, &l) in lambda.iter().enumerate() {
        // p_d >= l written as <-e_d, p> <= -l.
        let mut normal = vec![Rat::zero(); body.dim];
        normal[d] = -Rat::from_integer(1.into());
        clipped = clipped.clip(&normal, &-rat(l));
        if clipped.is_empty() {
            break;
        }
    }
    clipped
}

/// (volume, [int p_d dp]) of a body, exactly, converted to f64 at the end.
fn body_volume_and_first_moments(body: &ConvexBody) -> (f64, Vec<f64>) {
    let dim = body.dim;
    let mut vol = Rat::zero();
    let mut first = vec![Rat::zero(); dim];
    let denom = Rat::from_integer(((dim + 1) as i64).into());
    for t in body.triangulate() {
        let v = ConvexBody { dim, verts: t.clone() }.volume();
        for d in 0..dim {
            let centroid_d: Rat = t.iter().map(|p| p[d].clone()).sum::<Rat>() / denom.clone();
            first[d] += &v * centroid_d;
        }
        vol += v;
    }
    (to_f64(&vol), to_f64_vec(&first))
}

fn table_eval(lo: &[f64], hi: &[f64], shape: &[usize], values: &[f64], p: &[f64]) -> f64 {
    let mut idx = Vec::with_capacity(p.len());
    let mut frac = Vec::with_capacity(p.len());
    for d in 0..p.len() {
        let cells = (shape[d] - 1) as f64;
        let t = ((p[d] - lo[d]) / (hi[d] - lo[d]) * cells).clamp(0.0, cells);
        let i = (t.floor() as usize).min(shape[d] - 2);
        idx.push(i);
        frac.push(t - i as f64);
    }
    match p.len() {
        1 => {
            let (i, t) = (idx[0], frac[0]);
            values[i] * (1.0 - t) + values[i + 1] * t
        }
        2 => {
            let (i, j) = (idx[0], idx[1]);
            let (t, s) = (frac[0], frac[1]);
            let at = |a: usize, b: usize| values[a * shape[1] + b];
            at(i, j) * (1.0 - t) * (1.0 - s)
                + at(i + 1, j) * t * (1.0 - s)
                + at(i, j + 1) * (1.0 - t) * s
                + at(i + 1, j + 1) * t * s
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat_vec;
    use approx::assert_relative_eq;

    fn interval_body(a: f64, b: f64) -> ConvexBody {
        ConvexBody::hull(1, &[rat_vec(&[a]), rat_vec(&[b])])
    }

    fn square_body() -> ConvexBody {
        ConvexBody::hull(
            2,
            &[
                rat_vec(&[0.0, 0.0]),
                rat_vec(&[1.0, 0.0]),
                rat_vec(&[1.0, 1.0]),
                rat_vec(&[0.0, 1.0]),
            ],
        )
    }

    #[test]
    fn constant_integrals() {
        let g = GWeight::constant(3.0);
        assert_relative_eq!(g.integral_over_body(&square_body()), 3.0, max_relative = 1e-15);
        // int 3 (2 p_1 + 1) over [0,1]: 3 (2 * 1/2 + 1) = 6.
        assert_relative_eq!(
            g.integral_affine_over_body(&interval_body(0.0, 1.0), &[2.0], 1.0),
            6.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn exp_linear_integrals() {
        let e = std::f64::consts::E;
        let g = GWeight::exp_linear_raw(vec![1.0]);
        assert_relative_eq!(
            g.integral_over_body(&interval_body(-1.0, 1.0)),
            e - 1.0 / e,
            max_relative = 1e-13
        );
        // int_0^1 p e^p dp = 1.
        assert_relative_eq!(
            g.integral_affine_over_body(&interval_body(0.0, 1.0), &[1.0], 0.0),
            1.0,
            max_relative = 1e-13
        );
        // Normalized against P: the weight integrates to 1 in dnu.
        let p = LatticePolytope::p2_anticanonical();
        let gn = GWeight::exp_linear_normalized(vec![0.4, -0.3], &p);
        let total = gn.integral_over_body(p.body()) / p.volume();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn step_integrals_are_exact_volumes() {
        let g = GWeight::step(vec![0.0]);
        assert_relative_eq!(
            g.integral_over_body(&interval_body(-1.0, 1.0)),
            1.0,
            max_relative = 1e-15
        );
        let g2 = GWeight::step(vec![0.25, 0.25]);
        assert_relative_eq!(
            g2.integral_over_body(&square_body()),
            0.5625,
            max_relative = 1e-15
        );
        assert_eq!(g2.eval(&[0.3, 0.3]), 1.0);
        assert_eq!(g2.eval(&[0.3, 0.2]), 0.0);
    }

    #[test]
    fn segment_integrals() {
        let a = [0.0, 0.0];
        let b = [1.0, 1.0];
        let len = 2.0f64.sqrt();
        assert_relative_eq!(
            GWeight::one().integral_over_segment(&a, &b),
            len,
            max_relative = 1e-15
        );
        let g = GWeight::exp_linear_raw(vec![1.0, 0.0]);
        assert_relative_eq!(
            g.integral_over_segment(&a, &b),
            len * (std::f64::consts::E - 1.0),
            max_relative = 1e-13
        );
        let s = GWeight::step(vec![0.5, 0.0]);
        assert_relative_eq!(s.integral_over_segment(&a, &b), len / 2.0, max_relative = 1e-13);
    }

    #[test]
    fn table_reproduces_smooth_weights() {
        let p = LatticePolytope::unit_square();
        let flat = GWeight::table_sampling(|_| 2.0, &p, vec![3, 3]);
        assert_relative_eq!(flat.eval(&[0.3, 0.9]), 2.0, max_relative = 1e-14);
        assert_relative_eq!(
            flat.integral_over_body(p.body()),
            2.0,
            max_relative = 1e-12
        );
        // A fine table of e^x approximates the closed form.
        let gref = GWeight::exp_linear_raw(vec![1.0, 0.0]);
        let tab = GWeight::table_sampling(|x| x[0].exp(), &p, vec![201, 3]);
        let a = tab.integral_over_body(p.body());
        let b = gref.integral_over_body(p.body());
        assert_relative_eq!(a, b, max_relative = 1e-5);
    }

    #[test]
    fn lower_bounds() {
        let p = LatticePolytope::interval(-1, 1);
        let g = GWeight::exp_linear_raw(vec![1.0]);
        assert_relative_eq!(g.lower_bound_on(&p), (-1.0f64).exp(), max_relative = 1e-15);
        assert_eq!(GWeight::step(vec![0.0]).lower_bound_on(&p), 0.0);
        assert_eq!(GWeight::step(vec![-1.0]).lower_bound_on(&p), 1.0);
    }
}
