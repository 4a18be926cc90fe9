//! Futaki-type invariants and the soliton vector field of a polytope.
//!
//! For a torus character direction eta and a weight field xi, the continuum
//! invariant is
//!
//!   Fut(xi, eta) = -(1/vol P) int_P <p, eta> e^<p, xi> dp,
//!
//! the e^<p,xi>-weighted barycenter pairing. Its quantized counterpart at
//! level k sums over lattice points of kP:
//!
//!   Fut_k(xi, eta) = -sum_{alpha in kP cap Z^n} e^<alpha/k, xi> <alpha, eta>.
//!
//! Riemann-sum asymptotics give Fut_k / k^(n+1) = c_0 + c_1/k + c_2/k^2 + ...
//! with c_0 = vol(P) Fut(xi, eta); `futaki_limit_check` fits that expansion
//! by least squares and reports how well the leading coefficient matches the
//! continuum value.
//!
//! The soliton vector field xi* is the unique critical point of the strictly
//! convex F(xi) = int_P e^<p, xi> dp, i.e. the xi at which the weighted
//! barycenter vanishes; it exists exactly when 0 is strictly interior to P.
//! All moments here are closed-form simplex integrals (divided differences
//! of exp), so Newton's method reaches gradient residuals at the rounding
//! floor of those sums.

use crate::error::{Error, Result};
use crate::polytope::LatticePolytope;
use nalgebra::{DMatrix, DVector};

/// -(1/vol P) int_P <p, eta> e^<p, xi> dp.
pub fn futaki_continuum(p: &LatticePolytope, xi: &[f64], eta: &[f64]) -> f64 {
    assert_eq!(xi.len(), p.dim());
    assert_eq!(eta.len(), p.dim());
    let mut total = 0.0;
    for d in 0..p.dim() {
        if eta[d] == 0.0 {
            continue;
        }
        let mut moment = vec![0u32; p.dim()];
        moment[d] = 1;
        total += eta[d] * p.integrate_exp_linear(xi, &moment);
    }
    -total / p.volume()
}

/// -sum over kP cap Z^n of e^<alpha/k, xi> <alpha, eta>.
pub fn futaki_quantized(p: &LatticePolytope, k: u32, xi: &[f64], eta: &[f64]) -> Result<f64> {
    assert_eq!(xi.len(), p.dim());
    assert_eq!(eta.len(), p.dim());
    let mut total = 0.0;
    for alpha in p.lattice_points(k)? {
        let af: Vec<f64> = alpha.iter().map(|&a| a as f64).collect();
        let w = (af.iter().zip(xi).map(|(a, x)| a * x).sum::<f64>() / k as f64).exp();
        total += w * af.iter().zip(eta).map(|(a, e)| a * e).sum::<f64>();
    }
    Ok(-total)
}

/// The scaled samples, fitted expansion, and continuum comparison produced
/// by `futaki_limit_check`.
#[derive(Clone, Debug)]
pub struct FutakiReport {
    /// (k, Fut_k / k^(n+1)) for each requested level.
    pub samples: Vec<(u32, f64)>,
    /// Least-squares coefficients of sum_j c_j k^-j.
    pub coefficients: Vec<f64>,
    /// vol(P) Fut(xi, eta), the model's leading coefficient.
    pub continuum: f64,
    /// |c_0 - vol(P) Fut(xi, eta)|.
    pub leading_residual: f64,
}

/// Fit Fut_k / k^(n+1) = sum_{j <= degree} c_j k^-j over the given levels
/// and compare c_0 with the continuum invariant. Levels must be distinct,
/// number at least degree + 2, and reach k >= n + 2 so the design matrix has
/// honest rank for the requested degree.
pub fn futaki_limit_check(
    p: &LatticePolytope,
    xi: &[f64],
    eta: &[f64],
    ks: &[u32],
    degree: usize,
) -> Result<FutakiReport> {
    let mut sorted = ks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ks.len() || ks.len() < degree + 2 {
        return Err(Error::InvalidInput(
            "the limit fit needs at least degree + 2 distinct levels".into(),
        ));
    }
    let n = p.dim() as i32;
    if *sorted.last().unwrap() < (n + 2) as u32 {
        return Err(Error::InvalidInput(
            "the limit fit needs levels reaching k >= n + 2".into(),
        ));
    }
    let mut samples = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(Error::InvalidInput("levels must be positive".into()));
        }
        let fk = futaki_quantized(p, k, xi, eta)?;
        samples.push((k, fk / (k as f64).powi(n + 1)));
    }
    let a = DMatrix::<f64>::from_fn(samples.len(), degree + 1, |i, j| {
        (samples[i].0 as f64).powi(-(j as i32))
    });
    let b = DVector::<f64>::from_iterator(samples.len(), samples.iter().map(|(_, y)| *y));
    let svd = a.svd(true, true);
    let coeffs = svd
        .solve(&b, 1e-14)
        .map_err(|_| Error::NonConvergence { iterations: 0, residual: f64::NAN })?;
    let coefficients: Vec<f64> = coeffs.iter().cloned().collect();
    let continuum = p.volume() * futaki_continuum(p, xi, eta);
    let leading_residual = (coefficients[0] - continuum).abs();
    Ok(FutakiReport {
        samples,
        coefficients,
        continuum,
        leading_residual,
    })
}

/// -H^-1 g for the small SPD moment Hessians, with a gradient fallback if
/// the system is numerically singular (it is not, for full-dimensional P).
fn newton_step(h: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    match g.len() {
        1 => {
            if h[0][0] > 0.0 {
                vec![-g[0] / h[0][0]]
            } else {
                vec![-g[0]]
            }
        }
        2 => {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if det > 0.0 && h[0][0] > 0.0 {
                vec![
                    -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                    -(h[0][0] * g[1] - h[1][0] * g[0]) / det,
                ]
            } else {
                vec![-g[0], -g[1]]
            }
        }
        _ => unreachable!(),
    }
}

/// The soliton vector field xi*: the unique zero of the weighted barycenter
/// xi -> int_P p e^<p, xi> dp, found by damped Newton on the strictly convex
/// mass F(xi) = int_P e^<p, xi> dp. Needs 0 strictly interior to P.
/// Relative defect of a candidate field: |grad F(xi)|_inf / F(xi) with
/// F(xi) = int_P e^<p, xi> dp. Zero exactly at the soliton field.
pub fn soliton_defect(p: &LatticePolytope, xi: &[f64]) -> f64 {
    assert_eq!(xi.len(), p.dim());
    let n = p.dim();
    let f = p.integrate_exp_linear(xi, &vec![0u32; n]);
    (0..n)
        .map(|d| {
            let mut m = vec![0u32; n];
            m[d] = 1;
            (p.integrate_exp_linear(xi, &m) / f).abs()
        })
        .fold(0.0, f64::max)
}

pub fn soliton_field(p: &LatticePolytope) -> Result<Vec<f64>> {
    if !p.origin_strictly_interior() {
        return Err(Error::InvalidInput(
            "the soliton vector field needs 0 strictly inside P".into(),
        ));
    }
    let n = p.dim();
    let zero_moment = vec![0u32; n];
    let fval = |xi: &[f64]| p.integrate_exp_linear(xi, &zero_moment);
    let mut xi = vec![0.0; n];
    let mut f = fval(&xi);
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let grad: Vec<f64> = (0..n)
            .map(|d| {
                let mut m = vec![0u32; n];
                m[d] = 1;
                p.integrate_exp_linear(&xi, &m)
            })
            .collect();
        let gn = grad.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        residual = gn / f;
        if gn <= 1e-13 * f {
            return Ok(xi);
        }
        let mut h = vec![vec![0.0; n]; n];
        for r in 0..n {
            for s in r..n {
                let mut m = vec![0u32; n];
                m[r] += 1;
                m[s] += 1;
                let v = p.integrate_exp_linear(&xi, &m);
                h[r][s] = v;
                h[s][r] = v;
            }
        }
        let step = newton_step(&h, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = xi.iter().zip(&step).map(|(x, s)| x + t * s).collect();
            let fc = fval(&cand);
            if fc < f {
                xi = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // The objective is at its floating-point floor; accept when the
            // gradient is small in the looser absolute sense, else report.
            if gn <= 1e-10 * f {
                return Ok(xi);
            }
            break;
        }
    }
    Err(Error::NonConvergence { iterations: 100, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn continuum_closed_forms() {
        let unit = LatticePolytope::interval(0, 1);
        assert_relative_eq!(futaki_continuum(&unit, &[0.0], &[1.0]), -0.5, epsilon = 1e-14);

        let p2 = LatticePolytope::p2_anticanonical();
        for eta in [[1.0, 0.0], [0.0, 1.0], [2.0, -3.0]] {
            assert_relative_eq!(
                futaki_continuum(&p2, &[0.0, 0.0], &eta),
                0.0,
                epsilon = 1e-13
            );
        }

        // Barycenter of the blown-up polytope is (-1/12, -1/12).
        let bl = LatticePolytope::bl1_p2_anticanonical();
        assert_relative_eq!(
            futaki_continuum(&bl, &[0.0, 0.0], &[1.0, 0.0]),
            1.0 / 12.0,
            epsilon = 1e-13
        );
    }

    #[test]
    fn quantized_closed_form_on_intervals() {
        let unit = LatticePolytope::interval(0, 1);
        for k in 1..=6u32 {
            let f = futaki_quantized(&unit, k, &[0.0], &[1.0]).unwrap();
            assert_relative_eq!(f, -0.5 * (k * (k + 1)) as f64, epsilon = 1e-12);
        }
        let sym = LatticePolytope::interval(-1, 1);
        assert_relative_eq!(
            futaki_quantized(&sym, 7, &[0.0], &[1.0]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn limit_fit_recovers_expansion() {
        // Unit interval, xi = 0: Fut_k / k^2 = -1/2 - 1/(2k) exactly.
        let unit = LatticePolytope::interval(0, 1);
        let ks: Vec<u32> = (4..=24).step_by(4).collect();
        let rep = futaki_limit_check(&unit, &[0.0], &[1.0], &ks, 2).unwrap();
        assert_relative_eq!(rep.coefficients[0], -0.5, epsilon = 1e-10);
        assert_relative_eq!(rep.coefficients[1], -0.5, epsilon = 1e-9);
        assert_relative_eq!(rep.coefficients[2], 0.0, epsilon = 1e-8);
        assert!(rep.leading_residual <= 1e-10);

        // A 2-dimensional case with a nontrivial weight.
        let p2 = LatticePolytope::p2_anticanonical();
        let ks: Vec<u32> = (8..=32).step_by(4).collect();
        let rep =
            futaki_limit_check(&p2, &[0.3, -0.2], &[1.0, 2.0], &ks, 2).unwrap();
        let scale = rep.continuum.abs().max(1.0);
        assert!(
            rep.leading_residual <= 1e-3 * scale,
            "leading residual {} too large (continuum {})",
            rep.leading_residual,
            rep.continuum
        );
    }

    #[test]
    fn limit_fit_input_validation() {
        let unit = LatticePolytope::interval(0, 1);
        assert!(futaki_limit_check(&unit, &[0.0], &[1.0], &[4, 8], 2).is_err());
        assert!(futaki_limit_check(&unit, &[0.0], &[1.0], &[4, 4, 8, 12], 1).is_err());
        assert!(futaki_limit_check(&unit, &[0.0], &[1.0], &[1, 2], 0).is_err());
    }

    #[test]
    fn soliton_field_vanishes_on_symmetric_polytopes() {
        let sym = LatticePolytope::interval(-1, 1);
        let xi = soliton_field(&sym).unwrap();
        assert!(xi[0].abs() <= 1e-12);

        let p2 = LatticePolytope::p2_anticanonical();
        let xi = soliton_field(&p2).unwrap();
        assert!(xi.iter().all(|c| c.abs() <= 1e-12));
    }

    #[test]
    fn soliton_field_shifted_interval() {
        // Mass of [-1, 2] sits to the right of 0, so the weight must tilt
        // left; the defining equation is int p e^(xi p) dp = 0.
        let p = LatticePolytope::interval(-1, 2);
        let xi = soliton_field(&p).unwrap();
        assert!(xi[0] < 0.0);
        let grad = p.integrate_exp_linear(&xi, &[1]);
        let f = p.integrate_exp_linear(&xi, &[0]);
        assert!(grad.abs() <= 1e-12 * f);
    }

    #[test]
    fn soliton_field_diagonal_on_blowup() {
        let bl = LatticePolytope::bl1_p2_anticanonical();
        let xi = soliton_field(&bl).unwrap();
        // The polytope is symmetric under swapping coordinates, and its
        // barycenter has negative coordinates, so xi* = (s, s) with s > 0.
        assert!((xi[0] - xi[1]).abs() <= 1e-12);
        assert!(xi[0] > 0.0);
        for eta in [[1.0, 0.0], [0.0, 1.0]] {
            assert!(futaki_continuum(&bl, &xi, &eta).abs() <= 1e-12);
        }
    }

    #[test]
    fn soliton_field_needs_interior_origin() {
        let p = LatticePolytope::interval(0, 1);
        assert!(matches!(soliton_field(&p), Err(Error::InvalidInput(_))));
    }
}
