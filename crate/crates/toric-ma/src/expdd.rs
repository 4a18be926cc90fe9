//! Divided differences of the exponential function.
//!
//! `exp_dd(&[t_0, ..., t_m])` returns exp[t_0, ..., t_m], the m-th divided
//! difference of `exp` over the (not necessarily distinct) nodes. These are
//! the building block for closed-form integrals of exponentials of linear
//! functions over simplices: by the Hermite-Genocchi formula,
//!
//!   exp[t_0, ..., t_m] = integral over the standard m-simplex of
//!                        exp(b_0 t_0 + ... + b_m t_m) db,
//!
//! so a weight integral over a simplex S = conv(v_0, ..., v_n) becomes
//!
//!   int_S e^{<xi, p>} dp = n! vol(S) * exp[<xi, v_0>, ..., <xi, v_n>],
//!
//! and monomial moments against the same exponential reduce to divided
//! differences with repeated nodes (confluent case).
//!
//! The naive recurrence (f[t_1..] - f[t_0..]) / (t_m - t_0) cancels
//! catastrophically for clustered nodes. We instead use the Opitz form:
//! exp[t_0..t_m] is the (0, m) entry of exp(B) where B is upper bidiagonal
//! with the nodes on the diagonal and ones above. exp(B) is computed by
//! scaling and squaring with a centered Taylor series; every entry of
//! exp(B) is a divided difference of exp, hence positive, so the squaring
//! steps add and multiply positive numbers only and no cancellation occurs.

/// Largest node spread handled by the Taylor series directly; wider spreads
/// are scaled down by powers of two and squared back up.
const SERIES_SPREAD: f64 = 0.25;

/// Divided difference of exp over the given nodes (any order, repeats fine).
///
/// Accuracy is close to machine precision relative for desk-scale inputs
/// (m <= ~12, |t_i| <= ~700 after centering the common scale is factored out
/// as e^mean).
pub fn exp_dd(nodes: &[f64]) -> f64 {
    let m = nodes.len();
    assert!(m >= 1, "exp_dd needs at least one node");
    if m == 1 {
        return nodes[0].exp();
    }
    let mean = nodes.iter().sum::<f64>() / m as f64;
    let centered: Vec<f64> = nodes.iter().map(|t| t - mean).collect();
    let spread = centered.iter().fold(0.0f64, |a, &d| a.max(d.abs()));

    // Scale so the series converges in a few terms, square back afterwards.
    let s = if spread > SERIES_SPREAD {
        (spread / SERIES_SPREAD).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(s as i32);

    // T[i][j] = scale^(j-i) * exp[scale * centered[i..=j]] for i <= j.
    let mut t = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in i..m {
            t[i][j] = scale.powi((j - i) as i32) * exp_dd_series(&centered[i..=j], scale);
        }
    }
    // Repeated squaring of the upper-triangular matrix: after s squarings the
    // (0, m-1) entry is the divided difference over the unscaled nodes.
    for _ in 0..s {
        let mut sq = vec![vec![0.0f64; m]; m];
        for i in 0..m {
            for j in i..m {
                let mut acc = 0.0;
                for l in i..=j {
                    acc += t[i][l] * t[l][j];
                }
                sq[i][j] = acc;
            }
        }
        t = sq;
    }
    mean.exp() * t[0][m - 1]
}

/// Series evaluation of exp[scale * d_0, ..., scale * d_m] for small spread.
///
/// Uses exp[x_0..x_m] = sum_{q >= 0} h_q(x) / (m + q)! where h_q is the
/// complete homogeneous symmetric polynomial; terms decay geometrically once
/// q exceeds m for |x_i| <= 0.25.
fn exp_dd_series(centered: &[f64], scale: f64) -> f64 {
    let m = centered.len() - 1;
    let x: Vec<f64> = centered.iter().map(|d| d * scale).collect();
    // h[j] = h_j(x_0..x_i) built incrementally over i.
    let max_q = 60usize;
    let mut h = vec![0.0f64; max_q + 1];
    h[0] = 1.0;
    for &xi in &x {
        for j in 1..=max_q {
            h[j] += xi * h[j - 1];
        }
    }
    let mut inv_fact = 1.0f64; // 1/(m+q)! as q advances, starting at 1/m!
    for i in 1..=m {
        inv_fact /= i as f64;
    }
    // No early exit: individual terms can vanish mid-series (after
    // centering, h_1 = 0 exactly), and at spread <= 0.25 the q = 60 tail
    // is below 1e-22 relative, so summing everything is both safe and cheap.
    let mut sum = 0.0f64;
    for q in 0..=max_q {
        if q > 0 {
            inv_fact /= (m + q) as f64;
        }
        sum += h[q] * inv_fact;
    }
    sum
}
