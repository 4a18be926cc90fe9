//! Energy-type functionals of toric potentials.
//!
//! The primitive is the weighted Monge-Ampere energy E_g, normalized so that
//! E_g(phi0) = 0 and characterized by
//!
//!   d/dt E_g(phi_t) = int (dphi_t/dt) dMA_g(phi_t)
//!
//! along affine paths phi_t = t phi + (1 - t) phi0. For potentials of full
//! Monge-Ampere mass it has a closed dual form in the slope variable:
//!
//!   E_g(phi) - E_g(phi0) = int_P g (phi0^* - phi^*) dnu,
//!
//! where phi^* is the Legendre transform and nu is normalized Lebesgue
//! measure on P. This module computes that dual form exactly (rational
//! subdivisions plus closed-form cell integrals) when both potentials are
//! max-affine, and by adaptive panelled quadrature of the conjugates when a
//! smooth potential is involved. The numeric path is self-normalized: the
//! same nodes that integrate g (phi0^* - phi^*) also integrate g, and the
//! ratio is rescaled by the exact mass of g dnu, so adding a constant to a
//! potential shifts the energy by exactly that constant times the mass.
//!
//! On top of E_g sit the two functionals whose comparison drives the soliton
//! theory, both normalized against a base potential phi0:
//!
//!   D_g(phi) = -E_g(phi) + L(phi) - L(phi0),      L(phi) = -log int e^-phi dx,
//!   M_g(phi) = -E_g(mu)  + Ent(mu | e^-phi0 dx / Z0),   mu = MA_g(phi),
//!
//! where E_g(mu) is the measure energy sup_psi { E_g(psi) - int (psi - phi0)
//! dmu }, evaluated here through the semi-discrete transport dual and never
//! through the entropy identity itself (the identity M_g - D_g = KL(mu |
//! e^-phi dx / Z_phi) >= 0 stays an independent cross-check that way).
//! Atomic mu have no density, so their relative entropy and hence M_g is
//! +infinity; `entropy` returns that sentinel rather than an error.

use crate::error::{Error, Result};
use crate::gweight::GWeight;
use crate::measure::{canonical_measure, ma_density_measure, DensityMeasure, MeasureOnX};
use crate::polytope::LatticePolytope;
use crate::potential::ToricPotential;
use crate::quadrature::{gauss_legendre, GridNd};
use crate::rational::{rat, rat_i64, to_f64};
use crate::transport::{energy_of_measure, TransportProblem};

/// A functional value together with the named parts it is the sum of.
#[derive(Clone, Debug)]
pub struct FunctionalValue {
    pub value: f64,
    pub breakdown: Vec<(String, f64)>,
}

impl FunctionalValue {
    pub fn from_parts(breakdown: Vec<(String, f64)>) -> Self {
        let value = breakdown.iter().map(|(_, v)| v).sum();
        FunctionalValue { value, breakdown }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The affine blend t a + (1 - t) b of two max-affine potentials, again
/// max-affine: its pieces are all pairwise blends of pieces of a and b
/// (duplicates are merged by the constructor).
pub fn blend(a: &ToricPotential, b: &ToricPotential, t: f64) -> Result<ToricPotential> {
    if !a.is_max_affine() || !b.is_max_affine() {
        return Err(Error::InvalidInput(
            "blend is defined for max-affine potentials".into(),
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput("blend dimension mismatch".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput("blend parameter must lie in [0, 1]".into()));
    }
    let mut slopes = Vec::with_capacity(a.piece_count() * b.piece_count());
    let mut intercepts = Vec::with_capacity(slopes.capacity());
    for (pa, aa) in a.slopes().iter().zip(a.intercepts()) {
        for (pb, ab) in b.slopes().iter().zip(b.intercepts()) {
            let s: Vec<f64> = pa
                .iter()
                .zip(pb)
                .map(|(x, y)| t * x + (1.0 - t) * y)
                .collect();
            slopes.push(s);
            intercepts.push(t * aa + (1.0 - t) * ab);
        }
    }
    ToricPotential::max_affine(slopes, intercepts)
}

/// Pointwise evaluation of a conjugate phi^*(p) for p in P.
///
/// Max-affine: phi^* is the max over subdivision vertices v of <p, x_v> -
/// phi(x_v) (the tangent from the cell whose subgradient set contains p).
/// Smooth: a damped Newton iteration on x -> phi(x) - <p, x>, warm-started
/// from the previous node so sweeps over quadrature nodes stay cheap.
enum ConjugateEvaluator<'a> {
    MaxAffine { verts: Vec<(Vec<f64>, f64)> },
    Smooth { pot: &'a ToricPotential, warm: Vec<f64> },
}

impl<'a> ConjugateEvaluator<'a> {
    fn new(pot: &'a ToricPotential) -> Result<Self> {
        if pot.is_max_affine() {
            let subdiv = pot.subdivision()?;
            if subdiv.is_empty() {
                return Err(Error::InvalidInput(
                    "conjugate evaluation needs a potential with a nonempty subdivision".into(),
                ));
            }
            let verts = subdiv
                .iter()
                .map(|v| {
                    // phi(x_v) evaluated exactly through one active piece.
                    let j = v.active[0];
                    let val: crate::rational::Rat = pot.slopes()[j]
                        .iter()
                        .zip(&v.location)
                        .map(|(pi, xi)| rat(*pi) * xi)
                        .sum::<crate::rational::Rat>()
                        + rat(pot.intercepts()[j]);
                    (v.location_f64.clone(), to_f64(&val))
                })
                .collect();
            Ok(ConjugateEvaluator::MaxAffine { verts })
        } else {
            Ok(ConjugateEvaluator::Smooth {
                pot,
                warm: vec![0.0; pot.dim()],
            })
        }
    }

    fn value(&mut self, p: &[f64]) -> f64 {
        match self {
            ConjugateEvaluator::MaxAffine { verts } => verts
                .iter()
                .map(|(x, v)| dot(p, x) - v)
                .fold(f64::NEG_INFINITY, f64::max),
            ConjugateEvaluator::Smooth { pot, warm } => {
                let n = p.len();
                let scale = 1.0 + p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for _ in 0..200 {
                    let m = pot.moment_map(warm).expect("smooth potential");
                    let r: Vec<f64> = m.iter().zip(p).map(|(mi, pi)| mi - pi).collect();
                    let rn = r.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
                    if rn <= 1e-12 * scale {
                        break;
                    }
                    let h = pot.hessian(warm).expect("smooth potential");
                    let s = newton_direction(&h, &r, n);
                    let q0 = pot.eval(warm) - dot(p, warm);
                    let dd = dot(&r, &s);
                    let mut t = 1.0;
                    let mut accepted = false;
                    for _ in 0..60 {
                        let xt: Vec<f64> =
                            warm.iter().zip(&s).map(|(x, si)| x + t * si).collect();
                        let qt = pot.eval(&xt) - dot(p, &xt);
                        if qt <= q0 + 0.25 * t * dd {
                            warm.clear();
                            warm.extend(xt);
                            accepted = true;
                            break;
                        }
                        t *= 0.5;
                    }
                    if !accepted {
                        // At the floating-point floor of the objective.
                        break;
                    }
                }
                dot(p, warm) - pot.eval(warm)
            }
        }
    }
}

/// -H^-1 r, falling back to -r when H is numerically singular.
fn newton_direction(h: &[Vec<f64>], r: &[f64], n: usize) -> Vec<f64> {
    match n {
        1 => {
            if h[0][0] > 1e-300 {
                vec![-r[0] / h[0][0]]
            } else {
                vec![-r[0]]
            }
        }
        2 => {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if det.abs() > 1e-300 {
                vec![
                    -(h[1][1] * r[0] - h[0][1] * r[1]) / det,
                    -(h[0][0] * r[1] - h[1][0] * r[0]) / det,
                ]
            } else {
                vec![-r[0], -r[1]]
            }
        }
        _ => unreachable!(),
    }
}

fn gauss01(order: usize) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(order);
    (
        xs.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        ws.iter().map(|w| 0.5 * w).collect(),
    )
}

/// Visit panelled Gauss nodes of one simplex of P at the given refinement
/// level: `level` panels on a segment, `level^2` congruent subtriangles with
/// a Duffy-mapped product rule on a triangle.
fn for_each_simplex_node(
    dim: usize,
    simplex: &[Vec<f64>],
    level: usize,
    f: &mut impl FnMut(&[f64], f64),
) {
    match dim {
        1 => {
            let (a, b) = (simplex[0][0].min(simplex[1][0]), simplex[0][0].max(simplex[1][0]));
            let (xs, ws) = gauss01(8);
            let h = (b - a) / level as f64;
            for pan in 0..level {
                let lo = a + pan as f64 * h;
                for (x, w) in xs.iter().zip(&ws) {
                    f(&[lo + h * x], w * h);
                }
            }
        }
        2 => {
            let (xs, ws) = gauss01(4);
            // Duffy map of the product rule onto the unit triangle
            // {u, v >= 0, u + v <= 1}: u = s, v = t (1 - s).
            let mut duffy: Vec<(f64, f64, f64)> = Vec::with_capacity(xs.len() * xs.len());
            for (s, wsv) in xs.iter().zip(&ws) {
                for (t, wtv) in xs.iter().zip(&ws) {
                    duffy.push((*s, t * (1.0 - s), wsv * wtv * (1.0 - s)));
                }
            }
            let (a, b, c) = (&simplex[0], &simplex[1], &simplex[2]);
            let l = level as f64;
            let e1 = [(b[0] - a[0]) / l, (b[1] - a[1]) / l];
            let e2 = [(c[0] - a[0]) / l, (c[1] - a[1]) / l];
            // |cross(B - A, C - A)| = 2 area, so each of the level^2
            // subtriangles carries weight-sum area / level^2.
            let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
            let wscale = area2 / (l * l);
            for i in 0..level {
                for j in 0..level - i {
                    let corner = [
                        a[0] + i as f64 * e1[0] + j as f64 * e2[0],
                        a[1] + i as f64 * e1[1] + j as f64 * e2[1],
                    ];
                    for &(u, v, w) in &duffy {
                        f(
                            &[
                                corner[0] + u * e1[0] + v * e2[0],
                                corner[1] + u * e1[1] + v * e2[1],
                            ],
                            w * wscale,
                        );
                    }
                    if i + j + 2 <= level {
                        // The downward subtriangle sharing the hypotenuse.
                        let d0 = [corner[0] + e1[0], corner[1] + e1[1]];
                        for &(u, v, w) in &duffy {
                            f(
                                &[
                                    d0[0] + u * e2[0] + v * (e2[0] - e1[0]),
                                    d0[1] + u * e2[1] + v * (e2[1] - e1[1]),
                                ],
                                w * wscale,
                            );
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Adaptive integral of g(p) f(p) dnu over P, self-normalized: the node sum
/// of g f is divided by the node sum of g and rescaled by the exact mass of
/// g dnu. Doubles the refinement level until two consecutive values agree to
/// `tol` (relative, with an absolute floor of the same size).
fn adaptive_dual_integral(
    p: &LatticePolytope,
    g: &GWeight,
    tol: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    let gmass = g.integral_over_body(p.body()) / p.volume();
    let simplices = p.simplex_decomposition().simplices;
    let schedule: &[usize] = if p.dim() == 1 {
        &[8, 16, 32, 64, 128, 256, 512, 1024]
    } else {
        &[4, 8, 16, 32, 64]
    };
    let mut prev: Option<f64> = None;
    let mut last_diff = f64::INFINITY;
    for &level in schedule {
        let mut sf = 0.0;
        let mut sg = 0.0;
        for s in &simplices {
            for_each_simplex_node(p.dim(), s, level, &mut |node, w| {
                let gv = g.eval(node);
                if gv > 0.0 {
                    sg += w * gv;
                    sf += w * gv * f(node);
                }
            });
        }
        let e = sf / sg * gmass;
        if let Some(pv) = prev {
            last_diff = (e - pv).abs();
            if last_diff <= tol * e.abs().max(1.0) {
                return Ok(e);
            }
        }
        prev = Some(e);
    }
    Err(Error::NonConvergence {
        iterations: schedule.len(),
        residual: last_diff,
    })
}

/// int_P g phi^* dnu. Exact (rational cells, closed-form moments) for
/// max-affine potentials; adaptive quadrature of the Newton-evaluated
/// conjugate otherwise. Requires full Monge-Ampere mass.
pub fn conjugate_g_integral(
    pot: &ToricPotential,
    g: &GWeight,
    p: &LatticePolytope,
    tol: f64,
) -> Result<f64> {
    if pot.is_max_affine() {
        return pot.integral_g_conjugate(g, p);
    }
    if !pot.has_full_mass(p, 1e-7) {
        return Err(Error::InvalidInput(
            "conjugate integrals need a potential of full Monge-Ampere mass".into(),
        ));
    }
    let mut ev = ConjugateEvaluator::new(pot)?;
    adaptive_dual_integral(p, g, tol, |node| ev.value(node))
}

/// E_g(phi) - E_g(phi0) through the dual formula. Exact when both
/// potentials are max-affine; otherwise both conjugates are evaluated on one
/// shared node set so that constants pass through exactly.
pub fn energy_g(
    phi: &ToricPotential,
    phi0: &ToricPotential,
    g: &GWeight,
    p: &LatticePolytope,
    tol: f64,
) -> Result<f64> {
    if phi.dim() != p.dim() || phi0.dim() != p.dim() {
        return Err(Error::InvalidInput("energy dimension mismatch".into()));
    }
    if !phi.has_full_mass(p, 1e-7) || !phi0.has_full_mass(p, 1e-7) {
        return Err(Error::InvalidInput(
            "the dual energy formula needs both potentials to have full Monge-Ampere mass"
                .into(),
        ));
    }
    if phi.is_max_affine() && phi0.is_max_affine() {
        return Ok(phi0.integral_g_conjugate(g, p)? - phi.integral_g_conjugate(g, p)?);
    }
    let mut e1 = ConjugateEvaluator::new(phi)?;
    let mut e0 = ConjugateEvaluator::new(phi0)?;
    adaptive_dual_integral(p, g, tol, |node| e0.value(node) - e1.value(node))
}

/// E_g(phi) - E_g(phi0) integrated along the affine path t phi + (1-t) phi0
/// with atomic Monge-Ampere measures at Gauss nodes in t. Max-affine
/// potentials only; this is a validation route for the dual formula, not a
/// production one (the t-integrand is only piecewise analytic, so the panel
/// rule converges at fixed order in the panel count).
pub fn energy_g_path(
    phi: &ToricPotential,
    phi0: &ToricPotential,
    g: &GWeight,
    p: &LatticePolytope,
    panels: usize,
) -> Result<f64> {
    if !phi.is_max_affine() || !phi0.is_max_affine() {
        return Err(Error::InvalidInput(
            "the path energy is implemented for max-affine potentials".into(),
        ));
    }
    let (xs, ws) = gauss01(4);
    let h = 1.0 / panels as f64;
    let mut total = 0.0;
    for pan in 0..panels {
        let lo = pan as f64 * h;
        for (x, w) in xs.iter().zip(&ws) {
            let t = lo + h * x;
            let bl = blend(phi, phi0, t)?;
            let mom = bl.ma_atomic(g, p)?;
            total += w * h * mom.integrate(|y| phi.eval(y) - phi0.eval(y));
        }
    }
    Ok(total)
}

/// L(phi) = -log int_R^n e^-phi dx. Finite exactly when 0 is strictly
/// interior to the slope hull. Smooth potentials go through the adaptive
/// canonical-measure quadrature; 1-dimensional max-affine potentials are
/// integrated in closed form piece by piece (two unbounded end pieces plus
/// the bounded pieces between consecutive subdivision vertices). Max-affine
/// potentials in dimension 2 are not supported here; sharpen them instead.
pub fn l_canonical(pot: &ToricPotential, tol: f64) -> Result<f64> {
    if pot.sharpness().is_some() {
        return canonical_measure(pot, tol, false).map(|(log_z, _)| -log_z);
    }
    match pot.dim() {
        1 => l_canonical_exact_1d(pot),
        _ => Err(Error::InvalidInput(
            "closed-form canonical integrals cover max-affine potentials in dimension 1 \
             only; use a smooth (finite sharpness) potential"
                .into(),
        )),
    }
}

fn l_canonical_exact_1d(pot: &ToricPotential) -> Result<f64> {
    let hull = pot.slope_hull();
    if !hull.contains_strictly(&[rat_i64(0)]) {
        return Err(Error::DivergentIntegral(
            "e^(-phi) dx diverges: 0 is not strictly interior to the slope hull".into(),
        ));
    }
    let subdiv = pot.subdivision()?;
    let xs: Vec<f64> = subdiv.iter().map(|v| v.location_f64[0]).collect();
    let mut z = 0.0;
    for r in 0..=xs.len() {
        let a = if r == 0 { f64::NEG_INFINITY } else { xs[r - 1] };
        let b = if r == xs.len() { f64::INFINITY } else { xs[r] };
        let sample = if a.is_infinite() {
            b - 1.0
        } else if b.is_infinite() {
            a + 1.0
        } else {
            0.5 * (a + b)
        };
        let j = pot.active_pieces(&[sample])[0];
        let (pj, aj) = (pot.slopes()[j][0], pot.intercepts()[j]);
        // int_a^b e^-(p x + q) dx, with the end regions unbounded. The
        // strict-interiority check above forces p < 0 on the left end and
        // p > 0 on the right end, so both tails converge.
        z += if a.is_infinite() {
            (-(pj * b + aj)).exp() / -pj
        } else if b.is_infinite() {
            (-(pj * a + aj)).exp() / pj
        } else if pj == 0.0 {
            (b - a) * (-aj).exp()
        } else {
            ((-(pj * a + aj)).exp() - (-(pj * b + aj)).exp()) / pj
        };
    }
    Ok(-z.ln())
}

/// D_g(phi) = -E_g(phi) + L(phi) - L(phi0), with E_g normalized at phi0.
pub fn ding_modified(
    phi: &ToricPotential,
    phi0: &ToricPotential,
    g: &GWeight,
    p: &LatticePolytope,
    tol: f64,
) -> Result<FunctionalValue> {
    let e = energy_g(phi, phi0, g, p, tol)?;
    let l1 = l_canonical(phi, tol)?;
    let l0 = l_canonical(phi0, tol)?;
    Ok(FunctionalValue::from_parts(vec![
        ("minus_energy".into(), -e),
        ("canonical".into(), l1 - l0),
    ]))
}

/// Relative entropy Ent(mu | rho_ref dx), evaluated on mu's own grid when mu
/// has a density and +infinity when mu is atomic (atomic measures are
/// singular against any density). Also +infinity when mu puts mass where the
/// reference density vanishes.
pub fn entropy(mu: &MeasureOnX, reference: &DensityMeasure) -> f64 {
    match mu {
        MeasureOnX::Atomic(_) => f64::INFINITY,
        MeasureOnX::Density(d) => {
            let (nodes, weights) = d.grid().nodes_weights();
            let mut s = 0.0;
            for (x, w) in nodes.iter().zip(&weights) {
                let l = d.log_density_at(x);
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let lr = reference.log_density_at(x);
                if lr == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                s += w * l.exp() * (l - lr);
            }
            s
        }
    }
}

/// M_g(phi) = -E_g(mu) + Ent(mu | e^-phi0 dx / Z0) with mu = MA_g(phi).
///
/// The energy of the measure is the transport dual optimum relative to the
/// max-affine base phi0 (so the Laguerre solver, not the entropy identity,
/// produces it). Smooth phi: mu is resolved as a density, discretized on a
/// coarser uniform grid of about `transport_nodes` atoms for the solver,
/// while the entropy term integrates the exact density on mu's own grid.
/// Max-affine phi: mu is atomic, the energy term is still finite and exact,
/// and the entropy term (hence the value) is +infinity.
pub fn mabuchi_modified(
    phi: &ToricPotential,
    phi0: &ToricPotential,
    g: &GWeight,
    p: &LatticePolytope,
    tol: f64,
    transport_nodes: usize,
) -> Result<FunctionalValue> {
    if phi.is_max_affine() {
        let mu = phi.ma_atomic(g, p)?;
        let atoms = renormalized_atoms(mu.atoms());
        let problem = TransportProblem::new(p.clone(), g.clone(), atoms)?;
        let (ev, _) = energy_of_measure(&problem, phi0)?;
        return Ok(FunctionalValue::from_parts(vec![
            ("minus_transport_energy".into(), -ev),
            ("relative_entropy".into(), f64::INFINITY),
        ]));
    }
    if !phi.has_full_mass(p, 1e-7) {
        return Err(Error::InvalidInput(
            "the measure energy needs MA_g(phi) to be a probability measure \
             (full Monge-Ampere mass)"
                .into(),
        ));
    }
    let (_, mu) = ma_density_measure(phi, g, p, tol)?;
    let bounds: Vec<(f64, f64)> = mu.grid().axes.iter().map(|a| (a.lo, a.hi)).collect();
    let order = 4;
    let per_axis = match p.dim() {
        1 => transport_nodes,
        _ => (transport_nodes as f64).sqrt().ceil() as usize,
    };
    let panels = per_axis.div_ceil(order).max(1);
    let coarse = mu.with_grid(GridNd::uniform(&bounds, panels, order));
    let atoms = renormalized_atoms(coarse.discretize(false).atoms());
    let problem = TransportProblem::new(p.clone(), g.clone(), atoms)?;
    let (ev, _) = energy_of_measure(&problem, phi0)?;
    let l0 = l_canonical(phi0, tol)?;
    // Ent(mu | e^-phi0 dx / Z0) = int rho (log rho + phi0) dx + log Z0.
    let ent = mu.integrate(|x| mu.log_density_at(x) + phi0.eval(x) - l0);
    Ok(FunctionalValue::from_parts(vec![
        ("minus_transport_energy".into(), -ev),
        ("relative_entropy".into(), ent),
    ]))
}

/// Drop (numerically) massless atoms and rescale the rest to total mass 1.
fn renormalized_atoms(atoms: &[(Vec<f64>, f64)]) -> Vec<(Vec<f64>, f64)> {
    let kept: Vec<(Vec<f64>, f64)> = atoms
        .iter()
        .filter(|(_, m)| *m > 1e-11)
        .cloned()
        .collect();
    let total: f64 = kept.iter().map(|(_, m)| m).sum();
    kept.into_iter().map(|(x, m)| (x, m / total)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    Affine,
    Convex,
    Concave,
    Indefinite,
}

/// Second differences of a sampled function of one parameter, classified
/// against a tolerance relative to max(1, max |value|).
#[derive(Clone, Debug)]
pub struct ConvexityReport {
    pub second_differences: Vec<f64>,
    pub min_second_difference: f64,
    pub max_second_difference: f64,
    pub classification: Classification,
}

pub fn convexity_probe(values: &[f64], tol: f64) -> ConvexityReport {
    let diffs: Vec<f64> = values
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .collect();
    let scale = values
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let lo = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if diffs.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let eps = tol * scale;
    let classification = if lo >= -eps && hi <= eps {
        Classification::Affine
    } else if lo >= -eps {
        Classification::Convex
    } else if hi <= eps {
        Classification::Concave
    } else {
        Classification::Indefinite
    };
    ConvexityReport {
        second_differences: diffs,
        min_second_difference: lo,
        max_second_difference: hi,
        classification,
    }
}
