//! Lattice polytopes P = {p : <normal_i, p> <= offset_i} in R^n (n = 1, 2)
//! with integral half-space data.
//!
//! Vertices are enumerated in exact rational arithmetic, so volumes,
//! barycenters, clipping, and lattice-point membership carry no geometric
//! tolerances. Integrals of p^beta * e^(<xi, p>) over P are evaluated in
//! closed form per simplex through divided differences of exp, which stay
//! finite and accurate when exponents collide.

use crate::error::{Error, Result};
use crate::expdd::exp_dd;
use crate::rational::{rat_i64, to_f64, to_f64_vec, ConvexBody, Rat};
use num::traits::ToPrimitive;
use num::Zero;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One inequality <normal, p> <= offset with integral data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: Vec<i64>,
    pub offset: i64,
}

/// JSON shape shared by the CLI and the library:
/// {"dim": n, "halfspaces": [{"normal": [..], "offset": c}, ..], "name": ".."}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolytopeSpec {
    pub dim: usize,
    pub halfspaces: Vec<Halfspace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Bounded, full-dimensional lattice polytope with cached exact vertex data.
#[derive(Clone, Debug)]
pub struct LatticePolytope {
    dim: usize,
    halfspaces: Vec<Halfspace>,
    name: Option<String>,
    body: ConvexBody,
    volume_rat: Rat,
    barycenter_rat: Vec<Rat>,
    verts_f64: Vec<Vec<f64>>,
}

/// Candidate-point cap for lattice enumeration (desk scale).
const LATTICE_CANDIDATE_CAP: i128 = 20_000_000;

fn cross_i(a: &[i64], b: &[i64]) -> i128 {
    a[0] as i128 * b[1] as i128 - a[1] as i128 * b[0] as i128
}

fn dot_i(a: &[i64], b: &[i64]) -> i128 {
    a.iter().zip(b).map(|(&x, &y)| x as i128 * y as i128).sum()
}

impl LatticePolytope {
    pub fn from_halfspaces(
        dim: usize,
        halfspaces: Vec<Halfspace>,
        name: Option<String>,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::DimensionUnsupported(dim));
        }
        if halfspaces.is_empty() {
            return Err(Error::InvalidInput("no halfspaces given".into()));
        }
        for h in &halfspaces {
            if h.normal.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "normal {:?} has length {}, expected {}",
                    h.normal,
                    h.normal.len(),
                    dim
                )));
            }
            if h.normal.iter().all(|&c| c == 0) {
                return Err(Error::InvalidInput("zero normal vector".into()));
            }
        }
        if !normals_positively_span(dim, &halfspaces) {
            return Err(Error::DegeneratePolytope(
                "halfspace normals do not positively span R^n: unbounded".into(),
            ));
        }
        let body = enumerate_vertices(dim, &halfspaces)?;
        let volume_rat = body.volume();
        if volume_rat.is_zero() {
            return Err(Error::DegeneratePolytope(
                "halfspaces cut out a lower-dimensional set".into(),
            ));
        }
        let barycenter_rat = exact_barycenter(&body);
        let verts_f64 = body.verts_f64();
        Ok(LatticePolytope { dim, halfspaces, name, body, volume_rat, barycenter_rat, verts_f64 })
    }

    pub fn from_spec(spec: PolytopeSpec) -> Result<Self> {
        Self::from_halfspaces(spec.dim, spec.halfspaces, spec.name)
    }

    pub fn to_spec(&self) -> PolytopeSpec {
        PolytopeSpec {
            dim: self.dim,
            halfspaces: self.halfspaces.clone(),
            name: self.name.clone(),
        }
    }

    /// The interval [a, b] as a one-dimensional lattice polytope.
    pub fn interval(a: i64, b: i64) -> Self {
        assert!(a < b);
        Self::from_halfspaces(
            1,
            vec![
                Halfspace { normal: vec![1], offset: b },
                Halfspace { normal: vec![-1], offset: -a },
            ],
            Some(format!("interval[{a},{b}]")),
        )
        .expect("interval data is valid")
    }

    /// conv{(0,0), (1,0), (0,1)}.
    pub fn unit_simplex() -> Self {
        Self::from_halfspaces(
            2,
            vec![
                Halfspace { normal: vec![-1, 0], offset: 0 },
                Halfspace { normal: vec![0, -1], offset: 0 },
                Halfspace { normal: vec![1, 1], offset: 1 },
            ],
            Some("unit-simplex".into()),
        )
        .expect("simplex data is valid")
    }

    /// [0,1]^2.
    pub fn unit_square() -> Self {
        Self::from_halfspaces(
            2,
            vec![
                Halfspace { normal: vec![1, 0], offset: 1 },
                Halfspace { normal: vec![-1, 0], offset: 0 },
                Halfspace { normal: vec![0, 1], offset: 1 },
                Halfspace { normal: vec![0, -1], offset: 0 },
            ],
            Some("unit-square".into()),
        )
        .expect("square data is valid")
    }

    /// Anticanonical polytope of the projective plane:
    /// {p_1 >= -1, p_2 >= -1, p_1 + p_2 <= 1}, volume 9/2, reflexive.
    pub fn p2_anticanonical() -> Self {
        Self::from_halfspaces(
            2,
            vec![
                Halfspace { normal: vec![-1, 0], offset: 1 },
                Halfspace { normal: vec![0, -1], offset: 1 },
                Halfspace { normal: vec![1, 1], offset: 1 },
            ],
            Some("p2-anticanonical".into()),
        )
        .expect("polytope data is valid")
    }

    /// Anticanonical polytope of the one-point blow-up of the projective
    /// plane, presented so the barycenter has negative coordinates (the
    /// soliton field then points along the positive diagonal).
    pub fn bl1_p2_anticanonical() -> Self {
        Self::from_halfspaces(
            2,
            vec![
                Halfspace { normal: vec![1, 0], offset: 1 },
                Halfspace { normal: vec![0, 1], offset: 1 },
                Halfspace { normal: vec![1, 1], offset: 1 },
                Halfspace { normal: vec![-1, -1], offset: 1 },
            ],
            Some("bl1-p2-anticanonical".into()),
        )
        .expect("polytope data is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    /// Exact vertex representation (1-D: sorted; 2-D: counter-clockwise).
    pub fn body(&self) -> &ConvexBody {
        &self.body
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.verts_f64
    }

    pub fn volume_rat(&self) -> &Rat {
        &self.volume_rat
    }

    pub fn volume(&self) -> f64 {
        to_f64(&self.volume_rat)
    }

    pub fn barycenter_rat(&self) -> &[Rat] {
        &self.barycenter_rat
    }

    pub fn barycenter(&self) -> Vec<f64> {
        to_f64_vec(&self.barycenter_rat)
    }

    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|d| {
                let lo = self.verts_f64.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
                let hi = self.verts_f64.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect()
    }

    /// Membership with a slack of `tol` on every inequality, in the scale
    /// of the normal's length.
    pub fn contains_f64(&self, p: &[f64], tol: f64) -> bool {
        self.halfspaces.iter().all(|h| {
            let val: f64 = h.normal.iter().zip(p).map(|(&n, &x)| n as f64 * x).sum();
            let scale = h.normal.iter().map(|&n| (n * n) as f64).sum::<f64>().sqrt();
            val <= h.offset as f64 + tol * scale
        })
    }

    pub fn contains_rat(&self, p: &[Rat]) -> bool {
        self.halfspaces.iter().all(|h| hs_value(h, p) <= rat_i64(h.offset))
    }

    pub fn contains_strictly_rat(&self, p: &[Rat]) -> bool {
        self.halfspaces.iter().all(|h| hs_value(h, p) < rat_i64(h.offset))
    }

    /// All facet offsets equal to one; for such polytopes the origin is
    /// strictly interior and the polytope is the anticanonical polytope of
    /// a Fano toric variety (Fano mode).
    pub fn is_reflexive(&self) -> bool {
        self.halfspaces.iter().all(|h| h.offset == 1)
    }

    pub fn origin_strictly_interior(&self) -> bool {
        self.halfspaces.iter().all(|h| h.offset > 0)
    }

    /// All lattice points of the dilate kP, sorted lexicographically.
    pub fn lattice_points(&self, k: u32) -> Result<Vec<Vec<i64>>> {
        if k == 0 {
            return Err(Error::InvalidInput("dilation factor k must be >= 1".into()));
        }
        let k_rat = rat_i64(k as i64);
        let mut lo = vec![i64::MAX; self.dim];
        let mut hi = vec![i64::MIN; self.dim];
        for v in &self.body.verts {
            for d in 0..self.dim {
                let scaled = &v[d] * &k_rat;
                let fl = scaled.floor().to_integer();
                let ce = scaled.ceil().to_integer();
                let fl = fl.to_i64().ok_or_else(|| {
                    Error::Capacity("dilated coordinate exceeds i64 range".into())
                })?;
                let ce = ce.to_i64().ok_or_else(|| {
                    Error::Capacity("dilated coordinate exceeds i64 range".into())
                })?;
                lo[d] = lo[d].min(fl);
                hi[d] = hi[d].max(ce);
            }
        }
        let mut count: i128 = 1;
        for d in 0..self.dim {
            count = count.saturating_mul((hi[d] - lo[d] + 1) as i128);
        }
        if count > LATTICE_CANDIDATE_CAP {
            return Err(Error::Capacity(format!(
                "lattice scan of {count} candidate points exceeds the cap"
            )));
        }
        let member = |alpha: &[i64]| {
            self.halfspaces
                .iter()
                .all(|h| dot_i(&h.normal, alpha) <= k as i128 * h.offset as i128)
        };
        let mut out = Vec::new();
        match self.dim {
            1 => {
                for a in lo[0]..=hi[0] {
                    if member(&[a]) {
                        out.push(vec![a]);
                    }
                }
            }
            2 => {
                for a in lo[0]..=hi[0] {
                    for b in lo[1]..=hi[1] {
                        if member(&[a, b]) {
                            out.push(vec![a, b]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        Ok(out)
    }

    /// N_k = #(kP cap Z^n).
    pub fn n_k(&self, k: u32) -> Result<usize> {
        Ok(self.lattice_points(k)?.len())
    }

    /// Fan triangulation of P into simplices (f64 vertex tuples).
    pub fn simplex_decomposition(&self) -> SimplexDecomposition {
        let simplices = self
            .body
            .triangulate()
            .iter()
            .map(|t| t.iter().map(|v| to_f64_vec(v)).collect())
            .collect();
        SimplexDecomposition { simplices }
    }

    /// int_P p^moment e^(<xi, p>) dp, by closed form over each simplex.
    pub fn integrate_exp_linear(&self, xi: &[f64], moment: &[u32]) -> f64 {
        assert_eq!(xi.len(), self.dim);
        assert_eq!(moment.len(), self.dim);
        self.simplex_decomposition()
            .simplices
            .iter()
            .map(|s| integrate_exp_linear_over_simplex(s, xi, moment))
            .sum()
    }

    /// Moments of nu = (Lebesgue on P) / volume(P), for all multi-indices
    /// of total degree <= max_degree, keyed by the exponent vector.
    pub fn dh_moments(&self, max_degree: u32) -> Vec<(Vec<u32>, f64)> {
        let vol = self.volume();
        let zero_xi = vec![0.0; self.dim];
        let mut out = Vec::new();
        for beta in multi_indices(self.dim, max_degree) {
            let val = self.integrate_exp_linear(&zero_xi, &beta) / vol;
            out.push((beta, val));
        }
        out
    }
}

impl Serialize for LatticePolytope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LatticePolytope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = PolytopeSpec::deserialize(d)?;
        LatticePolytope::from_spec(spec).map_err(serde::de::Error::custom)
    }
}

/// A simplex cover of P with disjoint interiors.
#[derive(Clone, Debug)]
pub struct SimplexDecomposition {
    pub simplices: Vec<Vec<Vec<f64>>>,
}

fn hs_value(h: &Halfspace, p: &[Rat]) -> Rat {
    h.normal.iter().zip(p).map(|(&n, x)| rat_i64(n) * x).sum()
}

/// Bounded <=> the recession cone {d : <n_i, d> <= 0} is trivial <=> the
/// normals positively span R^n. In 2-D: sorted by angle, every cyclic gap
/// is strictly less than pi (exact integer predicates).
fn normals_positively_span(dim: usize, halfspaces: &[Halfspace]) -> bool {
    match dim {
        1 => {
            halfspaces.iter().any(|h| h.normal[0] > 0)
                && halfspaces.iter().any(|h| h.normal[0] < 0)
        }
        2 => {
            let mut normals: Vec<&Vec<i64>> = halfspaces.iter().map(|h| &h.normal).collect();
            // Angular sort: split at the positive x-axis, then CCW by cross.
            let half = |v: &[i64]| -> u8 {
                if v[1] > 0 || (v[1] == 0 && v[0] > 0) {
                    0
                } else {
                    1
                }
            };
            normals.sort_by(|a, b| {
                half(a).cmp(&half(b)).then_with(|| {
                    let c = cross_i(a, b);
                    if c > 0 {
                        std::cmp::Ordering::Less
                    } else if c < 0 {
                        std::cmp::Ordering::Greater
                    } else {
                        std::cmp::Ordering::Equal
                    }
                })
            });
            let m = normals.len();
            (0..m).all(|i| {
                let a = normals[i];
                let b = normals[(i + 1) % m];
                let c = cross_i(a, b);
                // Cyclic gap < pi: positive cross, or zero cross with the
                // two normals pointing the same way.
                c > 0 || (c == 0 && dot_i(a, b) > 0)
            })
        }
        _ => false,
    }
}

fn enumerate_vertices(dim: usize, halfspaces: &[Halfspace]) -> Result<ConvexBody> {
    let feasible = |p: &[Rat]| halfspaces.iter().all(|h| hs_value(h, p) <= rat_i64(h.offset));
    let mut pts: Vec<Vec<Rat>> = Vec::new();
    match dim {
        1 => {
            for h in halfspaces {
                let p = vec![rat_i64(h.offset) / rat_i64(h.normal[0])];
                if feasible(&p) {
                    pts.push(p);
                }
            }
        }
        2 => {
            for (i, hi) in halfspaces.iter().enumerate() {
                for hj in halfspaces.iter().skip(i + 1) {
                    let det = cross_i(&hi.normal, &hj.normal);
                    if det == 0 {
                        continue;
                    }
                    let det = Rat::from_integer(det.into());
                    let bi = rat_i64(hi.offset);
                    let bj = rat_i64(hj.offset);
                    let x = (&bi * rat_i64(hj.normal[1]) - &bj * rat_i64(hi.normal[1])) / &det;
                    let y = (rat_i64(hi.normal[0]) * &bj - rat_i64(hj.normal[0]) * &bi) / &det;
                    let p = vec![x, y];
                    if feasible(&p) {
                        pts.push(p);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    if pts.is_empty() {
        return Err(Error::DegeneratePolytope("halfspace intersection is empty".into()));
    }
    Ok(ConvexBody::hull(dim, &pts))
}

fn exact_barycenter(body: &ConvexBody) -> Vec<Rat> {
    let dim = body.dim;
    let mut weighted = vec![Rat::zero(); dim];
    let mut total = Rat::zero();
    let denom = rat_i64(dim as i64 + 1);
    for t in body.triangulate() {
        let vol = ConvexBody { dim, verts: t.clone() }.volume();
        for d in 0..dim {
            let centroid_d: Rat = t.iter().map(|v| v[d].clone()).sum::<Rat>() / denom.clone();
            weighted[d] += &vol * centroid_d;
        }
        total += vol;
    }
    for w in weighted.iter_mut() {
        *w /= total.clone();
    }
    weighted
}

/// int_Delta p^moment e^(<xi, p>) dp over one simplex, exactly (up to
/// rounding) via confluent divided differences:
/// with barycentric coordinates lambda and theta_i = <xi, v_i>,
/// int lambda^gamma e^(sum theta_i lambda_i) = gamma! * dd-exp(theta_i
/// repeated gamma_i + 1 times), and p^moment expands into a finite sum of
/// such monomials. The simplex volume factor enters as |det|.
pub fn integrate_exp_linear_over_simplex(verts: &[Vec<f64>], xi: &[f64], moment: &[u32]) -> f64 {
    let n = xi.len();
    assert_eq!(verts.len(), n + 1);
    let det = match n {
        1 => (verts[1][0] - verts[0][0]).abs(),
        2 => {
            let u = [verts[1][0] - verts[0][0], verts[1][1] - verts[0][1]];
            let v = [verts[2][0] - verts[0][0], verts[2][1] - verts[0][1]];
            (u[0] * v[1] - u[1] * v[0]).abs()
        }
        _ => panic!("simplex integration covers n = 1, 2"),
    };
    if det == 0.0 {
        return 0.0;
    }
    let thetas: Vec<f64> =
        verts.iter().map(|v| v.iter().zip(xi).map(|(a, b)| a * b).sum()).collect();
    // Expand prod_d (sum_i lambda_i v_i[d])^moment[d] into lambda-monomials.
    let mut terms: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    terms.insert(vec![0; n + 1], 1.0);
    for d in 0..n {
        for _ in 0..moment[d] {
            let mut next: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            for (gamma, coef) in &terms {
                for (i, v) in verts.iter().enumerate() {
                    if v[d] == 0.0 {
                        continue;
                    }
                    let mut g = gamma.clone();
                    g[i] += 1;
                    *next.entry(g).or_insert(0.0) += coef * v[d];
                }
            }
            terms = next;
        }
    }
    let mut acc = 0.0;
    for (gamma, coef) in &terms {
        let mut nodes = Vec::with_capacity(n + 1 + gamma.iter().sum::<u32>() as usize);
        let mut gamma_factorial = 1.0f64;
        for (i, &gi) in gamma.iter().enumerate() {
            for _ in 0..=gi {
                nodes.push(thetas[i]);
            }
            for q in 2..=gi {
                gamma_factorial *= q as f64;
            }
        }
        acc += coef * gamma_factorial * exp_dd(&nodes);
    }
    det * acc
}

/// All multi-indices in n variables with total degree <= max_degree,
/// graded-lexicographically ordered.
pub fn multi_indices(n: usize, max_degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    match n {
        1 => {
            for d in 0..=max_degree {
                out.push(vec![d]);
            }
        }
        2 => {
            for total in 0..=max_degree {
                for a in (0..=total).rev() {
                    out.push(vec![a, total - a]);
                }
            }
        }
        _ => panic!("multi_indices covers n = 1, 2"),
    }
    out
}
