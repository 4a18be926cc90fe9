//! Torus-invariant metrics as convex functions on R^n.
//!
//! A `ToricPotential` is either max-affine, phi(x) = max_j (<p_j, x> + a_j),
//! or a smooth log-sum-exp at sharpness k,
//! phi(x) = (1/k) log sum_j e^(k (<p_j, x> + a_j)).
//! The slopes p_j live in the moment polytope P; the gradient (moment map)
//! has image in conv{p_j}, and conv{p_j} = P is the full-mass criterion.
//!
//! The weighted Monge-Ampere measure MA_g(phi) = MA(phi) g(grad phi) is
//! atomic in the max-affine case: the induced polyhedral subdivision of R^n
//! has finitely many vertices x_v, and the atom at x_v carries the g-mass
//! of the subdifferential cell, mass = int_{cell ∩ P} g dp / vol(P). Cells
//! and masses are computed in exact rational arithmetic. In the smooth case
//! MA_g has the density det(D^2 phi) g(grad phi) / vol(P).
//!
//! Envelopes: for lambda interior to P, the envelope is the Legendre
//! transform of the dual function restricted to {p >= lambda}. Because the
//! restriction cuts subdifferential cells, the resulting max-affine
//! function needs, besides the surviving original pieces, a tangent piece
//! for every vertex of every clipped cell (slope w in the clipped cell of
//! x_v, intercept phi(x_v) - <w, x_v>). Dropping slopes alone is wrong
//! already for phi = |x| at lambda = 0, whose envelope is max(0, x), not x;
//! the construction here matches the direct inf-over-translations formula.

use crate::error::{Error, Result};
use crate::gweight::GWeight;
use crate::measure::DiscreteMeasure;
use crate::polytope::LatticePolytope;
use crate::rational::{rat, rat_vec, to_f64, to_f64_vec, ConvexBody, Rat};
use num::{Signed, Zero};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Cap on (n+1)-subset enumeration during subdivision construction.
const SUBSET_CAP: u128 = 40_000_000;

/// JSON shape: {"slopes": [[..],..], "coeffs": [..], "sharpness": k | "inf"}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub slopes: Vec<Vec<f64>>,
    pub coeffs: Vec<f64>,
    pub sharpness: SharpnessSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SharpnessSpec {
    Finite(f64),
    Tag(String),
}

#[derive(Clone, Debug)]
pub struct ToricPotential {
    dim: usize,
    slopes: Vec<Vec<f64>>,
    /// Intercepts a_j. For finite sharpness k these are log(c_j)/k; the
    /// max-affine form stores them directly (coefficients c_j = e^(a_j)).
    intercepts: Vec<f64>,
    /// None = max-affine.
    sharpness: Option<f64>,
}

/// A vertex of the polyhedral subdivision induced by a max-affine potential,
/// together with its value-active pieces and subdifferential cell.
#[derive(Clone, Debug)]
pub struct SubdivisionVertex {
    pub location: Vec<Rat>,
    pub location_f64: Vec<f64>,
    pub active: Vec<usize>,
    /// conv{p_j : j value-active}, not yet clipped to P.
    pub cell: ConvexBody,
}

impl ToricPotential {
    pub fn max_affine(slopes: Vec<Vec<f64>>, intercepts: Vec<f64>) -> Result<Self> {
        Self::build(slopes, intercepts, None)
    }

    /// phi(x) = (1/k) log sum c_j e^(k <p_j, x>), stored via a_j = log(c_j)/k.
    pub fn log_sum_exp(slopes: Vec<Vec<f64>>, coeffs: Vec<f64>, k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidInput("sharpness must be positive and finite".into()));
        }
        if coeffs.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidInput("coefficients must be positive".into()));
        }
        let intercepts = coeffs.iter().map(|c| c.ln() / k).collect();
        Self::build(slopes, intercepts, Some(k))
    }

    /// Same data, explicit intercepts (used where coefficients e^(k a_j)
    /// would overflow).
    pub fn log_sum_exp_with_intercepts(
        slopes: Vec<Vec<f64>>,
        intercepts: Vec<f64>,
        k: f64,
    ) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidInput("sharpness must be positive and finite".into()));
        }
        Self::build(slopes, intercepts, Some(k))
    }

    fn build(slopes: Vec<Vec<f64>>, intercepts: Vec<f64>, sharpness: Option<f64>) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::InvalidInput("potential needs at least one piece".into()));
        }
        if slopes.len() != intercepts.len() {
            return Err(Error::InvalidInput("slope/intercept length mismatch".into()));
        }
        let dim = slopes[0].len();
        if dim != 1 && dim != 2 {
            return Err(Error::DimensionUnsupported(dim));
        }
        for s in &slopes {
            if s.len() != dim {
                return Err(Error::InvalidInput("inconsistent slope dimensions".into()));
            }
            if s.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput("non-finite slope".into()));
            }
        }
        if intercepts.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("non-finite intercept".into()));
        }
        // Canonicalize: one piece per distinct slope, keeping the largest
        // intercept (lower duplicates are dominated everywhere).
        let mut best: BTreeMap<Vec<Rat>, (Vec<f64>, f64)> = BTreeMap::new();
        for (s, &a) in slopes.iter().zip(&intercepts) {
            let key = rat_vec(s);
            match best.get_mut(&key) {
                Some(entry) => {
                    if a > entry.1 {
                        entry.1 = a;
                    }
                }
                None => {
                    best.insert(key, (s.clone(), a));
                }
            }
        }
        let mut slopes_c = Vec::with_capacity(best.len());
        let mut intercepts_c = Vec::with_capacity(best.len());
        for (_, (s, a)) in best {
            slopes_c.push(s);
            intercepts_c.push(a);
        }
        Ok(ToricPotential { dim, slopes: slopes_c, intercepts: intercepts_c, sharpness })
    }

    /// The support function of P, h_P(x) = max over vertices <v, x>: the
    /// canonical max-affine reference potential with full mass.
    pub fn support_function(p: &LatticePolytope) -> Self {
        let slopes = p.vertices().to_vec();
        let intercepts = vec![0.0; slopes.len()];
        Self::max_affine(slopes, intercepts).expect("vertex data is valid")
    }

    /// Smooth reference at sharpness k: log-sum-exp over the vertices of P
    /// with unit coefficients.
    pub fn smooth_reference(p: &LatticePolytope, k: f64) -> Self {
        let slopes = p.vertices().to_vec();
        let n = slopes.len();
        Self::log_sum_exp(slopes, vec![1.0; n], k).expect("vertex data is valid")
    }

    pub fn from_spec(spec: PotentialSpec) -> Result<Self> {
        match spec.sharpness {
            SharpnessSpec::Finite(k) => Self::log_sum_exp(spec.slopes, spec.coeffs, k),
            SharpnessSpec::Tag(ref t) if t == "inf" => {
                if spec.coeffs.iter().any(|&c| !(c > 0.0)) {
                    return Err(Error::InvalidInput("coefficients must be positive".into()));
                }
                let intercepts = spec.coeffs.iter().map(|c| c.ln()).collect();
                Self::max_affine(spec.slopes, intercepts)
            }
            SharpnessSpec::Tag(t) => {
                Err(Error::InvalidInput(format!("unknown sharpness tag {t:?}")))
            }
        }
    }

    pub fn to_spec(&self) -> PotentialSpec {
        let (coeffs, sharpness) = match self.sharpness {
            Some(k) => (
                self.intercepts.iter().map(|a| (k * a).exp()).collect(),
                SharpnessSpec::Finite(k),
            ),
            None => (
                self.intercepts.iter().map(|a| a.exp()).collect(),
                SharpnessSpec::Tag("inf".into()),
            ),
        };
        PotentialSpec { slopes: self.slopes.clone(), coeffs, sharpness }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slopes(&self) -> &[Vec<f64>] {
        &self.slopes
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn sharpness(&self) -> Option<f64> {
        self.sharpness
    }

    pub fn is_max_affine(&self) -> bool {
        self.sharpness.is_none()
    }

    pub fn piece_count(&self) -> usize {
        self.slopes.len()
    }

    /// phi + c.
    pub fn translate(&self, c: f64) -> Self {
        let mut out = self.clone();
        for a in out.intercepts.iter_mut() {
            *a += c;
        }
        out
    }

    /// Max-affine with the same pieces (the pointwise limit of sharpening).
    pub fn to_max_affine(&self) -> Self {
        let mut out = self.clone();
        out.sharpness = None;
        out
    }

    /// Same pieces at a different finite sharpness.
    pub fn with_sharpness(&self, k: f64) -> Result<Self> {
        Self::log_sum_exp_with_intercepts(self.slopes.clone(), self.intercepts.clone(), k)
    }

    fn piece_values(&self, x: &[f64]) -> Vec<f64> {
        self.slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(p, a)| p.iter().zip(x).map(|(pi, xi)| pi * xi).sum::<f64>() + a)
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let vals = self.piece_values(x);
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match self.sharpness {
            None => m,
            Some(k) => {
                let s: f64 = vals.iter().map(|v| (k * (v - m)).exp()).sum();
                m + s.ln() / k
            }
        }
    }

    /// grad phi(x). Smooth: the softmax average of the slopes. Max-affine:
    /// the unique active slope, or a tie error naming the tied pieces.
    pub fn moment_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.sharpness {
            Some(_) => {
                let w = self.softmax_weights(x);
                let mut m = vec![0.0; self.dim];
                for (wj, p) in w.iter().zip(&self.slopes) {
                    for d in 0..self.dim {
                        m[d] += wj * p[d];
                    }
                }
                Ok(m)
            }
            None => {
                let tied = self.active_pieces(x);
                if tied.len() == 1 {
                    Ok(self.slopes[tied[0]].clone())
                } else {
                    Err(Error::NotDifferentiable { tied })
                }
            }
        }
    }

    /// Indices of value-active pieces at x (exact rational comparison).
    pub fn active_pieces(&self, x: &[f64]) -> Vec<usize> {
        let xr = rat_vec(x);
        let vals: Vec<Rat> = self
            .slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(p, a)| {
                p.iter().zip(&xr).map(|(pi, xi)| rat(*pi) * xi).sum::<Rat>() + rat(*a)
            })
            .collect();
        let vmax = vals.iter().max().unwrap().clone();
        vals.iter()
            .enumerate()
            .filter(|(_, v)| **v == vmax)
            .map(|(j, _)| j)
            .collect()
    }

    /// Subdifferential at x: conv{p_j : j value-active} (max-affine form;
    /// smooth potentials are differentiable and give the singleton hull).
    pub fn subdifferential(&self, x: &[f64]) -> ConvexBody {
        match self.sharpness {
            Some(_) => {
                let m = self.moment_map(x).expect("smooth potential is differentiable");
                ConvexBody::hull(self.dim, &[rat_vec(&m)])
            }
            None => {
                let active = self.active_pieces(x);
                let pts: Vec<Vec<Rat>> =
                    active.iter().map(|&j| rat_vec(&self.slopes[j])).collect();
                ConvexBody::hull(self.dim, &pts)
            }
        }
    }

    fn softmax_weights(&self, x: &[f64]) -> Vec<f64> {
        let k = self.sharpness.expect("softmax weights need finite sharpness");
        let vals = self.piece_values(x);
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = vals.iter().map(|v| (k * (v - m)).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// D^2 phi(x) = k (sum_j w_j p_j p_j^T - m m^T) for finite sharpness.
    pub fn hessian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let k = self
            .sharpness
            .ok_or_else(|| Error::InvalidInput("hessian needs a smooth potential".into()))?;
        let w = self.softmax_weights(x);
        let mut m = vec![0.0; self.dim];
        for (wj, p) in w.iter().zip(&self.slopes) {
            for d in 0..self.dim {
                m[d] += wj * p[d];
            }
        }
        let mut h = vec![vec![0.0; self.dim]; self.dim];
        for (wj, p) in w.iter().zip(&self.slopes) {
            for r in 0..self.dim {
                for c in 0..self.dim {
                    h[r][c] += wj * p[r] * p[c];
                }
            }
        }
        for r in 0..self.dim {
            for c in 0..self.dim {
                h[r][c] = k * (h[r][c] - m[r] * m[c]);
            }
        }
        Ok(h)
    }

    pub fn hessian_det(&self, x: &[f64]) -> Result<f64> {
        let h = self.hessian(x)?;
        Ok(match self.dim {
            1 => h[0][0],
            2 => h[0][0] * h[1][1] - h[0][1] * h[1][0],
            _ => unreachable!(),
        })
    }

    /// Pointwise density of MA_g(phi) = det(D^2 phi) g(grad phi) / vol(P)
    /// (smooth potentials).
    pub fn ma_density_at(&self, x: &[f64], g: &GWeight, p: &LatticePolytope) -> Result<f64> {
        let det = self.hessian_det(x)?.max(0.0);
        let m = self.moment_map(x)?;
        Ok(det * g.eval(&m) / p.volume())
    }

    pub fn slope_hull(&self) -> ConvexBody {
        let pts: Vec<Vec<Rat>> = self.slopes.iter().map(|s| rat_vec(s)).collect();
        ConvexBody::hull(self.dim, &pts)
    }

    /// Full Monge-Ampere mass criterion: conv{p_j} = P, up to `tol` in the
    /// slope coordinates (exact when slopes are dyadic, e.g. lattice data).
    pub fn has_full_mass(&self, p: &LatticePolytope, tol: f64) -> bool {
        if !self.slopes.iter().all(|s| p.contains_f64(s, tol)) {
            return false;
        }
        let hull_vol = to_f64(&self.slope_hull().volume());
        (hull_vol - p.volume()).abs() <= tol * p.volume().max(1.0)
    }

    /// All vertices of the induced polyhedral subdivision of R^n, with
    /// their active sets and subdifferential cells. Exact: candidates from
    /// an f64 prefilter over (n+1)-subsets are confirmed in rational
    /// arithmetic, and tangent pieces join cells through the exact
    /// value-activity test. Max-affine potentials only.
    pub fn subdivision(&self) -> Result<Vec<SubdivisionVertex>> {
        if self.sharpness.is_some() {
            return Err(Error::InvalidInput(
                "subdivision is defined for max-affine potentials".into(),
            ));
        }
        let n = self.dim;
        let pieces = self.slopes.len();
        if pieces < n + 1 {
            return Ok(Vec::new());
        }
        let subset_count: u128 = match n {
            1 => (pieces as u128) * (pieces as u128 - 1) / 2,
            2 => {
                let p = pieces as u128;
                p * (p - 1) * (p - 2) / 6
            }
            _ => unreachable!(),
        };
        if subset_count > SUBSET_CAP {
            return Err(Error::Capacity(format!(
                "{subset_count} candidate subsets in subdivision enumeration"
            )));
        }
        let slopes_r: Vec<Vec<Rat>> = self.slopes.iter().map(|s| rat_vec(s)).collect();
        let intercepts_r: Vec<Rat> = self.intercepts.iter().map(|a| rat(*a)).collect();
        let scale_a = self.intercepts.iter().fold(1.0f64, |m, a| m.max(a.abs()));
        let scale_p = self
            .slopes
            .iter()
            .flat_map(|s| s.iter())
            .fold(1.0f64, |m, c| m.max(c.abs()));

        let mut seen: BTreeMap<Vec<Rat>, ()> = BTreeMap::new();
        let mut out: Vec<SubdivisionVertex> = Vec::new();

        let consider = |subset: &[usize],
                            seen: &mut BTreeMap<Vec<Rat>, ()>,
                            out: &mut Vec<SubdivisionVertex>| {
            // Exact solve of the tie system for this subset.
            let x = match solve_tie_exact(&slopes_r, &intercepts_r, subset) {
                Some(x) => x,
                None => return,
            };
            if seen.contains_key(&x) {
                return;
            }
            // Exact value-activity: the subset value must be the global max.
            let vals: Vec<Rat> = slopes_r
                .iter()
                .zip(&intercepts_r)
                .map(|(p, a)| {
                    p.iter().zip(&x).map(|(pi, xi)| pi * xi).sum::<Rat>() + a.clone()
                })
                .collect();
            let v_sub = vals[subset[0]].clone();
            if vals.iter().any(|v| v > &v_sub) {
                return;
            }
            let active: Vec<usize> = vals
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == v_sub)
                .map(|(j, _)| j)
                .collect();
            let cell_pts: Vec<Vec<Rat>> = active.iter().map(|&j| slopes_r[j].clone()).collect();
            let cell = ConvexBody::hull(n, &cell_pts);
            seen.insert(x.clone(), ());
            out.push(SubdivisionVertex {
                location_f64: to_f64_vec(&x),
                location: x,
                active,
                cell,
            });
        };

        match n {
            1 => {
                for i in 0..pieces {
                    for j in (i + 1)..pieces {
                        if let Some(keep) =
                            prefilter_pair(&self.slopes, &self.intercepts, i, j, scale_a, scale_p)
                        {
                            if keep {
                                consider(&[i, j], &mut seen, &mut out);
                            }
                        }
                    }
                }
            }
            2 => {
                for i in 0..pieces {
                    for j in (i + 1)..pieces {
                        for l in (j + 1)..pieces {
                            if let Some(keep) = prefilter_triple(
                                &self.slopes,
                                &self.intercepts,
                                [i, j, l],
                                scale_a,
                                scale_p,
                            ) {
                                if keep {
                                    consider(&[i, j, l], &mut seen, &mut out);
                                }
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        out.sort_by(|a, b| a.location.cmp(&b.location));
        Ok(out)
    }

    /// Atomic MA_g(phi) for a max-affine potential: one atom per
    /// subdivision vertex, mass = int_{cell ∩ P} g dp / vol(P). Slopes must
    /// lie in P (tolerance 1e-6); cells are clipped to P exactly.
    pub fn ma_atomic(&self, g: &GWeight, p: &LatticePolytope) -> Result<DiscreteMeasure> {
        if self.sharpness.is_some() {
            return Err(Error::InvalidInput(
                "atomic MA is defined for max-affine potentials; smooth \
                 potentials have a density"
                    .into(),
            ));
        }
        if !self.slopes.iter().all(|s| p.contains_f64(s, 1e-6)) {
            return Err(Error::InvalidInput("slopes must lie in the polytope".into()));
        }
        let vol = p.volume();
        let mut atoms = Vec::new();
        for v in self.subdivision()? {
            let clipped = clip_to_polytope(&v.cell, p);
            let mass = if clipped.is_empty() { 0.0 } else { g.integral_over_body(&clipped) / vol };
            atoms.push((v.location_f64, mass));
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Ok(DiscreteMeasure::new(atoms))
    }

    /// Mass that atomic MA_g(phi) assigns to the single point x (the g-mass
    /// of the subdifferential cell there); avoids full enumeration.
    pub fn ma_mass_at(&self, x: &[f64], g: &GWeight, p: &LatticePolytope) -> f64 {
        let cell = self.subdifferential(x);
        let clipped = clip_to_polytope(&cell, p);
        if clipped.is_empty() {
            0.0
        } else {
            g.integral_over_body(&clipped) / p.volume()
        }
    }

    /// int_P g phi^* dnu for a max-affine potential whose slope hull fills
    /// P (within rounding): phi^* is affine on each subdifferential cell,
    /// phi^*(q) = <q, x_v> - phi(x_v), and the cells tile P.
    pub fn integral_g_conjugate(&self, g: &GWeight, p: &LatticePolytope) -> Result<f64> {
        if !self.has_full_mass(p, 1e-9) {
            return Err(Error::InvalidInput(
                "conjugate integral needs a full-mass potential".into(),
            ));
        }
        let vol = p.volume();
        let mut acc = 0.0;
        for v in self.subdivision()? {
            let clipped = clip_to_polytope(&v.cell, p);
            if clipped.is_empty() {
                continue;
            }
            let phi_v = self.eval(&v.location_f64);
            acc += g.integral_affine_over_body(&clipped, &v.location_f64, -phi_v);
        }
        Ok(acc / vol)
    }

    /// The envelope at lambda (strictly interior to P): Legendre transform
    /// of the dual restricted to {p >= lambda}. Smooth input is first
    /// converted to its max-affine form. Generic lambda assumed (lambda on
    /// a cell wall is an exceptional, measure-zero configuration).
    pub fn envelope(&self, lambda: &[f64], p: &LatticePolytope) -> Result<ToricPotential> {
        if self.sharpness.is_some() {
            return self.to_max_affine().envelope(lambda, p);
        }
        if lambda.len() != self.dim {
            return Err(Error::InvalidInput("lambda dimension mismatch".into()));
        }
        let lam_r = rat_vec(lambda);
        if !p.contains_strictly_rat(&lam_r) {
            return Err(Error::InvalidInput(
                "envelope parameter must be strictly interior to P".into(),
            ));
        }
        let distinct = self.slopes.len();
        if self.dim == 2 && distinct >= 2 && self.slope_hull().volume().is_zero() {
            return Err(Error::InvalidInput(
                "envelope needs a full-dimensional slope hull in 2-D".into(),
            ));
        }
        let mut out_slopes: Vec<Vec<f64>> = Vec::new();
        let mut out_intercepts: Vec<f64> = Vec::new();
        // (a) Surviving original pieces: slope >= lambda componentwise.
        for (s, &a) in self.slopes.iter().zip(&self.intercepts) {
            let sr = rat_vec(s);
            if sr.iter().zip(&lam_r).all(|(si, li)| si >= li) {
                out_slopes.push(s.clone());
                out_intercepts.push(a);
            }
        }
        // (b) Tangent pieces from clipped subdifferential cells: for each
        // subdivision vertex x_v, each vertex w of cell ∩ {p >= lambda}
        // contributes slope w with intercept phi(x_v) - <w, x_v>.
        for v in self.subdivision()? {
            let clipped = clip_to_superlevel_rational(&v.cell, &lam_r);
            if clipped.is_empty() {
                continue;
            }
            let phi_v = self.eval(&v.location_f64);
            for w in clipped.verts {
                let w_f: Vec<f64> = to_f64_vec(&w);
                let dot: f64 =
                    w_f.iter().zip(&v.location_f64).map(|(a, b)| a * b).sum();
                out_slopes.push(w_f);
                out_intercepts.push(phi_v - dot);
            }
        }
        if out_slopes.is_empty() {
            return Err(Error::EmptyEnvelope);
        }
        ToricPotential::max_affine(out_slopes, out_intercepts)
    }

    /// Total mass of MA(P_lambda phi): the g = 1 mass of the envelope,
    /// which equals vol(conv{p_j} ∩ {p >= lambda}) / vol(P). An empty
    /// envelope carries zero mass.
    pub fn mass_of_superlevel(&self, lambda: &[f64], p: &LatticePolytope) -> Result<f64> {
        match self.envelope(lambda, p) {
            Ok(env) => Ok(env.ma_atomic(&GWeight::one(), p)?.total_mass()),
            Err(Error::EmptyEnvelope) => Ok(0.0),
            Err(e) => Err(e),
        }
    }

    /// The sharpening family: the same pieces at each sharpness in k_list,
    /// plus the max-affine limit, pointwise decreasing in k.
    pub fn sharpen_family(&self, k_list: &[f64]) -> Result<Vec<ToricPotential>> {
        if self.sharpness.is_none() {
            return Err(Error::InvalidInput("sharpen_family starts from a smooth potential".into()));
        }
        let mut out = Vec::with_capacity(k_list.len() + 1);
        for &k in k_list {
            out.push(self.with_sharpness(k)?);
        }
        out.push(self.to_max_affine());
        Ok(out)
    }
}

impl Serialize for ToricPotential {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ToricPotential {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = PotentialSpec::deserialize(d)?;
        ToricPotential::from_spec(spec).map_err(serde::de::Error::custom)
    }
}

fn clip_to_polytope(cell: &ConvexBody, p: &LatticePolytope) -> ConvexBody {
    let mut c = cell.clone();
    for h in p.halfspaces() {
        if c.is_empty() {
            break;
        }
        let normal: Vec<Rat> = h.normal.iter().map(|&n| Rat::from_integer(n.into())).collect();
        c = c.clip(&normal, &Rat::from_integer(h.offset.into()));
    }
    c
}

fn clip_to_superlevel_rational(cell: &ConvexBody, lambda: &[Rat]) -> ConvexBody {
    let mut c = cell.clone();
    for (d, l) in lambda.iter().enumerate() {
        if c.is_empty() {
            break;
        }
        let mut normal = vec![Rat::zero(); cell.dim];
        normal[d] = -Rat::from_integer(1.into());
        c = c.clip(&normal, &-l.clone());
    }
    c
}

/// Exact tie solve: find x with all pieces in `subset` equal in value.
/// None when the system is singular (no isolated tie point).
fn solve_tie_exact(slopes: &[Vec<Rat>], intercepts: &[Rat], subset: &[usize]) -> Option<Vec<Rat>> {
    let base = subset[0];
    match subset.len() {
        2 => {
            let dp = &slopes[subset[1]][0] - &slopes[base][0];
            if dp.is_zero() {
                return None;
            }
            let da = &intercepts[base] - &intercepts[subset[1]];
            Some(vec![da / dp])
        }
        3 => {
            let r1: Vec<Rat> = (0..2)
                .map(|d| &slopes[subset[1]][d] - &slopes[base][d])
                .collect();
            let r2: Vec<Rat> = (0..2)
                .map(|d| &slopes[subset[2]][d] - &slopes[base][d])
                .collect();
            let b1 = &intercepts[base] - &intercepts[subset[1]];
            let b2 = &intercepts[base] - &intercepts[subset[2]];
            let det = &r1[0] * &r2[1] - &r1[1] * &r2[0];
            if det.is_zero() {
                return None;
            }
            let x = (&b1 * &r2[1] - &b2 * &r1[1]) / det.clone();
            let y = (&r1[0] * &b2 - &r2[0] * &b1) / det;
            Some(vec![x, y])
        }
        _ => unreachable!(),
    }
}

/// f64 prescreen for a pair (1-D): Some(true) = candidate, Some(false) =
/// certainly not value-active, None shorthand unused. Near-singular
/// systems pass through to the exact stage.
fn prefilter_pair(
    slopes: &[Vec<f64>],
    intercepts: &[f64],
    i: usize,
    j: usize,
    scale_a: f64,
    scale_p: f64,
) -> Option<bool> {
    let dp = slopes[j][0] - slopes[i][0];
    if dp.abs() <= 1e-12 * scale_p {
        return Some(true); // let the exact stage decide
    }
    let x = (intercepts[i] - intercepts[j]) / dp;
    Some(near_active(slopes, intercepts, &[x], intercepts[i] + slopes[i][0] * x, scale_a, scale_p))
}

fn prefilter_triple(
    slopes: &[Vec<f64>],
    intercepts: &[f64],
    idx: [usize; 3],
    scale_a: f64,
    scale_p: f64,
) -> Option<bool> {
    let [i, j, l] = idx;
    let r1 = [slopes[j][0] - slopes[i][0], slopes[j][1] - slopes[i][1]];
    let r2 = [slopes[l][0] - slopes[i][0], slopes[l][1] - slopes[i][1]];
    let det = r1[0] * r2[1] - r1[1] * r2[0];
    if det.abs() <= 1e-9 * scale_p * scale_p {
        return Some(true); // near-singular: defer to exact arithmetic
    }
    let b1 = intercepts[i] - intercepts[j];
    let b2 = intercepts[i] - intercepts[l];
    let x = (b1 * r2[1] - b2 * r1[1]) / det;
    let y = (r1[0] * b2 - r2[0] * b1) / det;
    let v = intercepts[i] + slopes[i][0] * x + slopes[i][1] * y;
    Some(near_active(slopes, intercepts, &[x, y], v, scale_a, scale_p))
}

fn near_active(
    slopes: &[Vec<f64>],
    intercepts: &[f64],
    x: &[f64],
    v_sub: f64,
    scale_a: f64,
    scale_p: f64,
) -> bool {
    let xnorm = x.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let slack = 1e-7 * (1.0 + scale_a + scale_p * xnorm + v_sub.abs());
    for (p, a) in slopes.iter().zip(intercepts) {
        let val = p.iter().zip(x).map(|(pi, xi)| pi * xi).sum::<f64>() + a;
        if val > v_sub + slack {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn abs_pot() -> ToricPotential {
        ToricPotential::max_affine(vec![vec![-1.0], vec![1.0]], vec![0.0, 0.0]).unwrap()
    }

    fn lse_sym(k: f64) -> ToricPotential {
        ToricPotential::log_sum_exp(vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0], k).unwrap()
    }

    #[test]
    fn eval_basics() {
        assert_relative_eq!(abs_pot().eval(&[-2.5]), 2.5);
        assert_relative_eq!(lse_sym(1.0).eval(&[0.0]), 2.0f64.ln(), max_relative = 1e-15);
        // Duplicate-slope canonicalization keeps the dominant intercept.
        let p = ToricPotential::max_affine(
            vec![vec![1.0], vec![1.0], vec![0.0]],
            vec![0.0, 2.0, 0.0],
        )
        .unwrap();
        assert_eq!(p.piece_count(), 2);
        assert_relative_eq!(p.eval(&[0.0]), 2.0);
    }

    #[test]
    fn moment_map_smooth_and_ties() {
        let p = lse_sym(1.0);
        assert_relative_eq!(p.moment_map(&[0.0]).unwrap()[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.moment_map(&[30.0]).unwrap()[0], 1.0, epsilon = 1e-12);
        let ma = abs_pot();
        assert_eq!(ma.moment_map(&[2.0]).unwrap(), vec![1.0]);
        match ma.moment_map(&[0.0]) {
            Err(Error::NotDifferentiable { tied }) => assert_eq!(tied, vec![0, 1]),
            other => panic!("expected tie error, got {other:?}"),
        }
        let sub = ma.subdifferential(&[0.0]);
        assert_eq!(sub.verts.len(), 2);
    }

    #[test]
    fn moment_map_matches_finite_differences() {
        let p = ToricPotential::log_sum_exp(
            vec![vec![-1.0, -1.0], vec![2.0, -1.0], vec![-1.0, 2.0], vec![0.3, 0.1]],
            vec![1.0, 0.7, 1.3, 2.0],
            2.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let m = p.moment_map(&x).unwrap();
            let h = 1e-5;
            for d in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let fd = (p.eval(&xp) - p.eval(&xm)) / (2.0 * h);
                assert_relative_eq!(m[d], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn hessian_matches_closed_form() {
        // phi = log(2 cosh x): phi'' = sech^2 x.
        let p = lse_sym(1.0);
        for &x in &[-1.3, 0.0, 0.7] {
            let h = p.hessian(&[x]).unwrap()[0][0];
            assert_relative_eq!(h, 1.0 / x.cosh().powi(2), max_relative = 1e-12);
        }
    }

    #[test]
    fn atomic_ma_single_kink() {
        let seg = LatticePolytope::interval(-1, 1);
        let mu = abs_pot().ma_atomic(&GWeight::one(), &seg).unwrap();
        assert_eq!(mu.atoms().len(), 1);
        assert_eq!(mu.atoms()[0].0, vec![0.0]);
        assert_relative_eq!(mu.atoms()[0].1, 1.0, max_relative = 1e-15);
        // Step weight at 0: only the right half of the cell carries mass.
        let mu_step = abs_pot().ma_atomic(&GWeight::step(vec![0.0]), &seg).unwrap();
        assert_relative_eq!(mu_step.atoms()[0].1, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn atomic_ma_two_kinks_and_tangency() {
        let seg = LatticePolytope::interval(-1, 1);
        // max(-x, x, 0): triple tie at 0 is a tangency; a single atom with
        // the full cell [-1, 1].
        let p = ToricPotential::max_affine(
            vec![vec![-1.0], vec![1.0], vec![0.0]],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let mu = p.ma_atomic(&GWeight::one(), &seg).unwrap();
        assert_eq!(mu.atoms().len(), 1);
        assert_relative_eq!(mu.atoms()[0].1, 1.0);
        // Raising the flat piece splits the kink in two.
        let q = ToricPotential::max_affine(
            vec![vec![-1.0], vec![1.0], vec![0.0]],
            vec![0.0, 0.0, 0.25],
        )
        .unwrap();
        let mu2 = q.ma_atomic(&GWeight::one(), &seg).unwrap();
        assert_eq!(mu2.atoms().len(), 2);
        assert_eq!(mu2.atoms()[0].0, vec![-0.25]);
        assert_eq!(mu2.atoms()[1].0, vec![0.25]);
        assert_relative_eq!(mu2.atoms()[0].1, 0.5, max_relative = 1e-15);
        assert_relative_eq!(mu2.atoms()[1].1, 0.5, max_relative = 1e-15);
        assert_relative_eq!(mu2.total_mass(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn atomic_ma_2d_simplex() {
        let p = LatticePolytope::unit_simplex();
        let pot = ToricPotential::max_affine(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let mu = pot.ma_atomic(&GWeight::one(), &p).unwrap();
        assert_eq!(mu.atoms().len(), 1);
        assert_eq!(mu.atoms()[0].0, vec![0.0, 0.0]);
        assert_relative_eq!(mu.total_mass(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn total_mass_theorem_and_deficit() {
        let p = LatticePolytope::p2_anticanonical();
        let g = GWeight::exp_linear_normalized(vec![0.3, -0.2], &p);
        // Full mass: slopes are the vertices plus interior points.
        let full = ToricPotential::max_affine(
            vec![
                vec![-1.0, -1.0],
                vec![2.0, -1.0],
                vec![-1.0, 2.0],
                vec![0.0, 0.0],
                vec![0.5, -0.5],
            ],
            vec![0.1, -0.4, 0.2, 0.6, 0.0],
        )
        .unwrap();
        assert!(full.has_full_mass(&p, 1e-12));
        let mu = full.ma_atomic(&g, &p).unwrap();
        assert_relative_eq!(mu.total_mass(), 1.0, epsilon = 1e-12);
        // Strict deficit when a vertex of P is missing from the hull.
        let partial = ToricPotential::max_affine(
            vec![vec![-1.0, -1.0], vec![2.0, -1.0], vec![0.0, 1.0], vec![0.0, 0.0]],
            vec![0.1, -0.4, 0.2, 0.6],
        )
        .unwrap();
        assert!(!partial.has_full_mass(&p, 1e-12));
        let mu2 = partial.ma_atomic(&g, &p).unwrap();
        assert!(mu2.total_mass() < 1.0 - 1e-3);
    }

    #[test]
    fn sandwich_bounds() {
        let p = LatticePolytope::interval(-1, 1);
        let g = GWeight::exp_linear_raw(vec![0.7]);
        let pot = ToricPotential::max_affine(
            vec![vec![-1.0], vec![-0.2], vec![1.0]],
            vec![0.0, 0.3, -0.1],
        )
        .unwrap();
        let mag = pot.ma_atomic(&g, &p).unwrap().total_mass();
        let ma = pot.ma_atomic(&GWeight::one(), &p).unwrap().total_mass();
        let lo = g.lower_bound_on(&p);
        let hi = 0.7f64.exp(); // sup of e^(0.7 p) on [-1,1]
        assert!(lo * ma <= mag + 1e-12 && mag <= hi * ma + 1e-12);
    }

    #[test]
    fn envelope_of_abs_needs_boundary_piece() {
        let seg = LatticePolytope::interval(-1, 1);
        let env = abs_pot().envelope(&[0.0], &seg).unwrap();
        // The envelope is max(0, x): zero for x < 0, x for x > 0.
        assert_relative_eq!(env.eval(&[-2.0]), 0.0);
        assert_relative_eq!(env.eval(&[3.0]), 3.0);
        // Dropping the slope -1 alone would give the affine x, which is
        // wrong at negative x; the inf-formula oracle in the acceptance
        // suite pins this down.
    }

    #[test]
    fn envelope_properties() {
        let seg = LatticePolytope::interval(-1, 1);
        let pot = ToricPotential::max_affine(
            vec![vec![-1.0], vec![-0.25], vec![0.5], vec![1.0]],
            vec![0.0, 0.4, 0.1, -0.3],
        )
        .unwrap();
        let lam = [0.125];
        let env = pot.envelope(&lam, &seg).unwrap();
        let env2 = env.envelope(&lam, &seg).unwrap();
        let shifted = pot.translate(0.7).envelope(&lam, &seg).unwrap();
        for i in -40..=40 {
            let x = [i as f64 * 0.1];
            assert!(env.eval(&x) <= pot.eval(&x) + 1e-12);
            assert_relative_eq!(env.eval(&x), env2.eval(&x), epsilon = 1e-12);
            assert_relative_eq!(shifted.eval(&x), env.eval(&x) + 0.7, epsilon = 1e-12);
        }
        // Locality: where the moment map is >= lambda, envelope = phi.
        for i in 1..=40 {
            let x = [0.8 + i as f64 * 0.05];
            let m = pot.moment_map(&x).ok();
            if let Some(m) = m {
                if m[0] >= lam[0] {
                    assert_relative_eq!(env.eval(&x), pot.eval(&x), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn envelope_2d_tangent_pieces() {
        // phi = max(0, x, y) restricted to p >= (0.5, 0.1): no original
        // slope survives, yet the envelope is finite, spanned by the
        // clipped-cell tangent pieces with slopes at the vertices of
        // conv{(0.5,0.1),(0.9,0.1),(0.5,0.5)} and intercept 0.
        let p = LatticePolytope::unit_simplex();
        let pot = ToricPotential::max_affine(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let env = pot.envelope(&[0.5, 0.1], &p).unwrap();
        let expect =
            |x: f64, y: f64| (0.5 * x + 0.1 * y).max(0.9 * x + 0.1 * y).max(0.5 * x + 0.5 * y);
        for &(x, y) in &[(-2.0, 0.0), (1.5, 0.5), (-1.0, 3.0), (0.3, -0.9)] {
            assert_relative_eq!(env.eval(&[x, y]), expect(x, y), epsilon = 1e-12);
        }
    }

    #[test]
    fn mass_of_superlevel_matches_step_weight() {
        let seg = LatticePolytope::interval(-1, 1);
        let pot = ToricPotential::max_affine(
            vec![vec![-1.0], vec![-0.25], vec![0.5], vec![1.0]],
            vec![0.0, 0.4, 0.1, -0.3],
        )
        .unwrap();
        for &l in &[-0.9, -0.3, 0.1, 0.6, 0.9] {
            let via_env = pot.mass_of_superlevel(&[l], &seg).unwrap();
            let via_step =
                pot.ma_atomic(&GWeight::step(vec![l]), &seg).unwrap().total_mass();
            assert_relative_eq!(via_env, via_step, epsilon = 1e-13);
            assert_relative_eq!(via_env, (1.0 - l) / 2.0, epsilon = 1e-13);
        }
        // 2-D simplex instance, exact area ratio.
        let sim = LatticePolytope::unit_simplex();
        let pot2 = ToricPotential::max_affine(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let m = pot2.mass_of_superlevel(&[0.25, 0.25], &sim).unwrap();
        assert_relative_eq!(m, 0.25, epsilon = 1e-13);
    }

    #[test]
    fn sharpen_family_is_monotone() {
        let base = ToricPotential::log_sum_exp(
            vec![vec![-1.0], vec![0.2], vec![1.0]],
            vec![1.0, 0.8, 1.2],
            1.0,
        )
        .unwrap();
        let fam = base.sharpen_family(&[1.0, 2.0, 4.0, 8.0]).unwrap();
        let n = base.piece_count() as f64;
        for i in -30..=30 {
            let x = [i as f64 * 0.2];
            for w in fam.windows(2) {
                assert!(w[0].eval(&x) >= w[1].eval(&x) - 1e-13);
            }
            let inf_val = fam.last().unwrap().eval(&x);
            let k1 = fam[0].eval(&x);
            assert!(k1 - inf_val <= n.ln() / 1.0 + 1e-13);
            assert!(k1 - inf_val >= -1e-13);
        }
        assert_relative_eq!(
            lse_sym(4.0).eval(&[0.0]),
            2.0f64.ln() / 4.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn comparison_principle_randomized() {
        // For full-mass phi, psi: the MA_g mass that psi puts strictly
        // inside {psi > phi} is at most what phi puts there.
        let seg = LatticePolytope::interval(-1, 1);
        let g = GWeight::exp_linear_raw(vec![0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut slopes = vec![vec![-1.0], vec![1.0]];
                let mut intercepts = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
                for _ in 0..3 {
                    slopes.push(vec![rng.gen_range(-0.95..0.95)]);
                    intercepts.push(rng.gen_range(-0.5..0.5));
                }
                ToricPotential::max_affine(slopes, intercepts).unwrap()
            };
            let phi = mk(&mut rng);
            let psi = mk(&mut rng);
            let mass_in = |nu: &DiscreteMeasure, a: &ToricPotential, b: &ToricPotential| {
                // atoms strictly inside {a < b}
                nu.atoms()
                    .iter()
                    .filter(|(x, _)| b.eval(x) > a.eval(x) + 1e-12)
                    .map(|(_, m)| m)
                    .sum::<f64>()
            };
            let mu_phi = phi.ma_atomic(&g, &seg).unwrap();
            let mu_psi = psi.ma_atomic(&g, &seg).unwrap();
            let lhs = mass_in(&mu_psi, &phi, &psi);
            let rhs = mass_in(&mu_phi, &phi, &psi);
            assert!(
                lhs <= rhs + 1e-10,
                "comparison principle violated: {lhs} > {rhs}"
            );
        }
    }

    #[test]
    fn max_of_two_lower_bound_randomized() {
        let seg = LatticePolytope::interval(-1, 1);
        let g = GWeight::one();
        let mut rng = ChaCha8Rng::seed_from_u64(512);
        for _ in 0..25 {
            let mk = |rng: &mut ChaCha8Rng| {
                let slopes = vec![vec![-1.0], vec![rng.gen_range(-0.8..0.8)], vec![1.0]];
                let intercepts =
                    vec![rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
                ToricPotential::max_affine(slopes, intercepts).unwrap()
            };
            let phi = mk(&mut rng);
            let psi = mk(&mut rng);
            let mu_phi = phi.ma_atomic(&g, &seg).unwrap();
            let mu_psi = psi.ma_atomic(&g, &seg).unwrap();
            // mu = atomwise min over the shared support.
            let mut mu: Vec<(Vec<f64>, f64)> = Vec::new();
            for (x, m1) in mu_phi.atoms() {
                if let Some((_, m2)) =
                    mu_psi.atoms().iter().find(|(y, _)| y == x)
                {
                    mu.push((x.clone(), m1.min(*m2)));
                }
            }
            let maxp = ToricPotential::max_affine(
                [phi.slopes().to_vec(), psi.slopes().to_vec()].concat(),
                [phi.intercepts().to_vec(), psi.intercepts().to_vec()].concat(),
            )
            .unwrap();
            let mu_max = maxp.ma_atomic(&g, &seg).unwrap();
            for (x, m) in &mu {
                let got = mu_max
                    .atoms()
                    .iter()
                    .find(|(y, _)| y == x)
                    .map(|(_, mm)| *mm)
                    .unwrap_or(0.0);
                assert!(got >= m - 1e-10, "max lower bound violated at {x:?}: {got} < {m}");
            }
        }
    }

    #[test]
    fn serde_round_trip_including_inf() {
        let spec: PotentialSpec = serde_json::from_str(
            r#"{"slopes": [[-1.0], [1.0]], "coeffs": [1.0, 1.0], "sharpness": "inf"}"#,
        )
        .unwrap();
        let p = ToricPotential::from_spec(spec).unwrap();
        assert!(p.is_max_affine());
        assert_relative_eq!(p.eval(&[0.5]), 0.5);
        let spec2: PotentialSpec = serde_json::from_str(
            r#"{"slopes": [[-1.0], [1.0]], "coeffs": [1.0, 1.0], "sharpness": 2.0}"#,
        )
        .unwrap();
        let q = ToricPotential::from_spec(spec2).unwrap();
        assert_eq!(q.sharpness(), Some(2.0));
        let json = serde_json::to_string(&q.to_spec()).unwrap();
        let r = ToricPotential::from_spec(serde_json::from_str(&json).unwrap()).unwrap();
        assert_relative_eq!(r.eval(&[0.3]), q.eval(&[0.3]), max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn subdivision_masses_partition(seed in 0u64..200) {
            // Random full-mass 1-D potentials: atomic masses sum to 1 and
            // atoms sit strictly inside the slope hull's kink range.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seg = LatticePolytope::interval(-1, 1);
            let mut slopes = vec![vec![-1.0], vec![1.0]];
            let mut intercepts = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            for _ in 0..4 {
                slopes.push(vec![rng.gen_range(-0.99..0.99)]);
                intercepts.push(rng.gen_range(-1.0..1.0));
            }
            let pot = ToricPotential::max_affine(slopes, intercepts).unwrap();
            let mu = pot.ma_atomic(&GWeight::one(), &seg).unwrap();
            prop_assert!((mu.total_mass() - 1.0).abs() < 1e-12);
        }
    }
}
