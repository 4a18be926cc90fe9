//! Exact rational geometry kernel for ambient dimension 1 and 2.
//!
//! Every f64 is a dyadic rational, so converting coordinates to
//! `BigRational` and doing predicates, clipping, and volumes in exact
//! arithmetic removes all geometric tolerance questions: cells tile their
//! union exactly and volumes add up exactly. Results are converted back to
//! f64 only at the final evaluation step.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::traits::{Signed, ToPrimitive, Zero};

pub type Rat = BigRational;

/// Exact conversion; panics on non-finite input (callers validate first).
pub fn rat(x: f64) -> Rat {
    BigRational::from_float(x).expect("finite float required")
}

pub fn rat_vec(x: &[f64]) -> Vec<Rat> {
    x.iter().map(|&c| rat(c)).collect()
}

pub fn to_f64(x: &Rat) -> f64 {
    x.to_f64().expect("rational out of f64 range")
}

pub fn to_f64_vec(x: &[Rat]) -> Vec<f64> {
    x.iter().map(to_f64).collect()
}

pub fn rat_i64(n: i64) -> Rat {
    BigRational::from_integer(BigInt::from(n))
}

fn dot(a: &[Rat], b: &[Rat]) -> Rat {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross product z-component of (b - a) x (c - a).
fn cross(a: &[Rat], b: &[Rat], c: &[Rat]) -> Rat {
    (&b[0] - &a[0]) * (&c[1] - &a[1]) - (&b[1] - &a[1]) * (&c[0] - &a[0])
}

/// A bounded convex body in vertex representation, dim 1 or 2.
///
/// Canonical form: 1-D vertices sorted ascending; 2-D vertices in
/// counter-clockwise order with no duplicates and no three consecutive
/// collinear points. A body may be empty (no vertices) or lower-dimensional
/// (fewer than dim+1 affinely independent vertices); `volume` is then zero.
#[derive(Clone, Debug)]
pub struct ConvexBody {
    pub dim: usize,
    pub verts: Vec<Vec<Rat>>,
}

impl ConvexBody {
    pub fn empty(dim: usize) -> Self {
        ConvexBody { dim, verts: Vec::new() }
    }

    /// Convex hull of a point set (1-D: min/max; 2-D: monotone chain).
    pub fn hull(dim: usize, pts: &[Vec<Rat>]) -> Self {
        assert!(dim == 1 || dim == 2, "hull: dim must be 1 or 2");
        if pts.is_empty() {
            return Self::empty(dim);
        }
        if dim == 1 {
            let lo = pts.iter().map(|p| p[0].clone()).min().unwrap();
            let hi = pts.iter().map(|p| p[0].clone()).max().unwrap();
            let verts = if lo == hi { vec![vec![lo]] } else { vec![vec![lo], vec![hi]] };
            return ConvexBody { dim, verts };
        }
        let mut sorted: Vec<Vec<Rat>> = pts.to_vec();
        sorted.sort_by(|a, b| a[0].cmp(&b[0]).then(a[1].cmp(&b[1])));
        sorted.dedup();
        if sorted.len() == 1 {
            return ConvexBody { dim, verts: sorted };
        }
        let mut lower: Vec<Vec<Rat>> = Vec::new();
        for p in &sorted {
            while lower.len() >= 2
                && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= Rat::zero()
            {
                lower.pop();
            }
            lower.push(p.clone());
        }
        let mut upper: Vec<Vec<Rat>> = Vec::new();
        for p in sorted.iter().rev() {
            while upper.len() >= 2
                && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= Rat::zero()
            {
                upper.pop();
            }
            upper.push(p.clone());
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        // Collinear input collapses to its two extreme points.
        if lower.len() < 3 {
            let lo = sorted.first().unwrap().clone();
            let hi = sorted.last().unwrap().clone();
            let verts = if lo == hi { vec![lo] } else { vec![lo, hi] };
            return ConvexBody { dim, verts };
        }
        ConvexBody { dim, verts: lower }
    }

    pub fn is_empty(&self) -> bool {
        self.verts.is_empty()
    }

    /// Lebesgue volume (length in 1-D, shoelace area in 2-D); zero for
    /// lower-dimensional bodies.
    pub fn volume(&self) -> Rat {
        match self.dim {
            1 => {
                if self.verts.len() < 2 {
                    Rat::zero()
                } else {
                    &self.verts[1][0] - &self.verts[0][0]
                }
            }
            2 => {
                if self.verts.len() < 3 {
                    return Rat::zero();
                }
                let mut acc = Rat::zero();
                let n = self.verts.len();
                for i in 0..n {
                    let a = &self.verts[i];
                    let b = &self.verts[(i + 1) % n];
                    acc += &a[0] * &b[1] - &b[0] * &a[1];
                }
                acc / rat_i64(2)
            }
            _ => unreachable!("ConvexBody is 1-D or 2-D"),
        }
    }

    /// Intersect with the halfspace `<normal, p> <= offset` (exact
    /// Sutherland-Hodgman on the convex vertex cycle).
    pub fn clip(&self, normal: &[Rat], offset: &Rat) -> ConvexBody {
        if self.is_empty() {
            return self.clone();
        }
        if self.dim == 1 {
            let a = &normal[0];
            if a.is_zero() {
                return if offset >= &Rat::zero() { self.clone() } else { Self::empty(1) };
            }
            let bound = offset / a;
            let lo = self.verts[0][0].clone();
            let hi = self.verts.last().unwrap()[0].clone();
            let (new_lo, new_hi) = if a.is_positive() {
                (lo, hi.min(bound))
            } else {
                (lo.max(bound), hi)
            };
            return if new_lo > new_hi {
                Self::empty(1)
            } else if new_lo == new_hi {
                ConvexBody { dim: 1, verts: vec![vec![new_lo]] }
            } else {
                ConvexBody { dim: 1, verts: vec![vec![new_lo], vec![new_hi]] }
            };
        }
        // 2-D. Degenerate bodies (points, segments) are clipped as segments.
        let vals: Vec<Rat> = self.verts.iter().map(|v| dot(normal, v)).collect();
        if self.verts.len() == 1 {
            return if vals[0] <= *offset { self.clone() } else { Self::empty(2) };
        }
        if self.verts.len() == 2 {
            return self.clip_segment(offset, &vals);
        }
        let n = self.verts.len();
        let mut out: Vec<Vec<Rat>> = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            let (vi, vj) = (&self.verts[i], &self.verts[j]);
            let (si, sj) = (&vals[i], &vals[j]);
            let inside_i = si <= offset;
            let inside_j = sj <= offset;
            if inside_i {
                out.push(vi.clone());
            }
            if inside_i != inside_j {
                // Intersection point: vi + t (vj - vi), t = (offset - si)/(sj - si).
                let t = (offset - si) / (sj - si);
                let p = vec![&vi[0] + &t * (&vj[0] - &vi[0]), &vi[1] + &t * (&vj[1] - &vi[1])];
                out.push(p);
            }
        }
        if out.is_empty() {
            return Self::empty(2);
        }
        // Re-canonicalize: clipping can introduce duplicate/collinear points.
        Self::hull(2, &out)
    }

    fn clip_segment(&self, offset: &Rat, vals: &[Rat]) -> ConvexBody {
        let (a, b) = (&self.verts[0], &self.verts[1]);
        let (sa, sb) = (&vals[0], &vals[1]);
        let ia = sa <= offset;
        let ib = sb <= offset;
        match (ia, ib) {
            (true, true) => self.clone(),
            (false, false) => Self::empty(2),
            _ => {
                let t = (offset - sa) / (sb - sa);
                let p = vec![&a[0] + &t * (&b[0] - &a[0]), &a[1] + &t * (&b[1] - &a[1])];
                let kept = if ia { a.clone() } else { b.clone() };
                if kept == p {
                    ConvexBody { dim: 2, verts: vec![kept] }
                } else {
                    ConvexBody { dim: 2, verts: vec![kept, p] }
                }
            }
        }
    }

    pub fn contains(&self, p: &[Rat]) -> bool {
        match self.dim {
            1 => {
                !self.is_empty()
                    && p[0] >= self.verts[0][0]
                    && p[0] <= self.verts.last().unwrap()[0]
            }
            2 => match self.verts.len() {
                0 => false,
                1 => self.verts[0] == p,
                2 => {
                    // On-segment test.
                    let (a, b) = (&self.verts[0], &self.verts[1]);
                    if !cross(a, b, &p.to_vec()).is_zero() {
                        return false;
                    }
                    let d = (&b[0] - &a[0]) * (&p[0] - &a[0]) + (&b[1] - &a[1]) * (&p[1] - &a[1]);
                    let len2 =
                        (&b[0] - &a[0]) * (&b[0] - &a[0]) + (&b[1] - &a[1]) * (&b[1] - &a[1]);
                    d >= Rat::zero() && d <= len2
                }
                n => {
                    for i in 0..n {
                        let a = &self.verts[i];
                        let b = &self.verts[(i + 1) % n];
                        if cross(a, b, &p.to_vec()).is_negative() {
                            return false;
                        }
                    }
                    true
                }
            },
            _ => unreachable!(),
        }
    }

    /// Strict interior membership; false for lower-dimensional bodies.
    pub fn contains_strictly(&self, p: &[Rat]) -> bool {
        match self.dim {
            1 => {
                self.verts.len() == 2
                    && p[0] > self.verts[0][0]
                    && p[0] < self.verts[1][0]
            }
            2 => {
                if self.verts.len() < 3 {
                    return false;
                }
                let n = self.verts.len();
                for i in 0..n {
                    let a = &self.verts[i];
                    let b = &self.verts[(i + 1) % n];
                    if !cross(a, b, &p.to_vec()).is_positive() {
                        return false;
                    }
                }
                true
            }
            _ => unreachable!(),
        }
    }

    /// Fan triangulation into simplices (vertex lists of length dim+1).
    /// Empty for lower-dimensional bodies.
    pub fn triangulate(&self) -> Vec<Vec<Vec<Rat>>> {
        match self.dim {
            1 => {
                if self.verts.len() == 2 {
                    vec![self.verts.clone()]
                } else {
                    Vec::new()
                }
            }
            2 => {
                if self.verts.len() < 3 {
                    return Vec::new();
                }
                let mut out = Vec::new();
                for i in 1..self.verts.len() - 1 {
                    out.push(vec![
                        self.verts[0].clone(),
                        self.verts[i].clone(),
                        self.verts[i + 1].clone(),
                    ]);
                }
                out
            }
            _ => unreachable!(),
        }
    }

    pub fn centroid(&self) -> Option<Vec<Rat>> {
        if self.is_empty() {
            return None;
        }
        // Vertex average is enough for the uses here (a strictly interior
        // point of the body when the body is full-dimensional).
        let n = rat_i64(self.verts.len() as i64);
        let mut c = vec![Rat::zero(); self.dim];
        for v in &self.verts {
            for d in 0..self.dim {
                c[d] += &v[d];
            }
        }
        for cd in c.iter_mut() {
            *cd /= n.clone();
        }
        Some(c)
    }

    pub fn verts_f64(&self) -> Vec<Vec<f64>> {
        self.verts.iter().map(|v| to_f64_vec(v)).collect()
    }
}
