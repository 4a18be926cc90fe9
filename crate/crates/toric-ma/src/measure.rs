//! Measures on R^n (the torus-invariant picture of measures on X).
//!
//! Two concrete kinds cover everything here: finite atomic measures (the
//! Monge-Ampere measures of max-affine potentials, transport targets,
//! spectral measures) and density measures carried by a fixed quadrature
//! grid (smooth Monge-Ampere measures, canonical measures e^(-phi) dx).
//! A density measure remembers the grid that resolved it, so later
//! pairings against test functions reuse the same nodes deterministically.

use crate::error::{Error, Result};
use crate::gweight::GWeight;
use crate::polytope::LatticePolytope;
use crate::potential::ToricPotential;
use crate::quadrature::{adaptive_log_grid, box_for, minimize_convex, GridNd};
use std::rc::Rc;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<(Vec<f64>, f64)>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Self {
        DiscreteMeasure { atoms }
    }

    pub fn atoms(&self) -> &[(Vec<f64>, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|(_, m)| m).sum()
    }

    pub fn integrate(&self, u: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|(x, m)| m * u(x)).sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.total_mass();
        DiscreteMeasure {
            atoms: self.atoms.iter().map(|(x, m)| (x.clone(), m / t)).collect(),
        }
    }

    /// Atoms with zero mass dropped (cells of zero volume).
    pub fn support(&self) -> Self {
        DiscreteMeasure {
            atoms: self
                .atoms
                .iter()
                .filter(|(_, m)| *m > 0.0)
                .cloned()
                .collect(),
        }
    }

    /// Mass at a given location, 0.0 when absent (exact f64 match on
    /// coordinates; callers use the measure's own atom list for keys).
    pub fn mass_at(&self, x: &[f64]) -> f64 {
        self.atoms
            .iter()
            .find(|(y, _)| y.as_slice() == x)
            .map(|(_, m)| *m)
            .unwrap_or(0.0)
    }
}

/// Absolutely continuous measure rho(x) dx resolved on a fixed grid. The
/// density is stored in log form so sharply peaked measures keep relative
/// accuracy.
#[derive(Clone)]
pub struct DensityMeasure {
    grid: GridNd,
    log_density: Rc<dyn Fn(&[f64]) -> f64>,
}

impl std::fmt::Debug for DensityMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityMeasure")
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

impl DensityMeasure {
    pub fn new(grid: GridNd, log_density: Rc<dyn Fn(&[f64]) -> f64>) -> Self {
        DensityMeasure { grid, log_density }
    }

    pub fn grid(&self) -> &GridNd {
        &self.grid
    }

    pub fn log_density_at(&self, x: &[f64]) -> f64 {
        (self.log_density)(x)
    }

    pub fn density_at(&self, x: &[f64]) -> f64 {
        (self.log_density)(x).exp()
    }

    pub fn total_mass(&self) -> f64 {
        self.grid.integrate_log(|x| (self.log_density)(x)).exp()
    }

    pub fn integrate(&self, u: impl Fn(&[f64]) -> f64) -> f64 {
        self.grid.integrate(|x| {
            let l = (self.log_density)(x);
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                u(x) * l.exp()
            }
        })
    }

    /// The same density carried by a different grid (e.g. a coarser one
    /// for transport discretization).
    pub fn with_grid(&self, grid: GridNd) -> DensityMeasure {
        DensityMeasure { grid, log_density: Rc::clone(&self.log_density) }
    }

    /// Atomic discretization on the grid nodes: one atom per node with
    /// mass = weight * density, optionally renormalized to unit mass.
    pub fn discretize(&self, normalize: bool) -> DiscreteMeasure {
        let (nodes, weights) = self.grid.nodes_weights();
        let mut atoms: Vec<(Vec<f64>, f64)> = nodes
            .into_iter()
            .zip(weights)
            .map(|(x, w)| {
                let l = (self.log_density)(&x);
                let m = if l == f64::NEG_INFINITY { 0.0 } else { w * l.exp() };
                (x, m)
            })
            .collect();
        if normalize {
            let t: f64 = atoms.iter().map(|(_, m)| m).sum();
            for a in atoms.iter_mut() {
                a.1 /= t;
            }
        }
        DiscreteMeasure::new(atoms)
    }
}

/// A measure on x-space that is either purely atomic or given by a density.
///
/// Entropy-type functionals need to distinguish the two cases: an atomic
/// measure has no density against Lebesgue, so its relative entropy with
/// respect to any density measure is +infinity.
#[derive(Debug, Clone)]
pub enum MeasureOnX {
    Atomic(DiscreteMeasure),
    Density(DensityMeasure),
}

impl MeasureOnX {
    pub fn total_mass(&self) -> f64 {
        match self {
            MeasureOnX::Atomic(m) => m.total_mass(),
            MeasureOnX::Density(m) => m.total_mass(),
        }
    }

    pub fn integrate(&self, u: impl Fn(&[f64]) -> f64) -> f64 {
        match self {
            MeasureOnX::Atomic(m) => m.integrate(&u),
            MeasureOnX::Density(m) => m.integrate(&u),
        }
    }
}

/// MA_g(phi) for a smooth potential, as a density measure on an adaptive
/// grid. The grid is centered where the moment map hits the slope hull's
/// centroid and extends until the density has dropped by `DROP` log units.
pub fn ma_density_measure(
    pot: &ToricPotential,
    g: &GWeight,
    p: &LatticePolytope,
    rel_tol: f64,
) -> Result<(f64, DensityMeasure)> {
    if pot.sharpness().is_none() {
        return Err(Error::InvalidInput(
            "smooth Monge-Ampere density needs finite sharpness".into(),
        ));
    }
    const DROP: f64 = 46.0;
    let dim = pot.dim();
    let hull = pot.slope_hull();
    let centroid =
        crate::rational::to_f64_vec(&hull.centroid().expect("slope hull is nonempty"));
    let pc = pot.clone();
    let cc = centroid.clone();
    // Center the box where grad phi = hull centroid: the minimizer of the
    // convex tilt phi(x) - <centroid, x>.
    let peak = minimize_convex(
        &|x: &[f64]| pc.eval(x) - x.iter().zip(&cc).map(|(a, b)| a * b).sum::<f64>(),
        &|x: &[f64]| {
            let m = pc.moment_map(x).expect("smooth potential");
            m.iter().zip(&cc).map(|(a, b)| a - b).collect()
        },
        &vec![0.0; dim],
        1e-10,
        400,
    );
    let pot2 = pot.clone();
    let g2 = g.clone();
    let p2 = p.clone();
    let log_rho = move |x: &[f64]| -> f64 {
        let d = pot2.ma_density_at(x, &g2, &p2).expect("smooth potential");
        if d > 0.0 {
            d.ln()
        } else {
            f64::NEG_INFINITY
        }
    };
    let neg_log = |x: &[f64]| -log_rho(x);
    let bounds = box_for(&neg_log, &peak, DROP);
    let (log_total, grid) = adaptive_log_grid(&log_rho, &bounds, 8, rel_tol)?;
    Ok((
        log_total.exp(),
        DensityMeasure::new(grid, Rc::new(log_rho)),
    ))
}

/// The canonical measure e^(-phi) dx, normalized to a probability measure
/// when `normalize` is set. Finite exactly when 0 is strictly interior to
/// the slope hull.
pub fn canonical_measure(
    pot: &ToricPotential,
    rel_tol: f64,
    normalize: bool,
) -> Result<(f64, DensityMeasure)> {
    let dim = pot.dim();
    let hull = pot.slope_hull();
    let origin = vec![crate::rational::Rat::from_integer(0.into()); dim];
    if !hull.contains_strictly(&origin) {
        return Err(Error::DivergentIntegral(
            "e^(-phi) dx diverges: 0 is not strictly interior to the slope hull".into(),
        ));
    }
    const DROP: f64 = 46.0;
    let pc = pot.clone();
    let peak = if pot.sharpness().is_some() {
        minimize_convex(
            &|x: &[f64]| pc.eval(x),
            &|x: &[f64]| pc.moment_map(x).expect("smooth potential"),
            &vec![0.0; dim],
            1e-10,
            400,
        )
    } else {
        // Max-affine: gradient-free descent via coordinate bisection is
        // unnecessary; the box only needs to cover the sublevel set, so
        // grow it from the origin.
        vec![0.0; dim]
    };
    let pot2 = pot.clone();
    let neg_log = move |x: &[f64]| pot2.eval(x);
    let bounds = box_for(&neg_log, &peak, DROP);
    let pot3 = pot.clone();
    let (log_z, grid) = adaptive_log_grid(&|x| -pot3.eval(x), &bounds, 8, rel_tol)?;
    let pot4 = pot.clone();
    let shift = if normalize { log_z } else { 0.0 };
    let log_rho = move |x: &[f64]| -pot4.eval(x) - shift;
    Ok((log_z, DensityMeasure::new(grid, Rc::new(log_rho))))
}

/// Lebesgue measure restricted to a box (reference measure in entropy
/// computations and tests).
pub fn lebesgue_box(bounds: &[(f64, f64)], order: usize, panels: usize) -> DensityMeasure {
    let grid = GridNd::uniform(bounds, panels, order);
    DensityMeasure::new(grid, Rc::new(|_x: &[f64]| 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn discrete_measure_ops() {
        let mu = DiscreteMeasure::new(vec![(vec![0.0], 0.25), (vec![1.0], 0.5), (vec![2.0], 0.0)]);
        assert_relative_eq!(mu.total_mass(), 0.75);
        assert_relative_eq!(mu.integrate(|x| x[0]), 0.5);
        assert_eq!(mu.support().atoms().len(), 2);
        assert_relative_eq!(mu.normalized().total_mass(), 1.0);
        assert_relative_eq!(mu.mass_at(&[1.0]), 0.5);
        assert_relative_eq!(mu.mass_at(&[9.0]), 0.0);
    }

    #[test]
    fn smooth_ma_total_mass_is_one_for_full_hull() {
        // phi = log(e^-x + e^x) on P = [-1, 1]: hull of slopes equals P, so
        // the weighted mass is exactly 1.
        let p = LatticePolytope::interval(-1, 1);
        let pot = ToricPotential::log_sum_exp(
            vec![vec![-1.0], vec![1.0]],
            vec![1.0, 1.0],
            1.0,
        )
        .unwrap();
        let (total, mu) = ma_density_measure(&pot, &GWeight::one(), &p, 1e-12).unwrap();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        assert_relative_eq!(mu.total_mass(), 1.0, epsilon = 1e-9);
        // Density at 0: phi'' = sech^2(0) = 1, g = 1, vol = 2.
        assert_relative_eq!(mu.density_at(&[0.0]), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn smooth_ma_triangle() {
        let p = LatticePolytope::unit_simplex();
        let pot = ToricPotential::log_sum_exp(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 1.0, 1.0],
            1.0,
        )
        .unwrap();
        let g = GWeight::exp_linear_normalized(vec![0.5, -0.3], &p);
        let (total, _) = ma_density_measure(&pot, &g, &p, 1e-9).unwrap();
        assert_relative_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn canonical_measure_closed_form() {
        // phi = |x| gives int e^-|x| dx = 2; phi = 2 log(2 cosh(x/2)) gives
        // int sech^2(x/2)/4 ... = 1.
        let pot = ToricPotential::max_affine(vec![vec![-1.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        let (log_z, mu) = canonical_measure(&pot, 1e-12, true).unwrap();
        assert_relative_eq!(log_z, 2.0f64.ln(), epsilon = 1e-10);
        assert_relative_eq!(mu.total_mass(), 1.0, epsilon = 1e-10);
        let sol = ToricPotential::log_sum_exp(
            vec![vec![-1.0], vec![1.0]],
            vec![1.0, 1.0],
            0.5,
        )
        .unwrap();
        // 2 log(e^(-x/2) + e^(x/2)) = 2 log(2 cosh(x/2)).
        let (log_z2, _) = canonical_measure(&sol, 1e-12, false).unwrap();
        assert_relative_eq!(log_z2, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn canonical_measure_divergence_detected() {
        // Slopes all positive: 0 outside the hull, integral diverges.
        let pot = ToricPotential::max_affine(vec![vec![0.5], vec![1.0]], vec![0.0, 0.0]).unwrap();
        match canonical_measure(&pot, 1e-10, false) {
            Err(Error::DivergentIntegral(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn discretize_reproduces_moments() {
        let pot = ToricPotential::log_sum_exp(
            vec![vec![-1.0], vec![1.0]],
            vec![1.0, 1.0],
            1.0,
        )
        .unwrap();
        let (_, mu) = canonical_measure(&pot, 1e-12, true).unwrap();
        let disc = mu.discretize(true);
        assert_relative_eq!(disc.total_mass(), 1.0, epsilon = 1e-14);
        // Symmetric density: first moment vanishes.
        assert_relative_eq!(disc.integrate(|x| x[0]), 0.0, epsilon = 1e-10);
        assert_relative_eq!(
            disc.integrate(|x| x[0] * x[0]),
            mu.integrate(|x| x[0] * x[0]),
            epsilon = 1e-12
        );
    }
}
