use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toric_ma::gweight::GWeight;
use toric_ma::polytope::{Halfspace, LatticePolytope};
use toric_ma::transport::{solve, TransportProblem};

fn square2() -> LatticePolytope {
    LatticePolytope::from_halfspaces(
        2,
        vec![
            Halfspace { normal: vec![1, 0], offset: 1 },
            Halfspace { normal: vec![-1, 0], offset: 1 },
            Halfspace { normal: vec![0, 1], offset: 1 },
            Halfspace { normal: vec![0, -1], offset: 1 },
        ],
        Some("square2".into()),
    )
    .unwrap()
}

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(44);
    let polys_1d = [LatticePolytope::interval(-1, 1), LatticePolytope::interval(-1, 2)];
    let polys_2d = [square2(), LatticePolytope::bl1_p2_anticanonical(), LatticePolytope::p2_anticanonical()];
    for idx in 0..20usize {
        let (p, count) = if idx < 12 {
            (polys_1d[idx % 2].clone(), if idx == 11 { 50 } else { 3 + 4 * idx })
        } else {
            (polys_2d[idx % 3].clone(), 5 + 2 * (idx - 12))
        };
        let g = if idx % 2 == 0 {
            GWeight::one()
        } else {
            let xi: Vec<f64> = (0..p.dim()).map(|d| 0.2 - 0.3 * d as f64).collect();
            GWeight::exp_linear_normalized(xi, &p)
        };
        let n = p.dim();
        let atoms_x: Vec<Vec<f64>> =
            (0..count).map(|_| (0..n).map(|_| r.gen_range(-2.5..2.5)).collect()).collect();
        let mut masses: Vec<f64> = (0..count).map(|_| r.gen_range(0.5..1.5)).collect();
        let total: f64 = masses.iter().sum();
        for m in masses.iter_mut() { *m /= total; }
        let atoms: Vec<(Vec<f64>, f64)> = atoms_x.into_iter().zip(masses.iter().copied()).collect();
        let problem = TransportProblem::new(p.clone(), g.clone(), atoms.clone()).unwrap();
        let sol = solve(&problem);
        let q: Vec<f64> = (0..n).map(|_| r.gen_range(-0.1..0.1)).collect();
        let spread = atoms.iter().map(|(x, _)| x.iter().map(|c| c.abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        let eps = r.gen_range(0.05..0.15) / spread.max(1.0);
        let mut problem2 = TransportProblem::new(p.clone(), g.clone(), atoms.clone()).unwrap();
        problem2.initial = Some(
            atoms.iter().map(|(x, _)| {
                x.iter().zip(&q).map(|(xi, qi)| (qi + eps * xi).powi(2)).sum::<f64>() / (2.0 * eps)
            }).collect(),
        );
        let sol2 = solve(&problem2);
        println!("idx {idx} dim {n} count {count} default {:?} voronoi {:?}",
            sol.as_ref().map(|s| s.iterations).map_err(|e| format!("{e:?}")),
            sol2.as_ref().map(|s| s.iterations).map_err(|e| format!("{e:?}")));
    }
}
