use toric_ma::gweight::GWeight;
use toric_ma::measure::ma_density_measure;
use toric_ma::polytope::LatticePolytope;
use toric_ma::potential::ToricPotential;

fn main() {
    let p = LatticePolytope::interval(-1, 1);
    let g = GWeight::exp_linear_normalized(vec![0.3], &p);
    let base = ToricPotential::log_sum_exp_with_intercepts(
        vec![vec![-1.0], vec![0.0], vec![1.0]],
        vec![0.1, 0.3, 0.15],
        1.0,
    ).unwrap();
    let family = base.sharpen_family(&[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap();
    let limit = family.last().unwrap();
    let mu_limit = limit.ma_atomic(&g, &p).unwrap();
    let u = |x: f64| (-(x - 0.2) * (x - 0.2)).exp();
    let target = mu_limit.integrate(|x| u(x[0]));
    println!("target {target:.15}");
    for phi_k in family.iter().take(5) {
        let (total, dens) = ma_density_measure(phi_k, &g, &p, 1e-10).unwrap();
        let lib = dens.integrate(|x| u(x[0]));
        // dense trapezoid over [-9, 9]
        let n = 400000usize;
        let (a, b) = (-9.0, 9.0);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * h * u(x) * phi_k.ma_density_at(&[x], &g, &p).unwrap();
        }
        println!("total {total:.12} lib {lib:.15} dense {s:.15}  err_lib {:.3e} err_dense {:.3e}",
            (lib - target).abs(), (s - target).abs());
    }
}
