//! One function per subcommand. Each loads the problem file, runs the
//! corresponding library operation, and writes CSV/JSON reports into the
//! output directory.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use toric_ma::energy::{ding_modified, energy_g, mabuchi_modified};
use toric_ma::gweight::GWeight;
use toric_ma::invariants::{futaki_limit_check, soliton_defect, soliton_field};
use toric_ma::polytope::LatticePolytope;
use toric_ma::potential::ToricPotential;
use toric_ma::quantization::{
    bergman, donaldson_iterate, energy_level, hilb, quantized_soliton, soliton_residual,
    spectral_measure, HermitianWeights, MeasureMode,
};
use toric_ma::transport::{soliton_picard, solve, PicardTrace, TransportProblem};
use toric_ma::{Error, Result};

use crate::io::{
    fmt_f, load_problem, parse_vector, parse_weight, write_json, Csv, ProblemFile,
};
use crate::{Cmd, Opts};

pub fn dispatch(cmd: &Cmd) -> Result<()> {
    let opts = match cmd {
        Cmd::PolytopeInfo(o)
        | Cmd::Futaki(o)
        | Cmd::SolitonField(o)
        | Cmd::Soliton(o)
        | Cmd::Transport(o)
        | Cmd::Balanced(o)
        | Cmd::Bergman(o)
        | Cmd::Spectral(o)
        | Cmd::EnergyProbe(o) => o,
    };
    let problem = load_problem(&opts.input)?;
    std::fs::create_dir_all(&opts.out)?;
    match cmd {
        Cmd::PolytopeInfo(_) => polytope_info(&problem, opts),
        Cmd::Futaki(_) => futaki(&problem, opts),
        Cmd::SolitonField(_) => soliton_field_cmd(&problem, opts),
        Cmd::Soliton(_) => soliton(&problem, opts),
        Cmd::Transport(_) => transport(&problem, opts),
        Cmd::Balanced(_) => balanced(&problem, opts),
        Cmd::Bergman(_) => bergman_cmd(&problem, opts),
        Cmd::Spectral(_) => spectral(&problem, opts),
        Cmd::EnergyProbe(_) => energy_probe(&problem, opts),
    }
}

fn xi_of(opts: &Opts, p: &LatticePolytope) -> Result<Option<Vec<f64>>> {
    opts.xi.as_deref().map(|s| parse_vector(s, p.dim(), "--xi")).transpose()
}

fn weight_of(opts: &Opts, p: &LatticePolytope) -> Result<GWeight> {
    match opts.g.as_deref() {
        Some(s) => parse_weight(s, p),
        None => Ok(GWeight::one()),
    }
}

fn mode_of(opts: &Opts, default: MeasureMode) -> Result<MeasureMode> {
    match opts.mode.as_deref() {
        None => Ok(default),
        Some("volume") => Ok(MeasureMode::Volume),
        Some("canonical") => Ok(MeasureMode::Canonical),
        Some(other) => Err(Error::InvalidInput(format!(
            "unrecognized --mode '{other}' (expected volume or canonical)"
        ))),
    }
}

fn polytope_info(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let k_max = opts.k_max.unwrap_or(8);
    let mut nk = Csv::new(&["k", "n_k"]);
    let mut nk_json = Vec::new();
    for k in 1..=k_max {
        let count = p.n_k(k)?;
        nk.row(vec![k.to_string(), count.to_string()]);
        nk_json.push(json!({ "k": k, "n_k": count }));
    }
    nk.write(&opts.out, "nk_table.csv")?;
    let moments: Vec<_> = p
        .dh_moments(2)
        .into_iter()
        .map(|(m, v)| json!({ "moment": m, "value": v }))
        .collect();
    write_json(
        &opts.out,
        "polytope_info.json",
        &json!({
            "name": p.name(),
            "dim": p.dim(),
            "volume": p.volume(),
            "vertices": p.vertices(),
            "barycenter": p.barycenter(),
            "reflexive": p.is_reflexive(),
            "origin_strictly_interior": p.origin_strictly_interior(),
            "dh_moments": moments,
            "nk": nk_json,
        }),
    )?;
    Ok(())
}

fn futaki(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let n = p.dim();
    let xi = xi_of(opts, p)?.unwrap_or_else(|| vec![0.0; n]);
    let k_max = opts.k_max.unwrap_or(10);
    let ks: Vec<u32> = (1..=k_max).collect();
    let mut samples = Csv::new(&["direction", "k", "scaled_futaki"]);
    let mut dirs = Vec::new();
    for d in 0..n {
        let mut eta = vec![0.0; n];
        eta[d] = 1.0;
        let report = futaki_limit_check(p, &xi, &eta, &ks, 2)?;
        for (k, v) in &report.samples {
            samples.row(vec![d.to_string(), k.to_string(), fmt_f(*v)]);
        }
        dirs.push(json!({
            "direction": d,
            "continuum": report.continuum,
            "fit_coefficients": report.coefficients,
            "leading_residual": report.leading_residual,
        }));
    }
    samples.write(&opts.out, "futaki_samples.csv")?;
    write_json(&opts.out, "futaki.json", &json!({ "xi": xi, "directions": dirs }))?;
    Ok(())
}

fn soliton_field_cmd(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let xi = soliton_field(p)?;
    let defect = soliton_defect(p, &xi);
    write_json(&opts.out, "soliton_field.json", &json!({ "xi": xi, "grad_norm": defect }))?;
    Ok(())
}

/// Gauge-matched sup-distance between the FS image and the Picard limit on
/// the compact window |x_d| <= 4. The Picard iterate is normalized to unit
/// sampled canonical mass, so the FS potential is shifted by the log-ratio
/// of the two sampled masses before comparing.
fn fs_vs_picard(fs_phi: &ToricPotential, trace: &PicardTrace) -> f64 {
    let lse = |phi: &ToricPotential| -> f64 {
        let vals: Vec<f64> = trace.sample_points.iter().map(|x| -phi.eval(x)).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let shift = lse(fs_phi) - lse(trace.last());
    trace
        .sample_points
        .iter()
        .filter(|x| x.iter().all(|c| c.abs() <= 4.0))
        .map(|x| (fs_phi.eval(x) - shift - trace.last().eval(x)).abs())
        .fold(0.0f64, f64::max)
}

fn soliton(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let solved_field = soliton_field(p)?;
    let xi = match xi_of(opts, p)? {
        Some(v) => v,
        None => solved_field.clone(),
    };
    let defect = soliton_defect(p, &xi);

    let k_max = opts.k_max.unwrap_or(16).max(4);
    let mut ks = vec![4u32];
    while 2 * ks[ks.len() - 1] <= k_max {
        let next = 2 * ks[ks.len() - 1];
        ks.push(next);
    }

    let mut ladder = Csv::new(&["k", "n_k", "iterations", "balanced_residual", "fs_residual"]);
    let mut levels = Vec::new();
    let mut final_potential: Option<ToricPotential> = None;
    for &k in &ks {
        let s = quantized_soliton(p, &xi, k)?;
        let (_, fs_res) = soliton_residual(&s.potential, &xi)?;
        ladder.row(vec![
            k.to_string(),
            s.weights.n_k().to_string(),
            s.iterations.to_string(),
            fmt_f(s.residual),
            fmt_f(fs_res),
        ]);
        levels.push(json!({
            "k": k,
            "n_k": s.weights.n_k(),
            "iterations": s.iterations,
            "balanced_residual": s.residual,
            "fs_soliton_residual": fs_res,
            "futaki": s.futaki,
        }));
        final_potential = Some(s.potential);
    }
    ladder.write(&opts.out, "soliton_ladder.csv")?;
    let fs_phi = final_potential.unwrap();
    write_json(&opts.out, "soliton_potential.json", &serde_json::to_value(&fs_phi)?)?;

    let n_atoms = if p.dim() == 1 { 61 } else { 21 };
    let trace = soliton_picard(p, &xi, n_atoms, 1.0)?;
    let mut picard_csv = Csv::new(&["step", "change", "ding"]);
    for (i, (c, d)) in trace.changes.iter().zip(&trace.ding_values).enumerate() {
        picard_csv.row(vec![i.to_string(), fmt_f(*c), fmt_f(*d)]);
    }
    picard_csv.write(&opts.out, "picard_trace.csv")?;
    let sup = fs_vs_picard(&fs_phi, &trace);

    write_json(
        &opts.out,
        "soliton.json",
        &json!({
            "xi": xi,
            "grad_norm": defect,
            "solved_field": solved_field,
            "levels": levels,
            "picard": {
                "atoms_per_axis": n_atoms,
                "iterations": trace.changes.len(),
                "converged": trace.converged,
                "boundary_pinned": trace.boundary_pinned,
                "sup_vs_fs": sup,
            },
        }),
    )?;

    if trace.boundary_pinned || !trace.converged {
        eprintln!(
            "the Picard iterate did not settle inside the sampling window: \
             the field {xi:?} admits no soliton on this polytope"
        );
        return Err(Error::NonConvergence {
            iterations: trace.changes.len(),
            residual: *trace.changes.last().unwrap_or(&f64::INFINITY),
        });
    }
    Ok(())
}

fn transport(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let g = weight_of(opts, p)?;
    let atoms: Vec<(Vec<f64>, f64)> = match (&problem.atoms, opts.random_atoms) {
        (_, Some(count)) => {
            if count == 0 {
                return Err(Error::InvalidInput("--random-atoms needs a positive count".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.unwrap_or(0));
            let mut atoms: Vec<(Vec<f64>, f64)> = (0..count)
                .map(|_| {
                    let x: Vec<f64> = (0..p.dim()).map(|_| rng.gen_range(-2.5..2.5)).collect();
                    (x, rng.gen_range(0.5..1.5))
                })
                .collect();
            let total: f64 = atoms.iter().map(|(_, m)| m).sum();
            for (_, m) in atoms.iter_mut() {
                *m /= total;
            }
            atoms
        }
        (Some(list), None) => list.iter().map(|a| (a.x.clone(), a.mass)).collect(),
        (None, None) => {
            return Err(Error::InvalidInput(
                "transport needs an \"atoms\" entry or --random-atoms".into(),
            ))
        }
    };
    let mut tp = TransportProblem::new(p.clone(), g, atoms)?;
    if let Some(t) = opts.tol {
        tp.tolerance = t;
    }
    if let Some(s) = opts.steps {
        tp.max_iterations = s;
    }
    let sol = solve(&tp)?;

    let mut header: Vec<String> = vec!["atom".into()];
    for d in 0..p.dim() {
        header.push(format!("x{d}"));
    }
    header.extend(["mass".into(), "intercept".into(), "cell_mass".into(), "cell_vertices".into()]);
    let mut csv = Csv::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for (i, (x, m)) in tp.atoms.iter().enumerate() {
        let verts = sol.cells[i]
            .verts_f64()
            .iter()
            .map(|v| v.iter().map(|c| fmt_f(*c)).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(";");
        let mut row = vec![i.to_string()];
        row.extend(x.iter().map(|c| fmt_f(*c)));
        row.extend([fmt_f(*m), fmt_f(sol.intercepts[i]), fmt_f(sol.cell_masses[i]), verts]);
        csv.row(row);
    }
    csv.write(&opts.out, "transport_solution.csv")?;
    write_json(
        &opts.out,
        "transport.json",
        &json!({
            "atoms": tp.atoms.len(),
            "objective": sol.objective,
            "dual_value": sol.dual_value,
            "iterations": sol.iterations,
            "residual": sol.residual,
        }),
    )?;
    Ok(())
}

fn balanced(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let k = opts.k.unwrap_or(4);
    let mode = mode_of(opts, MeasureMode::Canonical)?;
    let g = weight_of(opts, p)?;
    let steps = opts.steps.unwrap_or(200);
    let start = match &problem.potential {
        Some(phi) => hilb(p, phi, mode, &g, k)?,
        None => HermitianWeights::ones(p, k)?,
    };
    let trace = donaldson_iterate(p, &start, mode, &g, steps)?;

    let mut trace_csv = Csv::new(&["step", "residual", "ding"]);
    for (i, (r, d)) in trace.residuals.iter().zip(&trace.ding_values).enumerate() {
        trace_csv.row(vec![i.to_string(), fmt_f(*r), fmt_f(*d)]);
    }
    trace_csv.write(&opts.out, "balanced_trace.csv")?;
    write_weights_csv(&opts.out, "balanced_weights.csv", &trace.weights)?;
    write_json(
        &opts.out,
        "balanced.json",
        &json!({
            "k": k,
            "n_k": trace.weights.n_k(),
            "balanced": trace.balanced,
            "iterations": trace.iterations,
            "final_residual": trace.residuals.last(),
        }),
    )?;
    if !trace.balanced {
        return Err(Error::NonConvergence {
            iterations: trace.iterations,
            residual: *trace.residuals.last().unwrap_or(&f64::INFINITY),
        });
    }
    Ok(())
}

fn write_weights_csv(dir: &Path, name: &str, h: &HermitianWeights) -> Result<()> {
    let n = h.basis().first().map(|a| a.len()).unwrap_or(0);
    let mut header: Vec<String> = (0..n).map(|d| format!("alpha{d}")).collect();
    header.extend(["log_c".into(), "c_alpha".into(), "excluded".into()]);
    let mut csv = Csv::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for (i, alpha) in h.basis().iter().enumerate() {
        let mut row: Vec<String> = alpha.iter().map(|a| a.to_string()).collect();
        let lc = h.log_weights()[i];
        row.extend([fmt_f(lc), fmt_f(lc.exp()), h.is_excluded(i).to_string()]);
        csv.row(row);
    }
    csv.write(dir, name)?;
    Ok(())
}

/// Sample grid on the box where the support function is at most `trunc`.
fn sample_window(p: &LatticePolytope, trunc: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let h = ToricPotential::support_function(p);
    let n = p.dim();
    let mut axes = Vec::new();
    for d in 0..n {
        let mut e = vec![0.0; n];
        e[d] = 1.0;
        let hi = trunc / h.eval(&e);
        e[d] = -1.0;
        let lo = -trunc / h.eval(&e);
        let step = (hi - lo) / (per_axis - 1) as f64;
        axes.push((0..per_axis).map(|i| lo + i as f64 * step).collect::<Vec<f64>>());
    }
    match n {
        1 => axes[0].iter().map(|&x| vec![x]).collect(),
        _ => {
            let mut pts = Vec::with_capacity(per_axis * per_axis);
            for &x0 in &axes[0] {
                for &x1 in &axes[1] {
                    pts.push(vec![x0, x1]);
                }
            }
            pts
        }
    }
}

fn bergman_cmd(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let phi = problem.require_potential()?;
    let k = opts.k.unwrap_or(4);
    let mode = mode_of(opts, MeasureMode::Canonical)?;
    let g = weight_of(opts, p)?;
    let b = bergman(p, phi, mode, &g, k)?;

    let smooth = phi.sharpness().is_some();
    let per_axis = if p.dim() == 1 { 201 } else { 41 };
    let pts = sample_window(p, 8.0, per_axis);
    let mut header: Vec<String> = (0..p.dim()).map(|d| format!("x{d}")).collect();
    header.push("bergman_normalized".into());
    if smooth {
        header.push("ma_density".into());
    }
    let mut csv = Csv::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for x in &pts {
        let mut row: Vec<String> = x.iter().map(|c| fmt_f(*c)).collect();
        row.push(fmt_f(b.normalized_density(x)));
        if smooth {
            row.push(fmt_f(phi.ma_density_at(x, &g, p)?));
        }
        csv.row(row);
    }
    csv.write(&opts.out, "bergman_density.csv")?;

    let lattice_sum: f64 = p
        .lattice_points(k)?
        .iter()
        .map(|a| g.eval(&a.iter().map(|&v| v as f64 / k as f64).collect::<Vec<_>>()))
        .sum();
    write_json(
        &opts.out,
        "bergman.json",
        &json!({
            "k": k,
            "n_k": b.n_k(),
            "trace": b.trace(),
            "g_lattice_sum": lattice_sum,
        }),
    )?;
    Ok(())
}

fn spectral(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let k = opts.k.unwrap_or(4);
    let xi = xi_of(opts, p)?;
    let nu = spectral_measure(p, k, xi.as_deref())?;

    let cols = if xi.is_some() { 1 } else { p.dim() };
    let mut header: Vec<String> = (0..cols).map(|d| format!("x{d}")).collect();
    header.push("mass".into());
    let mut csv = Csv::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for (x, m) in nu.atoms() {
        let mut row: Vec<String> = x.iter().map(|c| fmt_f(*c)).collect();
        row.push(fmt_f(*m));
        csv.row(row);
    }
    csv.write(&opts.out, "spectral.csv")?;

    let mut moments = Vec::new();
    if xi.is_none() {
        for (m, v) in p.dh_moments(2) {
            let q: f64 = nu.atoms().iter().map(|(x, w)| {
                w * x.iter().zip(&m).map(|(c, &e)| c.powi(e as i32)).product::<f64>()
            }).sum();
            moments.push(json!({ "moment": m, "quantized": q, "continuum": v }));
        }
    }
    write_json(
        &opts.out,
        "spectral.json",
        &json!({ "k": k, "n_k": nu.atoms().len(), "pushforward": xi, "moments": moments }),
    )?;
    Ok(())
}

fn energy_probe(problem: &ProblemFile, opts: &Opts) -> Result<()> {
    let p = &problem.polytope;
    let phi = problem.require_potential()?;
    let phi_ref = ToricPotential::support_function(p);
    let g = weight_of(opts, p)?;
    let tol = opts.tol.unwrap_or(1e-7);
    let k_max = opts.k_max.unwrap_or(8);

    let e = energy_g(phi, &phi_ref, &g, p, tol)?;
    let ding = ding_modified(phi, &phi_ref, &g, p, tol).ok();
    let mabuchi = mabuchi_modified(phi, &phi_ref, &g, p, tol, 400).ok();
    // The quantized map integrates e^(-(k+1) phi_ref) per basis entry, so the
    // ladder needs a finite-sharpness reference; the max-affine support
    // function would leave a kink under the per-entry quadrature.
    let smooth_ref = ToricPotential::smooth_reference(p, 1.0);
    let e_smooth = energy_g(phi, &smooth_ref, &g, p, tol)?;
    let functional_json = |f: &toric_ma::energy::FunctionalValue| {
        let parts: serde_json::Map<String, serde_json::Value> = f
            .breakdown
            .iter()
            .map(|(k, v)| (k.clone(), json!(v)))
            .collect();
        json!({ "value": f.value, "breakdown": parts })
    };

    let mut csv = Csv::new(&["k", "n_k", "energy_k", "deviation"]);
    let mut last = None;
    for k in 1..=k_max {
        let ek = energy_level(p, phi, &smooth_ref, MeasureMode::Canonical, &g, k)?;
        csv.row(vec![
            k.to_string(),
            p.n_k(k)?.to_string(),
            fmt_f(ek),
            fmt_f((ek - e_smooth).abs()),
        ]);
        last = Some(ek);
    }
    csv.write(&opts.out, "energy_probe.csv")?;
    write_json(
        &opts.out,
        "energy_probe.json",
        &json!({
            "energy": e,
            "energy_vs_smooth_reference": e_smooth,
            "quantized_final": last,
            "ding": ding.as_ref().map(&functional_json),
            "mabuchi": mabuchi.as_ref().map(&functional_json),
        }),
    )?;
    Ok(())
}
