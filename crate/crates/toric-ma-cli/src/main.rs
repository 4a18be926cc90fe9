//! Batch front end for the toric Monge-Ampere kernels: load a problem
//! description (polytope, optional potential, optional atoms) from JSON,
//! run one operation, and write CSV/JSON reports. One command per process;
//! outputs are byte-deterministic for a fixed config and seed.

mod commands;
mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "toric-ma", version, about = "Toric Monge-Ampere batch tool")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Volume, vertices, barycenter, N_k table, and DH moments.
    PolytopeInfo(Opts),
    /// Quantized Futaki samples with the k-ladder fit per axis direction.
    Futaki(Opts),
    /// The unique field with vanishing weighted barycenter.
    SolitonField(Opts),
    /// Full pipeline: field, quantized k-ladder, Picard cross-check.
    Soliton(Opts),
    /// Semi-discrete optimal transport onto the problem's atoms.
    Transport(Opts),
    /// Fixed-point iteration toward a balanced weight vector.
    Balanced(Opts),
    /// Bergman density table for the problem's potential at level k.
    Bergman(Opts),
    /// Spectral measure of the level-k lattice basis.
    Spectral(Opts),
    /// Continuum energies plus the quantized energy ladder.
    EnergyProbe(Opts),
}

#[derive(Args)]
pub struct Opts {
    /// Problem JSON: {"polytope": ..., "potential"?: ..., "atoms"?: [...]}.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for report files (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Quantization level.
    #[arg(long)]
    pub k: Option<u32>,
    /// Top of a level ladder.
    #[arg(long)]
    pub k_max: Option<u32>,
    /// Numeric tolerance override.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for randomized test data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated field components, e.g. --xi 0.25,-0.5.
    #[arg(long)]
    pub xi: Option<String>,
    /// Weight: const, exp:a(,b) (normalized e^<xi,p>), or step:l1(,l2).
    #[arg(long)]
    pub g: Option<String>,
    /// transport: draw this many random atoms instead of reading them.
    #[arg(long)]
    pub random_atoms: Option<usize>,
    /// balanced, bergman: measure mode (volume or canonical).
    #[arg(long)]
    pub mode: Option<String>,
}

fn exit_code(e: &toric_ma::Error) -> i32 {
    use toric_ma::Error::*;
    match e {
        InvalidInput(_) | DegeneratePolytope(_) | NotDifferentiable { .. } | EmptyEnvelope
        | Io(_) | Json(_) => 2,
        Divergent { .. } | DivergentIntegral(_) | NonConvergence { .. } => 3,
        DimensionUnsupported(_) | Capacity(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::dispatch(&cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
