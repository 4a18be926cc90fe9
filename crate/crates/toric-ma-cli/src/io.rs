//! Problem-file decoding and deterministic report writing.
//!
//! Inputs are a single JSON document holding the polytope plus optional
//! potential and atom list. Outputs are CSV tables (one header row, comma
//! separated, floats in shortest round-trip form) and pretty-printed JSON;
//! both are byte-deterministic for a fixed config and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toric_ma::gweight::GWeight;
use toric_ma::polytope::LatticePolytope;
use toric_ma::potential::ToricPotential;
use toric_ma::{Error, Result};

#[derive(Deserialize)]
pub struct ProblemFile {
    pub polytope: LatticePolytope,
    #[serde(default)]
    pub potential: Option<ToricPotential>,
    #[serde(default)]
    pub atoms: Option<Vec<AtomSpec>>,
}

#[derive(Deserialize)]
pub struct AtomSpec {
    pub x: Vec<f64>,
    pub mass: f64,
}

pub fn load_problem(path: &Path) -> Result<ProblemFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::InvalidInput(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

impl ProblemFile {
    pub fn require_potential(&self) -> Result<&ToricPotential> {
        self.potential
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("this command needs a \"potential\" entry".into()))
    }
}

/// Shortest round-trip float formatting; infinities spelled out so CSV
/// consumers do not meet bare "inf".
pub fn fmt_f(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub struct Csv {
    lines: Vec<String>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { lines: vec![header.join(",")] }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.lines.push(cells.join(","));
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, self.lines.join("\n") + "\n")?;
        Ok(path)
    }
}

pub fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// Comma-separated reals of a fixed length (the ambient dimension).
pub fn parse_vector(s: &str, dim: usize, flag: &str) -> Result<Vec<f64>> {
    let parts: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let parts =
        parts.map_err(|e| Error::InvalidInput(format!("bad {flag} component: {e}")))?;
    if parts.len() != dim {
        return Err(Error::InvalidInput(format!(
            "{flag} has {} components but the polytope has dimension {dim}",
            parts.len()
        )));
    }
    Ok(parts)
}

/// Weight selector: "const", "exp:a(,b)" (normalized e^<xi, p>), or
/// "step:l1(,l2)" (indicator of {p >= lambda}).
pub fn parse_weight(s: &str, p: &LatticePolytope) -> Result<GWeight> {
    if s == "const" {
        return Ok(GWeight::one());
    }
    if let Some(rest) = s.strip_prefix("exp:") {
        let xi = parse_vector(rest, p.dim(), "--g exp")?;
        return Ok(GWeight::exp_linear_normalized(xi, p));
    }
    if let Some(rest) = s.strip_prefix("step:") {
        let lambda = parse_vector(rest, p.dim(), "--g step")?;
        return Ok(GWeight::step(lambda));
    }
    Err(Error::InvalidInput(format!(
        "unrecognized weight '{s}' (expected const, exp:..., or step:...)"
    )))
}
