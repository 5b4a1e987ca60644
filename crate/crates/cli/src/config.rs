//! TOML run configuration and its translation into core types.

use std::path::Path;
use std::sync::Arc;

use heatbath_core::dilation::DilationBasis;
use heatbath_core::ensemble::McmcControls;
use heatbath_core::macrodyn::{EnergyIncrement, Scheme};
use heatbath_core::micro::MicroScheme;
use heatbath_core::model::{PoissonOperator, Potential, RunningExample, SystemSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The running example used by the acceptance suite, shipped as
/// `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub bath: BathSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default, rename = "macro")]
    pub macro_: MacroSection,
    #[serde(default)]
    pub micro: MicroSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub n: usize,
    pub beta: f64,
    pub potential: Potential,
    /// `d × n`, one inner list per row.
    pub coupling: Vec<Vec<f64>>,
    pub poisson: PoissonSection,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            n: 1,
            beta: 1.0,
            potential: Potential::Quadratic { stiffness: 1.0 },
            coupling: vec![vec![1.0], vec![0.5], vec![0.0]],
            poisson: PoissonSection::default(),
        }
    }
}

/// `poisson = "canonical"` or `poisson = { matrix = [[...], ...] }` for a
/// constant skew matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoissonSection {
    Tag(String),
    Matrix { matrix: Vec<Vec<f64>> },
}

impl Default for PoissonSection {
    fn default() -> Self {
        PoissonSection::Tag("canonical".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BathKind {
    RunningExample,
    General,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BathSection {
    pub kind: BathKind,
    pub theta1: f64,
    pub theta2: f64,
    pub varsigma: f64,
    /// Generator rows, required when `kind = "general"`.
    pub generator: Option<Vec<Vec<f64>>>,
    /// Truncation of the bath half-line; derived from the spectral gap when absent.
    pub y_max: Option<f64>,
}

impl Default for BathSection {
    fn default() -> Self {
        let rex = RunningExample::default();
        Self { kind: BathKind::RunningExample, theta1: rex.theta1, theta2: rex.theta2, varsigma: rex.varsigma, generator: None, y_max: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self { z: vec![1.0, 0.0], w: vec![1.0, 0.0, 0.0] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroSection {
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
    pub sde_scheme: Scheme,
    pub energy_increment: EnergyIncrement,
}

impl Default for MacroSection {
    fn default() -> Self {
        Self { dt: 1e-3, t_end: 10.0, record_stride: 10, sde_scheme: Scheme::EulerMaruyama, energy_increment: EnergyIncrement::Realized }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroSection {
    pub h: f64,
    pub t_end: f64,
    pub scheme: MicroScheme,
    pub thermal: bool,
    pub record_stride: usize,
}

impl Default for MicroSection {
    fn default() -> Self {
        Self { h: 1e-3, t_end: 10.0, scheme: MicroScheme::Trapezoidal, thermal: false, record_stride: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub proposal_std: Option<f64>,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let c = McmcControls::default();
        Self { proposal_std: c.proposal_std, burn_in: c.burn_in, thin: c.thin, chains: c.chains }
    }
}

impl EnsembleSection {
    pub fn controls(&self) -> McmcControls {
        McmcControls { proposal_std: self.proposal_std, burn_in: self.burn_in, thin: self.thin, chains: self.chains }
    }
}

/// 1-based line and column of a byte offset.
fn line_column(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse(src: &str, origin: &str) -> Result<Config, CliError> {
    toml::from_str(src).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(src, s.start));
        CliError::Config(format!("{origin}:{line}:{column}: {}", e.message().trim_end()))
    })
}

pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        None => parse(DEFAULT_CONFIG, "<built-in default>"),
        Some(p) => {
            let src = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse(&src, &p.display().to_string())
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{what} must be a non-empty rectangular list of rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl Config {
    pub fn running_example(&self) -> RunningExample {
        RunningExample { theta1: self.bath.theta1, theta2: self.bath.theta2, varsigma: self.bath.varsigma }
    }

    pub fn generator(&self) -> Result<DMatrix<f64>, CliError> {
        match self.bath.kind {
            BathKind::RunningExample => {
                let rex = self.running_example();
                rex.validate().map_err(CliError::from_spec)?;
                Ok(rex.generator())
            }
            BathKind::General => {
                let rows = self.bath.generator.as_ref().ok_or_else(|| CliError::Config("bath.kind = \"general\" needs bath.generator".into()))?;
                let g = matrix(rows, "bath.generator")?;
                if !g.is_square() {
                    return Err(CliError::Config("bath.generator must be square".into()));
                }
                Ok(g)
            }
        }
    }

    pub fn system(&self) -> Result<SystemSpec, CliError> {
        let s = &self.system;
        let poisson = match &s.poisson {
            PoissonSection::Tag(t) if t == "canonical" => PoissonOperator::Canonical,
            PoissonSection::Tag(t) => return Err(CliError::Config(format!("unknown system.poisson tag {t:?}; expected \"canonical\""))),
            PoissonSection::Matrix { matrix: rows } => {
                let j = matrix(rows, "system.poisson.matrix")?;
                PoissonOperator::Custom(Arc::new(move |_z: &[f64]| j.clone()))
            }
        };
        let spec = SystemSpec::new(s.n, s.potential, poisson, self.generator()?, matrix(&s.coupling, "system.coupling")?, s.beta)
            .map_err(CliError::from_spec)?;
        if let PoissonSection::Matrix { .. } = s.poisson {
            spec.check_poisson_skew(&vec![0.0; spec.dim_z()]).map_err(CliError::from_spec)?;
        }
        Ok(spec)
    }

    pub fn basis(&self) -> Result<DilationBasis, CliError> {
        let basis = match self.bath.kind {
            BathKind::RunningExample => DilationBasis::running_example(self.running_example(), self.bath.y_max),
            BathKind::General => DilationBasis::general(self.generator()?, self.bath.y_max),
        };
        basis.map_err(CliError::from_spec)
    }

    pub fn initial_state(&self, spec: &SystemSpec) -> Result<(nalgebra::DVector<f64>, nalgebra::DVector<f64>), CliError> {
        let (z, w) = (&self.initial.z, &self.initial.w);
        if z.len() != spec.dim_z() || w.len() != spec.d() {
            return Err(CliError::Config(format!(
                "initial.z needs {} entries and initial.w needs {}, got {} and {}",
                spec.dim_z(),
                spec.d(),
                z.len(),
                w.len()
            )));
        }
        Ok((nalgebra::DVector::from_column_slice(z), nalgebra::DVector::from_column_slice(w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_is_the_running_example() {
        let cfg = load(None).unwrap();
        let spec = cfg.system().unwrap();
        assert_eq!((spec.n(), spec.d()), (1, 3));
        assert_eq!(spec.coupling().as_slice(), &[1.0, 0.5, 0.0]);
        assert_eq!(spec.generator(), &RunningExample::default().generator());
        let (z, w) = cfg.initial_state(&spec).unwrap();
        assert_eq!((z.as_slice(), w.as_slice()), (&[1.0, 0.0][..], &[1.0, 0.0, 0.0][..]));
    }

    #[test]
    fn empty_file_uses_defaults() {
        let cfg = parse("", "empty").unwrap();
        assert_eq!(cfg.system.beta, 1.0);
        assert_eq!(cfg.micro.scheme, MicroScheme::Trapezoidal);
    }

    #[test]
    fn errors_carry_line_and_column() {
        let err = parse("[system]\nn = 1\nbeta = \"hot\"\n", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(": bad.toml:3:8:"), "{msg}");
        let unknown = parse("[system]\nwidth = 2\n", "u.toml").unwrap_err().to_string();
        assert!(unknown.contains(": u.toml:2:1:"), "{unknown}");
    }

    #[test]
    fn general_bath_and_constant_poisson() {
        let src = r#"
            [system]
            coupling = [[1.0], [0.0]]
            poisson = { matrix = [[0.0, 2.0], [-2.0, 0.0]] }
            [bath]
            kind = "general"
            generator = [[1.0, -1.0], [1.0, 0.5]]
            [initial]
            z = [0.0, 1.0]
            w = [0.0, 0.0]
        "#;
        let cfg = parse(src, "g").unwrap();
        let spec = cfg.system().unwrap();
        assert_eq!(spec.d(), 2);
        assert_eq!(cfg.basis().unwrap().d(), 2);
        let skewless = src.replace("-2.0", "1.0");
        assert!(matches!(parse(&skewless, "g").unwrap().system(), Err(CliError::Config(_))));
    }

    #[test]
    fn shape_errors_are_config_errors() {
        let cfg = parse("[system]\ncoupling = [[1.0, 2.0], [0.5]]\n", "s").unwrap();
        assert!(matches!(cfg.system(), Err(CliError::Config(_))));
        let cfg = parse("[initial]\nz = [1.0]\n", "s").unwrap();
        assert!(cfg.initial_state(&cfg.system().unwrap()).is_err());
    }

    #[test]
    fn line_column_counts_from_one() {
        assert_eq!(line_column("ab\ncd", 0), (1, 1));
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
    }
}
