use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heatbath_core::micro::MicroScheme;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "heatbath", version, about = "Hamiltonian system coupled to a heat bath: simulation and verification")]
pub struct Cli {
    /// TOML configuration; the built-in running example when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output file (CSV or JSON); stdout when omitted. A manifest is written
    /// next to it as `<PATH>.manifest.json`.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads for ensemble work.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one trajectory and write it as CSV.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Run a verification and write a JSON report.
    #[command(subcommand)]
    Verify(Verify),
    /// Compare the microscopic simulation with the reduced ODE.
    CompareMicroMacro(CompareArgs),
    /// Statistical-mechanics checks.
    #[command(subcommand)]
    Ensemble(Ensemble),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(Simulate::Micro(_)) => "simulate micro",
            Command::Simulate(Simulate::Macro(_)) => "simulate macro",
            Command::Verify(Verify::Compression(_)) => "verify compression",
            Command::Verify(Verify::Ou(_)) => "verify ou",
            Command::Verify(Verify::Structure(_)) => "verify structure",
            Command::CompareMicroMacro(_) => "compare-micro-macro",
            Command::Ensemble(Ensemble::Logz(_)) => "ensemble logz",
            Command::Ensemble(Ensemble::Equivalence(_)) => "ensemble equivalence",
            Command::Ensemble(Ensemble::Variance(_)) => "ensemble variance",
            Command::Ensemble(Ensemble::Invariance(_)) => "ensemble invariance",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Simulate {
    /// Full system: Hamiltonian part plus the bath on a grid.
    Micro(MicroArgs),
    /// Reduced (z, w, e) dynamics, deterministic or stochastic.
    Macro(MacroArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    FrozenHeun,
    Trapezoidal,
}

impl From<SchemeArg> for MicroScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::FrozenHeun => MicroScheme::FrozenHeun,
            SchemeArg::Trapezoidal => MicroScheme::Trapezoidal,
        }
    }
}

#[derive(Debug, Args)]
pub struct MicroArgs {
    /// Grid spacing and time step.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long = "T", visible_alias = "t-end")]
    pub t_end: Option<f64>,
    /// Start the hidden bath from thermal noise.
    #[arg(long)]
    pub thermal: bool,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Record every N steps.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MacroArgs {
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long = "T", visible_alias = "t-end")]
    pub t_end: Option<f64>,
    /// Integrate the SDE instead of the ODE.
    #[arg(long)]
    pub sde: bool,
    /// Path index selecting the random stream of an SDE run.
    #[arg(long, default_value_t = 0)]
    pub path: u64,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long = "T", visible_alias = "t-end", default_value_t = 10.0)]
    pub t_end: f64,
    /// Time between compared records.
    #[arg(long, default_value_t = 0.01)]
    pub interval: f64,
    /// Largest allowed deviation.
    #[arg(long, default_value_t = 5e-3)]
    pub tol: f64,
}

#[derive(Debug, Subcommand)]
pub enum Verify {
    /// Shifted Gram matrices against the matrix exponential, and the dilation identity.
    Compression(CompressionArgs),
    /// Lag covariance of exact OU paths against (1/β) e^{-τD}.
    Ou(OuArgs),
    /// GENERIC axioms and drift assembly at random states.
    Structure(StructureArgs),
}

#[derive(Debug, Args)]
pub struct CompressionArgs {
    #[arg(long, default_value_t = 5.0)]
    pub t_max: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_step: f64,
    /// Tolerance for the closed-form Gram matrices.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub quadrature_tol: f64,
    #[arg(long, default_value_t = 30.0)]
    pub identity_y_max: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub identity_tol: f64,
}

#[derive(Debug, Args)]
pub struct OuArgs {
    #[arg(long, default_value_t = 20_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0.7)]
    pub lag: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Inverse temperature; the configured β when omitted.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Allowed standard errors per entry.
    #[arg(long, default_value_t = 4.0)]
    pub se: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    None,
    Linear,
    Sinh,
}

#[derive(Debug, Args)]
pub struct StructureArgs {
    #[arg(long, default_value_t = 1000)]
    pub states: usize,
    /// Standard deviation of the random states.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Check the structure in transformed coordinates.
    #[arg(long, value_enum, default_value_t = MapKind::None)]
    pub map: MapKind,
    #[arg(long, default_value_t = 1.0)]
    pub sinh_scale: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Tolerance of finite-difference checks.
    #[arg(long, default_value_t = 1e-6)]
    pub fd_tol: f64,
}

#[derive(Debug, Subcommand)]
pub enum Ensemble {
    /// Microcanonical partition function and its normalized gap.
    Logz(LogzArgs),
    /// Low-dimensional marginals of the uniform sphere.
    Equivalence(EquivalenceArgs),
    /// Weighted second moment of sphere samples against R Σ λ_i.
    Variance(VarianceArgs),
    /// Moments of ν_β before and after the SDE flow.
    Invariance(InvarianceArgs),
}

#[derive(Debug, Args)]
pub struct LogzArgs {
    #[arg(long, default_value_t = 1_000_000)]
    pub n: u64,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 0.7)]
    pub e: f64,
    /// Bound on |gap|.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct EquivalenceArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 50_000)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
    #[arg(long, default_value_t = 0.02)]
    pub cov_tol: f64,
    #[arg(long, default_value_t = 0.1)]
    pub kurtosis_tol: f64,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long)]
    pub factor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    #[arg(long = "T", visible_alias = "t-end", default_value_t = 5.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    /// Negative control: zero the noise matrix but keep the dissipation.
    #[arg(long)]
    pub zero_noise: bool,
}
