//! Subcommand implementations. Each returns the bytes of its output file,
//! whether its checks passed, and an optional summary line for stdout.

use heatbath_core::dilation::{self, DilationBasis};
use heatbath_core::ensemble::{self, VARIANCE_BOUND_FACTOR};
use heatbath_core::generic::{self, CoordinateMap, GenericStructure, Structure, Tolerances};
use heatbath_core::macrodyn::{self, IntegratorConfig, MacroState};
use heatbath_core::micro::{self, MicroConfig, MicroModel};
use heatbath_core::model::{build_derived, SystemSpec};
use heatbath_core::ou::{self, OuParams};
use heatbath_core::rng::{standard_normal, stream};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::cli::{
    CompareArgs, CompressionArgs, EquivalenceArgs, InvarianceArgs, LogzArgs, MacroArgs, MapKind, MicroArgs, OuArgs,
    StructureArgs, VarianceArgs,
};
use crate::config::Config;
use crate::error::CliError;
use crate::output::{json_bytes, Table};

pub struct Product {
    pub bytes: Vec<u8>,
    pub passed: bool,
    pub summary: Option<String>,
}

impl Product {
    fn data(bytes: Vec<u8>) -> Self {
        Self { bytes, passed: true, summary: None }
    }

    fn report<T: Serialize>(report: &T, passed: bool) -> Result<Self, CliError> {
        Ok(Self { bytes: json_bytes(report)?, passed, summary: None })
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn state_header(spec: &SystemSpec) -> Vec<String> {
    let n = spec.n();
    std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("q{i}")))
        .chain((1..=n).map(|i| format!("p{i}")))
        .chain((1..=spec.d()).map(|j| format!("w{j}")))
        .collect()
}

fn state_row(t: f64, z: &DVector<f64>, w: &DVector<f64>) -> Vec<f64> {
    std::iter::once(t).chain(z.iter().copied()).chain(w.iter().copied()).collect()
}

fn stride_for(interval: f64, step: f64) -> usize {
    ((interval / step).round() as usize).max(1)
}

pub fn simulate_micro(cfg: &Config, seed: u64, args: &MicroArgs) -> Result<Product, CliError> {
    let spec = cfg.system()?;
    let basis = cfg.basis()?;
    let (z0, w0) = cfg.initial_state(&spec)?;
    let h = args.h.unwrap_or(cfg.micro.h);
    let t_end = args.t_end.unwrap_or(cfg.micro.t_end);
    let mut mc = MicroConfig::new(h, t_end)
        .with_scheme(args.scheme.map_or(cfg.micro.scheme, Into::into))
        .with_stride(args.stride.unwrap_or(cfg.micro.record_stride));
    if args.thermal || cfg.micro.thermal {
        mc = mc.thermal(seed);
    }
    let model = MicroModel::new(&spec, &basis, mc)?;
    let traj = model.run(model.init(&z0, &w0, 0)?)?;
    let mut header = state_header(&spec);
    header.extend(["h_zw".to_string(), "total_energy".to_string()]);
    let mut table = Table::new(header);
    for r in &traj.records {
        let mut row = state_row(r.t, &r.z, &r.w);
        row.extend([r.h_zw, r.total_energy]);
        table.push(row);
    }
    Ok(Product::data(table.to_csv()?))
}

pub fn simulate_macro(cfg: &Config, seed: u64, args: &MacroArgs) -> Result<Product, CliError> {
    let spec = cfg.system()?;
    let derived = build_derived(&spec)?;
    let (z0, w0) = cfg.initial_state(&spec)?;
    let dt = args.dt.unwrap_or(cfg.macro_.dt);
    let t_end = args.t_end.unwrap_or(cfg.macro_.t_end);
    let stride = args.stride.unwrap_or(cfg.macro_.record_stride).max(1);
    let init = MacroState::new(z0, w0);
    let traj = if args.sde {
        let ic = IntegratorConfig::sde(dt, seed)
            .with_scheme(cfg.macro_.sde_scheme)
            .with_energy_increment(cfg.macro_.energy_increment)
            .with_stride(stride);
        macrodyn::run_sde(&spec, &derived, &init, t_end, &ic, args.path)
    } else {
        macrodyn::run_ode(&spec, &derived, &init, t_end, &IntegratorConfig::ode(dt).with_stride(stride))
    };
    let mut header = state_header(&spec);
    header.extend(["e".to_string(), "energy".to_string(), "entropy".to_string()]);
    let mut table = Table::new(header);
    for r in &traj.records {
        let mut row = state_row(r.state.t, &r.state.z, &r.state.w);
        row.extend([r.state.e, r.energy, r.entropy]);
        table.push(row);
    }
    Ok(Product::data(table.to_csv()?))
}

pub fn compare_micro_macro(cfg: &Config, args: &CompareArgs) -> Result<Product, CliError> {
    let spec = cfg.system()?;
    let derived = build_derived(&spec)?;
    let basis = cfg.basis()?;
    let (z0, w0) = cfg.initial_state(&spec)?;
    let stride = stride_for(args.interval, args.h);
    let model = MicroModel::new(&spec, &basis, MicroConfig::new(args.h, args.t_end).with_stride(stride))?;
    let micro_traj = model.run(model.init_deterministic(&z0, &w0)?)?;
    let macro_traj = macrodyn::run_ode(
        &spec,
        &derived,
        &MacroState::new(z0, w0),
        args.t_end,
        &IntegratorConfig::ode(args.h).with_stride(stride),
    );
    let mut table = Table::new(vec!["t".into(), "dev_z".into(), "dev_w".into(), "dev".into()]);
    for (a, b) in micro_traj.records.iter().zip(&macro_traj.records) {
        let dz = (&a.z - &b.state.z).norm();
        let dw = (&a.w - &b.state.w).norm();
        table.push(vec![a.t, dz, dw, dz.hypot(dw)]);
    }
    let max_dev = micro::max_deviation(&micro_traj, &macro_traj);
    let passed = max_dev <= args.tol;
    Ok(Product { bytes: table.to_csv()?, passed, summary: Some(format!("max_dev={max_dev:.6e}")) })
}

pub fn verify_compression(cfg: &Config, args: &CompressionArgs) -> Result<Product, CliError> {
    let generator = cfg.generator()?;
    let steps = (args.t_max / args.t_step).round() as usize;
    let ts: Vec<f64> = (1..=steps).map(|k| k as f64 * args.t_step).collect();
    let closed = match cfg.bath.kind {
        crate::config::BathKind::RunningExample => Some(dilation::verify_compression(&cfg.basis()?, &ts, args.tol)?),
        crate::config::BathKind::General => None,
    };
    let quad_basis = DilationBasis::general(generator.clone(), cfg.bath.y_max)?;
    let quadrature = dilation::verify_compression(&quad_basis, &ts, args.quadrature_tol)?;
    let identity_error = dilation::verify_dilation_identity(&generator, args.identity_y_max)?;
    let identity_passed = identity_error <= args.identity_tol;
    let passed = closed.as_ref().is_none_or(|r| r.passed) && quadrature.passed && identity_passed;
    let report = json!({
        "times": ts.len(),
        "closed_form": closed,
        "quadrature": quadrature,
        "dilation_identity": {
            "y_max": args.identity_y_max,
            "frobenius_error": identity_error,
            "tolerance": args.identity_tol,
            "passed": identity_passed,
        },
        "passed": passed,
    });
    Product::report(&report, passed)
}

pub fn verify_ou(cfg: &Config, seed: u64, args: &OuArgs) -> Result<Product, CliError> {
    let beta = args.beta.unwrap_or(cfg.system.beta);
    let params = OuParams::new(cfg.generator()?, beta, args.dt)?;
    let lag_index = (args.lag / args.dt).round() as usize;
    let target = ou::covariance(&params, 0.0, lag_index as f64 * args.dt);
    let paths = ou::simulate_stationary_paths(&params, lag_index, args.paths, seed);
    let estimate = ou::estimate_covariance(&paths, lag_index)?;
    let max_z = estimate.max_z_score(&target);
    let passed = max_z <= args.se;
    let report = json!({
        "beta": beta,
        "lag": lag_index as f64 * args.dt,
        "dt": args.dt,
        "paths": args.paths,
        "target": rows(&target),
        "estimate": rows(&estimate.mean),
        "std_err": rows(&estimate.std_err),
        "max_z_score": max_z,
        "threshold_se": args.se,
        "passed": passed,
    });
    Product::report(&report, passed)
}

pub fn verify_structure(cfg: &Config, seed: u64, args: &StructureArgs) -> Result<Product, CliError> {
    let spec = cfg.system()?;
    let structure = GenericStructure::new(&spec, &build_derived(&spec)?);
    let dim = structure.dim();
    let states = generic::random_states(dim, args.states, args.scale, seed);
    let tol = Tolerances { algebraic: args.tol, finite_difference: args.fd_tol };
    let (report, drift) = match args.map {
        MapKind::None => (generic::check_structure(&structure, &states, tol), Some(generic::drift_consistency(&structure, &states))),
        MapKind::Linear => {
            let mut rng = stream(seed, 1);
            let a = DMatrix::identity(dim, dim) + DMatrix::from_fn(dim, dim, |_, _| 0.3 * standard_normal(&mut rng));
            let b = DVector::from_fn(dim, |_, _| standard_normal(&mut rng));
            (generic::transform_structure(&structure, &CoordinateMap::linear(a, b)?, &states, tol)?, None)
        }
        MapKind::Sinh => (generic::transform_structure(&structure, &CoordinateMap::sinh(args.sinh_scale)?, &states, tol)?, None),
    };
    let drift_passed = drift.is_none_or(|d| d <= args.tol);
    let passed = report.passed && drift_passed;
    let out = json!({
        "map": args.map,
        "structure": report,
        "drift_mismatch": drift,
        "drift_tolerance": args.tol,
        "passed": passed,
    });
    Product::report(&out, passed)
}

pub fn ensemble_logz(cfg: &Config, args: &LogzArgs) -> Result<Product, CliError> {
    let beta = args.beta.unwrap_or(cfg.system.beta);
    let log_z = ensemble::microcanonical_log_z(args.n, beta, args.e)?;
    let normalization = ensemble::microcanonical_normalization(args.n, beta)?;
    let gap = ensemble::normalized_gap(args.n, beta, args.e)?;
    let asymptote = ensemble::gap_asymptote(args.n, beta, args.e);
    let passed = gap.abs() <= args.tol;
    let report = json!({
        "n": args.n,
        "beta": beta,
        "e": args.e,
        "log_z": log_z,
        "normalization": normalization,
        "gap": gap,
        "gap_asymptote": asymptote,
        "n_times_gap": gap * args.n as f64,
        "tolerance": args.tol,
        "passed": passed,
    });
    Product::report(&report, passed)
}

pub fn ensemble_equivalence(seed: u64, args: &EquivalenceArgs) -> Result<Product, CliError> {
    let stats = ensemble::sphere_sample(args.n, args.r, args.k, args.count, seed)?;
    let cov_err = stats.covariance_error();
    let kurt = stats.max_abs_kurtosis();
    let passed = cov_err <= args.cov_tol && kurt <= args.kurtosis_tol;
    let report = json!({
        "stats": stats,
        "covariance_error": cov_err,
        "covariance_tolerance": args.cov_tol,
        "max_abs_excess_kurtosis": kurt,
        "kurtosis_tolerance": args.kurtosis_tol,
        "passed": passed,
    });
    Product::report(&report, passed)
}

pub fn ensemble_variance(seed: u64, args: &VarianceArgs) -> Result<Product, CliError> {
    let factor = args.factor.unwrap_or(VARIANCE_BOUND_FACTOR);
    let report = ensemble::variance_bound_check(&args.n_list, args.r, &ensemble::inverse_square_weight, args.count, seed, factor)?;
    Product::report(&report, report.passed)
}

pub fn ensemble_invariance(cfg: &Config, seed: u64, args: &InvarianceArgs) -> Result<Product, CliError> {
    let spec = cfg.system()?;
    let mut derived = build_derived(&spec)?;
    if !derived.is_confining() {
        log::warn!(
            "V(q) - |Cq|²/2 is not confining (margin {:.3e}); the invariant measure is not normalizable",
            derived.confinement_margin
        );
    }
    if args.zero_noise {
        derived.sigma.fill(0.0);
    }
    let report = ensemble::invariance_test(&spec, &derived, args.t_end, args.dt, args.count, seed, cfg.ensemble.controls())
        .map_err(CliError::Run)?;
    log::info!("Metropolis acceptance rate {:.3}, split R-hat {:.4}", report.acceptance_rate, report.max_rhat);
    Product::report(&report, report.passed)
}
