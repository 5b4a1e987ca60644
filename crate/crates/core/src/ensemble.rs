//! Invariant measures and statistical-mechanics checks.
//!
//! * `μ_{β,Z}(dz) ∝ exp(-β (H_A(z) - ½|Cq|²)) dz`, sampled by random-walk
//!   Metropolis chains gated on split-R̂.
//! * `ν_β(dz, dw) = μ_{β,Z}(dz) N(-Cq, I/β)(dw)`.
//! * Microcanonical partition function of the bath sphere and its
//!   large-`n` asymptotics.
//! * Uniform samples on spheres of radius `√(nR)` for equivalence of
//!   ensembles and the weighted variance bound.
//! * Invariance of `ν_β` under the macro SDE.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::macrodyn::{self, IntegratorConfig, MacroState};
use crate::model::{self, DerivedOperators, SystemSpec};
use crate::par::map_indices;
use crate::rng::{standard_normal, standard_normal_vector, stream};
use crate::stats::{self, Estimate};

/// Split-R̂ threshold below which chains count as converged.
pub const RHAT_THRESHOLD: f64 = 1.05;

/// Window length of the escape detector.
pub const ESCAPE_WINDOW: usize = 10_000;

/// Random-walk Metropolis settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct McmcControls {
    /// Gaussian proposal standard deviation per coordinate; `None` picks
    /// `2.4 / √(2n β)`.
    pub proposal_std: Option<f64>,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
}

impl Default for McmcControls {
    fn default() -> Self {
        Self { proposal_std: None, burn_in: 5_000, thin: 20, chains: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MeasureKind {
    MuBetaZ,
    NuBeta,
    Sphere { n: usize, r: f64 },
}

#[derive(Debug, Clone)]
pub struct MeasureSpec {
    pub kind: MeasureKind,
    pub spec: SystemSpec,
    pub controls: McmcControls,
}

impl MeasureSpec {
    pub fn mu_beta_z(spec: &SystemSpec) -> Self {
        Self { kind: MeasureKind::MuBetaZ, spec: spec.clone(), controls: McmcControls::default() }
    }

    pub fn nu_beta(spec: &SystemSpec) -> Self {
        Self { kind: MeasureKind::NuBeta, spec: spec.clone(), controls: McmcControls::default() }
    }

    pub fn with_controls(mut self, controls: McmcControls) -> Self {
        self.controls = controls;
        self
    }
}

/// Output of [`sample_mu_beta_z`].
#[derive(Debug, Clone)]
pub struct ChainSamples {
    pub samples: Vec<DVector<f64>>,
    pub acceptance_rate: f64,
    /// Worst split-R̂ over the coordinates of `z` and the effective energy.
    pub max_rhat: f64,
    /// `false` when the quadratic part of the effective potential is not
    /// positive definite; the chain ran anyway.
    pub confining: bool,
}

/// `H_A(z) - ½|Cq|²`
pub fn effective_potential(spec: &SystemSpec, z: &[f64]) -> f64 {
    let cq = spec.couple(z);
    model::hamiltonian_a(spec, z) - 0.5 * cq.norm_squared()
}

struct Chain {
    draws: Vec<DVector<f64>>,
    energies: Vec<f64>,
    accepted: usize,
    proposed: usize,
}

/// Fraction of decreasing checkpoint-to-checkpoint moves that marks a
/// window as a monotone escape.
const ESCAPE_FRACTION: f64 = 0.9;
const ESCAPE_CHECKPOINTS: usize = 100;

fn run_chain(spec: &SystemSpec, controls: &McmcControls, step: f64, per_chain: usize, seed: u64, index: u64) -> Result<Chain> {
    let dim = spec.dim_z();
    let beta = spec.beta();
    let mut rng = stream(seed, index);
    let mut z = standard_normal_vector(&mut rng, dim) / libm::sqrt(beta);
    let mut u = effective_potential(spec, z.as_slice());
    let total = controls.burn_in + per_chain * controls.thin;
    let mut chain = Chain { draws: Vec::with_capacity(per_chain), energies: Vec::with_capacity(per_chain), accepted: 0, proposed: 0 };
    let mut proposal = DVector::zeros(dim);
    let every = ESCAPE_WINDOW / ESCAPE_CHECKPOINTS;
    let mut checkpoints: Vec<f64> = Vec::with_capacity(ESCAPE_CHECKPOINTS + 1);
    checkpoints.push(u);

    for k in 1..=total {
        for (x, y) in proposal.iter_mut().zip(z.iter()) {
            *x = y + step * standard_normal(&mut rng);
        }
        let u_new = effective_potential(spec, proposal.as_slice());
        chain.proposed += 1;
        let log_ratio = -beta * (u_new - u);
        if log_ratio >= 0.0 || rng.random::<f64>() < libm::exp(log_ratio) {
            core::mem::swap(&mut z, &mut proposal);
            u = u_new;
            chain.accepted += 1;
        }
        if !u.is_finite() {
            return Err(Error::Divergence(format!("chain {index}: effective energy became non-finite at step {k}")));
        }
        if k % every == 0 {
            checkpoints.push(u);
            if checkpoints.len() == ESCAPE_CHECKPOINTS + 1 {
                let falls = checkpoints.windows(2).filter(|w| w[1] < w[0]).count();
                let drop = checkpoints[0] - u;
                if falls as f64 >= ESCAPE_FRACTION * ESCAPE_CHECKPOINTS as f64 && beta * drop > 50.0 {
                    return Err(Error::Divergence(format!(
                        "chain {index}: effective energy fell monotonically by {drop:.3e} over {ESCAPE_WINDOW} steps"
                    )));
                }
                checkpoints.clear();
                checkpoints.push(u);
            }
        }
        if k > controls.burn_in && (k - controls.burn_in) % controls.thin == 0 {
            chain.draws.push(z.clone());
            chain.energies.push(u);
        }
    }
    Ok(chain)
}

/// Random-walk Metropolis for `μ_{β,Z}` with `controls.chains` independent
/// chains on streams `(seed, 0..chains)`. Samples are concatenated chain by
/// chain and truncated to `count`.
///
/// Fails with [`Error::Divergence`] if a chain escapes to `-∞` in energy
/// and with [`Error::Convergence`] if split-R̂ reaches [`RHAT_THRESHOLD`].
pub fn sample_mu_beta_z(mspec: &MeasureSpec, count: usize, seed: u64) -> Result<ChainSamples> {
    if let MeasureKind::Sphere { .. } = mspec.kind {
        return Err(Error::InvalidSpec("sphere measures are sampled with sphere_sample".into()));
    }
    let controls = mspec.controls;
    if controls.chains < 1 || controls.thin < 1 || count == 0 {
        return Err(Error::InvalidSpec("MCMC needs at least one chain, thinning ≥ 1 and count ≥ 1".into()));
    }
    let spec = &mspec.spec;
    let derived = model::build_derived(spec)?;
    let dim = spec.dim_z();
    let step = controls.proposal_std.unwrap_or(2.4 / libm::sqrt(dim as f64 * spec.beta()));
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidSpec("proposal standard deviation must be positive".into()));
    }
    let per_chain = count.div_ceil(controls.chains);
    let chains = map_indices(controls.chains, |c| run_chain(spec, &controls, step, per_chain, seed, c as u64));
    let chains: Vec<Chain> = chains.into_iter().collect::<Result<_>>()?;

    let mut max_rhat = stats::split_rhat(&chains.iter().map(|c| c.energies.clone()).collect::<Vec<_>>());
    for i in 0..dim {
        let coord: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|z| z[i]).collect()).collect();
        max_rhat = max_rhat.max(stats::split_rhat(&coord));
    }
    if !(max_rhat < RHAT_THRESHOLD) {
        return Err(Error::Convergence { rhat: max_rhat, threshold: RHAT_THRESHOLD });
    }
    let accepted: usize = chains.iter().map(|c| c.accepted).sum();
    let proposed: usize = chains.iter().map(|c| c.proposed).sum();
    let mut samples: Vec<DVector<f64>> = chains.into_iter().flat_map(|c| c.draws).collect();
    samples.truncate(count);
    Ok(ChainSamples {
        samples,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        max_rhat,
        confining: derived.is_confining(),
    })
}

/// Stream index for the `w | z` Gaussian draws, kept clear of chain indices.
const NU_W_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct NuSamples {
    pub z: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub chains: ChainSamples,
}

/// Draws from `ν_β`: `z` from [`sample_mu_beta_z`], then
/// `w = -Cq + β^{-1/2} ξ`.
pub fn sample_nu_beta(mspec: &MeasureSpec, count: usize, seed: u64) -> Result<NuSamples> {
    let chains = sample_mu_beta_z(mspec, count, seed)?;
    let spec = &mspec.spec;
    let scale = 1.0 / libm::sqrt(spec.beta());
    let mut rng = stream(seed, NU_W_STREAM);
    let w = chains
        .samples
        .iter()
        .map(|z| standard_normal_vector(&mut rng, spec.d()) * scale - spec.couple(z.as_slice()))
        .collect();
    Ok(NuSamples { z: chains.samples.clone(), w, chains })
}

/// `log ω_n = (n/2) log π - lgamma(n/2 + 1)`, the log volume of the unit ball.
pub fn log_unit_ball_volume(n: u64) -> f64 {
    let half = n as f64 / 2.0;
    half * libm::log(core::f64::consts::PI) - libm::lgamma(half + 1.0)
}

fn check_shell(n: u64, beta: f64, e: f64) -> Result<()> {
    if n < 1 || !(beta > 0.0) {
        return Err(Error::Domain(format!("need n ≥ 1 and β > 0, got n = {n}, β = {beta}")));
    }
    let r2 = n as f64 / beta + 2.0 * e;
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::Domain(format!("squared shell radius n/β + 2e = {r2} must be positive")));
    }
    Ok(())
}

/// `log Z_{β,n,e} = log(n ω_n) + ((n-2)/2) log(n/β + 2e)`
pub fn microcanonical_log_z(n: u64, beta: f64, e: f64) -> Result<f64> {
    check_shell(n, beta, e)?;
    let nf = n as f64;
    Ok(libm::log(nf) + log_unit_ball_volume(n) + 0.5 * (nf - 2.0) * libm::log(nf / beta + 2.0 * e))
}

/// `C(β, n) = log(n ω_n) + ((n-2)/2) log(n/β)`
pub fn microcanonical_normalization(n: u64, beta: f64) -> Result<f64> {
    microcanonical_log_z(n, beta, 0.0)
}

/// `log Z_{β,n,e} - C(β, n) - βe`, evaluated as
/// `((n-2)/2) log1p(2βe/n) - βe` so that no large terms cancel.
pub fn normalized_gap(n: u64, beta: f64, e: f64) -> Result<f64> {
    check_shell(n, beta, e)?;
    let nf = n as f64;
    Ok(0.5 * (nf - 2.0) * libm::log1p(2.0 * beta * e / nf) - beta * e)
}

/// Leading-order prediction `-(2βe + β²e²)/n` for [`normalized_gap`].
pub fn gap_asymptote(n: u64, beta: f64, e: f64) -> f64 {
    -(2.0 * beta * e + beta * beta * e * e) / n as f64
}

/// Draws per random stream in the sphere samplers.
const SPHERE_CHUNK: usize = 1_000;

/// Uniform points on the sphere of radius `√(nR)` in `R^n`, reduced by
/// `reduce`, one stream per chunk of draws.
fn sphere_draws<T, F>(n: usize, r: f64, count: usize, seed: u64, reduce: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync + Send,
{
    let radius = libm::sqrt(n as f64 * r);
    let chunks = count.div_ceil(SPHERE_CHUNK);
    let per_chunk = map_indices(chunks, |c| {
        let mut rng = stream(seed, c as u64);
        let len = SPHERE_CHUNK.min(count - c * SPHERE_CHUNK);
        let mut x = vec![0.0; n];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let mut norm2 = 0.0;
            for xi in x.iter_mut() {
                *xi = standard_normal(&mut rng);
                norm2 += *xi * *xi;
            }
            let scale = radius / libm::sqrt(norm2);
            for xi in x.iter_mut() {
                *xi *= scale;
            }
            out.push(reduce(&x));
        }
        out
    });
    per_chunk.into_iter().flatten().collect()
}

/// Moments of the first `k` coordinates of uniform sphere samples.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SphereStats {
    pub n: usize,
    pub r: f64,
    pub k: usize,
    pub count: usize,
    pub mean: Vec<Estimate>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub covariance: DMatrix<f64>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub covariance_std_err: DMatrix<f64>,
    /// Standard errors use the Gaussian reference value `√(24/M)`.
    pub excess_kurtosis: Vec<Estimate>,
}

impl SphereStats {
    /// Largest `|Cov_ij - R δ_ij|`.
    pub fn covariance_error(&self) -> f64 {
        let target = DMatrix::identity(self.k, self.k) * self.r;
        crate::linalg::max_abs(&(&self.covariance - target))
    }

    pub fn max_abs_kurtosis(&self) -> f64 {
        self.excess_kurtosis.iter().map(|e| e.value.abs()).fold(0.0, f64::max)
    }
}

pub fn sphere_sample(n: usize, r: f64, k: usize, count: usize, seed: u64) -> Result<SphereStats> {
    if k > n || n == 0 || count < 2 || !(r > 0.0) {
        return Err(Error::InvalidSpec(format!("sphere sample needs 1 ≤ k ≤ n, R > 0, count ≥ 2 (k = {k}, n = {n})")));
    }
    let heads = sphere_draws(n, r, count, seed, |x| x[..k].to_vec());
    let m = count as f64;
    let column = |i: usize| -> Vec<f64> { heads.iter().map(|h| h[i]).collect() };
    let cols: Vec<Vec<f64>> = (0..k).map(column).collect();
    let mean: Vec<Estimate> = cols.iter().map(|c| stats::mean_with_error(c)).collect();
    let mut covariance = DMatrix::zeros(k, k);
    let mut covariance_std_err = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let prods: Vec<f64> = cols[i].iter().zip(&cols[j]).map(|(a, b)| (a - mean[i].value) * (b - mean[j].value)).collect();
            let est = stats::mean_with_error(&prods);
            let cov = est.value * m / (m - 1.0);
            covariance[(i, j)] = cov;
            covariance[(j, i)] = cov;
            covariance_std_err[(i, j)] = est.std_err;
            covariance_std_err[(j, i)] = est.std_err;
        }
    }
    let kurt_se = libm::sqrt(24.0 / m);
    let excess_kurtosis = cols.iter().map(|c| Estimate { value: stats::excess_kurtosis(c), std_err: kurt_se }).collect();
    Ok(SphereStats { n, r, k, count, mean, covariance, covariance_std_err, excess_kurtosis })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct VarianceBoundRow {
    pub n: usize,
    /// Monte Carlo estimate of `E Σ λ_i y_i²`.
    pub estimate: Estimate,
    /// Exact value `R Σ_{i ≤ n} λ_i`.
    pub exact: f64,
    pub bound: f64,
    /// `estimate / (R Σ λ_i)`, or 0 when all weights vanish.
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct VarianceBoundReport {
    pub r: f64,
    pub factor: f64,
    pub rows: Vec<VarianceBoundRow>,
    pub passed: bool,
}

/// Default constant of the weighted variance bound.
pub const VARIANCE_BOUND_FACTOR: f64 = 1.5;

/// `λ_i = 1/i²` with 1-based `i`.
pub fn inverse_square_weight(i: usize) -> f64 {
    1.0 / (i as f64 * i as f64)
}

/// Checks `E Σ λ_i y_i² ≤ factor · R · Σ_{i ≤ n} λ_i` for sphere samples
/// `y` of radius `√(nR)`, for each `n` in `n_list`.
pub fn variance_bound_check(
    n_list: &[usize],
    r: f64,
    weights: &(dyn Fn(usize) -> f64 + Sync),
    count: usize,
    seed: u64,
    factor: f64,
) -> Result<VarianceBoundReport> {
    let mut rows = Vec::with_capacity(n_list.len());
    for (idx, &n) in n_list.iter().enumerate() {
        if n == 0 || count < 2 || !(r > 0.0) {
            return Err(Error::InvalidSpec("variance bound needs n ≥ 1, R > 0 and count ≥ 2".into()));
        }
        let lambda: Vec<f64> = (1..=n).map(weights).collect();
        let sum_lambda: f64 = lambda.iter().sum();
        let values = sphere_draws(n, r, count, seed.wrapping_add(idx as u64), |x| {
            x.iter().zip(&lambda).map(|(xi, l)| l * xi * xi).sum::<f64>()
        });
        let estimate = stats::mean_with_error(&values);
        let exact = r * sum_lambda;
        let bound = factor * exact;
        let ratio = if exact == 0.0 { 0.0 } else { estimate.value / exact };
        rows.push(VarianceBoundRow { n, estimate, exact, bound, ratio, passed: estimate.value <= bound });
    }
    let passed = rows.iter().all(|r| r.passed);
    Ok(VarianceBoundReport { r, factor, rows, passed })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MomentDelta {
    pub name: String,
    pub before: f64,
    pub after: f64,
    /// Standard error of the paired difference `after - before`.
    pub std_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct InvarianceReport {
    pub count: usize,
    pub t_end: f64,
    pub dt: f64,
    pub acceptance_rate: f64,
    pub max_rhat: f64,
    pub moments: Vec<MomentDelta>,
    pub passed: bool,
}

impl InvarianceReport {
    /// Largest `|after - before| / tolerance`.
    pub fn worst_ratio(&self) -> f64 {
        self.moments.iter().map(|m| (m.after - m.before).abs() / m.tolerance).fold(0.0, f64::max)
    }
}

/// Standard errors allowed for each moment difference.
pub const INVARIANCE_SE: f64 = 4.0;
/// Discretization allowance in units of `dt`.
pub const INVARIANCE_DT_FACTOR: f64 = 5.0;

fn coordinate_names(spec: &SystemSpec) -> Vec<String> {
    let n = spec.n();
    (0..n)
        .map(|i| format!("q{}", i + 1))
        .chain((0..n).map(|i| format!("p{}", i + 1)))
        .chain((0..spec.d()).map(|j| format!("w{}", j + 1)))
        .collect()
}

/// First and second moments of `x = (z, w)`, as `(name, f)` pairs evaluated
/// on each sample.
fn moment_table(names: &[String], xs: &[DVector<f64>]) -> Vec<(String, Vec<f64>)> {
    let dim = names.len();
    let mut out = Vec::new();
    for i in 0..dim {
        out.push((format!("E[{}]", names[i]), xs.iter().map(|x| x[i]).collect()));
    }
    for i in 0..dim {
        for j in i..dim {
            out.push((format!("E[{}*{}]", names[i], names[j]), xs.iter().map(|x| x[i] * x[j]).collect()));
        }
    }
    out
}

/// Draws `count` samples from `ν_β`, evolves each with the macro SDE
/// (Euler–Maruyama, step `dt`, streams `(seed + 1, i)`) to `t_end`, and
/// compares every first and second moment of `(z, w)` before and after.
/// A moment passes when `|after - before| ≤ 4 SE + 5 dt`, with SE the
/// standard error of the paired differences.
///
/// `derived` is used as given, so a modified noise matrix can serve as a
/// negative control.
pub fn invariance_test(
    spec: &SystemSpec,
    derived: &DerivedOperators,
    t_end: f64,
    dt: f64,
    count: usize,
    seed: u64,
    controls: McmcControls,
) -> Result<InvarianceReport> {
    if !(t_end >= 0.0 && dt > 0.0) || count < 2 {
        return Err(Error::InvalidSpec("invariance test needs T ≥ 0, dt > 0 and count ≥ 2".into()));
    }
    let nu = sample_nu_beta(&MeasureSpec::nu_beta(spec).with_controls(controls), count, seed)?;
    let inits: Vec<MacroState> = nu.z.iter().zip(&nu.w).map(|(z, w)| MacroState::new(z.clone(), w.clone())).collect();
    let config = IntegratorConfig::sde(dt, seed.wrapping_add(1));
    let finals = macrodyn::run_sde_ensemble(spec, derived, &inits, t_end, &config);
    if let Some(bad) = finals.iter().position(|s| !s.is_finite()) {
        return Err(Error::Divergence(format!("SDE path {bad} left the finite range")));
    }

    let join = |s: &MacroState| DVector::from_iterator(s.z.len() + s.w.len(), s.z.iter().chain(s.w.iter()).copied());
    let before: Vec<DVector<f64>> = inits.iter().map(join).collect();
    let after: Vec<DVector<f64>> = finals.iter().map(join).collect();
    let names = coordinate_names(spec);
    let allowance = INVARIANCE_DT_FACTOR * dt;
    let moments: Vec<MomentDelta> = moment_table(&names, &before)
        .into_iter()
        .zip(moment_table(&names, &after))
        .map(|((name, b), (_, a))| {
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let delta = stats::mean_with_error(&diffs);
            let tolerance = INVARIANCE_SE * delta.std_err + allowance;
            MomentDelta { name, before: stats::mean(&b), after: stats::mean(&a), std_err: delta.std_err, tolerance, passed: delta.value.abs() <= tolerance }
        })
        .collect();
    let passed = moments.iter().all(|m| m.passed);
    Ok(InvarianceReport {
        count,
        t_end,
        dt,
        acceptance_rate: nu.chains.acceptance_rate,
        max_rhat: nu.chains.max_rhat,
        moments,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_derived, Potential, RunningExample};

    fn quadratic(coupling: &[f64], beta: f64) -> SystemSpec {
        SystemSpec::running_example(
            RunningExample::default(),
            Potential::Quadratic { stiffness: 1.0 },
            DMatrix::from_column_slice(3, 1, coupling),
            beta,
        )
        .unwrap()
    }

    fn column(xs: &[DVector<f64>], i: usize) -> Vec<f64> {
        xs.iter().map(|x| x[i]).collect()
    }

    /// Second moment with a standard error inflated by the chain's
    /// integrated autocorrelation, estimated from batch means.
    fn batch_estimate(xs: &[f64]) -> Estimate {
        let batches = 50;
        let len = xs.len() / batches;
        let means: Vec<f64> = (0..batches).map(|b| stats::mean(&xs[b * len..(b + 1) * len])).collect();
        Estimate { value: stats::mean(&means), std_err: libm::sqrt(stats::variance(&means) / batches as f64) }
    }

    #[test]
    fn uncoupled_gaussian_target() {
        let spec = quadratic(&[0.0, 0.0, 0.0], 1.0);
        let out = sample_mu_beta_z(&MeasureSpec::mu_beta_z(&spec), 20_000, 1).unwrap();
        assert!(out.confining && out.max_rhat < RHAT_THRESHOLD);
        assert!(out.acceptance_rate > 0.2 && out.acceptance_rate < 0.8, "{}", out.acceptance_rate);
        for i in 0..2 {
            let c = column(&out.samples, i);
            assert!(batch_estimate(&c).z_score(0.0) < 4.0);
            let sq: Vec<f64> = c.iter().map(|x| x * x).collect();
            assert!(batch_estimate(&sq).z_score(1.0) < 4.0, "coordinate {i}");
        }
    }

    #[test]
    fn momentum_marginal_is_thermal_for_quartic() {
        let spec = quadratic(&[0.4, 0.0, 0.2], 2.0).with_potential(Potential::Quartic { quadratic: -1.0, quartic: 1.0 }).unwrap();
        let out = sample_mu_beta_z(&MeasureSpec::mu_beta_z(&spec), 20_000, 2).unwrap();
        let p: Vec<f64> = column(&out.samples, 1).iter().map(|x| x * x).collect();
        assert!(batch_estimate(&p).z_score(0.5) < 4.0);
    }

    #[test]
    fn laplace_scaling_at_large_beta() {
        for beta in [20.0, 80.0] {
            let spec = quadratic(&[0.0, 0.0, 0.0], beta).with_potential(Potential::Quartic { quadratic: 2.0, quartic: 1.0 }).unwrap();
            let out = sample_mu_beta_z(&MeasureSpec::mu_beta_z(&spec), 20_000, 3).unwrap();
            let var_q = stats::variance(&column(&out.samples, 0));
            let laplace = 1.0 / (2.0 * beta);
            assert!((var_q / laplace - 1.0).abs() < 0.2, "β = {beta}: {var_q} vs {laplace}");
        }
    }

    #[test]
    fn non_confining_chain_diverges() {
        let spec = quadratic(&[1.0, 0.5, 0.0], 1.0);
        assert!(!build_derived(&spec).unwrap().is_confining());
        let controls = McmcControls { burn_in: 50_000, ..McmcControls::default() };
        let err = sample_mu_beta_z(&MeasureSpec::mu_beta_z(&spec).with_controls(controls), 1_000, 4).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err:?}");
    }

    #[test]
    fn poorly_mixed_chains_fail_rhat() {
        let spec = quadratic(&[0.0, 0.0, 0.0], 1.0);
        let controls = McmcControls { proposal_std: Some(1e-3), burn_in: 0, thin: 1, chains: 4 };
        let err = sample_mu_beta_z(&MeasureSpec::mu_beta_z(&spec).with_controls(controls), 2_000, 5).unwrap_err();
        assert!(matches!(err, Error::Convergence { .. }), "{err:?}");
    }

    #[test]
    fn nu_beta_conditional_structure() {
        let beta = 2.0;
        let c = [0.5, 0.3, 0.0];
        let spec = quadratic(&c, beta);
        let nu = sample_nu_beta(&MeasureSpec::nu_beta(&spec), 20_000, 6).unwrap();
        let q = column(&nu.z, 0);
        let q2: f64 = q.iter().map(|x| x * x).sum();
        for j in 0..3 {
            let w = column(&nu.w, j);
            // least-squares slope of w_j on q through the origin
            let slope = q.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / q2;
            let slope_se = libm::sqrt(1.0 / beta / q2);
            assert!((slope + c[j]).abs() < 4.0 * slope_se, "slope {j}: {slope}");
            let resid: Vec<f64> = q.iter().zip(&w).map(|(a, b)| b + c[j] * a).collect();
            let sq: Vec<f64> = resid.iter().map(|x| x * x).collect();
            assert!(stats::mean_with_error(&sq).z_score(1.0 / beta) < 4.0);
        }
    }

    #[test]
    fn uncoupled_nu_beta_has_independent_w() {
        let spec = quadratic(&[0.0, 0.0, 0.0], 1.0);
        let nu = sample_nu_beta(&MeasureSpec::nu_beta(&spec), 10_000, 7).unwrap();
        let q = column(&nu.z, 0);
        for j in 0..3 {
            let w = column(&nu.w, j);
            let prod: Vec<f64> = q.iter().zip(&w).map(|(a, b)| a * b).collect();
            assert!(stats::mean_with_error(&prod).z_score(0.0) < 4.0);
        }
    }

    #[test]
    fn gap_examples() {
        let gap = normalized_gap(1_000_000, 1.0, 0.7).unwrap();
        assert!(gap.abs() <= 1e-5);
        assert!((gap - gap_asymptote(1_000_000, 1.0, 0.7)).abs() < 1e-9);
        assert_eq!(normalized_gap(1000, 2.0, 0.0).unwrap(), 0.0);
        for n in [10_000u64, 100_000, 1_000_000] {
            let scaled = normalized_gap(n, 1.0, 0.7).unwrap() * n as f64;
            assert!((scaled / -(1.4 + 0.49) - 1.0).abs() < 0.01, "n = {n}: {scaled}");
        }
    }

    #[test]
    fn log_z_matches_direct_formula_for_small_n() {
        // n = 3: n ω_n = 4π, surface of the sphere of radius r is 4π r²
        let (beta, e) = (0.5, 1.25);
        let r2: f64 = 3.0 / beta + 2.0 * e;
        let direct = libm::log(4.0 * core::f64::consts::PI * libm::sqrt(r2));
        assert!((microcanonical_log_z(3, beta, e).unwrap() - direct).abs() < 1e-13);
        let split = microcanonical_log_z(3, beta, e).unwrap() - microcanonical_normalization(3, beta).unwrap() - beta * e;
        assert!((split - normalized_gap(3, beta, e).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn log_z_is_finite_for_huge_n_and_rejects_bad_shells() {
        assert!(microcanonical_log_z(100_000_000, 1.0, 0.7).unwrap().is_finite());
        assert!(matches!(microcanonical_log_z(10, 1.0, -5.0), Err(Error::Domain(_))));
        assert!(matches!(normalized_gap(0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn sphere_second_moment_is_exact() {
        let s = sphere_sample(50, 2.0, 3, 20_000, 8).unwrap();
        for i in 0..3 {
            assert!(s.mean[i].z_score(0.0) < 4.0);
            assert!((s.covariance[(i, i)] - 2.0).abs() < 4.0 * s.covariance_std_err[(i, i)]);
        }
        // -6/(n+2) is the exact excess kurtosis of one coordinate
        let exact = -6.0 / 52.0;
        for k in &s.excess_kurtosis {
            assert!(k.z_score(exact) < 4.0);
        }
    }

    #[test]
    fn two_sphere_marginal_is_not_gaussian() {
        let s = sphere_sample(2, 1.0, 2, 20_000, 9).unwrap();
        for k in &s.excess_kurtosis {
            assert!((k.value + 1.5).abs() < 0.1, "{}", k.value);
            assert!(k.value.abs() > 1.0);
        }
    }

    #[test]
    fn sphere_sampling_is_reproducible() {
        let a = sphere_sample(10, 1.0, 2, 2_500, 10).unwrap();
        let b = sphere_sample(10, 1.0, 2, 2_500, 10).unwrap();
        assert_eq!(a.covariance, b.covariance);
    }

    #[test]
    fn variance_bound_examples() {
        let report = variance_bound_check(&[100], 1.0, &inverse_square_weight, 5_000, 11, VARIANCE_BOUND_FACTOR).unwrap();
        let row = &report.rows[0];
        assert!((row.exact - 1.634_983_900_184_892).abs() < 1e-12);
        assert!(row.estimate.z_score(row.exact) < 4.0);
        let zero = variance_bound_check(&[10, 100], 1.0, &|_| 0.0, 100, 12, VARIANCE_BOUND_FACTOR).unwrap();
        assert!(zero.passed && zero.rows.iter().all(|r| r.estimate.value == 0.0));
        let sweep = variance_bound_check(&[10, 100, 1000], 1.0, &inverse_square_weight, 2_000, 13, VARIANCE_BOUND_FACTOR).unwrap();
        assert!(sweep.passed, "{sweep:?}");
    }

    #[test]
    fn invariance_passes_and_noise_free_control_fails() {
        let spec = quadratic(&[0.5, 0.3, 0.0], 1.0);
        let derived = build_derived(&spec).unwrap();
        let report = invariance_test(&spec, &derived, 1.0, 1e-2, 2_000, 14, McmcControls::default()).unwrap();
        assert!(report.passed, "{report:#?}");

        let mut silent = derived.clone();
        silent.sigma.fill(0.0);
        let control = invariance_test(&spec, &silent, 1.0, 1e-2, 2_000, 14, McmcControls::default()).unwrap();
        assert!(!control.passed);
    }
}
