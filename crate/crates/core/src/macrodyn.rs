//! Coarse-grained dynamics of `(z, w, e)`: the deterministic ODE and the
//! Itô SDE driven by the bath noise, with energy bookkeeping.
//!
//! With `v = w + C q`:
//!
//! ```text
//! ż = J_A (∇H_A + C*w)
//! dw = -D v dt + Σ dB
//! de = [⟨D v, v⟩ - tr(D)/β] dt - ⟨v, Σ dB⟩
//! ```
//!
//! and `E_GEN = H_A + ⟨Cq, w⟩ + ½|w|² + e` is conserved pathwise.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::{self, DerivedOperators, SystemSpec};
use crate::rng::{standard_normal_vector, stream};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MacroState {
    pub t: f64,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::vector"))]
    pub z: DVector<f64>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::vector"))]
    pub w: DVector<f64>,
    /// Energy exchanged with the hidden part of the bath; starts at 0 by default.
    pub e: f64,
}

impl MacroState {
    pub fn new(z: DVector<f64>, w: DVector<f64>) -> Self {
        Self { t: 0.0, z, w, e: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.e.is_finite() && self.z.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Scheme {
    Rk4,
    EulerMaruyama,
    /// Euler-Maruyama with the linear `w` drift taken implicitly.
    SemiImplicitW,
}

/// How the SDE update of `e` accounts for the Itô correction of `½|w|²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EnergyIncrement {
    /// `-tr(D)/β · dt`, the expected value as written in the SDE.
    Expected,
    /// `-½|Σ ΔB|²`, the realized quadratic variation of the step. Same
    /// expectation, but cancels the `½|Δw|²` term of the energy pathwise.
    Realized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: u64,
    /// Record every `record_stride` steps (the final state is always recorded).
    pub record_stride: usize,
    pub energy_increment: EnergyIncrement,
}

impl IntegratorConfig {
    pub fn ode(dt: f64) -> Self {
        Self { dt, scheme: Scheme::Rk4, seed: 0, record_stride: 1, energy_increment: EnergyIncrement::Realized }
    }

    pub fn sde(dt: f64, seed: u64) -> Self {
        Self { dt, scheme: Scheme::EulerMaruyama, seed, record_stride: 1, energy_increment: EnergyIncrement::Realized }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride.max(1);
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_energy_increment(mut self, inc: EnergyIncrement) -> Self {
        self.energy_increment = inc;
        self
    }

    /// Number of steps to reach `t_end`.
    pub fn steps_for(&self, t_end: f64) -> usize {
        libm::round(t_end / self.dt) as usize
    }
}

/// `w + C q`
pub fn relative_velocity(spec: &SystemSpec, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    w + spec.couple(z.as_slice())
}

/// Deterministic drift `(ż, ẇ, ė)`.
pub fn drift_det(
    spec: &SystemSpec,
    derived: &DerivedOperators,
    z: &DVector<f64>,
    w: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, f64) {
    let (gz, _) = model::grad_hamiltonian_zw(spec, z.as_slice(), w.as_slice());
    let dz = model::poisson_apply(spec, z.as_slice(), gz.as_slice());
    let v = relative_velocity(spec, z, w);
    let sym_v = &derived.d_sym * &v;
    let de = sym_v.dot(&v);
    let dw = -(spec.generator() * v);
    (dz, dw, de)
}

/// `E_GEN = H_zw(z, w) + e`
pub fn energy_gen(spec: &SystemSpec, state: &MacroState) -> f64 {
    model::hamiltonian_zw(spec, state.z.as_slice(), state.w.as_slice()) + state.e
}

/// `S_GEN = β e`
pub fn entropy_gen(spec: &SystemSpec, state: &MacroState) -> f64 {
    spec.beta() * state.e
}

/// One classical RK4 step of the deterministic system.
pub fn step_ode(state: &MacroState, spec: &SystemSpec, derived: &DerivedOperators, config: &IntegratorConfig) -> MacroState {
    let h = config.dt;
    let (k1z, k1w, k1e) = drift_det(spec, derived, &state.z, &state.w);
    let (k2z, k2w, k2e) = drift_det(spec, derived, &(&state.z + &k1z * (0.5 * h)), &(&state.w + &k1w * (0.5 * h)));
    let (k3z, k3w, k3e) = drift_det(spec, derived, &(&state.z + &k2z * (0.5 * h)), &(&state.w + &k2w * (0.5 * h)));
    let (k4z, k4w, k4e) = drift_det(spec, derived, &(&state.z + &k3z * h), &(&state.w + &k3w * h));
    let sixth = h / 6.0;
    MacroState {
        t: state.t + h,
        z: &state.z + (k1z + (k2z + k3z) * 2.0 + k4z) * sixth,
        w: &state.w + (k1w + (k2w + k3w) * 2.0 + k4w) * sixth,
        e: state.e + (k1e + 2.0 * (k2e + k3e) + k4e) * sixth,
    }
}

/// One SDE step drawing `ΔB ~ N(0, dt I)` from `rng`.
pub fn step_sde<R: Rng + ?Sized>(
    state: &MacroState,
    spec: &SystemSpec,
    derived: &DerivedOperators,
    config: &IntegratorConfig,
    rng: &mut R,
) -> MacroState {
    let db = standard_normal_vector(rng, spec.d()) * libm::sqrt(config.dt);
    step_sde_with_increment(state, spec, derived, config, &db)
}

/// One SDE step with a given Brownian increment `ΔB`; drifts are evaluated
/// at the pre-step state and the same `ΔB` drives `w` and `e`.
pub fn step_sde_with_increment(
    state: &MacroState,
    spec: &SystemSpec,
    derived: &DerivedOperators,
    config: &IntegratorConfig,
    db: &DVector<f64>,
) -> MacroState {
    let h = config.dt;
    let (dz, dw, de) = drift_det(spec, derived, &state.z, &state.w);
    let v = relative_velocity(spec, &state.z, &state.w);
    let noise = &derived.sigma * db;
    let correction = match config.energy_increment {
        EnergyIncrement::Expected => spec.generator().trace() / spec.beta() * h,
        EnergyIncrement::Realized => 0.5 * noise.norm_squared(),
    };
    let w = match config.scheme {
        Scheme::SemiImplicitW => {
            // (I + h D) w' = w - h D C q + Σ ΔB
            let d = spec.d();
            let lhs = DMatrix::identity(d, d) + spec.generator() * h;
            let cq = spec.couple(state.z.as_slice());
            let rhs = &state.w - spec.generator() * cq * h + &noise;
            lhs.lu().solve(&rhs).expect("I + hD is invertible when D has positive symmetric part")
        }
        _ => &state.w + dw * h + &noise,
    };
    MacroState { t: state.t + h, z: &state.z + dz * h, w, e: state.e + de * h - correction - v.dot(&noise) }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MacroRecord {
    pub state: MacroState,
    pub energy: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MacroTrajectory {
    pub records: Vec<MacroRecord>,
}

impl MacroTrajectory {
    fn push(&mut self, spec: &SystemSpec, state: &MacroState) {
        self.records.push(MacroRecord { state: state.clone(), energy: energy_gen(spec, state), entropy: entropy_gen(spec, state) });
    }

    pub fn last(&self) -> Option<&MacroRecord> {
        self.records.last()
    }
}

fn run_with<F>(spec: &SystemSpec, init: &MacroState, steps: usize, stride: usize, mut step: F) -> MacroTrajectory
where
    F: FnMut(&MacroState) -> MacroState,
{
    let mut traj = MacroTrajectory::default();
    let mut state = init.clone();
    traj.push(spec, &state);
    for k in 1..=steps {
        state = step(&state);
        if k % stride == 0 || k == steps {
            traj.push(spec, &state);
        }
    }
    traj
}

pub fn run_ode(
    spec: &SystemSpec,
    derived: &DerivedOperators,
    init: &MacroState,
    t_end: f64,
    config: &IntegratorConfig,
) -> MacroTrajectory {
    let steps = config.steps_for(t_end);
    run_with(spec, init, steps, config.record_stride, |s| step_ode(s, spec, derived, config))
}

/// SDE path using random stream `(config.seed, path_index)`.
pub fn run_sde(
    spec: &SystemSpec,
    derived: &DerivedOperators,
    init: &MacroState,
    t_end: f64,
    config: &IntegratorConfig,
    path_index: u64,
) -> MacroTrajectory {
    let mut rng = stream(config.seed, path_index);
    let steps = config.steps_for(t_end);
    run_with(spec, init, steps, config.record_stride, |s| step_sde(s, spec, derived, config, &mut rng))
}

/// Final states of independent SDE paths, path `i` starting at `inits[i]`
/// with stream `(config.seed, i)`.
pub fn run_sde_ensemble(
    spec: &SystemSpec,
    derived: &DerivedOperators,
    inits: &[MacroState],
    t_end: f64,
    config: &IntegratorConfig,
) -> Vec<MacroState> {
    let steps = config.steps_for(t_end);
    crate::par::map_indices(inits.len(), |i| {
        let mut rng = stream(config.seed, i as u64);
        let mut state = inits[i].clone();
        for _ in 0..steps {
            state = step_sde(&state, spec, derived, config, &mut rng);
        }
        state
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_derived, Potential, PoissonOperator, RunningExample};
    use crate::rng::standard_normal;
    use crate::stats::{mean, mean_with_error};
    use approx::assert_abs_diff_eq;

    fn default_system() -> (SystemSpec, DerivedOperators) {
        let spec = SystemSpec::default_running_example();
        let derived = build_derived(&spec).unwrap();
        (spec, derived)
    }

    fn vec(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn drift_example() {
        let (spec, derived) = default_system();
        let (dz, dw, de) = drift_det(&spec, &derived, &vec(&[1.0, 0.0]), &DVector::zeros(3));
        assert_eq!(dz.as_slice(), &[0.0, -1.0]);
        let expected = -(spec.generator() * vec(&[1.0, 0.5, 0.0]));
        assert_eq!(dw, expected);
        assert_abs_diff_eq!(de, 1.125, epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_family_has_zero_drift() {
        let (spec, derived) = default_system();
        // w = -Cq and p = 0 with ∇V(q) + Cᵀw = q - |C|² q
        let spec = spec.with_potential(Potential::Quadratic { stiffness: 1.25 }).unwrap();
        let q = 0.8;
        let w = -(spec.coupling() * vec(&[q]));
        let (dz, dw, de) = drift_det(&spec, &derived, &vec(&[q, 0.0]), &w);
        assert!(dz.norm() < 1e-15 && dw.norm() < 1e-15 && de.abs() < 1e-15);
    }

    #[test]
    fn dissipation_rate_is_nonnegative() {
        let (spec, derived) = default_system();
        let mut rng = stream(4, 0);
        for _ in 0..1000 {
            let z = standard_normal_vector(&mut rng, 2) * 3.0;
            let w = standard_normal_vector(&mut rng, 3) * 3.0;
            assert!(drift_det(&spec, &derived, &z, &w).2 >= 0.0);
        }
    }

    #[test]
    fn uncoupled_oscillator_rotates() {
        let (spec, _) = default_system();
        let spec = spec.with_coupling(DMatrix::zeros(3, 1)).unwrap();
        let derived = build_derived(&spec).unwrap();
        let init = MacroState::new(vec(&[1.0, 0.0]), DVector::zeros(3));
        let traj = run_ode(&spec, &derived, &init, 10.0, &IntegratorConfig::ode(1e-3).with_stride(100));
        for r in &traj.records {
            assert!((r.state.z.norm_squared() - 1.0).abs() < 1e-10);
        }
        let end = &traj.last().unwrap().state;
        assert_abs_diff_eq!(end.z[0], libm::cos(10.0), epsilon = 1e-10);
    }

    #[test]
    fn ode_conserves_energy_and_entropy_grows() {
        let (spec, derived) = default_system();
        let init = MacroState::new(vec(&[1.0, 0.0]), vec(&[1.0, 0.0, 0.0]));
        let traj = run_ode(&spec, &derived, &init, 10.0, &IntegratorConfig::ode(1e-3));
        let e0 = traj.records[0].energy;
        let mut drift: f64 = 0.0;
        for pair in traj.records.windows(2) {
            drift = drift.max((pair[1].energy - e0).abs());
            assert!(pair[1].state.e - pair[0].state.e >= -1e-12);
        }
        assert!(drift <= 1e-8, "energy drift {drift}");
    }

    #[test]
    fn zero_noise_step_is_explicit_euler() {
        let (spec, mut derived) = default_system();
        derived.sigma = DMatrix::zeros(3, 3);
        let s = MacroState::new(vec(&[0.4, -0.3]), vec(&[0.1, 0.2, -0.5]));
        let cfg = IntegratorConfig::sde(1e-2, 0);
        let next = step_sde(&s, &spec, &derived, &cfg, &mut stream(0, 0));
        let (dz, dw, de) = drift_det(&spec, &derived, &s.z, &s.w);
        assert!((next.z - (&s.z + dz * 1e-2)).norm() < 1e-15);
        assert!((next.w - (&s.w + dw * 1e-2)).norm() < 1e-15);
        assert_abs_diff_eq!(next.e, s.e + de * 1e-2, epsilon = 1e-15);
    }

    #[test]
    fn semi_implicit_step_solves_linear_system() {
        let (spec, derived) = default_system();
        let s = MacroState::new(vec(&[0.4, -0.3]), vec(&[0.1, 0.2, -0.5]));
        let cfg = IntegratorConfig::sde(0.5, 0).with_scheme(Scheme::SemiImplicitW);
        let db = vec(&[0.3, -0.1, 0.2]);
        let next = step_sde_with_increment(&s, &spec, &derived, &cfg, &db);
        let cq = spec.couple(s.z.as_slice());
        let residual = &next.w + spec.generator() * (&next.w + &cq) * 0.5 - &s.w - &derived.sigma * &db;
        assert!(residual.norm() < 1e-14);
    }

    #[test]
    fn frozen_system_gives_stationary_ou() {
        // C = 0 and J_A = 0: z stays put and w is an OU process
        let zero_j: model::PoissonFn = alloc::sync::Arc::new(|_: &[f64]| DMatrix::zeros(2, 2));
        let spec = SystemSpec::new(
            1,
            Potential::default(),
            PoissonOperator::Custom(zero_j),
            RunningExample::default().generator(),
            DMatrix::zeros(3, 1),
            2.0,
        )
        .unwrap();
        let derived = build_derived(&spec).unwrap();
        let inits: Vec<MacroState> = (0..4000).map(|_| MacroState::new(vec(&[0.5, 0.1]), DVector::zeros(3))).collect();
        let finals = run_sde_ensemble(&spec, &derived, &inits, 8.0, &IntegratorConfig::sde(1e-2, 9));
        for k in 0..3 {
            let xs: Vec<f64> = finals.iter().map(|s| s.w[k] * s.w[k]).collect();
            let est = mean_with_error(&xs);
            // 4 SE plus the O(dt) bias of Euler-Maruyama
            assert!((est.value - 0.5).abs() <= 4.0 * est.std_err + 0.02, "{k}: {est:?}");
        }
        assert!(finals.iter().all(|s| s.z == vec(&[0.5, 0.1])));
    }

    #[test]
    fn stationary_energy_flux_balances() {
        let spec = SystemSpec::default_running_example()
            .with_coupling(DMatrix::from_column_slice(3, 1, &[0.5, 0.3, 0.0]))
            .unwrap();
        let derived = build_derived(&spec).unwrap();
        let mut rng = stream(12, 0);
        // exact ν_β for V = ½q², β = 1: q ~ N(0, 1/(1 - |C|²)), p ~ N(0, 1)
        let var_q = 1.0 / (1.0 - 0.34);
        let inits: Vec<MacroState> = (0..4000)
            .map(|_| {
                let q = standard_normal(&mut rng) * libm::sqrt(var_q);
                let p = standard_normal(&mut rng);
                let w = -(spec.coupling() * vec(&[q])) + standard_normal_vector(&mut rng, 3);
                MacroState::new(vec(&[q, p]), w)
            })
            .collect();
        let finals = run_sde_ensemble(&spec, &derived, &inits, 2.0, &IntegratorConfig::sde(2e-3, 3));
        let de: Vec<f64> = finals.iter().map(|s| s.e).collect();
        let est = mean_with_error(&de);
        assert!(est.value.abs() <= 4.0 * est.std_err + 0.05, "{est:?}");
    }

    #[test]
    fn sde_energy_error_shrinks_with_dt() {
        let (spec, derived) = default_system();
        let init = MacroState::new(vec(&[1.0, 0.0]), vec(&[1.0, 0.0, 0.0]));
        let mean_dev = |dt: f64, inc: EnergyIncrement| {
            let cfg = IntegratorConfig::sde(dt, 77).with_energy_increment(inc).with_stride(usize::MAX);
            let devs: Vec<f64> = (0..200)
                .map(|i| {
                    let traj = run_sde(&spec, &derived, &init, 1.0, &cfg, i);
                    (traj.last().unwrap().energy - traj.records[0].energy).abs()
                })
                .collect();
            mean(&devs)
        };
        for inc in [EnergyIncrement::Realized, EnergyIncrement::Expected] {
            let devs: Vec<f64> = [4e-3, 2e-3, 1e-3].iter().map(|&dt| mean_dev(dt, inc)).collect();
            let slope = libm::log(devs[0] / devs[2]) / libm::log(4.0);
            std::println!("{inc:?}: deviations {devs:?}, slope {slope:.3}");
            if inc == EnergyIncrement::Realized {
                assert!(slope >= 0.8, "slope {slope}");
            }
        }
    }
}
