//! Simulation of the full microscopic system: the Hamiltonian part `z`
//! coupled to a transport bath on the line.
//!
//! The bath is stored as `ζ = η + C q` on a uniform grid with spacing `h`,
//! and time steps are locked to `dt = h`. Transport is then an exact
//! one-cell shift, and the coupling enters only through deposits of
//! `Σ_j (C Δq)_j f_j`. The observed bath coordinates are
//! `w = P ζ - C q`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dilation::{DilationBasis, GridField, ProjectionTable};
use crate::error::{Error, Result};
use crate::model::{self, DerivedOperators, SystemSpec};
use crate::ou::OuPath;
use crate::rng::{standard_normal, stream};

/// Time-stepping scheme for the coupled grid system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum MicroScheme {
    /// Heun for `z` with `w` held at its start-of-step value; the whole
    /// source `C Δq` is deposited after the shift. First order.
    FrozenHeun,
    /// Trapezoidal in both parts: half the source is deposited before the
    /// shift and half after, and the Heun corrector uses the end-of-step
    /// `w`. That `w` is affine in the new `q` given one projection of the
    /// shifted field, so the implicit step costs no extra grid passes.
    Trapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MicroConfig {
    /// Grid spacing, also the time step.
    pub h: f64,
    pub scheme: MicroScheme,
    /// Horizon; the grid is sized so that transport never leaves it before `t_end`.
    pub t_end: f64,
    pub thermal: bool,
    pub seed: u64,
    pub record_stride: usize,
}

impl MicroConfig {
    pub fn new(h: f64, t_end: f64) -> Self {
        Self { h, scheme: MicroScheme::Trapezoidal, t_end, thermal: false, seed: 0, record_stride: 1 }
    }

    pub fn with_scheme(mut self, scheme: MicroScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn thermal(mut self, seed: u64) -> Self {
        self.thermal = true;
        self.seed = seed;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride.max(1);
        self
    }

    pub fn steps(&self) -> usize {
        libm::round(self.t_end / self.h) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    t: f64,
    steps_taken: usize,
    z: DVector<f64>,
    /// `η + C q` on the grid.
    zeta: GridField,
    /// `P ζ - C q`, kept current only while the system is coupled.
    w: DVector<f64>,
}

impl MicroState {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn zeta(&self) -> &GridField {
        &self.zeta
    }
}

/// A system together with its discretized bath: projection table and grid
/// extent, computed once and shared by all runs.
#[derive(Debug, Clone)]
pub struct MicroModel {
    spec: SystemSpec,
    table: ProjectionTable,
    config: MicroConfig,
    first_cell: i64,
    cells: usize,
    coupled: bool,
    /// `P` applied to the trapezoidal deposit of unit coefficients.
    deposit_gram: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MicroRecord {
    pub t: f64,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::vector"))]
    pub z: DVector<f64>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::vector"))]
    pub w: DVector<f64>,
    pub h_zw: f64,
    /// `H_A + ½‖ζ‖² - ½‖Cq‖²`, the grid version of the total energy.
    pub total_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MicroTrajectory {
    pub records: Vec<MicroRecord>,
}

impl MicroModel {
    pub fn new(spec: &SystemSpec, basis: &DilationBasis, config: MicroConfig) -> Result<Self> {
        if basis.d() != spec.d() {
            return Err(Error::Shape(format!("basis has d = {}, system has d = {}", basis.d(), spec.d())));
        }
        if !(config.h > 0.0 && config.h.is_finite()) || !(config.t_end >= 0.0) {
            return Err(Error::InvalidSpec(format!("need h > 0 and t_end >= 0, got {} and {}", config.h, config.t_end)));
        }
        let gen_diff = crate::linalg::max_abs(&(basis.generator() - spec.generator()));
        if gen_diff > 1e-12 {
            return Err(Error::InvalidSpec("basis generator differs from the system generator".into()));
        }
        let table = ProjectionTable::new(basis, config.h);
        let steps = config.steps();
        // Physical cells that will ever be read: those entering the window
        // [-n_neg h, 0) within `steps` shifts.
        let first_cell = table.first_cell() - steps as i64;
        let cells = table.n_neg() + steps;
        let coupled = spec.coupling().iter().any(|c| *c != 0.0);
        let deposit_gram = match config.scheme {
            MicroScheme::FrozenHeun => table.grid_gram().clone(),
            MicroScheme::Trapezoidal => (table.grid_gram() + table.grid_gram_shifted()) * 0.5,
        };
        Ok(Self { spec: spec.clone(), table, config, first_cell, cells, coupled, deposit_gram })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn table(&self) -> &ProjectionTable {
        &self.table
    }

    pub fn config(&self) -> &MicroConfig {
        &self.config
    }

    fn empty_field(&self) -> GridField {
        GridField::zeros(self.config.h, self.spec.d(), self.first_cell, self.cells)
    }

    fn check_init(&self, z0: &DVector<f64>, w0: &DVector<f64>) -> Result<()> {
        if z0.len() != self.spec.dim_z() || w0.len() != self.spec.d() {
            return Err(Error::Shape(format!(
                "initial state has |z| = {}, |w| = {}; expected {} and {}",
                z0.len(),
                w0.len(),
                self.spec.dim_z(),
                self.spec.d()
            )));
        }
        Ok(())
    }

    /// `ζ0 = Σ_j (w0 + C q0)_j f_j`.
    pub fn init_deterministic(&self, z0: &DVector<f64>, w0: &DVector<f64>) -> Result<MicroState> {
        self.check_init(z0, w0)?;
        let mut zeta = self.empty_field();
        let coeffs = w0 + self.spec.couple(z0.as_slice());
        self.table.deposit(&mut zeta, coeffs.as_slice())?;
        let mut state = MicroState { t: 0.0, steps_taken: 0, z: z0.clone(), zeta, w: DVector::zeros(self.spec.d()) };
        state.w = self.observe(&state)?;
        Ok(state)
    }

    /// Deterministic part plus grid white noise of variance `1/(β h)` per
    /// cell with its component along the basis removed, so that
    /// `P ζ0 - C q0 = w0` while the hidden bath is thermal.
    pub fn init_thermal<R: Rng + ?Sized>(&self, z0: &DVector<f64>, w0: &DVector<f64>, rng: &mut R) -> Result<MicroState> {
        let mut state = self.init_deterministic(z0, w0)?;
        let mut noise = self.empty_field();
        let scale = 1.0 / libm::sqrt(self.spec.beta() * self.config.h);
        for x in noise.values_mut() {
            *x = standard_normal(rng) * scale;
        }
        let raw = self.table.project(&noise)?;
        let gram = self.table.grid_gram().clone();
        let coeffs = gram.lu().solve(&raw).ok_or_else(|| Error::Shape("grid Gram matrix is singular".into()))?;
        self.table.deposit(&mut noise, (-coeffs).as_slice())?;
        for (z, n) in state.zeta.values_mut().iter_mut().zip(noise.values()) {
            *z += n;
        }
        state.w = self.observe(&state)?;
        Ok(state)
    }

    /// Initial state per the configuration: thermal states use stream `(seed, index)`.
    pub fn init(&self, z0: &DVector<f64>, w0: &DVector<f64>, index: u64) -> Result<MicroState> {
        if self.config.thermal {
            self.init_thermal(z0, w0, &mut stream(self.config.seed, index))
        } else {
            self.init_deterministic(z0, w0)
        }
    }

    /// `w = P ζ - C q`.
    pub fn observe(&self, state: &MicroState) -> Result<DVector<f64>> {
        Ok(self.table.project(&state.zeta)? - self.spec.couple(state.z.as_slice()))
    }

    fn z_velocity(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let (gz, _) = model::grad_hamiltonian_zw(&self.spec, z.as_slice(), w.as_slice());
        model::poisson_apply(&self.spec, z.as_slice(), gz.as_slice())
    }

    fn coverage_error(&self, state: &MicroState) -> Error {
        Error::GridCoverage {
            left: state.zeta.left(),
            right: state.zeta.right(),
            required_left: self.table.first_cell() as f64 * self.config.h,
            required_right: 0.0,
        }
    }

    /// Advance by `dt = h`: shift `ζ` by one cell, deposit the source
    /// `Σ_j (C Δq)_j f_j`, and move `z` by a Heun step (see [`MicroScheme`]).
    pub fn step(&self, state: &mut MicroState) -> Result<()> {
        if !state.zeta.covers(self.table.first_cell() - 1, 0) {
            return Err(self.coverage_error(state));
        }
        let h = self.config.h;
        let k1 = self.z_velocity(&state.z, &state.w);
        let z_frozen = {
            let predictor = &state.z + &k1 * h;
            let k2 = self.z_velocity(&predictor, &state.w);
            &state.z + (&k1 + k2) * (0.5 * h)
        };
        state.zeta.shift_right_one_cell();
        if !self.coupled {
            state.z = z_frozen;
        } else {
            let cq = self.spec.couple(state.z.as_slice());
            // P of the shifted field before any deposit
            let shifted = self.table.project(&state.zeta)?;
            let w_after = |z_new: &DVector<f64>| {
                let cq_new = self.spec.couple(z_new.as_slice());
                &shifted + &self.deposit_gram * (&cq_new - &cq) - cq_new
            };
            let z_next = match self.config.scheme {
                MicroScheme::FrozenHeun => z_frozen,
                MicroScheme::Trapezoidal => {
                    let mut z_next = z_frozen;
                    for _ in 0..2 {
                        let k2 = self.z_velocity(&z_next, &w_after(&z_next));
                        z_next = &state.z + (&k1 + k2) * (0.5 * h);
                    }
                    z_next
                }
            };
            let dq = self.spec.couple(z_next.as_slice()) - &cq;
            match self.config.scheme {
                MicroScheme::FrozenHeun => self.table.deposit(&mut state.zeta, dq.as_slice())?,
                MicroScheme::Trapezoidal => {
                    let half = dq * 0.5;
                    self.table.deposit_shifted(&mut state.zeta, half.as_slice(), 1)?;
                    self.table.deposit(&mut state.zeta, half.as_slice())?;
                }
            }
            state.w = w_after(&z_next);
            state.z = z_next;
        }
        state.steps_taken += 1;
        state.t = state.steps_taken as f64 * h;
        Ok(())
    }

    pub fn record(&self, state: &MicroState) -> Result<MicroRecord> {
        let w = self.observe(state)?;
        let h_zw = model::hamiltonian_zw(&self.spec, state.z.as_slice(), w.as_slice());
        let cq = self.spec.couple(state.z.as_slice());
        let coupling_norm = (self.table.grid_gram() * &cq).dot(&cq);
        let total_energy =
            model::hamiltonian_a(&self.spec, state.z.as_slice()) + 0.5 * state.zeta.norm_squared() - 0.5 * coupling_norm;
        Ok(MicroRecord { t: state.t, z: state.z.clone(), w, h_zw, total_energy })
    }

    /// Iterate [`MicroModel::step`] up to the configured horizon.
    pub fn run(&self, mut state: MicroState) -> Result<MicroTrajectory> {
        let steps = self.config.steps();
        let stride = self.config.record_stride.max(1);
        let mut traj = MicroTrajectory::default();
        traj.records.push(self.record(&state)?);
        for k in 1..=steps {
            self.step(&mut state)?;
            if k % stride == 0 || k == steps {
                traj.records.push(self.record(&state)?);
            }
        }
        Ok(traj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum KernelScheme {
    /// RK4, with the bath path interpolated linearly at half steps.
    Rk4,
    /// Explicit Euler; reproduces Euler-Maruyama for `(z, w)` when the bath
    /// path was built by Euler-Maruyama from the same increments.
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct KernelRecord {
    pub t: f64,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::vector"))]
    pub z: DVector<f64>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::vector"))]
    pub w: DVector<f64>,
}

/// Memory-kernel formulation: with `Y` the bath noise path,
/// `w = Y + u - C q` where `u̇ = -D u + C q̇`, `u(0) = w0 + C q0 - Y(0)`.
/// Eliminating `u` gives the generalized Langevin equation for `z` with
/// kernel `C* e^{-tD} C`. Time steps follow the grid of `y_path`.
pub fn run_kernel(
    spec: &SystemSpec,
    derived: &DerivedOperators,
    z0: &DVector<f64>,
    w0: &DVector<f64>,
    y_path: &OuPath,
    scheme: KernelScheme,
) -> Result<Vec<KernelRecord>> {
    let _ = derived;
    if y_path.times.len() != y_path.values.len() || y_path.times.is_empty() {
        return Err(Error::Shape("bath path must have matching, non-empty times and values".into()));
    }
    if z0.len() != spec.dim_z() || w0.len() != spec.d() || y_path.values.iter().any(|y| y.len() != spec.d()) {
        return Err(Error::Shape("initial state or bath path has the wrong dimension".into()));
    }
    let n = spec.n();
    let c = spec.coupling();
    let gen = spec.generator();
    // (z, u) ↦ (ż, u̇) at bath value y
    let rhs = |z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let w = y + u - spec.couple(z.as_slice());
        let (gz, _) = model::grad_hamiltonian_zw(spec, z.as_slice(), w.as_slice());
        let dz = model::poisson_apply(spec, z.as_slice(), gz.as_slice());
        let qdot = DVector::from_column_slice(&dz.as_slice()[..n]);
        let du = -(gen * u) + c * qdot;
        (dz, du)
    };
    let mut z = z0.clone();
    let mut u = w0 + spec.couple(z0.as_slice()) - &y_path.values[0];
    let mut out = Vec::with_capacity(y_path.times.len());
    out.push(KernelRecord { t: y_path.times[0], z: z.clone(), w: w0.clone() });
    for k in 1..y_path.times.len() {
        let h = y_path.times[k] - y_path.times[k - 1];
        let (y0, y1) = (&y_path.values[k - 1], &y_path.values[k]);
        match scheme {
            KernelScheme::Euler => {
                let (dz, du) = rhs(&z, &u, y0);
                z += dz * h;
                u += du * h;
            }
            KernelScheme::Rk4 => {
                let ym = (y0 + y1) * 0.5;
                let (k1z, k1u) = rhs(&z, &u, y0);
                let (k2z, k2u) = rhs(&(&z + &k1z * (0.5 * h)), &(&u + &k1u * (0.5 * h)), &ym);
                let (k3z, k3u) = rhs(&(&z + &k2z * (0.5 * h)), &(&u + &k2u * (0.5 * h)), &ym);
                let (k4z, k4u) = rhs(&(&z + &k3z * h), &(&u + &k3u * h), y1);
                z += (k1z + (k2z + k3z) * 2.0 + k4z) * (h / 6.0);
                u += (k1u + (k2u + k3u) * 2.0 + k4u) * (h / 6.0);
            }
        }
        let w = y1 + &u - spec.couple(z.as_slice());
        out.push(KernelRecord { t: y_path.times[k], z: z.clone(), w });
    }
    Ok(out)
}

/// Zero bath path on `steps + 1` points spaced by `dt`.
pub fn zero_bath_path(d: usize, dt: f64, steps: usize) -> OuPath {
    OuPath {
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        values: (0..=steps).map(|_| DVector::zeros(d)).collect(),
        seed: 0,
    }
}

/// Largest Euclidean distance `|(z, w)_micro - (z, w)_macro|` over records
/// at matching times.
pub fn max_deviation(micro: &MicroTrajectory, macro_traj: &crate::macrodyn::MacroTrajectory) -> f64 {
    micro
        .records
        .iter()
        .zip(&macro_traj.records)
        .map(|(a, b)| libm::sqrt((&a.z - &b.state.z).norm_squared() + (&a.w - &b.state.w).norm_squared()))
        .fold(0.0, f64::max)
}
