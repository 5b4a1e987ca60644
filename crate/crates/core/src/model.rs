//! System definitions: the finite-dimensional Hamiltonian system, the bath
//! generator `D`, the coupling matrix, and the operators derived from them.
//!
//! States of the Hamiltonian system are stored as `z = (q, p)` with `q` in
//! the first `n` slots. The coupling acts on positions only and is stored in
//! the coordinates of an orthonormal basis of the observable bath space, so
//! `(C z)` is `coupling * q` and `C* w` is `(couplingᵀ w, 0)`.

use alloc::format;
use alloc::sync::Arc;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Spectral gaps at or below this value are rejected.
pub const SPECTRAL_GAP_FLOOR: f64 = 1e-12;

/// Parameters of the three-dimensional bath with one real and one complex
/// pair of generator eigenvalues, `theta1` and `theta2 ± i varsigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunningExample {
    pub theta1: f64,
    pub theta2: f64,
    pub varsigma: f64,
}

impl Default for RunningExample {
    fn default() -> Self {
        Self { theta1: 1.0, theta2: 0.5, varsigma: 2.0 }
    }
}

impl RunningExample {
    pub fn generator(&self) -> DMatrix<f64> {
        let Self { theta1, theta2, varsigma } = *self;
        DMatrix::from_row_slice(3, 3, &[theta1, 0.0, 0.0, 0.0, theta2, -varsigma, 0.0, varsigma, theta2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta1 > 0.0 && self.theta2 > 0.0 && self.varsigma > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("running-example parameters must be positive, got {self:?}")))
        }
    }
}

/// Built-in potentials. Both are separable over the coordinates of `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Potential {
    /// `V(q) = ½ k |q|²`
    Quadratic { stiffness: f64 },
    /// `V(q) = Σ ½ a q_i² + ¼ b q_i⁴`. The gradient is only locally Lipschitz.
    Quartic { quadratic: f64, quartic: f64 },
}

impl Default for Potential {
    fn default() -> Self {
        Potential::Quadratic { stiffness: 1.0 }
    }
}

impl Potential {
    pub fn value(&self, q: &[f64]) -> f64 {
        match *self {
            Potential::Quadratic { stiffness } => 0.5 * stiffness * q.iter().map(|x| x * x).sum::<f64>(),
            Potential::Quartic { quadratic, quartic } => q
                .iter()
                .map(|x| {
                    let x2 = x * x;
                    0.5 * quadratic * x2 + 0.25 * quartic * x2 * x2
                })
                .sum(),
        }
    }

    pub fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        match *self {
            Potential::Quadratic { stiffness } => {
                for (o, x) in out.iter_mut().zip(q) {
                    *o = stiffness * x;
                }
            }
            Potential::Quartic { quadratic, quartic } => {
                for (o, x) in out.iter_mut().zip(q) {
                    *o = quadratic * x + quartic * x * x * x;
                }
            }
        }
    }

    pub fn gradient(&self, q: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(q.len());
        self.gradient_into(q, g.as_mut_slice());
        g
    }

    /// Curvature of the quadratic part, used for the confinement test.
    fn quadratic_stiffness(&self) -> f64 {
        match *self {
            Potential::Quadratic { stiffness } => stiffness,
            Potential::Quartic { quadratic, .. } => quadratic,
        }
    }

    fn has_confining_quartic(&self) -> bool {
        matches!(*self, Potential::Quartic { quartic, .. } if quartic > 0.0)
    }
}

pub type PoissonFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Poisson operator of the Hamiltonian system.
#[derive(Clone)]
pub enum PoissonOperator {
    /// `[[0, I], [-I, 0]]`
    Canonical,
    /// User-supplied `z ↦ J(z)`; must be skew at every evaluated state.
    Custom(PoissonFn),
}

impl fmt::Debug for PoissonOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoissonOperator::Canonical => f.write_str("Canonical"),
            PoissonOperator::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Skewness tolerance for user-supplied Poisson matrices.
pub const POISSON_SKEW_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SystemSpec {
    n: usize,
    potential: Potential,
    poisson: PoissonOperator,
    generator: DMatrix<f64>,
    coupling: DMatrix<f64>,
    beta: f64,
}

impl SystemSpec {
    /// `generator` is the `d × d` bath generator `D`; `coupling` is `d × n`
    /// with row `j` the coupling vector of basis function `j`.
    pub fn new(
        n: usize,
        potential: Potential,
        poisson: PoissonOperator,
        generator: DMatrix<f64>,
        coupling: DMatrix<f64>,
        beta: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSpec("n must be positive".into()));
        }
        let d = generator.nrows();
        if d == 0 || generator.ncols() != d {
            return Err(Error::InvalidSpec(format!(
                "generator must be square and non-empty, got {}x{}",
                generator.nrows(),
                generator.ncols()
            )));
        }
        if coupling.nrows() != d || coupling.ncols() != n {
            return Err(Error::InvalidSpec(format!(
                "coupling must be {d}x{n}, got {}x{}",
                coupling.nrows(),
                coupling.ncols()
            )));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidSpec(format!("beta must be positive and finite, got {beta}")));
        }
        if generator.iter().chain(coupling.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidSpec("generator and coupling entries must be finite".into()));
        }
        Ok(Self { n, potential, poisson, generator, coupling, beta })
    }

    /// Canonical system with the running-example bath (`d = 3`).
    pub fn running_example(
        params: RunningExample,
        potential: Potential,
        coupling: DMatrix<f64>,
        beta: f64,
    ) -> Result<Self> {
        params.validate()?;
        let n = coupling.ncols();
        Self::new(n, potential, PoissonOperator::Canonical, params.generator(), coupling, beta)
    }

    /// `n = 1`, `V = ½ q²`, coupling `(1, 0.5, 0)ᵀ`, `β = 1`, default bath parameters.
    pub fn default_running_example() -> Self {
        Self::running_example(
            RunningExample::default(),
            Potential::default(),
            DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.0]),
            1.0,
        )
        .expect("default running example is well-formed")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.generator.nrows()
    }

    /// Dimension of `z = (q, p)`.
    pub fn dim_z(&self) -> usize {
        2 * self.n
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn poisson(&self) -> &PoissonOperator {
        &self.poisson
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.n, self.potential, self.poisson.clone(), self.generator.clone(), self.coupling.clone(), beta)
    }

    pub fn with_coupling(&self, coupling: DMatrix<f64>) -> Result<Self> {
        Self::new(self.n, self.potential, self.poisson.clone(), self.generator.clone(), coupling, self.beta)
    }

    pub fn with_potential(&self, potential: Potential) -> Result<Self> {
        Self::new(self.n, potential, self.poisson.clone(), self.generator.clone(), self.coupling.clone(), self.beta)
    }

    pub fn with_poisson(&self, poisson: PoissonOperator) -> Result<Self> {
        Self::new(self.n, self.potential, poisson, self.generator.clone(), self.coupling.clone(), self.beta)
    }

    /// `C q` in bath coordinates.
    pub fn couple(&self, z: &[f64]) -> DVector<f64> {
        &self.coupling * DVector::from_column_slice(&z[..self.n])
    }

    /// Check the user Poisson operator for skewness at `z`.
    pub fn check_poisson_skew(&self, z: &[f64]) -> Result<()> {
        let j = poisson_matrix(self, z);
        let err = linalg::max_abs(&(&j + j.transpose()));
        if err > POISSON_SKEW_TOL {
            return Err(Error::InvalidSpec(format!("Poisson operator is not skew at z (max |J + Jᵀ| = {err:e})")));
        }
        Ok(())
    }
}

/// Everything computed once from a [`SystemSpec`].
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DerivedOperators {
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub d_sym: DMatrix<f64>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub d_skw: DMatrix<f64>,
    /// Symmetric PSD root of `(D + Dᵀ) / β`.
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub sigma: DMatrix<f64>,
    /// Smallest eigenvalue of `d_sym`.
    pub alpha: f64,
    /// Smallest eigenvalue of the quadratic part of the effective potential
    /// `V(q) - ½|C q|²`; `+∞` when a positive quartic term confines anyway.
    pub confinement_margin: f64,
}

impl DerivedOperators {
    /// Whether `exp(-β (H_A - ½|Cq|²))` is integrable.
    pub fn is_confining(&self) -> bool {
        self.confinement_margin > 0.0
    }
}

pub fn build_derived(spec: &SystemSpec) -> Result<DerivedOperators> {
    let d = spec.generator();
    let d_sym = linalg::symmetric_part(d);
    let d_skw = d - &d_sym;
    let alpha = linalg::min_symmetric_eigenvalue(&d_sym);
    if alpha <= SPECTRAL_GAP_FLOOR {
        return Err(Error::SpectralGap { min_eigenvalue: alpha });
    }
    let sigma = linalg::symmetric_sqrt(&((d + d.transpose()) / spec.beta()));

    let confinement_margin = if spec.potential().has_confining_quartic() {
        f64::INFINITY
    } else {
        let c = spec.coupling();
        let k = spec.potential().quadratic_stiffness();
        let quad = DMatrix::identity(spec.n(), spec.n()) * k - c.transpose() * c;
        linalg::min_symmetric_eigenvalue(&quad)
    };
    Ok(DerivedOperators { d_sym, d_skw, sigma, alpha, confinement_margin })
}

/// `H_A(q, p) = ½|p|² + V(q)`
pub fn hamiltonian_a(spec: &SystemSpec, z: &[f64]) -> f64 {
    let (q, p) = z.split_at(spec.n());
    0.5 * p.iter().map(|x| x * x).sum::<f64>() + spec.potential().value(q)
}

/// `(∇V(q), p)`
pub fn grad_hamiltonian_a(spec: &SystemSpec, z: &[f64]) -> DVector<f64> {
    let n = spec.n();
    let mut g = DVector::zeros(2 * n);
    spec.potential().gradient_into(&z[..n], &mut g.as_mut_slice()[..n]);
    g.as_mut_slice()[n..].copy_from_slice(&z[n..]);
    g
}

/// Visible energy `H_A(z) + ⟨C z, w⟩ + ½|w|²`.
pub fn hamiltonian_zw(spec: &SystemSpec, z: &[f64], w: &[f64]) -> f64 {
    let cq = spec.couple(z);
    let coupling: f64 = cq.iter().zip(w).map(|(a, b)| a * b).sum();
    hamiltonian_a(spec, z) + coupling + 0.5 * w.iter().map(|x| x * x).sum::<f64>()
}

/// Gradients of [`hamiltonian_zw`] with respect to `z` and `w`.
pub fn grad_hamiltonian_zw(spec: &SystemSpec, z: &[f64], w: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let n = spec.n();
    let w_vec = DVector::from_column_slice(w);
    let mut gz = grad_hamiltonian_a(spec, z);
    let force = spec.coupling().transpose() * &w_vec;
    for i in 0..n {
        gz[i] += force[i];
    }
    let gw = w_vec + spec.couple(z);
    (gz, gw)
}

pub fn poisson_matrix(spec: &SystemSpec, z: &[f64]) -> DMatrix<f64> {
    match spec.poisson() {
        PoissonOperator::Canonical => canonical_poisson(spec.n()),
        PoissonOperator::Custom(f) => f(z),
    }
}

pub fn canonical_poisson(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// `J_A(z) v`
pub fn poisson_apply(spec: &SystemSpec, z: &[f64], v: &[f64]) -> DVector<f64> {
    match spec.poisson() {
        PoissonOperator::Canonical => {
            let n = spec.n();
            let mut out = DVector::zeros(2 * n);
            for i in 0..n {
                out[i] = v[n + i];
                out[n + i] = -v[i];
            }
            out
        }
        PoissonOperator::Custom(f) => f(z) * DVector::from_column_slice(v),
    }
}
