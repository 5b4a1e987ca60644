//! Exact simulation of the Ornstein-Uhlenbeck process `dY = -D Y dt + Σ dB`
//! with `Σ Σᵀ = (D + Dᵀ)/β`, whose stationary law is `N(0, I/β)`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{standard_normal_vector, stream};

/// Per-step transition data for a fixed time step.
#[derive(Debug, Clone)]
pub struct OuParams {
    generator: DMatrix<f64>,
    beta: f64,
    dt: f64,
    sigma: DMatrix<f64>,
    transition: DMatrix<f64>,
    step_cov: DMatrix<f64>,
    step_factor: DMatrix<f64>,
}

impl OuParams {
    /// `beta = f64::INFINITY` gives the noiseless flow `y' = e^{-dt D} y`.
    pub fn new(generator: DMatrix<f64>, beta: f64, dt: f64) -> Result<Self> {
        let d = generator.nrows();
        if d == 0 || generator.ncols() != d {
            return Err(Error::Shape(format!("generator must be square, got {}x{}", d, generator.ncols())));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidSpec(format!("beta must be positive, got {beta}")));
        }
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(Error::InvalidSpec(format!("time step must be non-negative, got {dt}")));
        }
        let transition = linalg::expm(&(&generator * -dt));
        let (sigma, step_cov) = if beta.is_infinite() {
            (DMatrix::zeros(d, d), DMatrix::zeros(d, d))
        } else {
            let sigma = linalg::symmetric_sqrt(&((&generator + generator.transpose()) / beta));
            let cov = (DMatrix::identity(d, d) - &transition * transition.transpose()) / beta;
            (sigma, linalg::symmetric_part(&cov))
        };
        let step_factor = linalg::psd_factor(&step_cov)?;
        Ok(Self { generator, beta, dt, sigma, transition, step_cov, step_factor })
    }

    pub fn d(&self) -> usize {
        self.generator.nrows()
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `E = e^{-dt D}`
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// `Q_dt = (I - E Eᵀ)/β`
    pub fn step_covariance(&self) -> &DMatrix<f64> {
        &self.step_cov
    }

    pub fn step_factor(&self) -> &DMatrix<f64> {
        &self.step_factor
    }
}

/// Draw from the exact transition kernel: `E y + L ξ`.
pub fn exact_step<R: Rng + ?Sized>(params: &OuParams, y: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let xi = standard_normal_vector(rng, params.d());
    &params.transition * y + &params.step_factor * xi
}

/// Draw from `N(0, I/β)`.
pub fn sample_stationary<R: Rng + ?Sized>(params: &OuParams, rng: &mut R) -> DVector<f64> {
    let scale = if params.beta.is_infinite() { 0.0 } else { 1.0 / libm::sqrt(params.beta) };
    standard_normal_vector(rng, params.d()) * scale
}

/// `R(s, t) = E[Y_t Y_sᵀ]` for the stationary process.
pub fn covariance(params: &OuParams, s: f64, t: f64) -> DMatrix<f64> {
    let inv_beta = if params.beta.is_infinite() { 0.0 } else { 1.0 / params.beta };
    let g = &params.generator;
    if t >= s {
        linalg::expm(&(g * -(t - s))) * inv_beta
    } else {
        linalg::expm(&(g.transpose() * -(s - t))) * inv_beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuPath {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub seed: u64,
}

/// Path of `steps` exact steps from `y0`, or from a stationary draw when
/// `y0` is `None`. Randomness comes from stream `(seed, index)`.
pub fn simulate_path(params: &OuParams, y0: Option<&DVector<f64>>, steps: usize, seed: u64, index: u64) -> OuPath {
    let mut rng = stream(seed, index);
    let mut y = match y0 {
        Some(y) => y.clone(),
        None => sample_stationary(params, &mut rng),
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    times.push(0.0);
    values.push(y.clone());
    for k in 1..=steps {
        y = exact_step(params, &y, &mut rng);
        times.push(k as f64 * params.dt);
        values.push(y.clone());
    }
    OuPath { times, values, seed }
}

/// `count` stationary paths; path `i` uses stream `(seed, i)`.
pub fn simulate_stationary_paths(params: &OuParams, steps: usize, count: usize, seed: u64) -> Vec<OuPath> {
    crate::par::map_indices(count, |i| simulate_path(params, None, steps, seed, i as u64))
}

/// Euler-Maruyama path of `dY = -D Y dt + Σ dB` from `y0`, drawing
/// `ΔB = √dt ξ` from stream `(seed, index)` exactly as
/// [`crate::macrodyn::run_sde`] does, so both see the same noise.
pub fn simulate_path_em(
    generator: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    y0: &DVector<f64>,
    dt: f64,
    steps: usize,
    seed: u64,
    index: u64,
) -> OuPath {
    let mut rng = stream(seed, index);
    let mut y = y0.clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    times.push(0.0);
    values.push(y.clone());
    let root = libm::sqrt(dt);
    for k in 1..=steps {
        let db = standard_normal_vector(&mut rng, y.len()) * root;
        y = &y - generator * &y * dt + sigma * db;
        times.push(k as f64 * dt);
        values.push(y.clone());
    }
    OuPath { times, values, seed }
}

/// Entrywise Monte Carlo estimate of a matrix with standard errors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MatrixEstimate {
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub mean: DMatrix<f64>,
    #[cfg_attr(feature = "serde", serde(serialize_with = "crate::serde_impls::matrix"))]
    pub std_err: DMatrix<f64>,
    pub samples: usize,
}

impl MatrixEstimate {
    /// Largest `|mean - target| / std_err` over the entries.
    pub fn max_z_score(&self, target: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for ((m, s), t) in self.mean.iter().zip(self.std_err.iter()).zip(target.iter()) {
            let z = crate::stats::Estimate { value: *m, std_err: *s }.z_score(*t);
            worst = worst.max(z);
        }
        worst
    }
}

/// `(1/M) Σ a_k b_kᵀ` with entrywise standard errors.
pub fn cross_moment(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<MatrixEstimate> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("need equal, non-empty sample sets, got {} and {}", a.len(), b.len())));
    }
    let (r, c) = (a[0].len(), b[0].len());
    if a.iter().any(|x| x.len() != r) || b.iter().any(|x| x.len() != c) {
        return Err(Error::Shape("samples have inconsistent dimensions".into()));
    }
    let m = a.len() as f64;
    let mut sum: DMatrix<f64> = DMatrix::zeros(r, c);
    let mut sum_sq: DMatrix<f64> = DMatrix::zeros(r, c);
    for (x, y) in a.iter().zip(b) {
        for i in 0..r {
            for j in 0..c {
                let p = x[i] * y[j];
                sum[(i, j)] += p;
                sum_sq[(i, j)] += p * p;
            }
        }
    }
    let mean: DMatrix<f64> = &sum / m;
    let std_err = DMatrix::from_fn(r, c, |i, j| {
        if a.len() < 2 {
            return 0.0;
        }
        let var = (sum_sq[(i, j)] - m * mean[(i, j)] * mean[(i, j)]) / (m - 1.0);
        libm::sqrt(var.max(0.0) / m)
    });
    Ok(MatrixEstimate { mean, std_err, samples: a.len() })
}

/// Empirical `E[Y_{t_lag} Y_0ᵀ]` across paths, with `t_lag = times[lag_index]`.
pub fn estimate_covariance(paths: &[OuPath], lag_index: usize) -> Result<MatrixEstimate> {
    let first = paths.first().ok_or_else(|| Error::Shape("no paths".into()))?;
    for p in paths {
        if p.times.len() != p.values.len() {
            return Err(Error::Shape("path times and values differ in length".into()));
        }
        if p.times != first.times {
            return Err(Error::Shape("paths do not share a time grid".into()));
        }
    }
    if lag_index >= first.times.len() {
        return Err(Error::Shape(format!("lag index {lag_index} beyond path length {}", first.times.len())));
    }
    let lagged: Vec<DVector<f64>> = paths.iter().map(|p| p.values[lag_index].clone()).collect();
    let start: Vec<DVector<f64>> = paths.iter().map(|p| p.values[0].clone()).collect();
    cross_moment(&lagged, &start)
}
