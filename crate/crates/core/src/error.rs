use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid system specification: {0}")]
    InvalidSpec(String),

    #[error("symmetric part of the bath generator has no spectral gap (min eigenvalue {min_eigenvalue:e})")]
    SpectralGap { min_eigenvalue: f64 },

    #[error("quadrature did not reach tolerance {tolerance:e} (last change {achieved:e})")]
    Quadrature { tolerance: f64, achieved: f64 },

    #[error("grid [{left}, {right}] does not cover the required interval [{required_left}, {required_right}]")]
    GridCoverage {
        left: f64,
        right: f64,
        required_left: f64,
        required_right: f64,
    },

    #[error("step covariance is numerically indefinite (min eigenvalue {min_eigenvalue:e})")]
    Factorization { min_eigenvalue: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("chain diverged: {0}")]
    Divergence(String),

    #[error("chains did not converge (split R-hat {rhat:.4} >= {threshold})")]
    Convergence { rhat: f64, threshold: f64 },

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("coordinate map has a singular Jacobian")]
    JacobianSingular,
}
