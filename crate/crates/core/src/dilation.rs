//! Heat-bath observables and the compression property.
//!
//! The bath is vector-valued transport on the line. Its observable subspace
//! is spanned by `d` functions `f_j` supported on `(-∞, 0]`, orthonormal in
//! `L²(R; R^d)`, whose shifted Gram matrix `G(t)_ij = ⟨f_i, f_j(· - t)⟩`
//! reproduces the semigroup `e^{-tD}` for `t ≥ 0`.
//!
//! Basis indices `j` are 0-based throughout.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{RunningExample, SystemSpec, SPECTRAL_GAP_FLOOR};

/// Tail weight left out by the default truncation depth.
pub const DEFAULT_TAIL: f64 = 1e-13;

/// Depth `Y` with `e^{-2 α Y} = tail`.
pub fn default_y_max(alpha: f64, tail: f64) -> f64 {
    -libm::log(tail) / (2.0 * alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisMode {
    /// Analytic basis for the three-dimensional running example.
    RunningExample(RunningExample),
    /// `f_j(y) = Σ_D e^{yD} e_j` on `y ≤ 0` with `Σ_D = (D + Dᵀ)^{1/2}`.
    General { sigma_d: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DilationBasis {
    mode: BasisMode,
    generator: DMatrix<f64>,
    alpha: f64,
    y_max: f64,
    quad_tol: f64,
}

impl DilationBasis {
    pub fn running_example(params: RunningExample, y_max: Option<f64>) -> Result<Self> {
        params.validate()?;
        let alpha = params.theta1.min(params.theta2);
        Self::finish(BasisMode::RunningExample(params), params.generator(), alpha, y_max)
    }

    pub fn general(generator: DMatrix<f64>, y_max: Option<f64>) -> Result<Self> {
        if generator.nrows() == 0 || generator.nrows() != generator.ncols() {
            return Err(Error::Shape(format!("generator must be square, got {}x{}", generator.nrows(), generator.ncols())));
        }
        let alpha = linalg::min_symmetric_eigenvalue(&generator);
        if alpha <= SPECTRAL_GAP_FLOOR {
            return Err(Error::SpectralGap { min_eigenvalue: alpha });
        }
        let sigma_d = linalg::symmetric_sqrt(&(&generator + generator.transpose()));
        Self::finish(BasisMode::General { sigma_d }, generator, alpha, y_max)
    }

    /// General-mode basis for the generator of `spec`.
    pub fn from_spec(spec: &SystemSpec, y_max: Option<f64>) -> Result<Self> {
        Self::general(spec.generator().clone(), y_max)
    }

    fn finish(mode: BasisMode, generator: DMatrix<f64>, alpha: f64, y_max: Option<f64>) -> Result<Self> {
        let y_max = y_max.unwrap_or_else(|| default_y_max(alpha, DEFAULT_TAIL));
        if !(y_max.is_finite() && y_max > 0.0) {
            return Err(Error::InvalidSpec(format!("truncation depth must be positive, got {y_max}")));
        }
        Ok(Self { mode, generator, alpha, y_max, quad_tol: 1e-10 })
    }

    /// Tolerance used by [`gram_shifted`] in general mode.
    pub fn with_quadrature_tolerance(mut self, tol: f64) -> Self {
        self.quad_tol = tol;
        self
    }

    pub fn mode(&self) -> &BasisMode {
        &self.mode
    }

    pub fn d(&self) -> usize {
        self.generator.nrows()
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn quadrature_tolerance(&self) -> f64 {
        self.quad_tol
    }

    /// `L²` mass of the basis beyond the truncation depth.
    pub fn tail_bound(&self) -> f64 {
        libm::exp(-2.0 * self.alpha * self.y_max)
    }

    /// Matrix whose column `j` is `f_j(y)`.
    pub fn eval_matrix(&self, y: f64) -> DMatrix<f64> {
        let d = self.d();
        if y > 0.0 {
            return DMatrix::zeros(d, d);
        }
        match &self.mode {
            BasisMode::RunningExample(p) => {
                let a1 = libm::sqrt(2.0 * p.theta1) * libm::exp(p.theta1 * y);
                let a2 = libm::sqrt(2.0 * p.theta2) * libm::exp(p.theta2 * y);
                let (s, c) = (libm::sin(p.varsigma * y), libm::cos(p.varsigma * y));
                DMatrix::from_row_slice(3, 3, &[a1, 0.0, 0.0, 0.0, a2 * c, -a2 * s, 0.0, a2 * s, a2 * c])
            }
            BasisMode::General { sigma_d } => sigma_d * linalg::expm(&(&self.generator * y)),
        }
    }
}

/// `f_j(y)`.
pub fn eval_basis(basis: &DilationBasis, j: usize, y: f64) -> DVector<f64> {
    assert!(j < basis.d(), "basis index {j} out of range for d = {}", basis.d());
    basis.eval_matrix(y).column(j).into_owned()
}

/// `G(t)_ij = ⟨f_i, f_j(· - t)⟩`.
///
/// Running-example mode uses the exact integral over `(-∞, min(0, t)]`: the
/// rotation factors combine to constants, leaving a single exponential per
/// block. General mode falls back to [`gram_shifted_quadrature`] at the
/// basis tolerance.
pub fn gram_shifted(basis: &DilationBasis, t: f64) -> Result<DMatrix<f64>> {
    match basis.mode() {
        BasisMode::RunningExample(p) => {
            let m = t.min(0.0);
            let g1 = libm::exp(-p.theta1 * t + 2.0 * p.theta1 * m);
            let g2 = libm::exp(-p.theta2 * t + 2.0 * p.theta2 * m);
            let (s, c) = (libm::sin(p.varsigma * t), libm::cos(p.varsigma * t));
            Ok(DMatrix::from_row_slice(3, 3, &[g1, 0.0, 0.0, 0.0, g2 * c, g2 * s, 0.0, -g2 * s, g2 * c]))
        }
        BasisMode::General { .. } => gram_shifted_quadrature(basis, t, basis.quadrature_tolerance()),
    }
}

/// Shifted Gram matrix by composite Gauss-Legendre quadrature over the
/// truncated support, valid in either mode.
pub fn gram_shifted_quadrature(basis: &DilationBasis, t: f64, tol: f64) -> Result<DMatrix<f64>> {
    let d = basis.d();
    let upper = t.min(0.0);
    let lower = (-basis.y_max()).max(t - basis.y_max());
    linalg::integrate_matrix(lower, upper, d, d, tol, |y| basis.eval_matrix(y).transpose() * basis.eval_matrix(y - t))
}

/// `e^{-tD}` for `t ≥ 0` and `e^{tDᵀ}` for `t < 0`.
pub fn compressed_semigroup(generator: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    if t >= 0.0 {
        linalg::expm(&(generator * -t))
    } else {
        linalg::expm(&(generator.transpose() * t))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CompressionReport {
    /// `(t, ‖G(t) - e^{-tD}‖_F)` per requested time.
    pub errors: Vec<(f64, f64)>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn verify_compression(basis: &DilationBasis, t_list: &[f64], tol: f64) -> Result<CompressionReport> {
    let mut errors = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let g = gram_shifted(basis, t)?;
        errors.push((t, linalg::frobenius(&(g - compressed_semigroup(basis.generator(), t)))));
    }
    let max_error = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(CompressionReport { errors, max_error, tolerance: tol, passed: max_error <= tol })
}

/// `‖∫_{-Y}^0 e^{yDᵀ}(D + Dᵀ)e^{yD} dy - I‖_F`.
pub fn verify_dilation_identity(generator: &DMatrix<f64>, y_max: f64) -> Result<f64> {
    verify_dilation_identity_with_tol(generator, y_max, 1e-12)
}

pub fn verify_dilation_identity_with_tol(generator: &DMatrix<f64>, y_max: f64, quad_tol: f64) -> Result<f64> {
    let d = generator.nrows();
    let alpha = linalg::min_symmetric_eigenvalue(generator);
    if alpha <= SPECTRAL_GAP_FLOOR {
        return Err(Error::SpectralGap { min_eigenvalue: alpha });
    }
    let sum = generator + generator.transpose();
    let integral = linalg::integrate_matrix(-y_max, 0.0, d, d, quad_tol, |y| {
        let e = linalg::expm(&(generator * y));
        e.transpose() * &sum * e
    })?;
    Ok(linalg::frobenius(&(integral - DMatrix::identity(d, d))))
}

/// Bound on [`verify_dilation_identity`] from the truncated tail.
pub fn dilation_tail_bound(generator: &DMatrix<f64>, y_max: f64) -> f64 {
    let alpha = linalg::min_symmetric_eigenvalue(generator);
    let sum = generator + generator.transpose();
    linalg::frobenius(&sum) * libm::exp(-2.0 * alpha * y_max) / (2.0 * alpha)
}

/// Piecewise-constant field `R → R^d` on a uniform grid.
///
/// Cell `i` (an integer, possibly negative) covers `[i h, (i + 1) h)` in
/// physical coordinates. The stored cells are a contiguous range whose
/// position moves right by one cell per [`GridField::shift_right_one_cell`];
/// the shift only changes an offset, so it is exact and O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    h: f64,
    d: usize,
    first: i64,
    values: Vec<f64>,
}

impl GridField {
    /// Zero field covering the cells `first .. first + len`.
    pub fn zeros(h: f64, d: usize, first: i64, len: usize) -> Self {
        assert!(h > 0.0, "grid spacing must be positive");
        Self { h, d, first, values: alloc::vec![0.0; len * d] }
    }

    /// Zero field on `[left, right]`; both ends must lie on multiples of `h`
    /// (to within 1e-9 cells).
    pub fn on_interval(left: f64, right: f64, h: f64, d: usize) -> Result<Self> {
        let snap = |x: f64| -> Result<i64> {
            let cells = x / h;
            let rounded = libm::round(cells);
            if (cells - rounded).abs() > 1e-9 {
                return Err(Error::Shape(format!("{x} is not a multiple of the grid spacing {h}")));
            }
            Ok(rounded as i64)
        };
        let (a, b) = (snap(left)?, snap(right)?);
        if b <= a {
            return Err(Error::Shape(format!("empty grid interval [{left}, {right}]")));
        }
        Ok(Self::zeros(h, d, a, (b - a) as usize))
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first_cell(&self) -> i64 {
        self.first
    }

    pub fn left(&self) -> f64 {
        self.first as f64 * self.h
    }

    pub fn right(&self) -> f64 {
        (self.first + self.len() as i64) as f64 * self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Whether physical cells `lo .. hi` are stored.
    pub fn covers(&self, lo: i64, hi: i64) -> bool {
        lo >= self.first && hi <= self.first + self.len() as i64
    }

    /// Storage slot of physical cell `i`.
    fn slot(&self, i: i64) -> usize {
        (i - self.first) as usize
    }

    pub fn cell(&self, i: i64) -> &[f64] {
        let k = self.slot(i) * self.d;
        &self.values[k..k + self.d]
    }

    pub fn cell_mut(&mut self, i: i64) -> &mut [f64] {
        let k = self.slot(i) * self.d;
        &mut self.values[k..k + self.d]
    }

    pub fn cell_center(&self, i: i64) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    /// Exact transport by one cell: `η(y) ↦ η(y - h)`.
    pub fn shift_right_one_cell(&mut self) {
        self.first += 1;
    }

    /// `h Σ u_i · v_i` over the common cells.
    pub fn inner(&self, other: &GridField) -> f64 {
        assert_eq!(self.d, other.d);
        let lo = self.first.max(other.first);
        let hi = (self.first + self.len() as i64).min(other.first + other.len() as i64);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += self.cell(i).iter().zip(other.cell(i)).map(|(a, b)| a * b).sum::<f64>();
        }
        self.h * acc
    }

    pub fn norm_squared(&self) -> f64 {
        self.h * self.values.iter().map(|x| x * x).sum::<f64>()
    }

    /// Cell-centered samples of `f`.
    pub fn sample<F: FnMut(f64) -> DVector<f64>>(h: f64, d: usize, first: i64, len: usize, mut f: F) -> Self {
        let mut field = Self::zeros(h, d, first, len);
        for k in 0..len as i64 {
            let i = first + k;
            let v = f(field.cell_center(i));
            field.cell_mut(i).copy_from_slice(v.as_slice());
        }
        field
    }
}

/// Cell-centered samples of the basis on the negative half-line cells
/// `-n_neg .. 0`, used to project and expand grid fields.
#[derive(Debug, Clone)]
pub struct ProjectionTable {
    h: f64,
    d: usize,
    n_neg: usize,
    /// `columns[j]` holds `f_j` on the table cells in the field's interleaved
    /// layout (cell-major, component-minor), ordered from cell `-n_neg` upward.
    columns: Vec<Vec<f64>>,
    gram: DMatrix<f64>,
    shifted_gram: DMatrix<f64>,
}

/// Four-accumulator dot product; the independent sums let the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl ProjectionTable {
    pub fn new(basis: &DilationBasis, h: f64) -> Self {
        assert!(h > 0.0, "grid spacing must be positive");
        let d = basis.d();
        let n_neg = libm::ceil(basis.y_max() / h - 1e-9) as usize;
        let mut columns = alloc::vec![Vec::with_capacity(n_neg * d); d];
        let mut gram = DMatrix::zeros(d, d);
        let mut shifted_gram = DMatrix::zeros(d, d);
        let mut previous: Option<DMatrix<f64>> = None;
        for k in 0..n_neg {
            let i = k as i64 - n_neg as i64;
            let f = basis.eval_matrix((i as f64 + 0.5) * h);
            gram += f.transpose() * &f * h;
            if let Some(prev) = &previous {
                shifted_gram += f.transpose() * prev * h;
            }
            for (j, col) in columns.iter_mut().enumerate() {
                col.extend(f.column(j).iter());
            }
            previous = Some(f);
        }
        Self { h, d, n_neg, columns, gram, shifted_gram }
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    /// Lowest physical cell index read by the table.
    pub fn first_cell(&self) -> i64 {
        -(self.n_neg as i64)
    }

    /// Grid inner products `⟨f_i, f_j⟩_h`; equals `I` up to O(h²) and the tail.
    pub fn grid_gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Grid inner products `⟨f_i, f_j(· - h)⟩_h` with `f_j(· - h)` the
    /// one-cell shift of the sampled column.
    pub fn grid_gram_shifted(&self) -> &DMatrix<f64> {
        &self.shifted_gram
    }

    fn check(&self, field: &GridField, offset: i64) -> Result<()> {
        if field.d() != self.d || (field.h() - self.h).abs() > 1e-15 * self.h {
            return Err(Error::Shape(format!(
                "field (d = {}, h = {}) does not match table (d = {}, h = {})",
                field.d(),
                field.h(),
                self.d,
                self.h
            )));
        }
        if !field.covers(self.first_cell() + offset, offset) {
            return Err(Error::GridCoverage {
                left: field.left(),
                right: field.right(),
                required_left: (self.first_cell() + offset) as f64 * self.h,
                required_right: offset as f64 * self.h,
            });
        }
        Ok(())
    }

    fn window(&self, field: &GridField, offset: i64) -> core::ops::Range<usize> {
        let start = field.slot(self.first_cell() + offset) * self.d;
        start..start + self.n_neg * self.d
    }

    /// Coordinates `⟨f_j, η⟩_h`.
    pub fn project(&self, field: &GridField) -> Result<DVector<f64>> {
        self.check(field, 0)?;
        let cells = &field.values()[self.window(field, 0)];
        Ok(DVector::from_iterator(self.d, self.columns.iter().map(|col| self.h * dot(col, cells))))
    }

    /// `η += Σ_j c_j f_j` on the table cells.
    pub fn deposit(&self, field: &mut GridField, coeffs: &[f64]) -> Result<()> {
        self.deposit_shifted(field, coeffs, 0)
    }

    /// `η += Σ_j c_j f_j(· - offset·h)`, the deposit moved right by `offset` cells.
    pub fn deposit_shifted(&self, field: &mut GridField, coeffs: &[f64], offset: i64) -> Result<()> {
        self.check(field, offset)?;
        let range = self.window(field, offset);
        let cells = &mut field.values_mut()[range];
        for (col, c) in self.columns.iter().zip(coeffs) {
            if *c != 0.0 {
                axpy(*c, col, cells);
            }
        }
        Ok(())
    }

    /// Field covering exactly the table cells, holding `Σ_j c_j f_j`.
    pub fn expand(&self, coeffs: &[f64]) -> GridField {
        let mut field = GridField::zeros(self.h, self.d, self.first_cell(), self.n_neg);
        self.deposit(&mut field, coeffs).expect("table field matches its own grid");
        field
    }
}

/// `P η` coordinates of a grid field, sampling the basis on the fly.
pub fn project_p(basis: &DilationBasis, field: &GridField) -> Result<DVector<f64>> {
    ProjectionTable::new(basis, field.h()).project(field)
}
