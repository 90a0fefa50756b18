//! Multivariate Gaussians in canonical (information) form.
//!
//! A [`CanonicalGaussian`] stores the information vector `eta = Λμ` and the
//! precision matrix `Λ = Σ⁻¹`. Products of Gaussians become sums in this
//! parameterisation, which is what makes it the natural currency for
//! belief propagation messages.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("non-invertible covariance")]
    SingularCovariance,
    #[error("belief not yet informative")]
    Uninformative,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("unconstrained marginalization")]
    UnconstrainedMarginalization,
    #[error("invalid index set {0:?} for dimension {1}")]
    InvalidIndices(Vec<usize>, usize),
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

/// Gaussian `N⁻¹(x; η, Λ)`.
///
/// `Λ` is symmetrised on every construction. The zero-information value
/// (`η = 0`, `Λ = 0`) is a valid Gaussian and the identity of [`product`].
///
/// [`product`]: CanonicalGaussian::product
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireGaussian", into = "WireGaussian")]
pub struct CanonicalGaussian {
    eta: DVector<f64>,
    lambda: DMatrix<f64>,
}

impl CanonicalGaussian {
    pub fn new(eta: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self, GaussianError> {
        let dim = eta.len();
        if lambda.nrows() != dim {
            return Err(GaussianError::DimensionMismatch(dim, lambda.nrows()));
        }
        if lambda.ncols() != dim {
            return Err(GaussianError::DimensionMismatch(dim, lambda.ncols()));
        }
        Ok(Self::from_parts(eta, lambda))
    }

    /// Builds without shape checks; callers guarantee matching dimensions.
    pub(crate) fn from_parts(eta: DVector<f64>, mut lambda: DMatrix<f64>) -> Self {
        symmetrize(&mut lambda);
        Self { eta, lambda }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            eta: DVector::zeros(dim),
            lambda: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_moments(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self, GaussianError> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(GaussianError::DimensionMismatch(mu.len(), sigma.nrows()));
        }
        let mut sigma = sigma.clone();
        symmetrize(&mut sigma);
        let chol = Cholesky::new(sigma).ok_or(GaussianError::SingularCovariance)?;
        let lambda = chol.inverse();
        let eta = &lambda * mu;
        Ok(Self::from_parts(eta, lambda))
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn is_zero(&self) -> bool {
        self.eta.iter().all(|v| *v == 0.0) && self.lambda.iter().all(|v| *v == 0.0)
    }

    /// Element-wise `|a − b| ≤ rel·max(|a|, |b|)` on both parameters;
    /// exact equality when `rel` is zero.
    pub fn approx_eq(&self, other: &Self, rel: f64) -> bool {
        let close = |a: &f64, b: &f64| a == b || (a - b).abs() <= rel * a.abs().max(b.abs());
        self.dim() == other.dim()
            && self.eta.iter().zip(other.eta.iter()).all(|(a, b)| close(a, b))
            && self.lambda.iter().zip(other.lambda.iter()).all(|(a, b)| close(a, b))
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().all(|v| v.is_finite()) && self.lambda.iter().all(|v| v.is_finite())
    }

    /// Mean and covariance. Fails unless `Λ` is positive definite.
    pub fn to_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>), GaussianError> {
        let chol = Cholesky::new(self.lambda.clone()).ok_or(GaussianError::Uninformative)?;
        let mu = chol.solve(&self.eta);
        let sigma = chol.inverse();
        Ok((mu, sigma))
    }

    /// Mean only; cheaper than [`to_moments`](Self::to_moments).
    pub fn mean(&self) -> Result<DVector<f64>, GaussianError> {
        let chol = Cholesky::new(self.lambda.clone()).ok_or(GaussianError::Uninformative)?;
        Ok(chol.solve(&self.eta))
    }

    pub fn product(&self, other: &Self) -> Result<Self, GaussianError> {
        self.check_dim(other)?;
        Ok(Self {
            eta: &self.eta + &other.eta,
            lambda: &self.lambda + &other.lambda,
        })
    }

    /// Divides `other` out of `self`. The result may be indefinite; that is
    /// allowed for intermediate messages.
    pub fn quotient(&self, other: &Self) -> Result<Self, GaussianError> {
        self.check_dim(other)?;
        Ok(Self {
            eta: &self.eta - &other.eta,
            lambda: &self.lambda - &other.lambda,
        })
    }

    /// Whether `self / other` is `approx_eq` to `expected`, without
    /// forming the quotient.
    pub(crate) fn quotient_matches(&self, other: &Self, expected: &Self, rel: f64) -> bool {
        let close = |a: f64, b: f64| a == b || (a - b).abs() <= rel * a.abs().max(b.abs());
        expected.dim() == self.dim()
            && other.dim() == self.dim()
            && (0..self.eta.len()).all(|i| close(self.eta[i] - other.eta[i], expected.eta[i]))
            && self
                .lambda
                .as_slice()
                .iter()
                .zip(other.lambda.as_slice())
                .zip(expected.lambda.as_slice())
                .all(|((a, b), e)| close(a - b, *e))
    }

    /// `self / other` written into `out`, which must have the same dimension.
    pub(crate) fn quotient_into(&self, other: &Self, out: &mut Self) {
        out.eta.copy_from(&self.eta);
        out.eta -= &other.eta;
        out.lambda.copy_from(&self.lambda);
        out.lambda -= &other.lambda;
    }

    /// In-place product.
    pub fn accumulate(&mut self, other: &Self) -> Result<(), GaussianError> {
        self.check_dim(other)?;
        self.eta += &other.eta;
        self.lambda += &other.lambda;
        Ok(())
    }

    /// Convex blend `(1 - beta) * self + beta * previous` on both parameters.
    pub fn damped(&self, previous: &Self, beta: f64) -> Result<Self, GaussianError> {
        self.check_dim(previous)?;
        if beta == 0.0 {
            return Ok(self.clone());
        }
        Ok(Self::from_parts(
            &self.eta * (1.0 - beta) + &previous.eta * beta,
            &self.lambda * (1.0 - beta) + &previous.lambda * beta,
        ))
    }

    /// Schur-complement marginal over the indices in `keep` (in the order
    /// given).
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self, GaussianError> {
        let dim = self.dim();
        let mut seen = vec![false; dim];
        for &i in keep {
            if i >= dim || seen[i] {
                return Err(GaussianError::InvalidIndices(keep.to_vec(), dim));
            }
            seen[i] = true;
        }
        if keep.is_empty() {
            return Err(GaussianError::InvalidIndices(Vec::new(), dim));
        }
        let rest: Vec<usize> = (0..dim).filter(|i| !seen[*i]).collect();
        let eta_a = self.eta.select_rows(keep);
        let lambda_aa = self.lambda.select_rows(keep).select_columns(keep);
        if rest.is_empty() {
            return Ok(Self::from_parts(eta_a, lambda_aa));
        }
        let eta_b = self.eta.select_rows(&rest);
        let lambda_ab = self.lambda.select_rows(keep).select_columns(&rest);
        let lambda_bb = self.lambda.select_rows(&rest).select_columns(&rest);
        let (x, y) = solve_block(lambda_bb, &lambda_ab.transpose(), &eta_b)?;
        Ok(Self::from_parts(eta_a - &lambda_ab * y, lambda_aa - &lambda_ab * x))
    }

    /// Smallest eigenvalue of `Λ`.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.lambda
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Flat encoding `[dim, η..., Λ row-major...]`.
    pub fn to_row_major(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(1 + dim + dim * dim);
        out.push(dim as f64);
        out.extend(self.eta.iter());
        for r in 0..dim {
            for c in 0..dim {
                out.push(self.lambda[(r, c)]);
            }
        }
        out
    }

    pub fn from_row_major(data: &[f64]) -> Result<Self, GaussianError> {
        let (&dim, rest) = data
            .split_first()
            .ok_or_else(|| GaussianError::Malformed("empty buffer".into()))?;
        if !(dim >= 0.0 && dim.fract() == 0.0) {
            return Err(GaussianError::Malformed(format!("bad dimension {dim}")));
        }
        let dim = dim as usize;
        if rest.len() != dim + dim * dim {
            return Err(GaussianError::Malformed(format!(
                "expected {} values for dimension {dim}, got {}",
                dim + dim * dim,
                rest.len()
            )));
        }
        let eta = DVector::from_column_slice(&rest[..dim]);
        let lambda = DMatrix::from_row_slice(dim, dim, &rest[dim..]);
        Ok(Self::from_parts(eta, lambda))
    }

    /// Little-endian byte encoding of [`to_row_major`](Self::to_row_major).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_row_major().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GaussianError> {
        if bytes.len() % 8 != 0 {
            return Err(GaussianError::Malformed("length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_row_major(&values)
    }

    fn check_dim(&self, other: &Self) -> Result<(), GaussianError> {
        if self.dim() != other.dim() {
            return Err(GaussianError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(())
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Solves `A X = B` and `A y = b` with a factorisation of `A`. Cholesky
/// first, falling back to LU for indefinite but invertible blocks.
fn solve_block(
    a: DMatrix<f64>,
    b: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), GaussianError> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok((chol.solve(b), chol.solve(rhs)));
    }
    let scale = a.amax();
    let lu = a.full_piv_lu();
    let pivot_floor = scale * 1e-13;
    let singular = scale == 0.0
        || (0..lu.u().nrows()).any(|i| lu.u()[(i, i)].abs() <= pivot_floor);
    if singular {
        return Err(GaussianError::UnconstrainedMarginalization);
    }
    let x = lu.solve(b).ok_or(GaussianError::UnconstrainedMarginalization)?;
    let y = lu.solve(rhs).ok_or(GaussianError::UnconstrainedMarginalization)?;
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(GaussianError::UnconstrainedMarginalization);
    }
    Ok((x, y))
}

#[derive(Serialize, Deserialize)]
struct WireGaussian {
    dim: usize,
    eta: Vec<f64>,
    lambda: Vec<f64>,
}

impl From<CanonicalGaussian> for WireGaussian {
    fn from(g: CanonicalGaussian) -> Self {
        let flat = g.to_row_major();
        let dim = g.dim();
        Self {
            dim,
            eta: flat[1..1 + dim].to_vec(),
            lambda: flat[1 + dim..].to_vec(),
        }
    }
}

impl TryFrom<WireGaussian> for CanonicalGaussian {
    type Error = GaussianError;

    fn try_from(w: WireGaussian) -> Result<Self, Self::Error> {
        let mut flat = Vec::with_capacity(1 + w.eta.len() + w.lambda.len());
        flat.push(w.dim as f64);
        flat.extend(w.eta);
        flat.extend(w.lambda);
        Self::from_row_major(&flat)
    }
}
