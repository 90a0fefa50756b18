//! Loopy Gaussian belief propagation over a bipartite factor graph.
//!
//! Variables hold a belief and an inbox of factor→variable messages; factors
//! hold a measurement model, its current linearisation and the
//! variable→factor messages they last consumed. [`FactorGraph::iterate`] runs
//! synchronous rounds of relinearisation, factor→variable messages and belief
//! updates.
//!
//! Factors flagged as inter-robot only exchange messages while every
//! variable they touch is active; otherwise they keep their last messages.

mod factor;
mod graph;
mod variable;

use std::any::Any;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{CanonicalGaussian, GaussianError};

pub use factor::Factor;
pub use graph::{Diagnostics, FactorGraph, RemovedFactor};
pub use variable::Variable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorId(pub u64);

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum NodeId {
    Variable(VariableId),
    Factor(FactorId),
}

/// A message on one edge of the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: NodeId,
    pub to: NodeId,
    pub payload: CanonicalGaussian,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("unknown variable {0}")]
    UnknownVariable(VariableId),
    #[error("unknown factor {0}")]
    UnknownFactor(FactorId),
    #[error("{variable} is not a neighbour of {factor}")]
    NotNeighbor { factor: FactorId, variable: VariableId },
    #[error("factor evaluation failed ({kind}): {reason}")]
    FactorEvaluation { kind: &'static str, reason: String },
    #[error("damping must lie in [0, 1), got {0}")]
    InvalidDamping(f64),
    #[error("tolerance must lie in [0, 1), got {0}")]
    InvalidTolerance(f64),
    #[error("non-finite belief at {variable} in round {round}")]
    NonFinite { variable: VariableId, round: u64 },
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Measurement model of a factor: `f(X) ∝ exp(-½ (z - h(X))ᵀ Λ (z - h(X)))`.
///
/// `X` is the concatenation of the neighbouring variables' states in
/// neighbour order.
pub trait FactorModel: fmt::Debug + Send + Sync {
    fn kind(&self) -> &'static str;

    /// `h(X)`.
    fn measure(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `∂h/∂X`, one column per stacked state component.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `z`. Zero unless the factor carries an actual observation.
    fn observation(&self) -> DVector<f64> {
        DVector::zeros(self.precision().nrows())
    }

    /// `Λ`.
    fn precision(&self) -> DMatrix<f64>;

    /// Linear models are linearised once and reused until replaced.
    fn is_linear(&self) -> bool {
        false
    }

    /// Factor likelihood at the linearisation point `x0`.
    fn linearize(&self, x0: &DVector<f64>) -> Result<CanonicalGaussian, GraphError> {
        linearize_model(self, x0)
    }

    fn as_any(&self) -> &dyn Any;
}

/// First-order likelihood of a factor:
/// `η = JᵀΛ(J·X0 + z − h(X0))`, `Λf = JᵀΛJ`.
pub fn linearize_model<M: FactorModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
) -> Result<CanonicalGaussian, GraphError> {
    let fail = |reason: String| GraphError::FactorEvaluation {
        kind: model.kind(),
        reason,
    };
    let jac = model.jacobian(x0);
    if jac.ncols() != x0.len() {
        return Err(fail(format!(
            "jacobian has {} columns for a {}-dimensional state",
            jac.ncols(),
            x0.len()
        )));
    }
    let h = model.measure(x0);
    let z = model.observation();
    let precision = model.precision();
    if jac.nrows() != z.len() || h.len() != z.len() || precision.nrows() != z.len() {
        return Err(fail(format!(
            "residual shapes disagree: h {}, J {}x{}, z {}, Λ {}",
            h.len(),
            jac.nrows(),
            jac.ncols(),
            z.len(),
            precision.nrows()
        )));
    }
    if h.iter().chain(jac.iter()).any(|v| !v.is_finite()) {
        return Err(fail("non-finite h or J".into()));
    }
    let jt_lambda = jac.transpose() * &precision;
    let eta = &jt_lambda * (&jac * x0 + z - h);
    let lambda = jt_lambda * jac;
    Ok(CanonicalGaussian::from_parts(eta, lambda))
}

/// `h(X) = A·X` with observation `z` and precision `Λ`.
#[derive(Debug, Clone)]
pub struct LinearFactor {
    pub a: DMatrix<f64>,
    pub z: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl LinearFactor {
    /// Isotropic prior on a single variable.
    pub fn prior(mean: &[f64], precision: f64) -> Self {
        let n = mean.len();
        Self {
            a: DMatrix::identity(n, n),
            z: DVector::from_column_slice(mean),
            precision: DMatrix::identity(n, n) * precision,
        }
    }

    /// `x_i − x_j = offset` between two variables of dimension `dim`.
    pub fn relative(dim: usize, offset: &[f64], precision: f64) -> Self {
        let mut a = DMatrix::zeros(dim, 2 * dim);
        for i in 0..dim {
            a[(i, i)] = 1.0;
            a[(i, dim + i)] = -1.0;
        }
        Self {
            a,
            z: DVector::from_column_slice(offset),
            precision: DMatrix::identity(dim, dim) * precision,
        }
    }
}

impl FactorModel for LinearFactor {
    fn kind(&self) -> &'static str {
        "linear"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn observation(&self) -> DVector<f64> {
        self.z.clone()
    }
    fn precision(&self) -> DMatrix<f64> {
        self.precision.clone()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}
