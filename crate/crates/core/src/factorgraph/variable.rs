use nalgebra::{Cholesky, DVector};

use super::{FactorId, GraphError, VariableId};
use crate::gaussian::CanonicalGaussian;

/// A variable node: belief, inbox of factor messages and a fallback
/// linearisation point used while the belief is not yet informative.
#[derive(Debug, Clone)]
pub struct Variable {
    pub(crate) id: VariableId,
    pub(crate) dim: usize,
    pub(crate) belief: CanonicalGaussian,
    /// Sorted by factor id, so belief sums are reproducible.
    pub(crate) inbox: Vec<(FactorId, CanonicalGaussian)>,
    pub(crate) active: bool,
    pub(crate) owner: Option<usize>,
    pub(crate) linearization_point: DVector<f64>,
    pub(crate) informative: bool,
    /// Bumped whenever the belief is recomputed.
    pub(crate) version: u64,
    pub(crate) dirty: bool,
}

impl Variable {
    pub(crate) fn new(id: VariableId, initial: DVector<f64>, owner: Option<usize>) -> Self {
        let dim = initial.len();
        Self {
            id,
            dim,
            belief: CanonicalGaussian::zeros(dim),
            inbox: Vec::new(),
            active: true,
            owner,
            linearization_point: initial,
            informative: false,
            version: 0,
            dirty: false,
        }
    }

    pub fn id(&self) -> VariableId {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn belief(&self) -> &CanonicalGaussian {
        &self.belief
    }

    pub fn inbox(&self) -> &[(FactorId, CanonicalGaussian)] {
        &self.inbox
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn owner(&self) -> Option<usize> {
        self.owner
    }

    /// Whether the belief precision is positive definite.
    pub fn is_informative(&self) -> bool {
        self.informative
    }

    /// Belief mean, or the last known linearisation point while the belief
    /// is not informative.
    pub fn mean(&self) -> &DVector<f64> {
        &self.linearization_point
    }

    pub fn message(&self, factor: FactorId) -> Option<&CanonicalGaussian> {
        self.slot(factor).ok().map(|i| &self.inbox[i].1)
    }

    /// Product of every inbox message.
    pub fn update_belief(&mut self) -> &CanonicalGaussian {
        let mut belief = CanonicalGaussian::zeros(self.dim);
        for (_, msg) in &self.inbox {
            belief
                .accumulate(msg)
                .expect("inbox messages match the variable dimension");
        }
        self.belief = belief;
        match Cholesky::new(self.belief.lambda().clone()) {
            Some(chol) => {
                self.linearization_point = chol.solve(self.belief.eta());
                self.informative = true;
            }
            None => self.informative = false,
        }
        self.version += 1;
        self.dirty = false;
        &self.belief
    }

    /// Product of all inbox messages except the one from `factor`.
    pub fn message_to(&self, factor: FactorId) -> Result<CanonicalGaussian, GraphError> {
        let i = self.slot(factor).map_err(|_| GraphError::NotNeighbor {
            factor,
            variable: self.id,
        })?;
        Ok(self.belief.quotient(&self.inbox[i].1)?)
    }

    pub(crate) fn slot(&self, factor: FactorId) -> Result<usize, usize> {
        self.inbox.binary_search_by_key(&factor, |(f, _)| *f)
    }

    /// Stores a message; returns whether it differs from the previous one.
    pub(crate) fn receive(&mut self, factor: FactorId, msg: CanonicalGaussian) -> bool {
        match self.slot(factor) {
            Ok(i) => {
                if self.inbox[i].1 == msg {
                    return false;
                }
                self.inbox[i].1 = msg;
            }
            Err(i) => self.inbox.insert(i, (factor, msg)),
        }
        self.dirty = true;
        true
    }

    pub(crate) fn forget(&mut self, factor: FactorId) -> Option<CanonicalGaussian> {
        let i = self.slot(factor).ok()?;
        self.dirty = true;
        Some(self.inbox.remove(i).1)
    }
}
