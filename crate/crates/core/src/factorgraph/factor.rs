use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use super::{FactorId, FactorModel, GraphError, VariableId};
use crate::gaussian::{CanonicalGaussian, GaussianError};

/// A factor node and the state GBP keeps on it.
#[derive(Debug)]
pub struct Factor {
    pub(crate) id: FactorId,
    pub(crate) neighbors: Vec<VariableId>,
    pub(crate) dims: Vec<usize>,
    pub(crate) offsets: Vec<usize>,
    pub(crate) model: Box<dyn FactorModel>,
    pub(crate) inter_robot: bool,
    pub(crate) linearization_point: DVector<f64>,
    pub(crate) likelihood: Option<CanonicalGaussian>,
    pub(crate) likelihood_zero: bool,
    /// Variable→factor messages consumed by the last update.
    pub(crate) incoming: Vec<CanonicalGaussian>,
    /// Neighbour belief versions consumed by the last update.
    pub(crate) seen: Vec<u64>,
    /// The likelihood changed since messages were last sent.
    pub(crate) stale: bool,
}

impl Factor {
    pub(crate) fn new(
        id: FactorId,
        neighbors: Vec<VariableId>,
        dims: Vec<usize>,
        model: Box<dyn FactorModel>,
        inter_robot: bool,
    ) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for d in &dims {
            offsets.push(total);
            total += d;
        }
        let incoming = dims.iter().map(|d| CanonicalGaussian::zeros(*d)).collect();
        Self {
            id,
            seen: vec![u64::MAX; neighbors.len()],
            neighbors,
            dims,
            offsets,
            model,
            inter_robot,
            linearization_point: DVector::zeros(total),
            likelihood: None,
            likelihood_zero: false,
            incoming,
            stale: true,
        }
    }

    pub fn id(&self) -> FactorId {
        self.id
    }

    pub fn neighbors(&self) -> &[VariableId] {
        &self.neighbors
    }

    pub fn model(&self) -> &dyn FactorModel {
        self.model.as_ref()
    }

    pub fn is_inter_robot(&self) -> bool {
        self.inter_robot
    }

    pub fn likelihood(&self) -> Option<&CanonicalGaussian> {
        self.likelihood.as_ref()
    }

    pub fn linearization_point(&self) -> &DVector<f64> {
        &self.linearization_point
    }

    pub fn state_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub(crate) fn index_of(&self, v: VariableId) -> Option<usize> {
        self.neighbors.iter().position(|n| *n == v)
    }

    /// Relinearises at `x0`, caching it. Returns whether the likelihood
    /// changed.
    pub fn linearize(&mut self, x0: DVector<f64>) -> Result<bool, GraphError> {
        let lik = self.model.linearize(&x0)?;
        if lik.dim() != self.state_dim() {
            return Err(GraphError::FactorEvaluation {
                kind: self.model.kind(),
                reason: format!(
                    "likelihood of dimension {} for a {}-dimensional state",
                    lik.dim(),
                    self.state_dim()
                ),
            });
        }
        self.linearization_point = x0;
        let changed = self.likelihood.as_ref() != Some(&lik);
        if changed {
            self.likelihood_zero = lik.is_zero();
            self.likelihood = Some(lik);
            self.stale = true;
        }
        Ok(changed)
    }

    /// Message to neighbour `target` given variable→factor messages for
    /// every neighbour (the entry at `target` is ignored).
    pub fn message_to(
        &self,
        target: usize,
        incoming: &[CanonicalGaussian],
    ) -> Result<CanonicalGaussian, GaussianError> {
        let lik = self
            .likelihood
            .as_ref()
            .expect("factor is linearised before sending messages");
        if self.neighbors.len() == 1 {
            return Ok(lik.clone());
        }
        if self.likelihood_zero {
            return Ok(CanonicalGaussian::zeros(self.dims[target]));
        }
        // Eliminate every other neighbour directly on the likelihood's
        // column-major storage.
        let total = lik.dim();
        let (ot, dt) = (self.offsets[target], self.dims[target]);
        let n = total - dt;
        let mut elim_buf = [0usize; 64];
        if n > elim_buf.len() {
            return self.message_to_dense(target, incoming);
        }
        for (slot, g) in elim_buf.iter_mut().zip((0..ot).chain(ot + dt..total)) {
            *slot = g;
        }
        let elim = &elim_buf[..n];
        let lam = lik.lambda().as_slice();
        let eta = lik.eta().as_slice();
        // Scratch: Λ_bb (n×n) then [Λ_bt | η_b] (n×(dt+1)), column-major.
        let mut scratch = vec![0.0; n * n + n * (dt + 1)];
        let (a, rhs) = scratch.split_at_mut(n * n);
        for (c, gc) in elim.iter().enumerate() {
            let src = &lam[gc * total..(gc + 1) * total];
            let dst = &mut a[c * n..(c + 1) * n];
            for (d, gr) in dst.iter_mut().zip(elim) {
                *d = src[*gr];
            }
        }
        for j in 0..dt {
            let src = &lam[(ot + j) * total..(ot + j + 1) * total];
            for (d, gr) in rhs[j * n..(j + 1) * n].iter_mut().zip(elim) {
                *d = src[*gr];
            }
        }
        for (d, gr) in rhs[dt * n..].iter_mut().zip(elim) {
            *d = eta[*gr];
        }
        for (k, msg) in incoming.iter().enumerate() {
            if k == target || msg.is_zero() {
                continue;
            }
            let (o, dk) = (self.offsets[k], self.dims[k]);
            let s0 = if o < ot { o } else { o - dt };
            let (ml, me) = (msg.lambda().as_slice(), msg.eta().as_slice());
            for c in 0..dk {
                for r in 0..dk {
                    a[(s0 + c) * n + s0 + r] += ml[c * dk + r];
                }
                rhs[dt * n + s0 + c] += me[c];
            }
        }
        if !cholesky_solve(a, n, rhs) {
            return self.message_to_dense(target, incoming);
        }
        // Λ_tb row i is Λ_bt column i, which sits in column ot + i of Λ.
        let mut out_lambda = DMatrix::zeros(dt, dt);
        let mut out_eta = DVector::zeros(dt);
        let dot = |col: &[f64], x: &[f64]| elim.iter().zip(x).map(|(g, v)| col[*g] * v).sum::<f64>();
        for i in 0..dt {
            let col = &lam[(ot + i) * total..(ot + i + 1) * total];
            out_eta[i] = eta[ot + i] - dot(col, &rhs[dt * n..]);
            for j in 0..dt {
                out_lambda[(i, j)] = col[ot + j] - dot(col, &rhs[j * n..(j + 1) * n]);
            }
        }
        Ok(CanonicalGaussian::from_parts(out_eta, out_lambda))
    }

    /// Reference path: builds the joint and marginalises it, with an LU
    /// fallback for indefinite blocks.
    fn message_to_dense(&self, target: usize, incoming: &[CanonicalGaussian]) -> Result<CanonicalGaussian, GaussianError> {
        let lik = self.likelihood.as_ref().expect("factor is linearised before sending messages");
        let mut eta = lik.eta().clone();
        let mut lambda = lik.lambda().clone();
        for (k, msg) in incoming.iter().enumerate() {
            if k == target || msg.is_zero() {
                continue;
            }
            let (o, d) = (self.offsets[k], self.dims[k]);
            eta.rows_mut(o, d).add_assign(msg.eta());
            lambda.view_mut((o, o), (d, d)).add_assign(msg.lambda());
        }
        let keep: Vec<usize> = (self.offsets[target]..self.offsets[target] + self.dims[target]).collect();
        CanonicalGaussian::from_parts(eta, lambda).marginalize(&keep)
    }



}

/// In-place Cholesky solve of `A X = B` for a small column-major `A`
/// (overwritten by its factor) and `B` with any number of columns. Returns
/// false unless `A` is numerically positive definite.
fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64]) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[k * n + j] * a[k * n + j];
        }
        if !(d > 0.0 && d.is_finite()) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[j * n + i];
            for k in 0..j {
                v -= a[k * n + i] * a[k * n + j];
            }
            a[j * n + i] = v / d;
        }
    }
    // L is stored in the lower triangle: L[i][k] = a[k * n + i].
    for col in b.chunks_exact_mut(n) {
        for i in 0..n {
            let mut v = col[i];
            for k in 0..i {
                v -= a[k * n + i] * col[k];
            }
            col[i] = v / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = col[i];
            for k in i + 1..n {
                v -= a[i * n + k] * col[k];
            }
            col[i] = v / a[i * n + i];
        }
    }
    true
}
