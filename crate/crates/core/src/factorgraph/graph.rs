use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Serialize;

use super::{Factor, FactorId, FactorModel, GraphError, Message, NodeId, Variable, VariableId};
use crate::gaussian::{CanonicalGaussian, GaussianError};

/// Counters describing what the scheduler did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub rounds: u64,
    /// Factor→variable messages replaced by zero information because the
    /// eliminated block was singular.
    pub singular_marginalizations: u64,
    pub factor_updates: u64,
    /// Factor updates skipped because none of their inputs changed.
    pub factor_skips: u64,
}

/// What a factor left behind when it was removed.
#[derive(Debug, Clone)]
pub struct RemovedFactor {
    pub neighbors: Vec<VariableId>,
    /// The last factor→variable message each neighbour had received.
    pub last_messages: Vec<CanonicalGaussian>,
}

/// A Gaussian factor graph and its synchronous GBP scheduler.
///
/// Rounds are exact with respect to a plain flooding schedule: a factor
/// whose likelihood and incoming messages are bitwise unchanged since its
/// last update is skipped, since it would resend identical messages. A
/// positive tolerance also skips factors whose incoming messages moved by
/// less than that relative amount.
#[derive(Debug, Default)]
pub struct FactorGraph {
    variables: Vec<Variable>,
    factors: BTreeMap<FactorId, Factor>,
    next_factor: u64,
    damping: f64,
    tolerance: f64,
    diagnostics: Diagnostics,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Message damping `β`: sent = (1 − β)·computed + β·previous.
    pub fn with_damping(damping: f64) -> Result<Self, GraphError> {
        let mut g = Self::new();
        g.set_damping(damping)?;
        Ok(g)
    }

    pub fn set_damping(&mut self, damping: f64) -> Result<(), GraphError> {
        if !(0.0..1.0).contains(&damping) {
            return Err(GraphError::InvalidDamping(damping));
        }
        self.damping = damping;
        Ok(())
    }

    /// Relative change in incoming messages below which a factor is not
    /// updated.
    pub fn set_tolerance(&mut self, tolerance: f64) -> Result<(), GraphError> {
        if !(0.0..1.0).contains(&tolerance) {
            return Err(GraphError::InvalidTolerance(tolerance));
        }
        self.tolerance = tolerance;
        Ok(())
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn add_variable(&mut self, initial: DVector<f64>) -> VariableId {
        self.add_owned_variable(initial, None)
    }

    /// Adds a variable tagged with the robot (or other context) owning it.
    pub fn add_owned_variable(&mut self, initial: DVector<f64>, owner: Option<usize>) -> VariableId {
        let id = VariableId(self.variables.len());
        self.variables.push(Variable::new(id, initial, owner));
        id
    }

    pub fn variable(&self, id: VariableId) -> Result<&Variable, GraphError> {
        self.variables.get(id.0).ok_or(GraphError::UnknownVariable(id))
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn factor(&self, id: FactorId) -> Result<&Factor, GraphError> {
        self.factors.get(&id).ok_or(GraphError::UnknownFactor(id))
    }

    pub fn factors(&self) -> impl Iterator<Item = &Factor> {
        self.factors.values()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn set_active(&mut self, id: VariableId, active: bool) -> Result<(), GraphError> {
        self.variables
            .get_mut(id.0)
            .ok_or(GraphError::UnknownVariable(id))?
            .active = active;
        Ok(())
    }

    /// Adds a factor over `neighbors` (in stacking order). The model is
    /// linearised immediately at the neighbours' current means, which also
    /// validates its shapes.
    pub fn add_factor(
        &mut self,
        neighbors: Vec<VariableId>,
        model: Box<dyn FactorModel>,
        inter_robot: bool,
    ) -> Result<FactorId, GraphError> {
        let mut dims = Vec::with_capacity(neighbors.len());
        for v in &neighbors {
            dims.push(self.variable(*v)?.dim);
        }
        let id = FactorId(self.next_factor);
        let mut factor = Factor::new(id, neighbors, dims, model, inter_robot);
        factor.linearize(self.stacked_mean(&factor.neighbors))?;
        self.next_factor += 1;
        for (k, v) in factor.neighbors.iter().enumerate() {
            self.variables[v.0].receive(id, CanonicalGaussian::zeros(factor.dims[k]));
        }
        self.factors.insert(id, factor);
        Ok(id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Result<RemovedFactor, GraphError> {
        let factor = self.factors.remove(&id).ok_or(GraphError::UnknownFactor(id))?;
        let last_messages = factor
            .neighbors
            .iter()
            .zip(&factor.dims)
            .map(|(v, d)| {
                self.variables[v.0]
                    .forget(id)
                    .unwrap_or_else(|| CanonicalGaussian::zeros(*d))
            })
            .collect();
        Ok(RemovedFactor {
            neighbors: factor.neighbors,
            last_messages,
        })
    }

    /// Swaps the measurement model of a factor and relinearises it.
    pub fn replace_model(&mut self, id: FactorId, model: Box<dyn FactorModel>) -> Result<(), GraphError> {
        let x0 = {
            let f = self.factor(id)?;
            self.stacked_mean(&f.neighbors)
        };
        let f = self.factors.get_mut(&id).expect("checked above");
        let previous = std::mem::replace(&mut f.model, model);
        if let Err(e) = f.linearize(x0) {
            f.model = previous;
            return Err(e);
        }
        Ok(())
    }

    /// Overwrites the factor→variable message held in a variable's inbox,
    /// e.g. to warm-start a freshly created factor.
    pub fn set_message(
        &mut self,
        factor: FactorId,
        variable: VariableId,
        payload: CanonicalGaussian,
    ) -> Result<(), GraphError> {
        let f = self.factor(factor)?;
        let k = f.index_of(variable).ok_or(GraphError::NotNeighbor { factor, variable })?;
        if payload.dim() != f.dims[k] {
            return Err(GaussianError::DimensionMismatch(f.dims[k], payload.dim()).into());
        }
        self.variables[variable.0].receive(factor, payload);
        Ok(())
    }

    /// Recomputes the belief of every variable whose inbox changed outside
    /// a round.
    pub fn refresh_beliefs(&mut self) -> Result<(), GraphError> {
        for v in self.variables.iter_mut().filter(|v| v.dirty) {
            v.update_belief();
            if !v.belief.is_finite() {
                return Err(GraphError::NonFinite {
                    variable: v.id,
                    round: self.diagnostics.rounds,
                });
            }
        }
        Ok(())
    }

    pub fn update_belief(&mut self, id: VariableId) -> Result<&CanonicalGaussian, GraphError> {
        let v = self.variables.get_mut(id.0).ok_or(GraphError::UnknownVariable(id))?;
        Ok(v.update_belief())
    }

    pub fn variable_to_factor(&self, variable: VariableId, factor: FactorId) -> Result<Message, GraphError> {
        let payload = self.variable(variable)?.message_to(factor)?;
        Ok(Message {
            from: NodeId::Variable(variable),
            to: NodeId::Factor(factor),
            payload,
        })
    }

    /// Relinearises a factor at its neighbours' current means.
    pub fn linearize(&mut self, id: FactorId) -> Result<&CanonicalGaussian, GraphError> {
        let x0 = self.stacked_mean(&self.factor(id)?.neighbors);
        let f = self.factors.get_mut(&id).expect("checked above");
        f.linearize(x0)?;
        Ok(f.likelihood.as_ref().expect("just linearised"))
    }

    /// The message `factor` would send to `variable` given the current
    /// beliefs. Singular eliminations degrade to zero information.
    pub fn factor_to_variable(&mut self, factor: FactorId, variable: VariableId) -> Result<Message, GraphError> {
        let f = self.factor(factor)?;
        let target = f.index_of(variable).ok_or(GraphError::NotNeighbor { factor, variable })?;
        let incoming = f
            .neighbors
            .iter()
            .map(|v| self.variables[v.0].message_to(factor))
            .collect::<Result<Vec<_>, _>>()?;
        let payload = match f.message_to(target, &incoming) {
            Ok(m) => m,
            Err(GaussianError::UnconstrainedMarginalization) => {
                let zero = CanonicalGaussian::zeros(f.dims[target]);
                self.diagnostics.singular_marginalizations += 1;
                zero
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Message {
            from: NodeId::Factor(factor),
            to: NodeId::Variable(variable),
            payload,
        })
    }

    /// Runs `n` synchronous rounds.
    ///
    /// Each round relinearises every factor at the current belief means,
    /// sends every factor→variable message, then updates every belief.
    /// Variable→factor messages are formed from those beliefs at the start
    /// of the next round. Inter-robot factors touching an inactive variable
    /// are frozen for the round.
    pub fn iterate(&mut self, n: usize) -> Result<(), GraphError> {
        self.refresh_beliefs()?;
        for _ in 0..n {
            self.round()?;
        }
        Ok(())
    }

    fn round(&mut self) -> Result<(), GraphError> {
        let damping = self.damping;
        let tolerance = self.tolerance;
        let variables = &mut self.variables;
        let diagnostics = &mut self.diagnostics;
        for f in self.factors.values_mut() {
            if f.inter_robot && f.neighbors.iter().any(|v| !variables[v.0].active) {
                continue;
            }
            let moved = f
                .neighbors
                .iter()
                .zip(&f.seen)
                .any(|(v, seen)| variables[v.0].version != *seen);
            if moved && (!f.model.is_linear() || f.likelihood.is_none()) {
                let x0 = stack(variables, &f.neighbors);
                f.linearize(x0)?;
            }
            let silent = damping == 0.0 && f.likelihood_zero;
            if (!moved || silent) && !f.stale {
                diagnostics.factor_skips += 1;
                continue;
            }
            let mut same = !f.stale;
            for (k, v) in f.neighbors.iter().enumerate() {
                let var = &variables[v.0];
                let slot = var.slot(f.id).map_err(|_| GraphError::NotNeighbor {
                    factor: f.id,
                    variable: *v,
                })?;
                f.seen[k] = var.version;
                same = same && var.belief.quotient_matches(&var.inbox[slot].1, &f.incoming[k], tolerance);
            }
            if same {
                diagnostics.factor_skips += 1;
                continue;
            }
            for (k, v) in f.neighbors.iter().enumerate() {
                let var = &variables[v.0];
                let slot = var.slot(f.id).expect("checked above");
                var.belief.quotient_into(&var.inbox[slot].1, &mut f.incoming[k]);
            }
            diagnostics.factor_updates += 1;
            for (k, v) in f.neighbors.iter().enumerate() {
                let mut msg = match f.message_to(k, &f.incoming) {
                    Ok(m) => m,
                    Err(GaussianError::UnconstrainedMarginalization) => {
                        diagnostics.singular_marginalizations += 1;
                        CanonicalGaussian::zeros(f.dims[k])
                    }
                    Err(e) => return Err(e.into()),
                };
                let var = &mut variables[v.0];
                if damping > 0.0 {
                    if let Some(prev) = var.message(f.id) {
                        msg = msg.damped(prev, damping)?;
                    }
                }
                var.receive(f.id, msg);
            }
            f.stale = false;
        }
        diagnostics.rounds += 1;
        let round = diagnostics.rounds;
        for v in variables.iter_mut().filter(|v| v.dirty) {
            v.update_belief();
            if !v.belief.is_finite() {
                return Err(GraphError::NonFinite { variable: v.id, round });
            }
        }
        Ok(())
    }

    /// Stacked means of `neighbors`, falling back to each variable's stored
    /// linearisation point while its belief is uninformative.
    pub fn stacked_mean(&self, neighbors: &[VariableId]) -> DVector<f64> {
        stack(&self.variables, neighbors)
    }

    /// `Σ ½ (z − h(X))ᵀ Λ (z − h(X))` over all factors, evaluated at the
    /// current means.
    pub fn energy(&self) -> f64 {
        self.factors
            .values()
            .map(|f| {
                let x = self.stacked_mean(&f.neighbors);
                let r = f.model.observation() - f.model.measure(&x);
                0.5 * r.dot(&(f.model.precision() * &r))
            })
            .sum()
    }
}

fn stack(variables: &[Variable], neighbors: &[VariableId]) -> DVector<f64> {
    let total = neighbors.iter().map(|v| variables[v.0].dim).sum();
    let mut x = DVector::zeros(total);
    let mut o = 0;
    for v in neighbors {
        let var = &variables[v.0];
        x.rows_mut(o, var.dim).copy_from(var.mean());
        o += var.dim;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::super::LinearFactor;
    use super::*;
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn scalar_graph() -> (FactorGraph, VariableId, VariableId) {
        let mut g = FactorGraph::new();
        let a = g.add_variable(dvector![0.0]);
        let b = g.add_variable(dvector![0.0]);
        (g, a, b)
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let (mut g, a, _) = scalar_graph();
        g.add_factor(vec![a], Box::new(LinearFactor::prior(&[1.0], 1.0)), false)
            .unwrap();
        g.iterate(0).unwrap();
        assert!(g.variable(a).unwrap().belief().is_zero());
        assert_eq!(g.diagnostics().rounds, 0);
    }

    #[test]
    fn chain_is_exact_after_two_rounds() {
        // Dense oracle: minimise (a-1)² + 4(b-3)² + 2(a-b)².
        let (mut g, a, b) = scalar_graph();
        g.add_factor(vec![a], Box::new(LinearFactor::prior(&[1.0], 2.0)), false)
            .unwrap();
        g.add_factor(vec![b], Box::new(LinearFactor::prior(&[3.0], 8.0)), false)
            .unwrap();
        g.add_factor(vec![a, b], Box::new(LinearFactor::relative(1, &[0.0], 4.0)), false)
            .unwrap();
        g.iterate(2).unwrap();
        let lambda = dmatrix![6.0, -4.0; -4.0, 12.0];
        let mu = lambda.lu().solve(&dvector![2.0, 24.0]).unwrap();
        assert!((g.variable(a).unwrap().mean()[0] - mu[0]).abs() < 1e-12);
        assert!((g.variable(b).unwrap().mean()[0] - mu[1]).abs() < 1e-12);
    }

    #[test]
    fn unary_message_is_the_likelihood() {
        let (mut g, a, _) = scalar_graph();
        let f = g
            .add_factor(vec![a], Box::new(LinearFactor::prior(&[0.5], 3.0)), false)
            .unwrap();
        let m = g.factor_to_variable(f, a).unwrap();
        assert_eq!(&m.payload, g.factor(f).unwrap().likelihood().unwrap());
    }

    #[test]
    fn relative_factor_message_matches_dense_marginal() {
        // x2 carries N(0.6, 1); the factor x1 - x2 ~ N(0, 1) gives x1 ~ N(0.6, 2).
        let (mut g, a, b) = scalar_graph();
        g.add_factor(vec![b], Box::new(LinearFactor::prior(&[0.6], 1.0)), false)
            .unwrap();
        let f = g
            .add_factor(vec![a, b], Box::new(LinearFactor::relative(1, &[0.0], 1.0)), false)
            .unwrap();
        g.iterate(1).unwrap();
        let m = g.factor_to_variable(f, a).unwrap();
        let (mu, sigma) = m.payload.to_moments().unwrap();
        assert!((mu[0] - 0.6).abs() < 1e-12);
        assert!((sigma[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unanchored_relative_factor_sends_nothing() {
        let (mut g, a, b) = scalar_graph();
        let f = g
            .add_factor(vec![a, b], Box::new(LinearFactor::relative(1, &[0.0], 1.0)), false)
            .unwrap();
        let m = g.factor_to_variable(f, a).unwrap();
        assert!(m.payload.is_zero());
    }

    #[test]
    fn three_factor_exclusion_matches_brute_force() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(dvector![0.0, 0.0]);
        let mut ids = Vec::new();
        for (i, m) in [[1.0, -1.0], [0.5, 2.0], [-3.0, 0.25]].iter().enumerate() {
            let model = LinearFactor {
                a: DMatrix::identity(2, 2),
                z: dvector![m[0], m[1]],
                precision: dmatrix![2.0 + i as f64, 0.3; 0.3, 1.0 + i as f64],
            };
            ids.push(g.add_factor(vec![v], Box::new(model), false).unwrap());
        }
        g.iterate(1).unwrap();
        for (i, f) in ids.iter().enumerate() {
            let msg = g.variable_to_factor(v, *f).unwrap().payload;
            let mut brute = CanonicalGaussian::zeros(2);
            for (j, other) in ids.iter().enumerate() {
                if i != j {
                    brute = brute
                        .product(g.factor(*other).unwrap().likelihood().unwrap())
                        .unwrap();
                }
            }
            for (x, y) in msg.eta().iter().zip(brute.eta().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in msg.lambda().iter().zip(brute.lambda().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_ids_are_errors() {
        let (mut g, a, b) = scalar_graph();
        assert!(matches!(
            g.variable_to_factor(a, FactorId(42)),
            Err(GraphError::NotNeighbor { .. })
        ));
        assert!(matches!(g.factor(FactorId(42)), Err(GraphError::UnknownFactor(_))));
        assert!(g.add_factor(vec![VariableId(9)], Box::new(LinearFactor::prior(&[0.0], 1.0)), false).is_err());
        let f = g.add_factor(vec![a], Box::new(LinearFactor::prior(&[0.0], 1.0)), false).unwrap();
        assert!(matches!(g.factor_to_variable(f, b), Err(GraphError::NotNeighbor { .. })));
    }

    #[test]
    fn mismatched_model_shape_is_rejected() {
        let (mut g, a, _) = scalar_graph();
        let err = g
            .add_factor(vec![a], Box::new(LinearFactor::prior(&[0.0, 0.0], 1.0)), false)
            .unwrap_err();
        assert!(matches!(err, GraphError::FactorEvaluation { .. }));
    }

    #[test]
    fn removal_returns_last_messages_and_restores_beliefs() {
        let (mut g, a, b) = scalar_graph();
        g.add_factor(vec![a], Box::new(LinearFactor::prior(&[1.0], 1.0)), false)
            .unwrap();
        let f = g
            .add_factor(vec![a, b], Box::new(LinearFactor::relative(1, &[0.0], 1.0)), true)
            .unwrap();
        g.iterate(3).unwrap();
        assert!(g.variable(b).unwrap().is_informative());
        let removed = g.remove_factor(f).unwrap();
        assert_eq!(removed.neighbors, vec![a, b]);
        assert!(!removed.last_messages[1].is_zero());
        g.refresh_beliefs().unwrap();
        assert!(g.variable(b).unwrap().belief().is_zero());
        assert_eq!(g.factor_count(), 1);
    }

    #[test]
    fn inactive_variables_freeze_inter_robot_factors() {
        let (mut g, a, b) = scalar_graph();
        g.add_factor(vec![a], Box::new(LinearFactor::prior(&[1.0], 1.0)), false)
            .unwrap();
        g.add_factor(vec![a, b], Box::new(LinearFactor::relative(1, &[0.0], 1.0)), true)
            .unwrap();
        g.set_active(b, false).unwrap();
        g.iterate(5).unwrap();
        assert!(g.variable(b).unwrap().belief().is_zero());
        g.set_active(b, true).unwrap();
        g.iterate(2).unwrap();
        assert!((g.variable(b).unwrap().mean()[0] - 1.0).abs() < 1e-12);
        // Freezing keeps what was received.
        g.set_active(a, false).unwrap();
        g.iterate(2).unwrap();
        assert!((g.variable(b).unwrap().mean()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn damping_validated() {
        assert!(FactorGraph::with_damping(1.0).is_err());
        assert!(FactorGraph::with_damping(-0.1).is_err());
        assert!(FactorGraph::with_damping(0.5).is_ok());
    }

    #[test]
    fn damped_loop_still_converges() {
        let mut g = FactorGraph::with_damping(0.4).unwrap();
        let vs: Vec<_> = (0..4).map(|_| g.add_variable(dvector![0.0])).collect();
        g.add_factor(vec![vs[0]], Box::new(LinearFactor::prior(&[2.0], 1.0)), false)
            .unwrap();
        for i in 0..4 {
            g.add_factor(
                vec![vs[i], vs[(i + 1) % 4]],
                Box::new(LinearFactor::relative(1, &[0.5], 1.0)),
                false,
            )
            .unwrap();
        }
        g.iterate(300).unwrap();
        // Dense oracle for the same energy.
        let mut lambda = DMatrix::zeros(4, 4);
        let mut eta = DVector::zeros(4);
        lambda[(0, 0)] += 1.0;
        eta[0] += 2.0;
        for i in 0..4 {
            let j = (i + 1) % 4;
            lambda[(i, i)] += 1.0;
            lambda[(j, j)] += 1.0;
            lambda[(i, j)] -= 1.0;
            lambda[(j, i)] -= 1.0;
            eta[i] += 0.5;
            eta[j] -= 0.5;
        }
        let mu: DVector<f64> = lambda.lu().solve(&eta).unwrap();
        for (i, v) in vs.iter().enumerate() {
            assert!((g.variable(*v).unwrap().mean()[0] - mu[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn skipping_is_invisible() {
        // Identical graphs, one forced to recompute by touching every factor.
        let build = || {
            let mut g = FactorGraph::new();
            let vs: Vec<_> = (0..3).map(|_| g.add_variable(dvector![0.0])).collect();
            g.add_factor(vec![vs[0]], Box::new(LinearFactor::prior(&[1.0], 1.0)), false)
                .unwrap();
            g.add_factor(vec![vs[0], vs[1]], Box::new(LinearFactor::relative(1, &[1.0], 1.0)), false)
                .unwrap();
            g.add_factor(vec![vs[1], vs[2]], Box::new(LinearFactor::relative(1, &[1.0], 1.0)), false)
                .unwrap();
            (g, vs)
        };
        let (mut g, vs) = build();
        g.iterate(20).unwrap();
        assert!(g.diagnostics().factor_skips > 0);
        let (mut h, _) = build();
        for _ in 0..20 {
            for f in h.factors.values_mut() {
                f.stale = true;
                f.seen.iter_mut().for_each(|s| *s = u64::MAX);
            }
            h.iterate(1).unwrap();
        }
        for v in vs {
            assert_eq!(g.variable(v).unwrap().belief(), h.variable(v).unwrap().belief());
        }
    }
}
