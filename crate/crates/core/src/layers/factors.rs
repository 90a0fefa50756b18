//! Measurement models used by the three layers.

use std::any::Any;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::factorgraph::{FactorModel, GraphError};
use crate::gaussian::CanonicalGaussian;

/// `h(x) = x` with a full observation `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub z: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl Observation {
    pub fn diagonal(z: DVector<f64>, precision: &[f64]) -> Self {
        Self {
            precision: DMatrix::from_diagonal(&DVector::from_column_slice(precision)),
            z,
        }
    }
}

impl FactorModel for Observation {
    fn kind(&self) -> &'static str {
        "observation"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
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

/// A unary factor whose likelihood is given directly in information form.
/// The precision may be singular.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedGaussian {
    likelihood: CanonicalGaussian,
    center: DVector<f64>,
}

impl FixedGaussian {
    pub fn new(likelihood: CanonicalGaussian) -> Self {
        let center = likelihood
            .lambda()
            .clone()
            .svd(true, true)
            .solve(likelihood.eta(), 1e-12)
            .unwrap_or_else(|_| DVector::zeros(likelihood.dim()));
        Self { likelihood, center }
    }

    pub fn likelihood(&self) -> &CanonicalGaussian {
        &self.likelihood
    }
}

impl FactorModel for FixedGaussian {
    fn kind(&self) -> &'static str {
        "fixed"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
    }
    fn observation(&self) -> DVector<f64> {
        self.center.clone()
    }
    fn precision(&self) -> DMatrix<f64> {
        self.likelihood.lambda().clone()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn linearize(&self, x0: &DVector<f64>) -> Result<CanonicalGaussian, GraphError> {
        if x0.len() != self.likelihood.dim() {
            return Err(GraphError::FactorEvaluation {
                kind: self.kind(),
                reason: format!("{}-dimensional prior on a {}-dimensional state", self.likelihood.dim(), x0.len()),
            });
        }
        Ok(self.likelihood.clone())
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `h(x) = x[components]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub dim: usize,
    pub components: Vec<usize>,
    pub z: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl FactorModel for Selection {
    fn kind(&self) -> &'static str {
        "selection"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.components.len(), self.components.iter().map(|c| x[*c]))
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.components.len(), self.dim);
        for (r, c) in self.components.iter().enumerate() {
            j[(r, *c)] = 1.0;
        }
        j
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

/// `h(x_a, x_b) = x_a − x_b`, observed as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Difference {
    pub dim: usize,
    pub precision: DMatrix<f64>,
}

impl Difference {
    pub fn isotropic(dim: usize, sigma: f64) -> Self {
        Self {
            dim,
            precision: DMatrix::identity(dim, dim) / (sigma * sigma),
        }
    }
}

impl FactorModel for Difference {
    fn kind(&self) -> &'static str {
        "difference"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.dim) - x.rows(self.dim, self.dim)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim, 2 * self.dim);
        for i in 0..self.dim {
            j[(i, i)] = 1.0;
            j[(i, self.dim + i)] = -1.0;
        }
        j
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

/// `h(x) = weight·(x − target)` on a 2-D goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub target: Vector2<f64>,
    pub weight: f64,
    pub sigma: f64,
}

impl FactorModel for Target {
    fn kind(&self) -> &'static str {
        "target"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.weight * (x[0] - self.target.x),
            self.weight * (x[1] - self.target.y),
        ])
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.weight
    }
    fn precision(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) / (self.sigma * self.sigma)
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Pairwise hinge on the planar positions (the first two components) of two
/// variables: `h = 1 − d/radius` while `d ≤ radius`, else 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHinge {
    /// Dimension of each endpoint.
    pub dim: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl DistanceHinge {
    fn delta(&self, x: &DVector<f64>) -> Vector2<f64> {
        Vector2::new(x[0] - x[self.dim], x[1] - x[self.dim + 1])
    }
}

impl FactorModel for DistanceHinge {
    fn kind(&self) -> &'static str {
        "hinge"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.delta(x).norm();
        DVector::from_element(1, if d <= self.radius { 1.0 - d / self.radius } else { 0.0 })
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let delta = self.delta(x);
        let mut j = DMatrix::zeros(1, 2 * self.dim);
        let d = delta.norm();
        if d > self.radius {
            return j;
        }
        let scale = -1.0 / (self.radius * d.max(1e-6 * self.radius));
        for k in 0..2 {
            j[(0, k)] = scale * delta[k];
            j[(0, self.dim + k)] = -scale * delta[k];
        }
        j
    }
    fn precision(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 / (self.sigma * self.sigma))
    }
    fn linearize(&self, x0: &DVector<f64>) -> Result<CanonicalGaussian, GraphError> {
        if x0.len() == 2 * self.dim && x0.iter().all(|v| v.is_finite()) && self.delta(x0).norm() > self.radius {
            return Ok(CanonicalGaussian::zeros(x0.len()));
        }
        crate::factorgraph::linearize_model(self, x0)
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Constant-velocity motion between consecutive `[x, y, vx, vy]` states:
/// `h = x_next − Φ(dt)·x_prev` with white-noise-acceleration precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub dt: f64,
    precision: DMatrix<f64>,
}

impl Dynamics {
    pub fn new(dt: f64, sigma: f64) -> Self {
        let q = sigma * sigma;
        let (a, b, c) = (q * dt.powi(3) / 3.0, q * dt * dt / 2.0, q * dt);
        let det = a * c - b * b;
        let (ia, ib, ic) = (c / det, -b / det, a / det);
        let mut precision = DMatrix::zeros(4, 4);
        for k in 0..2 {
            precision[(k, k)] = ia;
            precision[(k, k + 2)] = ib;
            precision[(k + 2, k)] = ib;
            precision[(k + 2, k + 2)] = ic;
        }
        Self { dt, precision }
    }

    pub fn transition(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::identity(4, 4);
        phi[(0, 2)] = self.dt;
        phi[(1, 3)] = self.dt;
        phi
    }
}

impl FactorModel for Dynamics {
    fn kind(&self) -> &'static str {
        "dynamics"
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(4, 4) - self.transition() * x.rows(0, 4)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(4, 8);
        j.view_mut((0, 0), (4, 4)).copy_from(&(-self.transition()));
        j.view_mut((0, 4), (4, 4)).fill_with_identity();
        j
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finite_difference(model: &dyn FactorModel, x: &DVector<f64>) -> DMatrix<f64> {
        let step = 1e-6;
        let rows = model.measure(x).len();
        let mut j = DMatrix::zeros(rows, x.len());
        for c in 0..x.len() {
            let (mut hi, mut lo) = (x.clone(), x.clone());
            hi[c] += step;
            lo[c] -= step;
            j.set_column(c, &((model.measure(&hi) - model.measure(&lo)) / (2.0 * step)));
        }
        j
    }

    fn assert_jacobian(model: &dyn FactorModel, x: &DVector<f64>) {
        let analytic = model.jacobian(x);
        let numeric = finite_difference(model, x);
        let err = (&analytic - &numeric).norm();
        assert!(
            err <= 1e-4 * analytic.norm().max(1.0),
            "{} at {x}: {analytic} vs {numeric}",
            model.kind()
        );
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let linear: Vec<(Box<dyn FactorModel>, usize)> = vec![
            (Box::new(Observation::diagonal(dvector![0.0, 1.0, 2.0, 3.0], &[1.0; 4])), 4),
            (
                Box::new(Selection {
                    dim: 4,
                    components: vec![2, 3],
                    z: dvector![1.0, 0.0],
                    precision: DMatrix::identity(2, 2),
                }),
                4,
            ),
            (Box::new(Difference::isotropic(4, 1.0)), 8),
            (
                Box::new(Target {
                    target: Vector2::new(3.0, -2.0),
                    weight: 0.4,
                    sigma: 0.5,
                }),
                2,
            ),
            (Box::new(Dynamics::new(0.1, 2.0)), 8),
        ];
        for (model, n) in &linear {
            for _ in 0..100 {
                assert_jacobian(model.as_ref(), &random_state(&mut rng, *n, 50.0));
            }
        }
        for dim in [2, 4] {
            let hinge = DistanceHinge {
                dim,
                radius: 10.0,
                sigma: 0.01,
            };
            let mut checked = 0;
            while checked < 100 {
                let x = random_state(&mut rng, 2 * dim, 8.0);
                let d = hinge.delta(&x).norm();
                if (d - hinge.radius).abs() < 1e-3 || d < 1e-3 {
                    continue;
                }
                assert_jacobian(&hinge, &x);
                checked += 1;
            }
        }
    }

    #[test]
    fn hinge_examples() {
        let hinge = DistanceHinge {
            dim: 2,
            radius: 10.0,
            sigma: 0.01,
        };
        assert_eq!(hinge.measure(&dvector![5.0, 0.0, 0.0, 0.0])[0], 0.5);
        let far = dvector![10.5, 0.0, 0.0, 0.0];
        assert_eq!(hinge.measure(&far)[0], 0.0);
        assert_eq!(hinge.jacobian(&far), DMatrix::zeros(1, 4));
        assert!(hinge.linearize(&far).unwrap().is_zero());
        let near = dvector![1e-9, 0.0, 0.0, 0.0];
        let j = hinge.jacobian(&near);
        assert_relative_eq!(j[(0, 0)], -1e-9 / (10.0 * 1e-5), epsilon = 1e-15);
    }

    #[test]
    fn hinge_likelihood_matches_finite_differences_at_half_radius() {
        let hinge = DistanceHinge {
            dim: 2,
            radius: 10.0,
            sigma: 0.01,
        };
        let x = dvector![3.0, 4.0, 0.0, 0.0];
        let lik = hinge.linearize(&x).unwrap();
        let j = finite_difference(&hinge, &x);
        let p = hinge.precision();
        let z = hinge.observation();
        let lambda = j.transpose() * &p * &j;
        let eta = j.transpose() * &p * (&j * &x + z - hinge.measure(&x));
        assert!((lik.lambda() - lambda).amax() <= 1e-5 * lik.lambda().amax());
        assert!((lik.eta() - eta).amax() <= 1e-5 * lik.eta().amax());
    }

    #[test]
    fn dynamics_examples() {
        let f = Dynamics::new(1.0, 2.0);
        assert_eq!(f.measure(&dvector![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), DVector::zeros(4));
        let still = Dynamics::new(0.0, 2.0);
        assert_eq!(still.transition(), DMatrix::identity(4, 4));
        let x = dvector![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(still.measure(&x), dvector![4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn dynamics_precision_inverts_process_noise() {
        let (dt, sigma) = (0.1f64, 2.0);
        let q = sigma * sigma;
        let mut cov = DMatrix::zeros(4, 4);
        for k in 0..2 {
            cov[(k, k)] = q * dt.powi(3) / 3.0;
            cov[(k, k + 2)] = q * dt * dt / 2.0;
            cov[(k + 2, k)] = q * dt * dt / 2.0;
            cov[(k + 2, k + 2)] = q * dt;
        }
        let product = Dynamics::new(dt, sigma).precision() * cov;
        assert!((product - DMatrix::identity(4, 4)).amax() < 1e-9);
    }

    #[test]
    fn zero_weight_target_sends_nothing() {
        let f = Target {
            target: Vector2::new(1.0, 1.0),
            weight: 0.0,
            sigma: 0.5,
        };
        assert!(f.linearize(&dvector![4.0, 2.0]).unwrap().is_zero());
    }

    #[test]
    fn difference_is_antisymmetric() {
        let f = Difference::isotropic(4, 1.0);
        let x = dvector![1.0, 2.0, 0.3, 0.0, 0.0, 1.0, 0.6, 1.0];
        let swapped = dvector![0.0, 1.0, 0.6, 1.0, 1.0, 2.0, 0.3, 0.0];
        assert_eq!(f.measure(&x), -f.measure(&swapped));
        let (j, js) = (f.jacobian(&x), f.jacobian(&swapped));
        assert_eq!(j.columns(0, 4), -js.columns(4, 4));
        assert_eq!(j.columns(4, 4), -js.columns(0, 4));
    }

    #[test]
    fn fixed_gaussian_returns_its_likelihood() {
        let g = CanonicalGaussian::new(dvector![1.0, 0.0], DMatrix::from_diagonal(&dvector![2.0, 0.0])).unwrap();
        let f = FixedGaussian::new(g.clone());
        assert_eq!(f.linearize(&dvector![9.0, 9.0]).unwrap(), g);
        assert_relative_eq!(f.observation()[0], 0.5, epsilon = 1e-12);
    }
}
