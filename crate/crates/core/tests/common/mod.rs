//! Shared fixtures: random linear Gaussian problems and their dense solution.
#![allow(dead_code)]

use gbpstack::factorgraph::{FactorGraph, LinearFactor, VariableId};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub struct LinearProblem {
    pub dims: Vec<usize>,
    pub factors: Vec<(Vec<usize>, LinearFactor)>,
}

impl LinearProblem {
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut o = 0;
        for d in &self.dims {
            out.push(o);
            o += d;
        }
        out
    }

    pub fn build(&self) -> (FactorGraph, Vec<VariableId>) {
        let mut g = FactorGraph::new();
        let ids: Vec<_> = self.dims.iter().map(|d| g.add_variable(DVector::zeros(*d))).collect();
        for (vars, model) in &self.factors {
            g.add_factor(vars.iter().map(|v| ids[*v]).collect(), Box::new(model.clone()), false)
                .unwrap();
        }
        (g, ids)
    }

    /// Scatters every factor into one information form.
    pub fn joint(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n: usize = self.dims.iter().sum();
        let offsets = self.offsets();
        let mut eta = DVector::zeros(n);
        let mut lambda = DMatrix::zeros(n, n);
        for (vars, f) in &self.factors {
            let at = f.a.transpose() * &f.precision;
            let local_eta = &at * &f.z;
            let local_lambda = &at * &f.a;
            let mut lo = Vec::new();
            for v in vars {
                lo.extend(offsets[*v]..offsets[*v] + self.dims[*v]);
            }
            for (i, gi) in lo.iter().enumerate() {
                eta[*gi] += local_eta[i];
                for (j, gj) in lo.iter().enumerate() {
                    lambda[(*gi, *gj)] += local_lambda[(i, j)];
                }
            }
        }
        (eta, lambda)
    }

    pub fn dense_mean(&self) -> DVector<f64> {
        let (eta, lambda) = self.joint();
        lambda.cholesky().expect("joint is positive definite").solve(&eta)
    }

    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let offsets = self.offsets();
        self.factors
            .iter()
            .map(|(vars, f)| {
                let mut local = Vec::new();
                for v in vars {
                    local.extend(x.rows(offsets[*v], self.dims[*v]).iter().copied());
                }
                let r = &f.z - &f.a * DVector::from_vec(local);
                0.5 * r.dot(&(&f.precision * &r))
            })
            .sum()
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.dims.len()];
        for (vars, _) in &self.factors {
            if let [a, b] = vars[..] {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        adj
    }

    /// Variables on the longest shortest path.
    pub fn diameter(&self) -> usize {
        let adj = self.neighbours();
        let n = self.dims.len();
        (0..n)
            .map(|s| {
                let mut depth = vec![usize::MAX; n];
                depth[s] = 1;
                let mut queue = std::collections::VecDeque::from([s]);
                let mut far = 1;
                while let Some(u) = queue.pop_front() {
                    far = far.max(depth[u]);
                    for &w in &adj[u] {
                        if depth[w] == usize::MAX {
                            depth[w] = depth[u] + 1;
                            queue.push_back(w);
                        }
                    }
                }
                far
            })
            .max()
            .unwrap_or(0)
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_spd<R: Rng>(rng: &mut R, dim: usize, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, dim, dim);
    &a * a.transpose() + DMatrix::identity(dim, dim) * floor
}

fn random_vector<R: Rng>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.gen_range(-5.0..5.0))
}

/// Random tree with mixed variable dimensions, a unary prior on every
/// variable and a general linear pairwise factor on every edge.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize, max_dim: usize) -> LinearProblem {
    let dims: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=max_dim)).collect();
    let mut factors = Vec::new();
    for (v, d) in dims.iter().enumerate() {
        factors.push((
            vec![v],
            LinearFactor {
                a: DMatrix::identity(*d, *d),
                z: random_vector(rng, *d),
                precision: random_spd(rng, *d, 0.1),
            },
        ));
    }
    for v in 1..n {
        let parent = rng.gen_range(0..v);
        let rows = rng.gen_range(1..=max_dim);
        let (dv, dp) = (dims[v], dims[parent]);
        factors.push((
            vec![v, parent],
            LinearFactor {
                a: random_matrix(rng, rows, dv + dp),
                z: random_vector(rng, rows),
                precision: random_spd(rng, rows, 0.1),
            },
        ));
    }
    LinearProblem { dims, factors }
}

/// Random loopy graph of equal-dimension variables joined by relative
/// factors, with priors strong enough to keep the joint diagonally dominant.
pub fn random_loopy<R: Rng>(rng: &mut R, n: usize, dim: usize, extra_edges: usize) -> LinearProblem {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|v| (v, (v + 1) % n)).collect();
    let target = edges.len() + extra_edges.min(n * (n - 1) / 2 - edges.len());
    while edges.len() < target {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    let mut coupling = vec![0.0; n];
    let mut factors = Vec::new();
    for &(a, b) in &edges {
        let c = rng.gen_range(0.2..2.0);
        coupling[a] += c;
        coupling[b] += c;
        let offset: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        factors.push((vec![a, b], LinearFactor::relative(dim, &offset, c)));
    }
    for (v, c) in coupling.iter().enumerate() {
        factors.push((
            vec![v],
            LinearFactor {
                a: DMatrix::identity(dim, dim),
                z: random_vector(rng, dim),
                precision: random_spd(rng, dim, 0.0) * 0.1 + DMatrix::identity(dim, dim) * (*c),
            },
        ));
    }
    LinearProblem {
        dims: vec![dim; n],
        factors,
    }
}

pub fn stacked_means(g: &FactorGraph, ids: &[VariableId]) -> DVector<f64> {
    g.stacked_mean(ids)
}
