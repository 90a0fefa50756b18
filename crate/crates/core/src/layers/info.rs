//! Information layer: every robot's copy of the field, one `[x, y, ψ, ζ]`
//! variable per region, joined across robots by consensus factors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};

use super::factors::{Difference, FixedGaussian, Observation};
use super::LayerError;
use crate::environment::Sample;
use crate::factorgraph::{FactorGraph, FactorId, VariableId};
use crate::gaussian::CanonicalGaussian;

pub const STATE_DIM: usize = 4;
pub const PSI: usize = 2;
pub const ZETA: usize = 3;

/// Precision of known quantities: region positions and the coverage flag.
pub const CERTAIN: f64 = 1e10;
/// Precision of the initial signal and coverage guesses.
pub const PRIOR_PRECISION: f64 = 1e-6;
/// ζ above which a region counts as visited.
pub const VISITED: f64 = 0.5;
/// Smallest sensor standard deviation used to form a precision.
pub const MIN_SIGMA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoParams {
    pub sigma_psi: f64,
    pub sigma_c: f64,
}

/// Running statistics behind one robot's sensor factor on a region.
#[derive(Debug, Clone, Copy)]
struct SensorTrack {
    factor: FactorId,
    count: u32,
    sum: f64,
}

#[derive(Debug, Clone)]
struct RobotInfo {
    vars: Vec<VariableId>,
    anchors: Vec<FactorId>,
    sensors: Vec<Option<SensorTrack>>,
    /// Last messages of dissolved consensus factors, by region then peer.
    memory: Vec<BTreeMap<usize, CanonicalGaussian>>,
}

/// Belief means of one robot's information layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoSnapshot {
    pub psi: Vec<f64>,
    pub zeta: Vec<f64>,
}

#[derive(Debug)]
pub struct InfoLayer {
    graph: FactorGraph,
    params: InfoParams,
    centers: Vec<Vector2<f64>>,
    robots: Vec<RobotInfo>,
    /// Consensus factors per robot pair `(low, high)`, indexed by region.
    consensus: BTreeMap<(usize, usize), Vec<Option<FactorId>>>,
}

fn base_prior(center: Vector2<f64>) -> CanonicalGaussian {
    let mean = DVector::from_column_slice(&[center.x, center.y, 1.0, 0.0]);
    let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&[
        CERTAIN,
        CERTAIN,
        PRIOR_PRECISION,
        PRIOR_PRECISION,
    ]));
    let eta = &lambda * mean;
    CanonicalGaussian::new(eta, lambda).expect("square")
}

fn pair(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl InfoLayer {
    pub fn new(robots: usize, centers: &[Vector2<f64>], params: InfoParams) -> Result<Self, LayerError> {
        let mut graph = FactorGraph::new();
        let mut stacks = Vec::with_capacity(robots);
        for r in 0..robots {
            let mut vars = Vec::with_capacity(centers.len());
            let mut anchors = Vec::with_capacity(centers.len());
            for c in centers {
                let v = graph.add_owned_variable(DVector::from_column_slice(&[c.x, c.y, 1.0, 0.0]), Some(r));
                anchors.push(graph.add_factor(vec![v], Box::new(FixedGaussian::new(base_prior(*c))), false)?);
                vars.push(v);
            }
            stacks.push(RobotInfo {
                vars,
                anchors,
                sensors: vec![None; centers.len()],
                memory: vec![BTreeMap::new(); centers.len()],
            });
        }
        Ok(Self {
            graph,
            params,
            centers: centers.to_vec(),
            robots: stacks,
            consensus: BTreeMap::new(),
        })
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn set_damping(&mut self, damping: f64) -> Result<(), LayerError> {
        Ok(self.graph.set_damping(damping)?)
    }

    pub fn set_tolerance(&mut self, tolerance: f64) -> Result<(), LayerError> {
        Ok(self.graph.set_tolerance(tolerance)?)
    }

    pub fn robot_count(&self) -> usize {
        self.robots.len()
    }

    pub fn region_count(&self) -> usize {
        self.centers.len()
    }

    pub fn variable(&self, robot: usize, region: usize) -> VariableId {
        self.robots[robot].vars[region]
    }

    fn check(&self, robot: usize, region: usize) -> Result<(), LayerError> {
        if robot >= self.robots.len() {
            return Err(LayerError::UnknownRobot(robot));
        }
        if region >= self.centers.len() {
            return Err(LayerError::UnknownRegion(region));
        }
        Ok(())
    }

    /// Folds a reading into the robot's sensor factor for that region.
    ///
    /// Readings of a region are fused: the factor observes their running
    /// mean with precision `n / σ_ψ²`.
    pub fn observe(&mut self, robot: usize, sample: &Sample) -> Result<(), LayerError> {
        self.check(robot, sample.region)?;
        let sigma = self.params.sigma_psi.max(MIN_SIGMA);
        let var = self.robots[robot].vars[sample.region];
        let track = self.robots[robot].sensors[sample.region];
        let (count, sum) = match track {
            Some(t) => (t.count + 1, t.sum + sample.psi),
            None => (1, sample.psi),
        };
        let model = Observation::diagonal(
            DVector::from_column_slice(&[sample.position.x, sample.position.y, sum / f64::from(count), 1.0]),
            &[CERTAIN, CERTAIN, f64::from(count) / (sigma * sigma), CERTAIN],
        );
        let factor = match track {
            Some(t) => {
                self.graph.replace_model(t.factor, Box::new(model))?;
                t.factor
            }
            None => self.graph.add_factor(vec![var], Box::new(model), false)?,
        };
        self.robots[robot].sensors[sample.region] = Some(SensorTrack { factor, count, sum });
        Ok(())
    }

    pub fn sensor_factor(&self, robot: usize, region: usize) -> Option<FactorId> {
        self.robots[robot].sensors[region].map(|t| t.factor)
    }

    pub fn readings(&self, robot: usize, region: usize) -> u32 {
        self.robots[robot].sensors[region].map_or(0, |t| t.count)
    }

    /// Marks the robot's region variables within `radius` of `pos` as taking
    /// part in inter-robot messaging; `enabled = false` silences them all.
    pub fn set_activation(&mut self, robot: usize, pos: Vector2<f64>, radius: f64, enabled: bool) -> Result<(), LayerError> {
        self.check(robot, 0)?;
        let r2 = radius * radius;
        for (m, c) in self.centers.iter().enumerate() {
            let active = enabled && (c - pos).norm_squared() <= r2;
            self.graph.set_active(self.robots[robot].vars[m], active)?;
        }
        Ok(())
    }

    pub fn is_active(&self, robot: usize, region: usize) -> bool {
        self.graph
            .variable(self.robots[robot].vars[region])
            .map(|v| v.is_active())
            .unwrap_or(false)
    }

    fn rebuild_anchor(&mut self, robot: usize, region: usize) -> Result<(), LayerError> {
        let mut prior = base_prior(self.centers[region]);
        for msg in self.robots[robot].memory[region].values() {
            prior.accumulate(msg)?;
        }
        let anchor = self.robots[robot].anchors[region];
        self.graph.replace_model(anchor, Box::new(FixedGaussian::new(prior)))?;
        Ok(())
    }

    /// Adds consensus factors between `a` and `b` for every region active on
    /// both sides that is not yet linked. A factor that replaces a
    /// remembered one starts from the remembered messages.
    pub fn link(&mut self, a: usize, b: usize) -> Result<usize, LayerError> {
        self.check(a, 0)?;
        self.check(b, 0)?;
        if a == b {
            return Err(LayerError::SelfLink(a));
        }
        let (lo, hi) = pair(a, b);
        let regions = self.centers.len();
        let mut created = 0;
        for m in 0..regions {
            let linked = self.consensus.get(&(lo, hi)).is_some_and(|f| f[m].is_some());
            if linked || !self.is_active(lo, m) || !self.is_active(hi, m) {
                continue;
            }
            let (vl, vh) = (self.robots[lo].vars[m], self.robots[hi].vars[m]);
            let f = self.graph.add_factor(
                vec![vl, vh],
                Box::new(Difference::isotropic(STATE_DIM, self.params.sigma_c)),
                true,
            )?;
            for (me, peer, v) in [(lo, hi, vl), (hi, lo, vh)] {
                if let Some(msg) = self.robots[me].memory[m].remove(&peer) {
                    self.rebuild_anchor(me, m)?;
                    self.graph.set_message(f, v, msg)?;
                }
            }
            self.consensus.entry((lo, hi)).or_insert_with(|| vec![None; regions])[m] = Some(f);
            created += 1;
        }
        Ok(created)
    }

    /// Removes every consensus factor between `a` and `b`. Each side keeps
    /// the factor's last message in its region prior when that message
    /// carried knowledge of a visit.
    pub fn unlink(&mut self, a: usize, b: usize) -> Result<usize, LayerError> {
        let (lo, hi) = pair(a, b);
        let Some(factors) = self.consensus.remove(&(lo, hi)) else {
            return Ok(0);
        };
        let mut removed = 0;
        for (m, f) in factors.into_iter().enumerate() {
            let Some(f) = f else { continue };
            let gone = self.graph.remove_factor(f)?;
            for (k, (me, peer)) in [(lo, hi), (hi, lo)].into_iter().enumerate() {
                let msg = &gone.last_messages[k];
                let informative = msg.to_moments().is_ok_and(|(mu, _)| mu[ZETA] > VISITED);
                if informative {
                    self.robots[me].memory[m].insert(peer, msg.clone());
                    self.rebuild_anchor(me, m)?;
                }
            }
            removed += 1;
        }
        Ok(removed)
    }

    pub fn links(&self, a: usize, b: usize) -> Vec<(usize, FactorId)> {
        self.consensus
            .get(&pair(a, b))
            .map(|fs| fs.iter().enumerate().filter_map(|(m, f)| f.map(|f| (m, f))).collect())
            .unwrap_or_default()
    }

    pub fn linked_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.consensus.keys().copied()
    }

    pub fn remembered(&self, robot: usize, region: usize) -> usize {
        self.robots[robot].memory[region].len()
    }

    pub fn iterate(&mut self, rounds: usize) -> Result<(), LayerError> {
        Ok(self.graph.iterate(rounds)?)
    }

    pub fn mean(&self, robot: usize, region: usize) -> &DVector<f64> {
        self.graph
            .variable(self.robots[robot].vars[region])
            .expect("layer variables exist")
            .mean()
    }

    pub fn psi(&self, robot: usize, region: usize) -> f64 {
        self.mean(robot, region)[PSI]
    }

    pub fn zeta(&self, robot: usize, region: usize) -> f64 {
        self.mean(robot, region)[ZETA]
    }

    pub fn snapshot(&self, robot: usize) -> InfoSnapshot {
        let (psi, zeta) = (0..self.centers.len())
            .map(|m| {
                let x = self.mean(robot, m);
                (x[PSI], x[ZETA])
            })
            .unzip();
        InfoSnapshot { psi, zeta }
    }
}
