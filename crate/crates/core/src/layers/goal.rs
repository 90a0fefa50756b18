//! Goal layer: one planar goal per robot, pulled towards the best known
//! region and the nearest unexplored one, and pushed away from neighbours'
//! goals.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector2};
use rand::Rng;

use super::factors::{DistanceHinge, Target};
use super::info::{InfoSnapshot, VISITED};
use super::LayerError;
use crate::factorgraph::{FactorGraph, FactorId, VariableId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalParams {
    pub sigma_signal: f64,
    pub sigma_explore: f64,
    pub sigma_diversity: f64,
    /// Goals closer than this repel each other.
    pub diversity_radius: f64,
    /// A random exploration target is kept until the robot is this close.
    pub reach: f64,
    /// Side length of the square environment.
    pub side: f64,
}

/// Region with the lowest signal belief and the pull weight `1 − ψ`,
/// clamped to `[0, 1]`. Ties go to the lowest index.
pub fn signal_target(snapshot: &InfoSnapshot) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (m, psi) in snapshot.psi.iter().enumerate() {
        if best.is_none_or(|(_, b)| *psi < b) {
            best = Some((m, *psi));
        }
    }
    best.map(|(m, psi)| (m, (1.0 - psi).clamp(0.0, 1.0)))
}

/// Nearest region to `position` among those not yet visited. Ties go to
/// the lowest index.
pub fn exploration_target(snapshot: &InfoSnapshot, centers: &[Vector2<f64>], position: Vector2<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (m, zeta) in snapshot.zeta.iter().enumerate() {
        if *zeta >= VISITED {
            continue;
        }
        let d = (centers[m] - position).norm_squared();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((m, d));
        }
    }
    best.map(|(m, _)| m)
}

#[derive(Debug, Clone)]
struct RobotGoal {
    var: VariableId,
    signal: FactorId,
    explore: FactorId,
    /// Random target drawn once every region is visited.
    wander: Option<usize>,
    pinned: Option<Vector2<f64>>,
    active: bool,
}

#[derive(Debug)]
pub struct GoalLayer {
    graph: FactorGraph,
    params: GoalParams,
    robots: Vec<RobotGoal>,
    diversity: BTreeMap<(usize, usize), FactorId>,
}

impl GoalLayer {
    pub fn new(positions: &[Vector2<f64>], params: GoalParams) -> Result<Self, LayerError> {
        let mut graph = FactorGraph::new();
        let mut robots = Vec::with_capacity(positions.len());
        for (r, p) in positions.iter().enumerate() {
            let var = graph.add_owned_variable(DVector::from_column_slice(p.as_slice()), Some(r));
            let signal = graph.add_factor(
                vec![var],
                Box::new(Target {
                    target: *p,
                    weight: 0.0,
                    sigma: params.sigma_signal,
                }),
                false,
            )?;
            let explore = graph.add_factor(
                vec![var],
                Box::new(Target {
                    target: *p,
                    weight: 1.0,
                    sigma: params.sigma_explore,
                }),
                false,
            )?;
            robots.push(RobotGoal {
                var,
                signal,
                explore,
                wander: None,
                pinned: None,
                active: true,
            });
        }
        Ok(Self {
            graph,
            params,
            robots,
            diversity: BTreeMap::new(),
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

    pub fn variable(&self, robot: usize) -> VariableId {
        self.robots[robot].var
    }

    fn robot(&self, robot: usize) -> Result<&RobotGoal, LayerError> {
        self.robots.get(robot).ok_or(LayerError::UnknownRobot(robot))
    }

    /// Fixes the robot's goal target, overriding the information layer.
    pub fn pin(&mut self, robot: usize, target: Option<Vector2<f64>>) -> Result<(), LayerError> {
        self.robot(robot)?;
        self.robots[robot].pinned = target;
        if let Some(t) = target {
            self.set_targets(robot, t, 0.0, t)?;
        }
        Ok(())
    }

    fn set_targets(
        &mut self,
        robot: usize,
        signal: Vector2<f64>,
        weight: f64,
        explore: Vector2<f64>,
    ) -> Result<(), LayerError> {
        let RobotGoal {
            signal: fs, explore: fe, ..
        } = self.robots[robot];
        let (sigma_signal, sigma_explore) = (self.params.sigma_signal, self.params.sigma_explore);
        self.graph.replace_model(
            fs,
            Box::new(Target {
                target: signal,
                weight,
                sigma: sigma_signal,
            }),
        )?;
        self.graph.replace_model(
            fe,
            Box::new(Target {
                target: explore,
                weight: 1.0,
                sigma: sigma_explore,
            }),
        )?;
        Ok(())
    }

    /// Retargets the signal and exploration factors from the robot's latest
    /// information snapshot and position. Returns the exploration region.
    pub fn refresh<R: Rng>(
        &mut self,
        robot: usize,
        snapshot: &InfoSnapshot,
        centers: &[Vector2<f64>],
        position: Vector2<f64>,
        rng: &mut R,
    ) -> Result<Option<usize>, LayerError> {
        let state = self.robot(robot)?.clone();
        if state.pinned.is_some() {
            return Ok(None);
        }
        let (best, weight) = signal_target(snapshot).ok_or(LayerError::UnknownRegion(0))?;
        let explore = match exploration_target(snapshot, centers, position) {
            Some(m) => {
                self.robots[robot].wander = None;
                m
            }
            None => {
                let keep = state
                    .wander
                    .filter(|m| (centers[*m] - position).norm() > self.params.reach);
                let m = keep.unwrap_or_else(|| rng.gen_range(0..centers.len()));
                self.robots[robot].wander = Some(m);
                m
            }
        };
        self.set_targets(robot, centers[best], weight, centers[explore])?;
        Ok(Some(explore))
    }

    pub fn set_active(&mut self, robot: usize, active: bool) -> Result<(), LayerError> {
        let var = self.robot(robot)?.var;
        self.robots[robot].active = active;
        Ok(self.graph.set_active(var, active)?)
    }

    /// Adds the goal-diversity factor between two robots if missing.
    pub fn link(&mut self, a: usize, b: usize) -> Result<bool, LayerError> {
        if a == b {
            return Err(LayerError::SelfLink(a));
        }
        let key = (a.min(b), a.max(b));
        if self.diversity.contains_key(&key) {
            return Ok(false);
        }
        let (va, vb) = (self.robot(key.0)?.var, self.robot(key.1)?.var);
        let f = self.graph.add_factor(
            vec![va, vb],
            Box::new(DistanceHinge {
                dim: 2,
                radius: self.params.diversity_radius,
                sigma: self.params.sigma_diversity,
            }),
            true,
        )?;
        self.diversity.insert(key, f);
        Ok(true)
    }

    pub fn unlink(&mut self, a: usize, b: usize) -> Result<bool, LayerError> {
        match self.diversity.remove(&(a.min(b), a.max(b))) {
            Some(f) => {
                self.graph.remove_factor(f)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn link_count(&self, robot: usize) -> usize {
        self.diversity.keys().filter(|(a, b)| *a == robot || *b == robot).count()
    }

    pub fn linked_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.diversity.keys().copied()
    }

    pub fn iterate(&mut self, rounds: usize) -> Result<(), LayerError> {
        Ok(self.graph.iterate(rounds)?)
    }

    /// Goal belief mean projected into the environment.
    pub fn goal(&self, robot: usize) -> Vector2<f64> {
        let x = self.graph.variable(self.robots[robot].var).expect("goal exists").mean();
        let side = self.params.side;
        Vector2::new(x[0].clamp(0.0, side), x[1].clamp(0.0, side))
    }
}
