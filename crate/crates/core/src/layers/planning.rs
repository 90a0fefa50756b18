//! Planning layer: a short horizon of `[x, y, vx, vy]` states per robot,
//! chained by constant-velocity dynamics, anchored at the current pose and
//! steered by a velocity prior on the last state.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};

use super::factors::{DistanceHinge, Dynamics, Observation, Selection};
use super::LayerError;
use crate::factorgraph::{FactorGraph, FactorId, VariableId};

/// Precision pinning the first state to the robot's pose.
pub const POSE_PRECISION: f64 = 1e8;
/// Precision of the velocity prior on the last state.
pub const HORIZON_PRECISION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanParams {
    /// States along the horizon, including the current one.
    pub states: usize,
    pub dt: f64,
    pub sigma_dynamics: f64,
    pub max_speed: f64,
    /// Distance below which the collision factor engages.
    pub safety_distance: f64,
    pub sigma_collision: f64,
}

#[derive(Debug, Clone)]
struct RobotPlan {
    vars: Vec<VariableId>,
    anchor: FactorId,
    horizon: FactorId,
}

#[derive(Debug)]
pub struct PlanningLayer {
    graph: FactorGraph,
    params: PlanParams,
    robots: Vec<RobotPlan>,
    collisions: BTreeMap<(usize, usize), Vec<FactorId>>,
}

/// Velocity of magnitude `max_speed` from `from` towards `goal`, or zero
/// once they coincide.
pub fn horizon_velocity(from: Vector2<f64>, goal: Vector2<f64>, max_speed: f64) -> Vector2<f64> {
    let d = goal - from;
    let n = d.norm();
    if n < 1e-6 {
        Vector2::zeros()
    } else {
        d * (max_speed / n)
    }
}

fn pose_anchor(state: &Vector4<f64>) -> Observation {
    Observation::diagonal(DVector::from_column_slice(state.as_slice()), &[POSE_PRECISION; 4])
}

fn velocity_prior(v: Vector2<f64>) -> Selection {
    Selection {
        dim: 4,
        components: vec![2, 3],
        z: DVector::from_column_slice(v.as_slice()),
        precision: DMatrix::identity(2, 2) * HORIZON_PRECISION,
    }
}

impl PlanningLayer {
    /// `states` are initial `[x, y, vx, vy]` poses, one per robot.
    pub fn new(poses: &[Vector4<f64>], params: PlanParams) -> Result<Self, LayerError> {
        let mut graph = FactorGraph::new();
        let mut robots = Vec::with_capacity(poses.len());
        let dynamics = Dynamics::new(params.dt, params.sigma_dynamics);
        for (r, pose) in poses.iter().enumerate() {
            let vars: Vec<VariableId> = (0..params.states)
                .map(|k| {
                    let t = k as f64 * params.dt;
                    let x = Vector4::new(pose.x + t * pose.z, pose.y + t * pose.w, pose.z, pose.w);
                    graph.add_owned_variable(DVector::from_column_slice(x.as_slice()), Some(r))
                })
                .collect();
            let anchor = graph.add_factor(vec![vars[0]], Box::new(pose_anchor(pose)), false)?;
            for w in vars.windows(2) {
                graph.add_factor(w.to_vec(), Box::new(dynamics.clone()), false)?;
            }
            let last = *vars.last().expect("at least one state");
            let horizon = graph.add_factor(vec![last], Box::new(velocity_prior(Vector2::new(pose.z, pose.w))), false)?;
            robots.push(RobotPlan { vars, anchor, horizon });
        }
        Ok(Self {
            graph,
            params,
            robots,
            collisions: BTreeMap::new(),
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

    pub fn params(&self) -> &PlanParams {
        &self.params
    }

    fn robot(&self, robot: usize) -> Result<&RobotPlan, LayerError> {
        self.robots.get(robot).ok_or(LayerError::UnknownRobot(robot))
    }

    pub fn variables(&self, robot: usize) -> &[VariableId] {
        &self.robots[robot].vars
    }

    pub fn state(&self, robot: usize, index: usize) -> Vector4<f64> {
        let x = self
            .graph
            .variable(self.robots[robot].vars[index])
            .expect("plan variable exists")
            .mean();
        Vector4::new(x[0], x[1], x[2], x[3])
    }

    /// Points the last state's velocity prior at `goal`.
    pub fn steer(&mut self, robot: usize, goal: Vector2<f64>) -> Result<Vector2<f64>, LayerError> {
        let horizon = self.robot(robot)?.horizon;
        let last = self.state(robot, self.params.states - 1);
        let v = horizon_velocity(Vector2::new(last.x, last.y), goal, self.params.max_speed);
        self.graph.replace_model(horizon, Box::new(velocity_prior(v)))?;
        Ok(v)
    }

    /// Re-anchors the first state at the robot's new pose.
    pub fn anchor(&mut self, robot: usize, pose: &Vector4<f64>) -> Result<(), LayerError> {
        let anchor = self.robot(robot)?.anchor;
        Ok(self.graph.replace_model(anchor, Box::new(pose_anchor(pose)))?)
    }

    /// Velocity planned for the next state, capped at the maximum speed.
    pub fn next_velocity(&self, robot: usize) -> Vector2<f64> {
        let next = self.state(robot, 1.min(self.params.states - 1));
        let v = Vector2::new(next.z, next.w);
        let speed = v.norm();
        if speed > self.params.max_speed {
            v * (self.params.max_speed / speed)
        } else {
            v
        }
    }

    /// Adds collision factors between same-time future states of `a` and `b`.
    pub fn link(&mut self, a: usize, b: usize) -> Result<bool, LayerError> {
        if a == b {
            return Err(LayerError::SelfLink(a));
        }
        let key = (a.min(b), a.max(b));
        if self.collisions.contains_key(&key) {
            return Ok(false);
        }
        let (va, vb) = (self.robot(key.0)?.vars.clone(), self.robot(key.1)?.vars.clone());
        let hinge = DistanceHinge {
            dim: 4,
            radius: self.params.safety_distance,
            sigma: self.params.sigma_collision,
        };
        let mut factors = Vec::with_capacity(va.len().saturating_sub(1));
        for k in 1..va.len() {
            factors.push(self.graph.add_factor(vec![va[k], vb[k]], Box::new(hinge.clone()), true)?);
        }
        self.collisions.insert(key, factors);
        Ok(true)
    }

    pub fn unlink(&mut self, a: usize, b: usize) -> Result<bool, LayerError> {
        match self.collisions.remove(&(a.min(b), a.max(b))) {
            Some(fs) => {
                for f in fs {
                    self.graph.remove_factor(f)?;
                }
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn linked_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.collisions.keys().copied()
    }

    pub fn link_factors(&self, a: usize, b: usize) -> &[FactorId] {
        self.collisions.get(&(a.min(b), a.max(b))).map_or(&[], |v| v.as_slice())
    }

    pub fn iterate(&mut self, rounds: usize) -> Result<(), LayerError> {
        Ok(self.graph.iterate(rounds)?)
    }
}
