//! The world loop: neighbour discovery, inter-robot factor lifecycle,
//! sensing, layer iteration and pose integration for the whole fleet.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{Vector2, Vector4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{EnvironmentError, FieldParams, SignalField};
use crate::factorgraph::{FactorGraph, GraphError};
use crate::layers::goal::{GoalLayer, GoalParams};
use crate::layers::info::{InfoLayer, InfoParams, InfoSnapshot};
use crate::layers::planning::{PlanParams, PlanningLayer};
use crate::layers::LayerError;
use crate::metrics::{self, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Packed on a grid in the corner at the origin.
    Corner,
    /// Uniform, collision-free positions.
    Random,
}

/// What a robot loses in a step where its communication fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// No measurement and no information/goal messaging.
    Blind,
    /// No information/goal messaging; the robot still measures.
    Silent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_r: usize,
    /// Side length of the square environment, m.
    pub d: f64,
    /// Region width, m.
    pub r_d: f64,
    pub r_c: f64,
    pub r_s: f64,
    pub r_r: f64,
    pub v_max: f64,
    pub dt: f64,
    /// Information and goal layer period, s.
    pub t_c_info_goal: f64,
    /// Planning horizon, s.
    pub t_h: f64,
    pub n_i: usize,
    pub alpha: f64,
    pub failure_mode: FailureMode,
    pub sigma_psi: f64,
    pub sigma_c: f64,
    pub sigma_i: f64,
    pub sigma_e: f64,
    pub sigma_g: f64,
    pub sigma_d: f64,
    pub sigma_r: f64,
    /// Collision distance as a multiple of the robot diameter.
    pub c_safety: f64,
    pub damping: f64,
    /// Relative message change below which GBP factors are not updated.
    pub tolerance: f64,
    pub psi_star: f64,
    /// Regenerate the field until it contains a region at or below ψ*.
    pub require_source: bool,
    pub octaves: usize,
    pub persistence: f64,
    pub lacunarity: f64,
    pub frequency: Option<f64>,
    pub init: Init,
    pub t_max: f64,
    /// Trajectory log period, s.
    pub log_interval: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_r: 10,
            d: 100.0,
            r_d: 10.0,
            r_c: 40.0,
            r_s: 10.0,
            r_r: 1.0,
            v_max: 5.0,
            dt: 0.1,
            t_c_info_goal: 1.0,
            t_h: 1.0,
            n_i: 5,
            alpha: 0.0,
            failure_mode: FailureMode::Blind,
            sigma_psi: 0.01,
            sigma_c: 1.0,
            sigma_i: 0.5,
            sigma_e: 0.1,
            sigma_g: 0.01,
            sigma_d: 2.0,
            sigma_r: 0.01,
            c_safety: 2.2,
            damping: 0.0,
            tolerance: 1e-6,
            psi_star: metrics::PSI_STAR,
            require_source: false,
            octaves: 4,
            persistence: 0.5,
            lacunarity: 2.0,
            frequency: None,
            init: Init::Corner,
            t_max: 1000.0,
            log_interval: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field} must be {requirement}, got {value}")]
    Invalid {
        field: &'static str,
        requirement: &'static str,
        value: String,
    },
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error("could not place {0} robots without overlap")]
    Crowded(usize),
}

fn steps_of(period: f64, dt: f64) -> Option<usize> {
    let n = (period / dt).round();
    ((n - period / dt).abs() < 1e-6 && n >= 1.0).then_some(n as usize)
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &'static str, requirement: &'static str, value: impl ToString) -> ConfigError {
            ConfigError::Invalid {
                field,
                requirement,
                value: value.to_string(),
            }
        }
        if self.n_r == 0 {
            return Err(bad("n_r", "at least 1", self.n_r));
        }
        for (field, v) in [
            ("d", self.d),
            ("r_d", self.r_d),
            ("r_c", self.r_c),
            ("r_s", self.r_s),
            ("r_r", self.r_r),
            ("v_max", self.v_max),
            ("dt", self.dt),
            ("t_c_info_goal", self.t_c_info_goal),
            ("t_h", self.t_h),
            ("sigma_c", self.sigma_c),
            ("sigma_i", self.sigma_i),
            ("sigma_e", self.sigma_e),
            ("sigma_g", self.sigma_g),
            ("sigma_d", self.sigma_d),
            ("sigma_r", self.sigma_r),
            ("c_safety", self.c_safety),
            ("t_max", self.t_max),
            ("log_interval", self.log_interval),
            ("persistence", self.persistence),
            ("lacunarity", self.lacunarity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(field, "positive and finite", v));
            }
        }
        if !(self.sigma_psi >= 0.0 && self.sigma_psi.is_finite()) {
            return Err(bad("sigma_psi", "non-negative", self.sigma_psi));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(bad("alpha", "within [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(bad("damping", "within [0, 1)", self.damping));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(bad("tolerance", "within [0, 1)", self.tolerance));
        }
        if !(self.psi_star > 0.0 && self.psi_star < 1.0) {
            return Err(bad("psi_star", "within (0, 1)", self.psi_star));
        }
        if let Some(f) = self.frequency {
            if !(f > 0.0 && f.is_finite()) {
                return Err(bad("frequency", "positive and finite", f));
            }
        }
        if self.octaves == 0 || self.octaves > 32 {
            return Err(bad("octaves", "between 1 and 32", self.octaves));
        }
        for (field, v) in [
            ("t_c_info_goal", self.t_c_info_goal),
            ("t_h", self.t_h),
            ("log_interval", self.log_interval),
        ] {
            if steps_of(v, self.dt).is_none() {
                return Err(bad(field, "a whole number of timesteps", v));
            }
        }
        let regions = self.d / self.r_d;
        if (regions - regions.round()).abs() > 1e-9 * regions.max(1.0) {
            return Err(EnvironmentError::NotDivisible { d: self.d, r_d: self.r_d }.into());
        }
        if 2.0 * self.r_r >= self.d {
            return Err(bad("r_r", "smaller than half the environment", self.r_r));
        }
        Ok(())
    }

    pub fn field_params(&self) -> FieldParams {
        FieldParams {
            octaves: self.octaves,
            persistence: self.persistence,
            lacunarity: self.lacunarity,
            frequency: self.frequency,
        }
    }

    pub fn safety_distance(&self) -> f64 {
        2.0 * self.r_r * self.c_safety
    }

    pub fn cadence(&self) -> usize {
        steps_of(self.t_c_info_goal, self.dt).expect("validated")
    }

    pub fn horizon_states(&self) -> usize {
        steps_of(self.t_h, self.dt).expect("validated") + 1
    }

    pub fn total_steps(&self) -> u64 {
        (self.t_max / self.dt).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Information,
    Goal,
    Planning,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("non-finite belief for robot {robot:?} in the {layer:?} layer at step {step}, round {round}")]
    NumericalAbort {
        robot: Option<usize>,
        layer: Layer,
        step: u64,
        round: u64,
    },
    #[error("{layer:?} layer: {source}")]
    Layer { layer: Layer, source: LayerError },
}

/// Per-stream seeds derived from the run seed.
mod stream {
    pub const INIT: u64 = 1;
    pub const FAILURE: u64 = 2;
    pub const ROBOTS: u64 = 16;
}

#[derive(Debug, Clone)]
pub struct Robot {
    pub id: usize,
    /// `[x, y, vx, vy]`.
    pub pose: Vector4<f64>,
    pub connected: BTreeSet<usize>,
    pub failed: bool,
    rng: ChaCha8Rng,
}

impl Robot {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.pose.x, self.pose.y)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.pose.z, self.pose.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub robot: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub coverage: f64,
    pub rms_psi: f64,
    pub done: bool,
}

/// Extremes over every simulated step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Safety {
    pub min_distance: f64,
    pub max_speed: f64,
}

pub fn corner_positions(n: usize, r_r: f64, side: f64) -> Result<Vec<Vector2<f64>>, ConfigError> {
    let spacing = 4.0 * r_r;
    let per_row = (n as f64).sqrt().ceil() as usize;
    let positions: Vec<_> = (0..n)
        .map(|i| Vector2::new(2.0 * r_r + (i % per_row) as f64 * spacing, 2.0 * r_r + (i / per_row) as f64 * spacing))
        .collect();
    if positions.iter().any(|p| p.x > side - r_r || p.y > side - r_r) {
        return Err(ConfigError::Crowded(n));
    }
    Ok(positions)
}

pub fn random_positions<R: Rng>(n: usize, r_r: f64, clearance: f64, side: f64, rng: &mut R) -> Result<Vec<Vector2<f64>>, ConfigError> {
    let mut out: Vec<Vector2<f64>> = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > 10_000 * n {
            return Err(ConfigError::Crowded(n));
        }
        let p = Vector2::new(rng.gen_range(r_r..side - r_r), rng.gen_range(r_r..side - r_r));
        if out.iter().all(|q| (p - q).norm() > clearance) {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct World {
    config: WorldConfig,
    field: SignalField,
    info: InfoLayer,
    goal: GoalLayer,
    plan: PlanningLayer,
    robots: Vec<Robot>,
    failure_rng: ChaCha8Rng,
    step: u64,
    safety: Safety,
    metrics: Vec<MetricsRow>,
    trajectory: Vec<TrajectoryRow>,
}

fn abort(layer: Layer, step: u64, graph: &FactorGraph, error: LayerError) -> SimError {
    match error {
        LayerError::Graph(GraphError::NonFinite { variable, round }) => SimError::NumericalAbort {
            robot: graph.variable(variable).ok().and_then(|v| v.owner()),
            layer,
            step,
            round,
        },
        source => SimError::Layer { layer, source },
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, SimError> {
        config.validate()?;
        let params = config.field_params();
        let field = if config.require_source {
            SignalField::generate_with_source(config.seed, config.d, config.r_d, &params, config.psi_star)
        } else {
            SignalField::generate(config.seed, config.d, config.r_d, &params)
        }
        .map_err(ConfigError::from)?;
        Self::with_field(config, field)
    }

    /// Builds a world over a given field, e.g. one read from a grid file.
    pub fn with_field(config: WorldConfig, field: SignalField) -> Result<Self, SimError> {
        config.validate()?;
        if (field.side() - config.d).abs() > 1e-9 || (field.region_width() - config.r_d).abs() > 1e-9 {
            return Err(ConfigError::Invalid {
                field: "d",
                requirement: "equal to the field's side and region width",
                value: format!("{} / {}", config.d, config.r_d),
            }
            .into());
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(stream::INIT);
        let positions = match config.init {
            Init::Corner => corner_positions(config.n_r, config.r_r, config.d)?,
            Init::Random => random_positions(config.n_r, config.r_r, config.safety_distance(), config.d, &mut init_rng)?,
        };
        Self::with_positions(config, field, &positions)
    }

    /// Builds a world with robots at rest at `positions`.
    pub fn with_positions(config: WorldConfig, field: SignalField, positions: &[Vector2<f64>]) -> Result<Self, SimError> {
        config.validate()?;
        let mut config = config;
        config.n_r = positions.len();
        let wrap = |layer| move |source| SimError::Layer { layer, source };
        let info = InfoLayer::new(
            positions.len(),
            field.centers(),
            InfoParams {
                sigma_psi: config.sigma_psi,
                sigma_c: config.sigma_c,
            },
        )
        .map_err(wrap(Layer::Information))?;
        let goal = GoalLayer::new(
            positions,
            GoalParams {
                sigma_signal: config.sigma_i,
                sigma_explore: config.sigma_e,
                sigma_diversity: config.sigma_g,
                diversity_radius: config.r_d,
                reach: config.r_s,
                side: config.d,
            },
        )
        .map_err(wrap(Layer::Goal))?;
        let poses: Vec<Vector4<f64>> = positions.iter().map(|p| Vector4::new(p.x, p.y, 0.0, 0.0)).collect();
        let plan = PlanningLayer::new(
            &poses,
            PlanParams {
                states: config.horizon_states(),
                dt: config.dt,
                sigma_dynamics: config.sigma_d,
                max_speed: config.v_max,
                safety_distance: config.safety_distance(),
                sigma_collision: config.sigma_r,
            },
        )
        .map_err(wrap(Layer::Planning))?;
        let robots = poses
            .iter()
            .enumerate()
            .map(|(id, pose)| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(stream::ROBOTS + id as u64);
                Robot {
                    id,
                    pose: *pose,
                    connected: BTreeSet::new(),
                    failed: false,
                    rng,
                }
            })
            .collect();
        let mut failure_rng = ChaCha8Rng::seed_from_u64(config.seed);
        failure_rng.set_stream(stream::FAILURE);
        let mut world = Self {
            field,
            info,
            goal,
            plan,
            robots,
            failure_rng,
            step: 0,
            safety: Safety {
                min_distance: f64::INFINITY,
                max_speed: 0.0,
            },
            metrics: Vec::new(),
            trajectory: Vec::new(),
            config,
        };
        world.configure_graphs()?;
        let neighbours = world.discover();
        world.sync(&neighbours)?;
        world.track_safety();
        Ok(world)
    }

    fn configure_graphs(&mut self) -> Result<(), SimError> {
        let (d, t) = (self.config.damping, self.config.tolerance);
        let wrap = |layer| move |source| SimError::Layer { layer, source };
        self.info.set_damping(d).map_err(wrap(Layer::Information))?;
        self.info.set_tolerance(t).map_err(wrap(Layer::Information))?;
        self.goal.set_damping(d).map_err(wrap(Layer::Goal))?;
        self.goal.set_tolerance(t).map_err(wrap(Layer::Goal))?;
        self.plan.set_damping(d).map_err(wrap(Layer::Planning))?;
        self.plan.set_tolerance(t).map_err(wrap(Layer::Planning))
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn field(&self) -> &SignalField {
        &self.field
    }

    pub fn info(&self) -> &InfoLayer {
        &self.info
    }

    pub fn goals(&self) -> &GoalLayer {
        &self.goal
    }

    pub fn planning(&self) -> &PlanningLayer {
        &self.plan
    }

    pub fn robots(&self) -> &[Robot] {
        &self.robots
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Simulated time at the start of the next step, s.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    pub fn safety(&self) -> Safety {
        self.safety
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    pub fn goal(&self, robot: usize) -> Vector2<f64> {
        self.goal.goal(robot)
    }

    /// Fixes a robot's goal target (or releases it with `None`).
    pub fn pin_goal(&mut self, robot: usize, target: Option<Vector2<f64>>) -> Result<(), SimError> {
        self.goal
            .pin(robot, target)
            .map_err(|source| SimError::Layer { layer: Layer::Goal, source })
    }

    /// Teleports a robot to `position` at rest.
    pub fn place(&mut self, robot: usize, position: Vector2<f64>) -> Result<(), SimError> {
        let pose = Vector4::new(position.x, position.y, 0.0, 0.0);
        self.robots[robot].pose = pose;
        self.plan
            .anchor(robot, &pose)
            .map_err(|source| SimError::Layer { layer: Layer::Planning, source })
    }

    pub fn snapshots(&self) -> Vec<InfoSnapshot> {
        (0..self.robots.len()).map(|r| self.info.snapshot(r)).collect()
    }

    pub fn current_metrics(&self) -> MetricsRow {
        metrics::row(self.time(), &self.snapshots(), self.field.truth(), self.config.psi_star)
    }

    /// Robots within communication range of each robot.
    pub fn discover(&self) -> Vec<BTreeSet<usize>> {
        let r_c = self.config.r_c;
        let n = self.robots.len();
        let mut out = vec![BTreeSet::new(); n];
        for a in 0..n {
            for b in a + 1..n {
                if (self.robots[a].position() - self.robots[b].position()).norm() < r_c {
                    out[a].insert(b);
                    out[b].insert(a);
                }
            }
        }
        out
    }

    /// Draws this step's failed robots.
    pub fn draw_failures(&mut self) -> BTreeSet<usize> {
        let n = self.robots.len();
        let k = ((self.config.alpha * n as f64) + 1e-9).floor() as usize;
        index::sample(&mut self.failure_rng, n, k.min(n)).into_iter().collect()
    }

    fn sync(&mut self, neighbours: &[BTreeSet<usize>]) -> Result<(), SimError> {
        for a in 0..self.robots.len() {
            let gone: Vec<usize> = self.robots[a].connected.difference(&neighbours[a]).copied().collect();
            let new: Vec<usize> = neighbours[a].difference(&self.robots[a].connected).copied().collect();
            for b in gone.into_iter().filter(|b| *b > a) {
                self.info
                    .unlink(a, b)
                    .map_err(|source| SimError::Layer { layer: Layer::Information, source })?;
                self.goal
                    .unlink(a, b)
                    .map_err(|source| SimError::Layer { layer: Layer::Goal, source })?;
                self.plan
                    .unlink(a, b)
                    .map_err(|source| SimError::Layer { layer: Layer::Planning, source })?;
            }
            for b in new.into_iter().filter(|b| *b > a) {
                self.goal
                    .link(a, b)
                    .map_err(|source| SimError::Layer { layer: Layer::Goal, source })?;
                self.plan
                    .link(a, b)
                    .map_err(|source| SimError::Layer { layer: Layer::Planning, source })?;
            }
        }
        for (robot, n) in self.robots.iter_mut().zip(neighbours) {
            robot.connected = n.clone();
        }
        Ok(())
    }

    fn tick(&mut self) -> Result<(), SimError> {
        let step = self.step;
        let n = self.robots.len();
        for r in 0..n {
            let robot = &mut self.robots[r];
            let (pos, failed) = (robot.position(), robot.failed);
            if !(failed && self.config.failure_mode == FailureMode::Blind) {
                let samples = self.field.sample(pos, self.config.r_s, self.config.sigma_psi, &mut robot.rng);
                for s in &samples {
                    self.info
                        .observe(r, s)
                        .map_err(|source| SimError::Layer { layer: Layer::Information, source })?;
                }
            }
            self.info
                .set_activation(r, pos, self.config.r_c, !failed)
                .map_err(|source| SimError::Layer { layer: Layer::Information, source })?;
            self.goal
                .set_active(r, !failed)
                .map_err(|source| SimError::Layer { layer: Layer::Goal, source })?;
        }
        for a in 0..n {
            let peers: Vec<usize> = self.robots[a].connected.range(a + 1..).copied().collect();
            for b in peers {
                self.info
                    .link(a, b)
                    .map_err(|source| SimError::Layer { layer: Layer::Information, source })?;
            }
        }
        let rounds = self.config.n_i;
        if let Err(e) = self.info.iterate(rounds) {
            return Err(abort(Layer::Information, step, self.info.graph(), e));
        }
        for r in 0..n {
            let snapshot = self.info.snapshot(r);
            let robot = &mut self.robots[r];
            self.goal
                .refresh(r, &snapshot, self.field.centers(), robot.position(), &mut robot.rng)
                .map_err(|source| SimError::Layer { layer: Layer::Goal, source })?;
        }
        if let Err(e) = self.goal.iterate(rounds) {
            return Err(abort(Layer::Goal, step, self.goal.graph(), e));
        }
        let row = self.current_metrics();
        self.metrics.push(row);
        Ok(())
    }

    /// Advances the world by one timestep. Connectivity and inter-robot
    /// factors are brought up to date after the move, so they always match
    /// the current positions between steps.
    pub fn step(&mut self) -> Result<(), SimError> {
        let step = self.step;
        let failed = self.draw_failures();
        for robot in &mut self.robots {
            robot.failed = failed.contains(&robot.id);
        }
        if step % self.config.cadence() as u64 == 0 {
            self.tick()?;
        }
        for r in 0..self.robots.len() {
            let goal = self.goal.goal(r);
            self.plan
                .steer(r, goal)
                .map_err(|source| SimError::Layer { layer: Layer::Planning, source })?;
        }
        if let Err(e) = self.plan.iterate(self.config.n_i) {
            return Err(abort(Layer::Planning, step, self.plan.graph(), e));
        }
        let log_every = steps_of(self.config.log_interval, self.config.dt).expect("validated") as u64;
        if step % log_every == 0 {
            self.log_trajectory();
        }
        let dt = self.config.dt;
        for r in 0..self.robots.len() {
            let v = self.plan.next_velocity(r);
            let robot = &mut self.robots[r];
            let p = robot.position() + v * dt;
            robot.pose = Vector4::new(p.x, p.y, v.x, v.y);
            let pose = robot.pose;
            self.plan
                .anchor(r, &pose)
                .map_err(|source| SimError::Layer { layer: Layer::Planning, source })?;
        }
        self.step += 1;
        let neighbours = self.discover();
        self.sync(&neighbours)?;
        self.track_safety();
        Ok(())
    }

    fn track_safety(&mut self) {
        let n = self.robots.len();
        for a in 0..n {
            self.safety.max_speed = self.safety.max_speed.max(self.robots[a].velocity().norm());
            for b in a + 1..n {
                let d = (self.robots[a].position() - self.robots[b].position()).norm();
                self.safety.min_distance = self.safety.min_distance.min(d);
            }
        }
    }

    fn log_trajectory(&mut self) {
        let t = self.time();
        for r in 0..self.robots.len() {
            let snapshot = self.info.snapshot(r);
            let robot = &self.robots[r];
            let goal = self.goal.goal(r);
            self.trajectory.push(TrajectoryRow {
                t,
                robot: r,
                x: robot.pose.x,
                y: robot.pose.y,
                vx: robot.pose.z,
                vy: robot.pose.w,
                goal_x: goal.x,
                goal_y: goal.y,
                coverage: metrics::robot_coverage(&snapshot),
                rms_psi: metrics::robot_rms_psi(&snapshot, self.field.truth()),
                done: metrics::robot_done(&snapshot, self.config.psi_star),
            });
        }
    }

    /// Steps until `stop` holds after an information tick, or `t_max`.
    /// Returns whether `stop` fired.
    pub fn run_until(&mut self, mut stop: impl FnMut(&MetricsRow) -> bool) -> Result<bool, SimError> {
        let total = self.config.total_steps();
        while self.step < total {
            let before = self.metrics.len();
            self.step()?;
            if self.metrics.len() > before && stop(self.metrics.last().expect("just pushed")) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Checks that inter-robot factors only join robots in range, that
    /// connectivity is symmetric and that every connected pair is linked.
    pub fn audit(&self) -> Result<(), String> {
        let r_c = self.config.r_c;
        let in_range = |a: usize, b: usize| (self.robots[a].position() - self.robots[b].position()).norm() < r_c;
        let connected = |a: usize, b: usize| self.robots[a].connected.contains(&b) && self.robots[b].connected.contains(&a);
        for (a, robot) in self.robots.iter().enumerate() {
            for b in &robot.connected {
                if !self.robots[*b].connected.contains(&a) {
                    return Err(format!("connectivity of {a} and {b} is asymmetric"));
                }
            }
        }
        let mut pairs = BTreeSet::new();
        for (layer, list) in [
            ("information", self.info.linked_pairs().collect::<Vec<_>>()),
            ("goal", self.goal.linked_pairs().collect()),
            ("planning", self.plan.linked_pairs().collect()),
        ] {
            for (a, b) in list {
                if !connected(a, b) {
                    return Err(format!("{layer} factor joins unconnected robots {a} and {b}"));
                }
                if !in_range(a, b) {
                    return Err(format!("{layer} factor joins robots {a} and {b} out of range"));
                }
                if layer != "information" {
                    pairs.insert((layer, a, b));
                }
            }
        }
        for (a, robot) in self.robots.iter().enumerate() {
            for b in robot.connected.range(a + 1..) {
                for layer in ["goal", "planning"] {
                    if !pairs.contains(&(layer, a, *b)) {
                        return Err(format!("{layer} factor missing between {a} and {b}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("t,coverage,rms_psi,done_robots,done\n");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{:.1},{:.6},{:.6},{},{}",
                m.t, m.coverage, m.rms_psi, m.done_robots, u8::from(m.done)
            );
        }
        out
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("t,robot,x,y,vx,vy,goal_x,goal_y,coverage,rms_psi,done\n");
        for r in &self.trajectory {
            let _ = writeln!(
                out,
                "{:.1},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.t, r.robot, r.x, r.y, r.vx, r.vy, r.goal_x, r.goal_y, r.coverage, r.rms_psi, u8::from(r.done)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use std::ops::AddAssign;

    fn field(side: f64, value: f64) -> SignalField {
        SignalField::uniform(side, 10.0, value).unwrap()
    }

    fn world(config: WorldConfig, positions: &[(f64, f64)]) -> World {
        let positions: Vec<_> = positions.iter().map(|(x, y)| Vector2::new(*x, *y)).collect();
        let side = config.d;
        World::with_positions(config, field(side, 0.5), &positions).unwrap()
    }

    #[test]
    fn defaults_validate() {
        WorldConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let cases = [
            WorldConfig { n_r: 0, ..Default::default() },
            WorldConfig { r_c: 0.0, ..Default::default() },
            WorldConfig { alpha: 1.5, ..Default::default() },
            WorldConfig { alpha: -0.1, ..Default::default() },
            WorldConfig { r_d: 30.0, ..Default::default() },
            WorldConfig { t_c_info_goal: 0.25, ..Default::default() },
            WorldConfig { damping: 1.0, ..Default::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
            assert!(matches!(World::new(c), Err(SimError::Config(_))));
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<WorldConfig>(r#"{"n_r": 3, "speed": 2}"#).is_err());
        let c: WorldConfig = serde_json::from_str(r#"{"n_r": 3, "init": "random"}"#).unwrap();
        assert_eq!((c.n_r, c.init, c.r_c), (3, Init::Random, 40.0));
    }

    #[test]
    fn discovery_uses_strict_range() {
        let cfg = WorldConfig { r_c: 40.0, ..Default::default() };
        let w = world(cfg.clone(), &[(10.0, 10.0), (49.0, 10.0), (89.5, 10.0)]);
        let n = w.discover();
        assert_eq!(n[0], BTreeSet::from([1]));
        assert_eq!(n[1], BTreeSet::new().into_iter().chain([0]).collect());
        assert!(n[2].is_empty());

        let w = world(cfg.clone(), &[(50.0, 50.0)]);
        assert!(w.discover()[0].is_empty());

        let w = world(cfg, &[(50.0, 50.0); 4]);
        assert!(w.discover().iter().all(|s| s.len() == 3));
    }

    #[test]
    fn failed_set_has_floor_size_and_fair_frequency() {
        let positions: Vec<(f64, f64)> = (0..20).map(|i| (5.0 + 4.0 * i as f64, 50.0)).collect();
        for (alpha, size) in [(0.0, 0), (1.0, 20), (0.5, 10), (0.33, 6)] {
            let mut w = world(WorldConfig { alpha, ..Default::default() }, &positions);
            assert_eq!(w.draw_failures().len(), size);
        }
        let mut w = world(WorldConfig { alpha: 0.5, ..Default::default() }, &positions);
        let steps = 10_000;
        let mut counts = [0u32; 20];
        for _ in 0..steps {
            let failed = w.draw_failures();
            assert_eq!(failed.len(), 10);
            for r in failed {
                counts[r] += 1;
            }
        }
        let sd = (steps as f64 * 0.25).sqrt();
        for c in counts {
            assert!((c as f64 - steps as f64 * 0.5).abs() < 5.0 * sd, "{c}");
        }
    }

    #[test]
    fn lone_robot_reaches_pinned_goal_within_kinematic_bound() {
        let cfg = WorldConfig { n_r: 1, ..Default::default() };
        let mut w = world(cfg.clone(), &[(2.0, 2.0)]);
        let goal = Vector2::new(80.0, 60.0);
        w.pin_goal(0, Some(goal)).unwrap();
        let bound = (goal - Vector2::new(2.0, 2.0)).norm() / cfg.v_max + 2.0;
        let mut arrived = None;
        while w.time() < bound + 5.0 {
            w.step().unwrap();
            assert!(w.robots()[0].velocity().norm() <= cfg.v_max + 1e-6);
            if arrived.is_none() && (w.robots()[0].position() - goal).norm() < 0.5 {
                arrived = Some(w.time());
            }
        }
        let t = arrived.expect("robot never reached its goal");
        assert!(t <= bound, "arrived at {t}, bound {bound}");
    }

    #[test]
    fn full_failure_blind_cuts_sensing_and_messaging_but_not_collisions() {
        let cfg = WorldConfig { alpha: 1.0, n_r: 3, ..Default::default() };
        let mut w = world(cfg, &[(20.0, 20.0), (24.0, 20.0), (20.0, 24.0)]);
        let mut flowing = false;
        for _ in 0..35 {
            w.step().unwrap();
            for r in 0..3 {
                for m in 0..w.info().region_count() {
                    assert!(w.info().sensor_factor(r, m).is_none());
                }
            }
            assert_eq!(w.info().linked_pairs().count(), 0);
            let goal = w.goals().graph();
            for f in goal.factors().filter(|f| f.is_inter_robot()) {
                for v in f.neighbors() {
                    let msg = goal.variable(*v).unwrap().message(f.id());
                    assert!(msg.map_or(true, |m| m.is_zero()));
                }
            }
            let plan = w.planning().graph();
            flowing |= plan.factors().filter(|f| f.is_inter_robot()).any(|f| {
                f.neighbors()
                    .iter()
                    .any(|v| plan.variable(*v).unwrap().message(f.id()).is_some_and(|m| !m.is_zero()))
            });
        }
        assert!(flowing);
    }

    #[test]
    fn stationary_pair_reaches_dense_consensus() {
        let cfg = WorldConfig { n_r: 2, sigma_psi: 0.05, seed: 4, ..Default::default() };
        let positions = [Vector2::new(40.0, 45.0), Vector2::new(50.0, 45.0)];
        let f = SignalField::generate(4, 100.0, 10.0, &cfg.field_params()).unwrap();
        let mut w = World::with_positions(cfg, f, &positions).unwrap();
        for (r, p) in positions.iter().enumerate() {
            w.pin_goal(r, Some(*p)).unwrap();
        }
        for _ in 0..21 {
            w.step().unwrap();
        }
        let info = w.info();
        let mut checked = 0;
        for m in 0..info.region_count() {
            if info.readings(0, m) == 0 || info.readings(1, m) == 0 {
                continue;
            }
            let vars = [info.variable(0, m), info.variable(1, m)];
            let g = info.graph();
            let mut eta = DVector::zeros(8);
            let mut lambda = DMatrix::zeros(8, 8);
            for fac in g.factors() {
                let idx: Vec<usize> = fac.neighbors().iter().map(|v| vars.iter().position(|x| x == v)).collect::<Option<_>>().unwrap_or_default();
                if idx.len() != fac.neighbors().len() || idx.is_empty() {
                    continue;
                }
                let lik = fac.likelihood().unwrap();
                for (a, ia) in idx.iter().enumerate() {
                    eta.rows_mut(4 * ia, 4).add_assign(&lik.eta().rows(4 * a, 4));
                    for (b, ib) in idx.iter().enumerate() {
                        lambda.view_mut((4 * ia, 4 * ib), (4, 4)).add_assign(&lik.lambda().view((4 * a, 4 * b), (4, 4)));
                    }
                }
            }
            let map = lambda.lu().solve(&eta).unwrap();
            assert!((info.psi(0, m) - map[2]).abs() < 1e-2, "region {m}");
            assert!((info.psi(1, m) - map[6]).abs() < 1e-2, "region {m}");
            checked += 1;
        }
        assert!(checked > 0);
    }

    fn inter_robot_counts(w: &World) -> [usize; 3] {
        let count = |g: &FactorGraph| g.factors().filter(|f| f.is_inter_robot()).count();
        [count(w.info().graph()), count(w.goals().graph()), count(w.planning().graph())]
    }

    #[test]
    fn neighbour_entering_and_leaving_restores_factor_counts() {
        let cfg = WorldConfig { n_r: 2, ..Default::default() };
        let mut w = world(cfg, &[(10.0, 10.0), (90.0, 90.0)]);
        w.pin_goal(0, Some(Vector2::new(10.0, 10.0))).unwrap();
        w.pin_goal(1, Some(Vector2::new(90.0, 90.0))).unwrap();
        w.step().unwrap();
        let baseline = inter_robot_counts(&w);
        assert_eq!(baseline, [0, 0, 0]);
        w.place(1, Vector2::new(30.0, 10.0)).unwrap();
        w.pin_goal(1, Some(Vector2::new(30.0, 10.0))).unwrap();
        for _ in 0..10 {
            w.step().unwrap();
        }
        let linked = inter_robot_counts(&w);
        assert_eq!(w.goals().link_count(0), 1);
        assert_eq!(linked[1], 1);
        assert_eq!(linked[2], w.config().horizon_states() - 1);
        assert!(linked[0] > 0);
        w.place(1, Vector2::new(90.0, 90.0)).unwrap();
        w.step().unwrap();
        assert_eq!(inter_robot_counts(&w), baseline);
        w.audit().unwrap();
    }

    #[test]
    fn goal_links_match_neighbour_count() {
        let mut w = world(WorldConfig::default(), &[(50.0, 50.0), (60.0, 50.0), (40.0, 50.0), (50.0, 70.0), (5.0, 95.0)]);
        w.step().unwrap();
        assert_eq!(w.goals().link_count(0), 3);
        assert_eq!(w.goals().link_count(4), 0);
    }

    #[test]
    fn fleet_stays_hygienic_every_step() {
        let cfg = WorldConfig { n_r: 20, r_c: 25.0, init: Init::Random, seed: 11, ..Default::default() };
        let mut w = World::new(cfg).unwrap();
        for _ in 0..500 {
            w.step().unwrap();
            w.audit().unwrap();
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = WorldConfig { n_r: 6, init: Init::Random, alpha: 0.5, seed: 3, t_max: 20.0, ..Default::default() };
        let run = || {
            let mut w = World::new(cfg.clone()).unwrap();
            w.run_until(|_| false).unwrap();
            (w.trajectory_csv(), w.metrics_csv())
        };
        let a = run();
        assert!(a.0.lines().count() > 20 * 6);
        assert_eq!(a, run());
    }

    #[test]
    fn head_on_robots_keep_their_distance() {
        let cfg = WorldConfig { n_r: 2, ..Default::default() };
        let mut w = world(cfg.clone(), &[(30.0, 50.0), (70.0, 50.5)]);
        w.pin_goal(0, Some(Vector2::new(70.0, 50.0))).unwrap();
        w.pin_goal(1, Some(Vector2::new(30.0, 50.5))).unwrap();
        for _ in 0..300 {
            w.step().unwrap();
        }
        let s = w.safety();
        assert!(s.min_distance >= 2.0 * cfg.r_r, "{s:?}");
        assert!(s.max_speed <= cfg.v_max + 1e-6);
        assert!(w.robots()[0].position().x > 55.0 && w.robots()[1].position().x < 45.0);
    }

    #[test]
    fn corner_grid_spacing() {
        let p = corner_positions(5, 1.0, 100.0).unwrap();
        assert_eq!(p[0], Vector2::new(2.0, 2.0));
        assert_eq!(p[1], Vector2::new(6.0, 2.0));
        assert_eq!(p[3], Vector2::new(2.0, 6.0));
        assert!(corner_positions(500, 1.0, 40.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut w = world(WorldConfig { n_r: 1, ..Default::default() }, &[(5.0, 5.0)]);
        w.step().unwrap();
        let m = w.metrics_csv();
        assert_eq!(m.lines().next().unwrap(), "t,coverage,rms_psi,done_robots,done");
        assert_eq!(m.lines().nth(1).unwrap().split(',').next().unwrap(), "0.0");
        let t = w.trajectory_csv();
        assert!(t.lines().nth(1).unwrap().starts_with("0.0,0,5.000000,5.000000,"));
    }
}

