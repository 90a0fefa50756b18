//! Fleet-level evaluation quantities, computed from per-robot information
//! snapshots and the ground truth.

use serde::Serialize;

use crate::layers::info::{InfoSnapshot, VISITED};

/// Default source threshold ψ*.
pub const PSI_STAR: f64 = 10.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub t: f64,
    pub coverage: f64,
    pub rms_psi: f64,
    /// Robots that know a source region.
    pub done_robots: usize,
    pub done: bool,
}

/// Fraction of regions one robot believes visited.
pub fn robot_coverage(snapshot: &InfoSnapshot) -> f64 {
    if snapshot.zeta.is_empty() {
        return 0.0;
    }
    let visited = snapshot.zeta.iter().filter(|z| **z > VISITED).count();
    visited as f64 / snapshot.zeta.len() as f64
}

/// Mean over robots of [`robot_coverage`].
pub fn coverage(fleet: &[InfoSnapshot]) -> f64 {
    if fleet.is_empty() {
        return 0.0;
    }
    fleet.iter().map(robot_coverage).sum::<f64>() / fleet.len() as f64
}

fn squared_error(snapshot: &InfoSnapshot, truth: &[f64]) -> f64 {
    snapshot
        .psi
        .iter()
        .zip(truth)
        .map(|(b, t)| (b.clamp(0.0, 1.0) - t).powi(2))
        .sum()
}

/// RMS error of one robot's signal beliefs, clamped to `[0, 1]`.
pub fn robot_rms_psi(snapshot: &InfoSnapshot, truth: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    (squared_error(snapshot, truth) / truth.len() as f64).sqrt()
}

/// RMS error over every (robot, region) pair.
pub fn rms_psi(fleet: &[InfoSnapshot], truth: &[f64]) -> f64 {
    let n = fleet.len() * truth.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = fleet.iter().map(|s| squared_error(s, truth)).sum();
    (total / n as f64).sqrt()
}

/// Whether the robot believes, with a credible visit, that some region is
/// at or below `psi_star`.
pub fn robot_done(snapshot: &InfoSnapshot, psi_star: f64) -> bool {
    snapshot
        .psi
        .iter()
        .zip(&snapshot.zeta)
        .any(|(psi, zeta)| *psi <= psi_star && *zeta > VISITED)
}

pub fn source_seek_done(fleet: &[InfoSnapshot], psi_star: f64) -> bool {
    fleet.iter().all(|s| robot_done(s, psi_star))
}

pub fn row(t: f64, fleet: &[InfoSnapshot], truth: &[f64], psi_star: f64) -> MetricsRow {
    let done_robots = fleet.iter().filter(|s| robot_done(s, psi_star)).count();
    MetricsRow {
        t,
        coverage: coverage(fleet),
        rms_psi: rms_psi(fleet, truth),
        done_robots,
        done: done_robots == fleet.len(),
    }
}
