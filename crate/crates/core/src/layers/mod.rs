//! The three layers of a robot's stack and the factor models behind them.
//!
//! Each layer keeps every robot's variables in one graph, tagged by owner.
//! Messages between robots only travel along inter-robot factors, and
//! rounds are synchronous, so this behaves like per-robot graphs that swap
//! mailboxes at every round barrier.

pub mod factors;
pub mod goal;
pub mod info;
pub mod planning;

use thiserror::Error;

use crate::factorgraph::GraphError;
use crate::gaussian::GaussianError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("unknown robot {0}")]
    UnknownRobot(usize),
    #[error("region {0} is outside the environment")]
    UnknownRegion(usize),
    #[error("robot {0} cannot be linked to itself")]
    SelfLink(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<GaussianError> for LayerError {
    fn from(e: GaussianError) -> Self {
        Self::Graph(e.into())
    }
}
