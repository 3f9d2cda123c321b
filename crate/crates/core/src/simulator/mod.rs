//! Synthetic environments with known values, used to check every estimator
//! against ground truth.
//!
//! Episodes end after each step with probability `1 - gamma` (times any
//! item-specific churn in the latent world), so the expected undiscounted
//! return of an episode equals the discounted value of its start state.

mod latent;
mod tabular;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::InteractionRecord;
use crate::state::{Step, Trajectory};

pub use latent::{LatentWorld, WorldPolicy};
pub use tabular::{ExactValue, TabularMdp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    /// Hidden state before the action: one-hot for tabular worlds, the true user vector for latent ones.
    pub state: DVector<f64>,
    pub item: usize,
    pub reward: f64,
    /// Probability the generating policy gave to `item`.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub user: usize,
    pub steps: Vec<SimStep>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulatedLog {
    pub episodes: Vec<Episode>,
}

impl SimulatedLog {
    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// Records in ingest form. User and item ids are their indices and
    /// timestamps count steps within the episode.
    pub fn records(&self) -> Vec<InteractionRecord> {
        self.episodes
            .iter()
            .flat_map(|e| {
                e.steps
                    .iter()
                    .enumerate()
                    .map(move |(t, s)| InteractionRecord::new(e.user.to_string(), s.item.to_string(), s.reward, t as u64))
            })
            .collect()
    }

    /// Generator probabilities of each logged action, in [`Self::records`] order.
    pub fn behavior_probabilities(&self) -> Vec<f64> {
        self.episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.probability)).collect()
    }

    /// Trajectories over the hidden states, with actions taken from `catalog` columns.
    pub fn true_trajectories(&self, catalog: &DMatrix<f64>) -> Vec<Trajectory> {
        self.episodes
            .iter()
            .map(|e| Trajectory {
                user_id: e.user.to_string(),
                steps: e
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, s)| Step {
                        state: s.state.clone(),
                        action: catalog.column(s.item).into_owned(),
                        item: s.item,
                        reward: s.reward,
                        timestamp: t as u64,
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthValue {
    pub value: f64,
    /// Zero for values computed exactly.
    pub standard_error: f64,
}

/// Sidecar file written next to a simulated log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub world: String,
    pub gamma: f64,
    /// Keyed by `behavior`, `target` and `myopic`.
    pub values: BTreeMap<String, TruthValue>,
    pub behavior_probabilities: Vec<f64>,
}

impl SimulationTruth {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Mean and standard error of per-episode returns.
pub fn mean_return(returns: &[f64]) -> TruthValue {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    TruthValue {
        value: mean,
        standard_error: (var / n).sqrt(),
    }
}

pub(crate) fn draw_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
