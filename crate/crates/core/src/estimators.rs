//! Linear value estimation from logged transitions.
//!
//! All least-squares estimators here solve the same normal equations
//!
//! ```text
//! A = sum_t rho_t phi_t (phi_t - gamma phi_{t+1})^T + eps I
//! b = sum_t rho_t phi_t r_t
//! theta = A^-1 b
//! ```
//!
//! with `rho_t = 1` on-policy. The last step of every trajectory is terminal
//! and gets a zero successor. State-value estimation uses the latent state as
//! `phi`; Q estimation uses the joint state-action features with the next
//! logged action as successor.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{joint_features, PolicyParams};
use crate::state::Trajectory;

/// Ridge term added to the diagonal of `A`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum Ridge {
    /// `1e-6 * trace(A) / dim`.
    #[default]
    Auto,
    Fixed(f64),
}


impl FromStr for Ridge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Ridge::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|e| *e >= 0.0 && e.is_finite())
            .map(Ridge::Fixed)
            .ok_or_else(|| Error::InvalidArgument(format!("epsilon must be `auto` or a non-negative number, got `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    OnPolicy,
    Q,
    OffPolicy,
    Mc,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::OnPolicy => "onpolicy",
            EstimatorKind::Q => "q",
            EstimatorKind::OffPolicy => "offpolicy",
            EstimatorKind::Mc => "mc",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onpolicy" => Ok(EstimatorKind::OnPolicy),
            "q" => Ok(EstimatorKind::Q),
            "offpolicy" => Ok(EstimatorKind::OffPolicy),
            "mc" => Ok(EstimatorKind::Mc),
            other => Err(Error::InvalidArgument(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueWeights {
    pub theta: DVector<f64>,
    pub gamma: f64,
    /// Ridge actually added.
    pub epsilon: f64,
    pub kind: EstimatorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub phi: DVector<f64>,
    /// Successor features; `None` marks a terminal step.
    pub next: Option<DVector<f64>>,
    pub reward: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionBatch {
    pub rows: Vec<Transition>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Latent-state transitions of one trajectory.
    pub fn states(trajectory: &Trajectory) -> Self {
        let steps = &trajectory.steps;
        let rows = steps
            .iter()
            .enumerate()
            .map(|(t, s)| Transition {
                phi: s.state.clone(),
                next: steps.get(t + 1).map(|n| n.state.clone()),
                reward: s.reward,
                rho: None,
            })
            .collect();
        Self { rows }
    }

    /// Joint-feature transitions whose successor uses the next logged action.
    pub fn joint(trajectory: &Trajectory) -> Result<Self> {
        let steps = &trajectory.steps;
        let feats: Vec<DVector<f64>> = steps
            .iter()
            .map(|s| joint_features(&s.state, &s.action))
            .collect::<Result<_>>()?;
        let rows = steps
            .iter()
            .enumerate()
            .map(|(t, s)| Transition {
                phi: feats[t].clone(),
                next: feats.get(t + 1).cloned(),
                reward: s.reward,
                rho: None,
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn with_rho(mut self, rho: &[f64]) -> Result<Self> {
        if rho.len() != self.rows.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rows.len(),
                actual: rho.len(),
            });
        }
        for (row, &r) in self.rows.iter_mut().zip(rho) {
            row.rho = Some(r);
        }
        Ok(self)
    }
}

/// Running `A` and `b`; sums of these are the normal equations of the union of batches.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub rows: usize,
}

impl NormalEquations {
    pub fn zeros(dim: usize) -> Self {
        Self {
            a: DMatrix::zeros(dim, dim),
            b: DVector::zeros(dim),
            rows: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn add(&mut self, row: &Transition, gamma: f64) -> Result<()> {
        let dim = self.dim();
        if row.phi.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: row.phi.len(),
            });
        }
        let weight = row.rho.unwrap_or(1.0);
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::NonFinite(format!("importance ratio {weight}")));
        }
        let diff = match &row.next {
            Some(next) if next.len() != dim => {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: next.len(),
                })
            }
            Some(next) => &row.phi - next * gamma,
            None => row.phi.clone(),
        };
        self.a.ger(weight, &row.phi, &diff, 1.0);
        self.b.axpy(weight * row.reward, &row.phi, 1.0);
        self.rows += 1;
        Ok(())
    }

    pub fn from_batch(batch: &TransitionBatch, gamma: f64) -> Result<Self> {
        let dim = batch
            .rows
            .first()
            .map(|r| r.phi.len())
            .ok_or_else(|| Error::EmptyDataset("empty transition batch".into()))?;
        let mut eq = Self::zeros(dim);
        for row in &batch.rows {
            eq.add(row, gamma)?;
        }
        Ok(eq)
    }

    /// Add `other` as if its rows had been seen `count` times.
    pub fn add_repeated(&mut self, other: &Self, count: usize) {
        let w = count as f64;
        self.a.zip_apply(&other.a, |x, y| *x += w * y);
        self.b.axpy(w, &other.b, 1.0);
        self.rows += other.rows * count;
    }

    pub fn ridge(&self, ridge: Ridge) -> f64 {
        match ridge {
            Ridge::Fixed(e) => e,
            Ridge::Auto => {
                let e = 1e-6 * self.a.trace().abs() / self.dim() as f64;
                if e > 0.0 {
                    e
                } else {
                    1e-12
                }
            }
        }
    }

    /// Solve `(A + eps I) theta = b`; returns `theta` and `eps`.
    pub fn solve(&self, ridge: Ridge) -> Result<(DVector<f64>, f64)> {
        let eps = self.ridge(ridge);
        let mut a = self.a.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += eps;
        }
        let theta = a.clone().lu().solve(&self.b).filter(|t| t.iter().all(|x| x.is_finite()));
        match theta {
            Some(theta) => Ok((theta, eps)),
            None => {
                let sv = a.singular_values();
                let (max, min) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
                Err(Error::Singular {
                    condition: if min > 0.0 { max / min } else { f64::INFINITY },
                })
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")))
    }
}

/// LSTD(0) over whatever features the batch carries.
pub fn lstd(batch: &TransitionBatch, gamma: f64, ridge: Ridge) -> Result<ValueWeights> {
    check_gamma(gamma)?;
    let (theta, epsilon) = NormalEquations::from_batch(batch, gamma)?.solve(ridge)?;
    Ok(ValueWeights {
        theta,
        gamma,
        epsilon,
        kind: EstimatorKind::OnPolicy,
    })
}

/// LSTDQ(0): LSTD on joint features with the next logged action as successor.
pub fn lstdq(batch: &TransitionBatch, gamma: f64, ridge: Ridge) -> Result<ValueWeights> {
    let mut w = lstd(batch, gamma, ridge)?;
    w.kind = EstimatorKind::Q;
    Ok(w)
}

/// Per-trajectory normal equations, the unit the bootstrap resamples.
pub fn per_trajectory_equations(batches: &[TransitionBatch], gamma: f64) -> Result<Vec<NormalEquations>> {
    batches.par_iter().map(|b| NormalEquations::from_batch(b, gamma)).collect()
}

pub fn state_batches(trajectories: &[Trajectory]) -> Vec<TransitionBatch> {
    trajectories.iter().map(TransitionBatch::states).collect()
}

pub fn joint_batches(trajectories: &[Trajectory]) -> Result<Vec<TransitionBatch>> {
    trajectories.iter().map(TransitionBatch::joint).collect()
}

/// Concatenate batches in order.
pub fn concat(batches: &[TransitionBatch]) -> TransitionBatch {
    TransitionBatch {
        rows: batches.iter().flat_map(|b| b.rows.iter().cloned()).collect(),
    }
}

/// Summaries of the importance ratios used by an off-policy fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoDiagnostics {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `(sum rho)^2 / sum rho^2`.
    pub effective_sample_size: f64,
    pub rows: usize,
    /// Rows whose behavior probability was raised to the floor.
    pub floored: usize,
    pub clipped: usize,
}

impl RhoDiagnostics {
    pub fn from_ratios(rho: &[f64]) -> Self {
        let sum: f64 = rho.iter().sum();
        let sq: f64 = rho.iter().map(|r| r * r).sum();
        Self {
            min: rho.iter().copied().fold(f64::INFINITY, f64::min),
            max: rho.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: sum / rho.len().max(1) as f64,
            effective_sample_size: if sq > 0.0 { sum * sum / sq } else { 0.0 },
            rows: rho.len(),
            floored: 0,
            clipped: 0,
        }
    }
}

pub const BEHAVIOR_PROBABILITY_FLOOR: f64 = 1e-12;

/// Per-step `pi_target(a_t|s_t) / pi_behavior(a_t|s_t)` for every trajectory.
pub fn importance_ratios(
    trajectories: &[Trajectory],
    target: &PolicyParams,
    behavior: &PolicyParams,
    catalog: &DMatrix<f64>,
    rho_clip: Option<f64>,
) -> Result<(Vec<Vec<f64>>, RhoDiagnostics)> {
    let per_traj: Vec<Vec<(f64, bool, bool)>> = trajectories
        .par_iter()
        .map(|t| {
            t.steps
                .iter()
                .map(|s| {
                    let pt = target.probability(&s.state, catalog, s.item)?;
                    let pb = behavior.probability(&s.state, catalog, s.item)?;
                    let floored = pb < BEHAVIOR_PROBABILITY_FLOOR;
                    let mut rho = pt / pb.max(BEHAVIOR_PROBABILITY_FLOOR);
                    let clipped = rho_clip.is_some_and(|c| rho > c);
                    if let Some(c) = rho_clip {
                        rho = rho.min(c);
                    }
                    if !rho.is_finite() {
                        return Err(Error::NonFinite(format!("importance ratio at user {}", t.user_id)));
                    }
                    Ok((rho, floored, clipped))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = per_traj.iter().flatten().map(|x| x.0).collect();
    let mut diag = RhoDiagnostics::from_ratios(&flat);
    diag.floored = per_traj.iter().flatten().filter(|x| x.1).count();
    diag.clipped = per_traj.iter().flatten().filter(|x| x.2).count();
    if diag.floored > 0 {
        log::warn!("{} behavior probabilities raised to {BEHAVIOR_PROBABILITY_FLOOR:e}", diag.floored);
    }
    Ok((per_traj.into_iter().map(|t| t.into_iter().map(|x| x.0).collect()).collect(), diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyFit {
    pub weights: ValueWeights,
    pub diagnostics: RhoDiagnostics,
}

/// Importance-weighted LSTD(0) of `target` from data logged under `behavior`,
/// with one per-step ratio per transition.
pub fn off_policy_lstd(
    trajectories: &[Trajectory],
    target: &PolicyParams,
    behavior: &PolicyParams,
    catalog: &DMatrix<f64>,
    gamma: f64,
    ridge: Ridge,
    rho_clip: Option<f64>,
) -> Result<OffPolicyFit> {
    let (rho, diagnostics) = importance_ratios(trajectories, target, behavior, catalog, rho_clip)?;
    let batches: Vec<TransitionBatch> = trajectories
        .iter()
        .zip(&rho)
        .map(|(t, r)| TransitionBatch::states(t).with_rho(r))
        .collect::<Result<_>>()?;
    let mut weights = lstd(&concat(&batches), gamma, ridge)?;
    weights.kind = EstimatorKind::OffPolicy;
    Ok(OffPolicyFit { weights, diagnostics })
}

/// Mean over users of `sum_t gamma^t r_t`.
pub fn monte_carlo_value(trajectories: &[Trajectory], gamma: f64) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset("no trajectories".into()));
    }
    Ok(trajectories.iter().map(|t| discounted_return(t, gamma)).sum::<f64>() / trajectories.len() as f64)
}

pub fn discounted_return(trajectory: &Trajectory, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for s in &trajectory.steps {
        total += discount * s.reward;
        discount *= gamma;
    }
    total
}

/// Mean of `theta . phi(s)` over the given states.
pub fn value_from_theta(theta: &DVector<f64>, states: &[&DVector<f64>]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyDataset("no states to average".into()));
    }
    let mut total = 0.0;
    for s in states {
        if s.len() != theta.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                actual: s.len(),
            });
        }
        total += theta.dot(s);
    }
    Ok(total / states.len() as f64)
}
