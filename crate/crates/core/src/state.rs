//! Latent user states built from history prefixes.
//!
//! The state after a history is the regularized least-squares user vector
//! `u = (V W V^T + lambda I)^-1 V W q`, where `W` counts how often each item
//! was consumed and `q` holds the observed rewards. Each new event adds the
//! rank-one term `v v^T` to the Gram matrix, so the inverse is maintained with
//! the Sherman-Morrison formula at `O(k^2)` per event.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::LatentModel;
use crate::ingest::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    u: DVector<f64>,
    inverse: DMatrix<f64>,
    rhs: DVector<f64>,
    /// `V W V^T + lambda I`, kept only so a numerical fault can fall back to a direct solve.
    gram: DMatrix<f64>,
}

impl UserState {
    /// State of a user with no history: `u = 0`, inverse `I / lambda`.
    pub fn cold(k: usize, lambda: f64) -> Self {
        Self {
            u: DVector::zeros(k),
            inverse: DMatrix::identity(k, k) / lambda,
            rhs: DVector::zeros(k),
            gram: DMatrix::identity(k, k) * lambda,
        }
    }

    pub fn features(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    /// Fold in one consumed item `v` with reward `r`.
    pub fn update(&mut self, v: &DVector<f64>, r: f64) -> Result<()> {
        if v.len() != self.u.len() {
            return Err(Error::DimensionMismatch {
                expected: self.u.len(),
                actual: v.len(),
            });
        }
        let av = &self.inverse * v;
        let denom = 1.0 + v.dot(&av);
        self.gram.ger(1.0, v, v, 1.0);
        self.rhs.axpy(r, v, 1.0);

        if denom > 0.0 && denom.is_finite() {
            self.inverse.ger(-1.0 / denom, &av, &av, 1.0);
            symmetrize(&mut self.inverse);
        } else {
            log::warn!("state update: Sherman-Morrison denominator {denom:e}; re-solving directly");
            self.inverse = self
                .gram
                .clone()
                .try_inverse()
                .ok_or(Error::Singular { condition: f64::INFINITY })?;
        }
        self.u = &self.inverse * &self.rhs;
        Ok(())
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn cold_state(model: &LatentModel) -> UserState {
    UserState::cold(model.k(), model.lambda)
}

pub fn update_state(state: &UserState, v: &DVector<f64>, r: f64) -> Result<UserState> {
    let mut next = state.clone();
    next.update(v, r)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// State before this event.
    pub state: DVector<f64>,
    pub action: DVector<f64>,
    pub item: usize,
    pub reward: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Replay every user's log through the state update. Step `t` carries the
/// state built from events `0..t`, so the first step always holds the cold state.
pub fn build_trajectories(dataset: &Dataset, model: &LatentModel) -> Result<Vec<Trajectory>> {
    let n_items = model.n_items();
    dataset
        .logs
        .par_iter()
        .map(|log| {
            let mut state = cold_state(model);
            let mut steps = Vec::with_capacity(log.events.len());
            for e in &log.events {
                if e.item >= n_items {
                    return Err(Error::UnknownItem { item: e.item, n_items });
                }
                let action = model.item_vector(e.item);
                steps.push(Step {
                    state: state.features().clone(),
                    action: action.clone(),
                    item: e.item,
                    reward: e.reward,
                    timestamp: e.timestamp,
                });
                state.update(&action, e.reward)?;
            }
            Ok(Trajectory {
                user_id: log.user_id.clone(),
                steps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::Method;
    use crate::ingest::{filter_users, InteractionRecord};
    use crate::rng::seeded;
    use rand::Rng;

    /// Fresh dense solve of the regularized user equation over a whole history.
    fn direct_solve(history: &[(DVector<f64>, f64)], k: usize, lambda: f64) -> DVector<f64> {
        let mut gram = DMatrix::identity(k, k) * lambda;
        let mut rhs = DVector::zeros(k);
        for (v, r) in history {
            gram += v * v.transpose();
            rhs += v * *r;
        }
        gram.lu().solve(&rhs).unwrap()
    }

    fn model(items: DMatrix<f64>, lambda: f64) -> LatentModel {
        LatentModel {
            users: DMatrix::zeros(1, items.nrows()),
            items,
            lambda,
            method: Method::Als,
            seed: 0,
        }
    }

    #[test]
    fn cold_state_values() {
        let s = UserState::cold(2, 0.1);
        assert_eq!(s.features(), &DVector::zeros(2));
        assert!((s.inverse() - DMatrix::identity(2, 2) * 10.0).amax() < 1e-12);
    }

    #[test]
    fn zero_item_leaves_state() {
        let mut s = UserState::cold(3, 0.5);
        s.update(&DVector::from_vec(vec![1.0, 0.0, 2.0]), 1.0).unwrap();
        let before = s.clone();
        s.update(&DVector::zeros(3), 0.7).unwrap();
        assert_eq!(s.features(), before.features());
        assert_eq!(s.inverse(), before.inverse());
    }

    #[test]
    fn scalar_closed_form() {
        let mut s = UserState::cold(1, 1.0);
        s.update(&DVector::from_vec(vec![1.0]), 1.0).unwrap();
        assert!((s.features()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_update_matches_direct() {
        let v = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        let s = update_state(&UserState::cold(3, 0.1), &v, 0.6).unwrap();
        let want = direct_solve(&[(v, 0.6)], 3, 0.1);
        assert!((s.features() - want).amax() < 1e-12);
    }

    #[test]
    fn long_history_matches_direct() {
        let mut rng = seeded(8);
        let k = 20;
        let mut s = UserState::cold(k, 0.1);
        let mut hist = Vec::new();
        for _ in 0..20 {
            let v = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let r = rng.random_range(0.0..1.0);
            s.update(&v, r).unwrap();
            hist.push((v, r));
        }
        let want = direct_solve(&hist, k, 0.1);
        let rel = (s.features() - &want).amax() / want.amax();
        assert!(rel < 1e-8, "{rel}");
        let asym = (s.inverse() - s.inverse().transpose()).amax();
        assert!(asym < 1e-10);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = UserState::cold(2, 1.0);
        assert!(s.update(&DVector::zeros(3), 1.0).is_err());
    }

    fn dataset(records: &[(&str, &str, f64, u64)]) -> Dataset {
        let recs: Vec<_> = records.iter().map(|&(u, i, r, t)| InteractionRecord::new(u, i, r, t)).collect();
        filter_users(&recs, 1, false).unwrap()
    }

    #[test]
    fn single_event_user_gets_cold_state() {
        let ds = dataset(&[("u", "0", 1.0, 0)]);
        let m = model(DMatrix::from_row_slice(2, 1, &[1.0, 2.0]), 0.1);
        let traj = build_trajectories(&ds, &m).unwrap();
        assert_eq!(traj[0].steps.len(), 1);
        assert_eq!(traj[0].steps[0].state, DVector::zeros(2));
    }

    #[test]
    fn identical_histories_identical_states() {
        let ds = dataset(&[
            ("a", "0", 1.0, 0),
            ("a", "1", 0.0, 1),
            ("a", "0", 1.0, 2),
            ("b", "0", 1.0, 10),
            ("b", "1", 0.0, 11),
            ("b", "0", 1.0, 12),
        ]);
        let m = model(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]), 0.1);
        let traj = build_trajectories(&ds, &m).unwrap();
        for (x, y) in traj[0].steps.iter().zip(&traj[1].steps) {
            assert_eq!(x.state, y.state);
        }
    }

    #[test]
    fn repeated_items_count_with_multiplicity() {
        let ds = dataset(&[("a", "0", 1.0, 0), ("a", "0", 1.0, 1), ("a", "0", 0.0, 2)]);
        let v = DVector::from_vec(vec![1.0]);
        let m = model(DMatrix::from_row_slice(1, 1, &[1.0]), 1.0);
        let traj = build_trajectories(&ds, &m).unwrap();
        let want = direct_solve(&[(v.clone(), 1.0), (v, 1.0)], 1, 1.0);
        assert!((traj[0].steps[2].state[0] - want[0]).abs() < 1e-15);
        assert!((want[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prefix_consistency() {
        let ds = dataset(&[("a", "0", 1.0, 0), ("a", "1", 0.0, 1), ("a", "2", 1.0, 2), ("a", "1", 1.0, 3)]);
        let m = model(DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.3, 2.0, 0.1, 0.9]), 0.2);
        let full = build_trajectories(&ds, &m).unwrap();
        for cut in 1..=4 {
            let mut prefix = ds.clone();
            prefix.logs[0].events.truncate(cut);
            let part = build_trajectories(&prefix, &m).unwrap();
            assert_eq!(part[0].steps[..], full[0].steps[..cut]);
        }
    }

    #[test]
    fn unknown_item_is_error() {
        let ds = dataset(&[("a", "0", 1.0, 0), ("a", "1", 1.0, 1)]);
        let m = model(DMatrix::from_row_slice(1, 1, &[1.0]), 1.0);
        assert!(matches!(build_trajectories(&ds, &m), Err(Error::UnknownItem { item: 1, .. })));
    }
}
