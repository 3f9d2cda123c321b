use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use super::{draw_index, mean_return, Episode, SimStep, SimulatedLog, SimulationTruth, TruthValue};
use crate::error::{Error, Result};
use crate::policy::{item_scores, softmax, PolicyKind, PolicyParams};
use crate::rng::{derive_indexed, seeded, Rng};

/// Recommendation world driven by true user and item vectors.
///
/// Recommending item `j` to a user with vector `u` succeeds (reward 1) with
/// probability `clamp(base_reward + u . v_j, 0, 1)`. A success pulls the
/// user's free coordinates toward the item and ends the episode with extra
/// probability `churn[j]`; otherwise the episode continues with probability
/// `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWorld {
    /// `k x n`.
    pub items: DMatrix<f64>,
    /// Users are drawn uniformly from the box `[user_low, user_high]`.
    pub user_low: DVector<f64>,
    pub user_high: DVector<f64>,
    pub base_reward: f64,
    pub drift: f64,
    pub churn: Vec<f64>,
    pub gamma: f64,
}

/// A policy acting on the true user vector.
#[derive(Debug, Clone, PartialEq)]
pub enum WorldPolicy {
    /// Softmax over joint features of the true user and item vectors.
    Softmax(PolicyParams),
    /// Always recommends the allowed item with the highest success probability.
    Greedy { allowed: Vec<bool> },
}

impl LatentWorld {
    pub fn validate(&self) -> Result<()> {
        let (k, n) = self.items.shape();
        if k == 0 || n == 0 {
            return Err(Error::InvalidArgument("world needs at least one item and one dimension".into()));
        }
        if self.user_low.len() != k || self.user_high.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: self.user_low.len().min(self.user_high.len()),
            });
        }
        if self.user_low.iter().zip(self.user_high.iter()).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("user_low must not exceed user_high".into()));
        }
        if self.churn.len() != n || self.churn.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("churn needs one probability per item".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1) and drift in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.items.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.ncols()
    }

    /// Random world with `k` free coordinates, drift 0.1 and no churn.
    pub fn random(k: usize, n_items: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let scale = 0.8 / k as f64;
        let world = Self {
            items: DMatrix::from_fn(k, n_items, |_, _| rng.random_range(0.0..scale)),
            user_low: DVector::zeros(k),
            user_high: DVector::from_element(k, 1.0),
            base_reward: 0.1,
            drift: 0.1,
            churn: vec![0.0; n_items],
            gamma,
        };
        world.validate()?;
        Ok(world)
    }

    /// Users never change, nobody churns and the first coordinate is a
    /// constant 1, so every value function is linear in the user vector.
    pub fn stationary(k: usize, n_items: usize, gamma: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument("stationary world needs k >= 2".into()));
        }
        let mut rng = seeded(seed);
        let taste = 0.6 / (k - 1) as f64;
        let items = DMatrix::from_fn(k, n_items, |r, _| {
            if r == 0 {
                rng.random_range(0.05..0.2)
            } else {
                rng.random_range(0.0..taste)
            }
        });
        let mut user_low = DVector::zeros(k);
        user_low[0] = 1.0;
        let mut user_high = DVector::from_element(k, 1.0);
        user_high[0] = 1.0;
        let world = Self {
            items,
            user_low,
            user_high,
            base_reward: 0.0,
            drift: 0.0,
            churn: vec![0.0; n_items],
            gamma,
        };
        world.validate()?;
        Ok(world)
    }

    /// A world where the items with the best immediate success rate drive
    /// users away. Coordinate 0 is a constant bias, coordinates 1 and 2 are
    /// ordinary tastes and coordinate 3 is the appetite for the churn items,
    /// which are the last `n_churn` columns.
    pub fn self_preservation(n_regular: usize, n_churn: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let n = n_regular + n_churn;
        let mut items = DMatrix::zeros(4, n);
        for j in 0..n_regular {
            items[(0, j)] = rng.random_range(0.1..0.2);
            items[(1, j)] = rng.random_range(0.0..0.35);
            items[(2, j)] = rng.random_range(0.0..0.35);
        }
        for j in n_regular..n {
            items[(0, j)] = 0.3;
            items[(3, j)] = rng.random_range(0.5..0.6);
        }
        let mut churn = vec![0.0; n];
        churn[n_regular..].fill(0.5);
        let world = Self {
            items,
            user_low: DVector::from_vec(vec![1.0, 0.0, 0.0, 0.5]),
            user_high: DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]),
            base_reward: 0.0,
            drift: 0.1,
            churn,
            gamma,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn success_probability(&self, user: &DVector<f64>, item: usize) -> f64 {
        (self.base_reward + user.dot(&self.items.column(item))).clamp(0.0, 1.0)
    }

    pub fn sample_user(&self, rng: &mut Rng) -> DVector<f64> {
        DVector::from_fn(self.k(), |i, _| {
            let (lo, hi) = (self.user_low[i], self.user_high[i]);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        })
    }

    /// Move the free coordinates a step `drift` toward the item direction,
    /// rescaled to the user's current length on those coordinates.
    fn apply_drift(&self, user: &mut DVector<f64>, item: usize) {
        if self.drift == 0.0 {
            return;
        }
        let free: Vec<usize> = (0..self.k()).filter(|&i| self.user_low[i] != self.user_high[i]).collect();
        let un: f64 = free.iter().map(|&i| user[i] * user[i]).sum::<f64>().sqrt();
        let vn: f64 = free.iter().map(|&i| self.items[(i, item)].powi(2)).sum::<f64>().sqrt();
        if vn == 0.0 {
            return;
        }
        for &i in &free {
            user[i] += self.drift * (un * self.items[(i, item)] / vn - user[i]);
        }
    }

    pub fn probabilities(&self, policy: &WorldPolicy, user: &DVector<f64>) -> Result<Vec<f64>> {
        match policy {
            WorldPolicy::Softmax(p) => Ok(softmax(item_scores(&p.w, user, &self.items)?.as_slice())),
            WorldPolicy::Greedy { allowed } => {
                let best = (0..self.n_items())
                    .filter(|&j| allowed.get(j).copied().unwrap_or(false))
                    .fold(None, |b: Option<usize>, j| match b {
                        Some(b) if self.success_probability(user, b) >= self.success_probability(user, j) => Some(b),
                        _ => Some(j),
                    })
                    .ok_or_else(|| Error::InvalidArgument("greedy policy allows no items".into()))?;
                let mut p = vec![0.0; self.n_items()];
                p[best] = 1.0;
                Ok(p)
            }
        }
    }

    fn episode(&self, policy: &WorldPolicy, user: usize, rng: &mut Rng) -> Result<Episode> {
        let mut u = self.sample_user(rng);
        let mut steps = Vec::new();
        loop {
            let probs = self.probabilities(policy, &u)?;
            let item = draw_index(&probs, rng.random());
            let success = rng.random::<f64>() < self.success_probability(&u, item);
            let reward = if success { 1.0 } else { 0.0 };
            steps.push(SimStep {
                state: u.clone(),
                item,
                reward,
                probability: probs[item],
            });
            let keep = self.gamma * if success { 1.0 - self.churn[item] } else { 1.0 };
            if success {
                self.apply_drift(&mut u, item);
            }
            if rng.random::<f64>() >= keep {
                break;
            }
        }
        Ok(Episode { user, steps })
    }

    pub fn generate_log(&self, policy: &WorldPolicy, n_users: usize, seed: u64) -> Result<SimulatedLog> {
        self.validate()?;
        let episodes = (0..n_users)
            .into_par_iter()
            .map(|user| self.episode(policy, user, &mut seeded(derive_indexed(seed, user as u64))))
            .collect::<Result<_>>()?;
        Ok(SimulatedLog { episodes })
    }

    /// Mean of `sum_t discount^t r_t` over fresh episodes. With `discount = 1`
    /// this is the policy's expected return.
    pub fn rollout_value(&self, policy: &WorldPolicy, episodes: usize, discount: f64, seed: u64) -> Result<TruthValue> {
        let log = self.generate_log(policy, episodes, seed)?;
        let returns: Vec<f64> = log
            .episodes
            .iter()
            .map(|e| e.steps.iter().rev().fold(0.0, |acc, s| s.reward + discount * acc))
            .collect();
        Ok(mean_return(&returns))
    }

    /// Greedy policies that know the world: one ignores churn, the other
    /// never recommends an item with positive churn.
    pub fn oracle_policies(&self) -> (WorldPolicy, WorldPolicy) {
        let ltv = WorldPolicy::Greedy {
            allowed: self.churn.iter().map(|&c| c == 0.0).collect(),
        };
        let myopic = WorldPolicy::Greedy {
            allowed: vec![true; self.n_items()],
        };
        (ltv, myopic)
    }

    /// Softmax behavior favoring items the user is likely to accept.
    pub fn default_behavior(&self, temperature: f64) -> WorldPolicy {
        let k = self.k();
        let mut w = DVector::zeros(3 * k + 1);
        for i in 0..k {
            w[2 * k + i] = temperature;
        }
        WorldPolicy::Softmax(PolicyParams::new(w, PolicyKind::Behavior))
    }

    /// Expected returns of `behavior` and the two oracles, plus the logged probabilities.
    pub fn truth(&self, behavior: &WorldPolicy, log: &SimulatedLog, episodes: usize, seed: u64) -> Result<SimulationTruth> {
        let (ltv, myopic) = self.oracle_policies();
        let mut values = BTreeMap::new();
        for (i, (name, p)) in [("behavior", behavior), ("target", &ltv), ("myopic", &myopic)].into_iter().enumerate() {
            values.insert(name.to_string(), self.rollout_value(p, episodes, 1.0, derive_indexed(seed, i as u64))?);
        }
        Ok(SimulationTruth {
            world: "latent".into(),
            gamma: self.gamma,
            values,
            behavior_probabilities: log.behavior_probabilities(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_probabilities_are_valid() {
        let world = LatentWorld::random(3, 10, 0.9, 1).unwrap();
        let mut rng = seeded(0);
        for _ in 0..100 {
            let u = world.sample_user(&mut rng);
            for j in 0..10 {
                let p = world.success_probability(&u, j);
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn drift_keeps_norm_bounded() {
        let world = LatentWorld::random(3, 5, 0.9, 2).unwrap();
        let mut u = DVector::from_vec(vec![0.9, 0.1, 0.3]);
        let n0 = u.norm();
        for j in 0..200 {
            world.apply_drift(&mut u, j % 5);
            assert!(u.norm() <= n0 + 1e-12);
            assert!(u.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn stationary_users_do_not_move() {
        let world = LatentWorld::stationary(3, 8, 0.9, 4).unwrap();
        let log = world.generate_log(&world.default_behavior(2.0), 50, 1).unwrap();
        for e in &log.episodes {
            assert!(e.steps.iter().all(|s| s.state == e.steps[0].state));
            assert_eq!(e.steps[0].state[0], 1.0);
        }
    }

    #[test]
    fn gamma_zero_single_interaction() {
        let world = LatentWorld::random(2, 4, 0.0, 0).unwrap();
        let log = world.generate_log(&world.default_behavior(1.0), 30, 0).unwrap();
        assert!(log.episodes.iter().all(|e| e.steps.len() == 1));
    }

    #[test]
    fn mean_length_without_churn() {
        let world = LatentWorld::random(2, 4, 0.75, 3).unwrap();
        let log = world.generate_log(&world.default_behavior(1.0), 4000, 5).unwrap();
        let lens: Vec<f64> = log.episodes.iter().map(|e| e.steps.len() as f64).collect();
        let t = mean_return(&lens);
        assert!((t.value - 4.0).abs() < 3.0 * t.standard_error, "{t:?}");
    }

    #[test]
    fn oracles_disagree_in_self_preservation() {
        let world = LatentWorld::self_preservation(30, 6, 0.95, 0).unwrap();
        let (ltv, myopic) = world.oracle_policies();
        let a = world.rollout_value(&ltv, 3000, 1.0, 1).unwrap();
        let b = world.rollout_value(&myopic, 3000, 1.0, 2).unwrap();
        assert!(a.value - b.value > 5.0 * (a.standard_error + b.standard_error), "{a:?} {b:?}");
    }

    #[test]
    fn greedy_probabilities_are_one_hot() {
        let world = LatentWorld::self_preservation(5, 2, 0.9, 0).unwrap();
        let (ltv, _) = world.oracle_policies();
        let p = world.probabilities(&ltv, &DVector::from_vec(vec![1.0, 0.5, 0.5, 0.9])).unwrap();
        assert_eq!(p.iter().filter(|&&x| x == 1.0).count(), 1);
        assert!(p[5..].iter().all(|&x| x == 0.0));
    }
}
