use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use super::{draw_index, Episode, SimStep, SimulatedLog, SimulationTruth, TruthValue};
use crate::error::{Error, Result};
use crate::estimators::{Transition, TransitionBatch};
use crate::rng::{derive_indexed, seeded};

const STOCHASTIC_TOL: f64 = 1e-9;

/// Finite MDP. `transitions[a]` is the `S x S` matrix with rows `P(.|s, a)`,
/// `rewards` is `S x A` and `initial` is the start distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    transitions: Vec<DMatrix<f64>>,
    rewards: DMatrix<f64>,
    initial: DVector<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactValue {
    pub values: DVector<f64>,
    /// `nu . V`.
    pub j: f64,
}

fn is_distribution(row: impl Iterator<Item = f64>) -> bool {
    let mut sum = 0.0;
    for p in row {
        if !(p >= 0.0) {
            return false;
        }
        sum += p;
    }
    (sum - 1.0).abs() < STOCHASTIC_TOL
}

impl TabularMdp {
    pub fn new(transitions: Vec<DMatrix<f64>>, rewards: DMatrix<f64>, initial: DVector<f64>, gamma: f64) -> Result<Self> {
        let s = initial.len();
        let a = transitions.len();
        if s == 0 || a == 0 {
            return Err(Error::InvalidArgument("an MDP needs at least one state and one action".into()));
        }
        if rewards.shape() != (s, a) {
            return Err(Error::InvalidArgument(format!("reward table must be {s}x{a}, got {:?}", rewards.shape())));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if !is_distribution(initial.iter().copied()) {
            return Err(Error::InvalidArgument("initial distribution must be stochastic".into()));
        }
        for p in &transitions {
            if p.shape() != (s, s) || !p.row_iter().all(|r| is_distribution(r.iter().copied())) {
                return Err(Error::InvalidArgument("every transition matrix must be square and row-stochastic".into()));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward table".into()));
        }
        Ok(Self {
            transitions,
            rewards,
            initial,
            gamma,
        })
    }

    /// Dirichlet-like random MDP with uniform rewards in `[0, 1)`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut stochastic_row = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect::<Vec<_>>()
        };
        let transitions = (0..n_actions)
            .map(|_| {
                let rows: Vec<f64> = (0..n_states).flat_map(|_| stochastic_row(n_states)).collect();
                DMatrix::from_row_slice(n_states, n_states, &rows)
            })
            .collect();
        let initial = DVector::from_vec(stochastic_row(n_states));
        let rewards = DMatrix::from_fn(n_states, n_actions, |_, _| rng.random::<f64>());
        Self::new(transitions, rewards, initial, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.len()
    }

    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.transitions[action]
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    fn check_policy(&self, policy: &DMatrix<f64>) -> Result<()> {
        if policy.shape() != (self.n_states(), self.n_actions()) {
            return Err(Error::InvalidArgument(format!(
                "policy must be {}x{}, got {:?}",
                self.n_states(),
                self.n_actions(),
                policy.shape()
            )));
        }
        if !policy.row_iter().all(|r| is_distribution(r.iter().copied())) {
            return Err(Error::InvalidArgument("policy rows must be stochastic".into()));
        }
        Ok(())
    }

    /// `P_pi` and `r_pi` under a state-by-action policy table.
    pub fn policy_model(&self, policy: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_policy(policy)?;
        let s = self.n_states();
        let mut p = DMatrix::zeros(s, s);
        let mut r = DVector::zeros(s);
        for (a, pa) in self.transitions.iter().enumerate() {
            for i in 0..s {
                let w = policy[(i, a)];
                r[i] += w * self.rewards[(i, a)];
                for j in 0..s {
                    p[(i, j)] += w * pa[(i, j)];
                }
            }
        }
        Ok((p, r))
    }

    /// Solve `(I - gamma P_pi) V = r_pi`.
    pub fn exact_value(&self, policy: &DMatrix<f64>) -> Result<ExactValue> {
        let (p, r) = self.policy_model(policy)?;
        let s = self.n_states();
        let a = DMatrix::identity(s, s) - p * self.gamma;
        let values = a.lu().solve(&r).ok_or(Error::Singular { condition: f64::INFINITY })?;
        let j = self.initial.dot(&values);
        Ok(ExactValue { values, j })
    }

    /// `Q(s, a) = R(s, a) + gamma sum_s' P(s'|s, a) V(s')`.
    pub fn exact_q(&self, policy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let v = self.exact_value(policy)?.values;
        let mut q = self.rewards.clone();
        for (a, pa) in self.transitions.iter().enumerate() {
            let next = pa * &v;
            for s in 0..self.n_states() {
                q[(s, a)] += self.gamma * next[s];
            }
        }
        Ok(q)
    }

    /// Deterministic policy picking the row maximum; ties go to the lower action.
    pub fn greedy(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pi = DMatrix::zeros(q.nrows(), q.ncols());
        for s in 0..q.nrows() {
            let best = (0..q.ncols()).fold(0, |b, a| if q[(s, a)] > q[(s, b)] { a } else { b });
            pi[(s, best)] = 1.0;
        }
        pi
    }

    pub fn uniform_policy(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.n_states(), self.n_actions(), 1.0 / self.n_actions() as f64)
    }

    /// One row per state with one-hot features and the expected successor
    /// features `P_pi(s, .)`, so LSTD on it solves `(I - gamma P_pi) theta = r_pi`.
    pub fn expected_state_batch(&self, policy: &DMatrix<f64>) -> Result<TransitionBatch> {
        let (p, r) = self.policy_model(policy)?;
        let s = self.n_states();
        let rows = (0..s)
            .map(|i| Transition {
                phi: one_hot(s, i),
                next: Some(p.row(i).transpose()),
                reward: r[i],
                rho: None,
            })
            .collect();
        Ok(TransitionBatch { rows })
    }

    /// One row per state-action pair with indicator features at `s * A + a`
    /// and the expected successor `sum_s' P(s'|s,a) pi(.|s')`.
    pub fn expected_q_batch(&self, policy: &DMatrix<f64>) -> Result<TransitionBatch> {
        self.check_policy(policy)?;
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut rows = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let mut next = DVector::zeros(ns * na);
                for s2 in 0..ns {
                    let p = self.transitions[a][(s, s2)];
                    for a2 in 0..na {
                        next[s2 * na + a2] += p * policy[(s2, a2)];
                    }
                }
                rows.push(Transition {
                    phi: one_hot(ns * na, s * na + a),
                    next: Some(next),
                    reward: self.rewards[(s, a)],
                    rho: None,
                });
            }
        }
        Ok(TransitionBatch { rows })
    }

    /// Episodes from `initial`, ending after each step with probability `1 - gamma`.
    pub fn generate_log(&self, policy: &DMatrix<f64>, n_users: usize, seed: u64) -> Result<SimulatedLog> {
        self.check_policy(policy)?;
        let ns = self.n_states();
        let episodes = (0..n_users)
            .into_par_iter()
            .map(|user| {
                let mut rng = seeded(derive_indexed(seed, user as u64));
                let mut s = draw_index(self.initial.as_slice(), rng.random());
                let mut steps = Vec::new();
                loop {
                    let row: Vec<f64> = policy.row(s).iter().copied().collect();
                    let a = draw_index(&row, rng.random());
                    steps.push(SimStep {
                        state: one_hot(ns, s),
                        item: a,
                        reward: self.rewards[(s, a)],
                        probability: row[a],
                    });
                    if rng.random::<f64>() >= self.gamma {
                        break;
                    }
                    let next: Vec<f64> = self.transitions[a].row(s).iter().copied().collect();
                    s = draw_index(&next, rng.random());
                }
                Episode { user, steps }
            })
            .collect();
        Ok(SimulatedLog { episodes })
    }

    /// Exact values of `behavior`, of the greedy improvement on its Q and of
    /// the policy greedy on immediate reward.
    pub fn truth(&self, behavior: &DMatrix<f64>, log: &SimulatedLog) -> Result<SimulationTruth> {
        let exact = |p: &DMatrix<f64>| -> Result<TruthValue> {
            Ok(TruthValue {
                value: self.exact_value(p)?.j,
                standard_error: 0.0,
            })
        };
        let target = self.greedy(&self.exact_q(behavior)?);
        let myopic = self.greedy(&self.rewards);
        let mut values = BTreeMap::new();
        values.insert("behavior".to_string(), exact(behavior)?);
        values.insert("target".to_string(), exact(&target)?);
        values.insert("myopic".to_string(), exact(&myopic)?);
        Ok(SimulationTruth {
            world: "tabular".into(),
            gamma: self.gamma,
            values,
            behavior_probabilities: log.behavior_probabilities(),
        })
    }
}

pub(crate) fn one_hot(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{lstd, monte_carlo_value, Ridge};

    fn value_iteration(mdp: &TabularMdp, policy: &DMatrix<f64>) -> DVector<f64> {
        let (p, r) = mdp.policy_model(policy).unwrap();
        let mut v = DVector::zeros(mdp.n_states());
        loop {
            let next = &r + &p * &v * mdp.gamma;
            if (&next - &v).amax() < 1e-13 {
                return next;
            }
            v = next;
        }
    }

    fn single_state(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(
            vec![DMatrix::identity(1, 1)],
            DMatrix::from_element(1, 1, reward),
            DVector::from_element(1, 1.0),
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn single_state_geometric() {
        let mdp = single_state(1.0, 0.9);
        let v = mdp.exact_value(&DMatrix::identity(1, 1)).unwrap();
        assert!((v.values[0] - 10.0).abs() < 1e-12);
        assert!((v.j - 10.0).abs() < 1e-12);
        assert_eq!(single_state(0.0, 0.9).exact_value(&DMatrix::identity(1, 1)).unwrap().j, 0.0);
    }

    #[test]
    fn matches_value_iteration() {
        let mdp = TabularMdp::random(6, 3, 0.9, 2).unwrap();
        let pi = mdp.uniform_policy();
        let exact = mdp.exact_value(&pi).unwrap().values;
        assert!((exact - value_iteration(&mdp, &pi)).amax() < 1e-10);
    }

    #[test]
    fn q_at_gamma_zero_is_reward() {
        let mut mdp = TabularMdp::random(4, 2, 0.5, 3).unwrap();
        mdp.gamma = 0.0;
        let q = mdp.exact_q(&mdp.uniform_policy()).unwrap();
        assert!((q - mdp.rewards()).amax() < 1e-15);
    }

    #[test]
    fn deterministic_chain_by_hand() {
        // 0 -> 1 -> 1 (absorbing). Action 0 earns 1 in state 0, action 1 earns 2;
        // in state 1 both earn 0.5. Always taking action 0 from gamma = 0.5:
        // V(1) = 0.5 / 0.5 = 1, Q(0, a) = R(0, a) + 0.5 * 1.
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let mdp = TabularMdp::new(
            vec![p.clone(), p],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, 0.5]),
            DVector::from_vec(vec![1.0, 0.0]),
            0.5,
        )
        .unwrap();
        let pi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let q = mdp.exact_q(&pi).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.5, 2.5, 1.0, 1.0]);
        assert!((q - want).amax() < 1e-12);
    }

    #[test]
    fn greedy_improvement_does_not_hurt() {
        for seed in 0..10 {
            let mdp = TabularMdp::random(5, 3, 0.9, seed).unwrap();
            let pi = mdp.uniform_policy();
            let better = mdp.greedy(&mdp.exact_q(&pi).unwrap());
            assert!(mdp.exact_value(&better).unwrap().j >= mdp.exact_value(&pi).unwrap().j - 1e-12);
        }
    }

    #[test]
    fn expected_batch_solves_exactly() {
        let mdp = TabularMdp::random(4, 2, 0.8, 5).unwrap();
        let pi = mdp.uniform_policy();
        let w = lstd(&mdp.expected_state_batch(&pi).unwrap(), 0.8, Ridge::Fixed(0.0)).unwrap();
        assert!((w.theta - mdp.exact_value(&pi).unwrap().values).amax() < 1e-10);
    }

    #[test]
    fn gamma_zero_gives_single_steps() {
        let mut mdp = TabularMdp::random(3, 2, 0.5, 1).unwrap();
        mdp.gamma = 0.0;
        let log = mdp.generate_log(&mdp.uniform_policy(), 50, 0).unwrap();
        assert!(log.episodes.iter().all(|e| e.steps.len() == 1));
        assert!(mdp.generate_log(&mdp.uniform_policy(), 0, 0).unwrap().episodes.is_empty());
    }

    #[test]
    fn episode_length_is_geometric() {
        let mdp = TabularMdp::random(3, 2, 0.8, 1).unwrap();
        let log = mdp.generate_log(&mdp.uniform_policy(), 5000, 4).unwrap();
        let lens: Vec<f64> = log.episodes.iter().map(|e| e.steps.len() as f64).collect();
        let t = super::super::mean_return(&lens);
        assert!((t.value - 5.0).abs() < 3.0 * t.standard_error, "{t:?}");
    }

    #[test]
    fn monte_carlo_matches_exact_j() {
        let mdp = TabularMdp::random(4, 2, 0.7, 8).unwrap();
        let pi = mdp.uniform_policy();
        let log = mdp.generate_log(&pi, 10_000, 1).unwrap();
        let catalog = DMatrix::identity(2, 2);
        let trajs = log.true_trajectories(&catalog);
        let returns: Vec<f64> = log.episodes.iter().map(Episode::total_reward).collect();
        let t = super::super::mean_return(&returns);
        let mc = monte_carlo_value(&trajs, 1.0).unwrap();
        assert!((mc - t.value).abs() < 1e-9);
        let j = mdp.exact_value(&pi).unwrap().j;
        assert!((mc - j).abs() < 3.0 * t.standard_error, "{mc} vs {j} ({})", t.standard_error);
    }

    #[test]
    fn generation_is_reproducible() {
        let mdp = TabularMdp::random(3, 2, 0.8, 1).unwrap();
        let pi = mdp.uniform_policy();
        assert_eq!(mdp.generate_log(&pi, 20, 9).unwrap(), mdp.generate_log(&pi, 20, 9).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TabularMdp::new(vec![DMatrix::identity(1, 1)], DMatrix::zeros(1, 1), DVector::from_element(1, 1.0), 1.0).is_err());
        let mdp = single_state(1.0, 0.5);
        assert!(mdp.exact_value(&DMatrix::from_element(1, 1, 0.5)).is_err());
    }
}
