//! Joint state-action features and the softmax policy family built on them.
//!
//! A policy is a weight vector `w` over joint features
//! `phi(s, v) = (s, v, s * v, 1)` and picks item `v` with probability
//! proportional to `exp(w . phi(s, v))`. The estimated behavior policy, the
//! Q-derived target and myopic policies and their mixtures all share this form.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::state::{Step, Trajectory};

/// Joint feature dimension for latent dimension `k`.
pub fn joint_dim(k: usize) -> usize {
    3 * k + 1
}

/// `(s, v, s * v, 1)`.
pub fn joint_features(state: &DVector<f64>, item: &DVector<f64>) -> Result<DVector<f64>> {
    let k = state.len();
    if item.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: item.len(),
        });
    }
    let mut phi = DVector::zeros(joint_dim(k));
    phi.rows_mut(0, k).copy_from(state);
    phi.rows_mut(k, k).copy_from(item);
    phi.rows_mut(2 * k, k).copy_from(&state.component_mul(item));
    phi[3 * k] = 1.0;
    Ok(phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Behavior,
    Target,
    Myopic,
    Mixture,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Behavior => "behavior",
            PolicyKind::Target => "target",
            PolicyKind::Myopic => "myopic",
            PolicyKind::Mixture => "mixture",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "behavior" => Ok(PolicyKind::Behavior),
            "target" => Ok(PolicyKind::Target),
            "myopic" => Ok(PolicyKind::Myopic),
            "mixture" => Ok(PolicyKind::Mixture),
            other => Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w: DVector<f64>,
    pub kind: PolicyKind,
    /// Scale applied to a Q weight vector.
    pub alpha: Option<f64>,
    /// Scale applied to the summed behavior features.
    pub c: Option<f64>,
    /// Mixture weight on the target side.
    pub beta: Option<f64>,
}

impl PolicyParams {
    pub fn new(w: DVector<f64>, kind: PolicyKind) -> Self {
        Self {
            w,
            kind,
            alpha: None,
            c: None,
            beta: None,
        }
    }

    pub fn latent_dim(&self) -> usize {
        (self.w.len() - 1) / 3
    }

    /// Score of every catalog item in `state`; the catalog is `k x n`.
    pub fn scores(&self, state: &DVector<f64>, catalog: &DMatrix<f64>) -> Result<DVector<f64>> {
        item_scores(&self.w, state, catalog)
    }

    pub fn probabilities(&self, state: &DVector<f64>, catalog: &DMatrix<f64>) -> Result<Vec<f64>> {
        policy_probabilities(self, state, catalog)
    }

    /// Probability of one item, without materializing the full distribution.
    pub fn probability(&self, state: &DVector<f64>, catalog: &DMatrix<f64>, item: usize) -> Result<f64> {
        let scores = self.scores(state, catalog)?;
        if item >= scores.len() {
            return Err(Error::UnknownItem {
                item,
                n_items: scores.len(),
            });
        }
        Ok((scores[item] - log_sum_exp(scores.as_slice())).exp())
    }
}

/// `w . phi(s, v_j)` for all items, computed as `const(s) + (w_v + w_p * s) . v_j`.
pub fn item_scores(w: &DVector<f64>, state: &DVector<f64>, catalog: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = state.len();
    if w.len() != joint_dim(k) {
        return Err(Error::DimensionMismatch {
            expected: joint_dim(k),
            actual: w.len(),
        });
    }
    if catalog.nrows() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: catalog.nrows(),
        });
    }
    let base = w.rows(0, k).dot(state) + w[3 * k];
    let coef = w.rows(k, k) + w.rows(2 * k, k).component_mul(state);
    let mut scores = catalog.tr_mul(&coef);
    scores.add_scalar_mut(base);
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("policy score".into()));
    }
    Ok(scores)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax over catalog scores, shifted by the maximum score.
pub fn policy_probabilities(policy: &PolicyParams, state: &DVector<f64>, catalog: &DMatrix<f64>) -> Result<Vec<f64>> {
    if catalog.ncols() == 0 {
        return Err(Error::InvalidArgument("empty catalog".into()));
    }
    let scores = policy.scores(state, catalog)?;
    Ok(softmax(scores.as_slice()))
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorFitConfig {
    pub grid_size: usize,
    /// Grid spans `[lo, hi] / |g|` on a log scale.
    pub span: (f64, f64),
    pub subsample: usize,
    pub seed: u64,
}

impl Default for BehaviorFitConfig {
    fn default() -> Self {
        Self {
            grid_size: 41,
            span: (1e-4, 1e4),
            subsample: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorFit {
    pub policy: PolicyParams,
    /// `(C, mean log-likelihood per step)` over the grid.
    pub grid: Vec<(f64, f64)>,
}

fn all_steps(trajectories: &[Trajectory]) -> Vec<&Step> {
    trajectories.iter().flat_map(|t| t.steps.iter()).collect()
}

fn subsample_steps(steps: Vec<&Step>, limit: usize, seed: u64) -> Vec<&Step> {
    if steps.len() <= limit {
        return steps;
    }
    let mut idx = sample(&mut seeded(seed), steps.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| steps[i]).collect()
}

/// Estimate the logging policy as `w = C g` with `g` the summed joint
/// features of the logged actions. `C` maximizes the exact softmax
/// likelihood of the logged actions over a logarithmic grid; ties go to the
/// smallest `C`.
pub fn fit_behavior_policy(
    trajectories: &[Trajectory],
    catalog: &DMatrix<f64>,
    config: &BehaviorFitConfig,
) -> Result<BehaviorFit> {
    let steps = all_steps(trajectories);
    let first = steps
        .first()
        .ok_or_else(|| Error::EmptyDataset("no steps to fit the behavior policy".into()))?;
    if config.grid_size < 1 {
        return Err(Error::InvalidArgument("empty C grid".into()));
    }
    let k = first.state.len();
    let mut g = DVector::zeros(joint_dim(k));
    for step in &steps {
        g += joint_features(&step.state, &step.action)?;
    }
    let norm = g.norm();
    if norm == 0.0 || !norm.is_finite() {
        log::warn!("behavior fit: summed features vanish; falling back to the uniform policy");
        let mut policy = PolicyParams::new(DVector::zeros(joint_dim(k)), PolicyKind::Behavior);
        policy.c = Some(0.0);
        return Ok(BehaviorFit { policy, grid: Vec::new() });
    }

    let (lo, hi) = config.span;
    let grid: Vec<f64> = (0..config.grid_size)
        .map(|i| {
            let t = if config.grid_size == 1 { 0.0 } else { i as f64 / (config.grid_size - 1) as f64 };
            (lo.ln() + t * (hi.ln() - lo.ln())).exp() / norm
        })
        .collect();

    let sample = subsample_steps(steps, config.subsample, config.seed);
    let per_step: Vec<Vec<f64>> = sample
        .par_iter()
        .map(|step| {
            let base = item_scores(&g, &step.state, catalog)?;
            Ok(grid
                .iter()
                .map(|&c| {
                    let scaled: Vec<f64> = base.iter().map(|s| c * s).collect();
                    c * base[step.item] - log_sum_exp(&scaled)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut loglik = vec![0.0; grid.len()];
    for row in &per_step {
        for (acc, x) in loglik.iter_mut().zip(row) {
            *acc += x;
        }
    }
    let count = per_step.len() as f64;
    let best = (0..grid.len()).fold(0, |best, i| if loglik[i] > loglik[best] { i } else { best });

    let mut policy = PolicyParams::new(&g * grid[best], PolicyKind::Behavior);
    policy.c = Some(grid[best]);
    Ok(BehaviorFit {
        policy,
        grid: grid.into_iter().zip(loglik.into_iter().map(|l| l / count)).collect(),
    })
}

/// Mean per-step log-likelihood of the logged actions under `policy`.
pub fn mean_log_likelihood(policy: &PolicyParams, trajectories: &[Trajectory], catalog: &DMatrix<f64>) -> Result<f64> {
    let steps = all_steps(trajectories);
    let total: Vec<f64> = steps
        .par_iter()
        .map(|s| {
            let scores = policy.scores(&s.state, catalog)?;
            Ok(scores[s.item] - log_sum_exp(scores.as_slice()))
        })
        .collect::<Result<_>>()?;
    Ok(total.iter().sum::<f64>() / steps.len().max(1) as f64)
}

/// `w = alpha * theta_q`.
pub fn make_target_policy(theta_q: &DVector<f64>, alpha: f64) -> Result<PolicyParams> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut p = PolicyParams::new(theta_q * alpha, PolicyKind::Target);
    p.alpha = Some(alpha);
    Ok(p)
}

/// `w = beta * w_target + (1 - beta) * w_behavior`.
pub fn mix_policies(target: &PolicyParams, behavior: &PolicyParams, beta: f64) -> Result<PolicyParams> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    if target.w.len() != behavior.w.len() {
        return Err(Error::DimensionMismatch {
            expected: target.w.len(),
            actual: behavior.w.len(),
        });
    }
    let mut p = PolicyParams::new(&target.w * beta + &behavior.w * (1.0 - beta), PolicyKind::Mixture);
    p.alpha = target.alpha;
    p.c = behavior.c;
    p.beta = Some(beta);
    Ok(p)
}

/// 1-based rank of `item` by descending score; ties go to the lower index.
pub fn rank_of_action(policy: &PolicyParams, state: &DVector<f64>, catalog: &DMatrix<f64>, item: usize) -> Result<usize> {
    let scores = policy.scores(state, catalog)?;
    rank_in_scores(scores.as_slice(), item)
}

pub(crate) fn rank_in_scores(scores: &[f64], item: usize) -> Result<usize> {
    let target = *scores.get(item).ok_or(Error::UnknownItem {
        item,
        n_items: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < item))
        .count();
    Ok(ahead + 1)
}

/// Mean over states of `KL(p(.|s) || q(.|s))`.
pub fn mean_kl(p: &PolicyParams, q: &PolicyParams, states: &[&DVector<f64>], catalog: &DMatrix<f64>) -> Result<f64> {
    let kls: Vec<f64> = states
        .par_iter()
        .map(|s| Ok(kl_from_scores(p.scores(s, catalog)?.as_slice(), q.scores(s, catalog)?.as_slice())))
        .collect::<Result<_>>()?;
    Ok(kls.iter().sum::<f64>() / kls.len().max(1) as f64)
}

fn kl_from_scores(p_scores: &[f64], q_scores: &[f64]) -> f64 {
    let lp = log_sum_exp(p_scores);
    let lq = log_sum_exp(q_scores);
    p_scores
        .iter()
        .zip(q_scores)
        .map(|(a, b)| {
            let log_p = a - lp;
            log_p.exp() * (log_p - (b - lq))
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlCalibration {
    pub max_kl: f64,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for KlCalibration {
    fn default() -> Self {
        Self {
            max_kl: 0.5,
            subsample: 2_000,
            seed: 0,
        }
    }
}

/// Largest `alpha` for which `mix(alpha * theta_q, behavior, beta)` stays
/// within `max_kl` nats of the behavior policy on average. Returns the
/// chosen alpha and its mean KL.
pub fn calibrate_alpha(
    theta_q: &DVector<f64>,
    behavior: &PolicyParams,
    beta: f64,
    trajectories: &[Trajectory],
    catalog: &DMatrix<f64>,
    config: &KlCalibration,
) -> Result<(f64, f64)> {
    let steps = subsample_steps(all_steps(trajectories), config.subsample, config.seed);
    if steps.is_empty() {
        return Err(Error::EmptyDataset("no steps for KL calibration".into()));
    }
    let norm = theta_q.norm();
    if norm == 0.0 {
        return Ok((1.0, 0.0));
    }
    // Scores are linear in w, so cache the theta and behavior scores once.
    let cached: Vec<(DVector<f64>, DVector<f64>)> = steps
        .par_iter()
        .map(|s| Ok((item_scores(theta_q, &s.state, catalog)?, behavior.scores(&s.state, catalog)?)))
        .collect::<Result<_>>()?;
    let kl_at = |alpha: f64| -> f64 {
        let total: f64 = cached
            .par_iter()
            .map(|(theta_s, beh_s)| {
                let mixed: Vec<f64> = theta_s
                    .iter()
                    .zip(beh_s.iter())
                    .map(|(t, b)| beta * alpha * t + (1.0 - beta) * b)
                    .collect();
                kl_from_scores(&mixed, beh_s.as_slice())
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        total / cached.len() as f64
    };

    let mut lo = 1e-6 / norm;
    if kl_at(lo) > config.max_kl {
        let kl = kl_at(lo);
        log::warn!("alpha calibration: KL {kl:.3} exceeds {} even at alpha -> 0", config.max_kl);
        return Ok((lo, kl));
    }
    let mut hi = lo;
    loop {
        hi *= 2.0;
        if kl_at(hi) > config.max_kl {
            break;
        }
        if hi > 1e8 / norm {
            return Ok((hi, kl_at(hi)));
        }
        lo = hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if kl_at(mid) <= config.max_kl {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, kl_at(lo)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::distr::{weighted::WeightedIndex, Distribution};
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn joint_feature_layout() {
        assert_eq!(joint_features(&v(&[0.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert_eq!(
            joint_features(&v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(),
            v(&[1.0, 2.0, 3.0, 4.0, 3.0, 8.0, 1.0])
        );
        assert!(joint_features(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn product_block_gives_bilinear_score() {
        let s = v(&[0.5, -1.0, 2.0]);
        let item = v(&[1.5, 0.25, -0.5]);
        let theta = v(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.3]);
        let score = theta.dot(&joint_features(&s, &item).unwrap());
        assert!((score - (s.dot(&item) + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn catalog_scores_match_feature_dot() {
        let mut rng = seeded(2);
        let k = 4;
        let catalog = DMatrix::from_fn(k, 7, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(joint_dim(k), |_, _| rng.random_range(-1.0..1.0));
        let s = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let scores = item_scores(&w, &s, &catalog).unwrap();
        for j in 0..7 {
            let direct = w.dot(&joint_features(&s, &catalog.column(j).into_owned()).unwrap());
            assert!((scores[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_uniform() {
        let catalog = DMatrix::from_element(2, 4, 0.3);
        let p = PolicyParams::new(DVector::zeros(7), PolicyKind::Behavior);
        let probs = policy_probabilities(&p, &v(&[1.0, 1.0]), &catalog).unwrap();
        assert!(probs.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_softmax() {
        assert_eq!(softmax(&[1.0, 1.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        for (got, want) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_catalog_rejected() {
        let p = PolicyParams::new(DVector::zeros(4), PolicyKind::Target);
        assert!(policy_probabilities(&p, &v(&[0.0]), &DMatrix::zeros(1, 0)).is_err());
    }

    #[test]
    fn nonfinite_scores_rejected() {
        let p = PolicyParams::new(v(&[0.0, f64::INFINITY, 0.0, 0.0]), PolicyKind::Target);
        assert!(matches!(
            policy_probabilities(&p, &v(&[0.0]), &DMatrix::from_element(1, 2, 1.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn target_scaling() {
        assert!(make_target_policy(&v(&[1.0]), 0.0).is_err());
        let theta = v(&[0.0, 1.0, 0.0, 0.0]);
        let catalog = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]);
        let s = v(&[0.0]);
        let p1 = make_target_policy(&theta, 1.0).unwrap().probabilities(&s, &catalog).unwrap();
        let p2 = make_target_policy(&theta, 2.0).unwrap().probabilities(&s, &catalog).unwrap();
        assert!(((p2[0] / p2[1]) - (p1[0] / p1[1]).powi(2)).abs() < 1e-12);
        let tiny = make_target_policy(&theta, 1e-12).unwrap().probabilities(&s, &catalog).unwrap();
        assert!(tiny.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-9));
        let mut last = 0.0;
        for alpha in [0.1, 1.0, 5.0, 50.0] {
            let p = make_target_policy(&theta, alpha).unwrap().probabilities(&s, &catalog).unwrap();
            assert!(p[0] >= last);
            last = p[0];
        }
        assert!(last > 0.999);
    }

    #[test]
    fn mixture_endpoints_and_midpoint() {
        let t = PolicyParams::new(v(&[2.0, 0.0, 0.0, 0.0]), PolicyKind::Target);
        let b = PolicyParams::new(v(&[0.0, 2.0, 0.0, 0.0]), PolicyKind::Behavior);
        assert_eq!(mix_policies(&t, &b, 0.0).unwrap().w, b.w);
        assert_eq!(mix_policies(&t, &b, 1.0).unwrap().w, t.w);
        assert_eq!(mix_policies(&t, &b, 0.5).unwrap().w, v(&[1.0, 1.0, 0.0, 0.0]));
        assert!(mix_policies(&t, &b, 1.5).is_err());
        assert!(mix_policies(&t, &b, -0.1).is_err());
    }

    #[test]
    fn ranks() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = PolicyParams::new(v(&[0.0, 1.0, 0.0, 0.0]), PolicyKind::Target);
        assert_eq!(rank_of_action(&p, &v(&[0.0]), &one, 0).unwrap(), 1);
        let catalog = DMatrix::from_row_slice(1, 4, &[0.1, 0.9, 0.3, 0.2]);
        assert_eq!(rank_of_action(&p, &v(&[0.0]), &catalog, 1).unwrap(), 1);
        assert_eq!(rank_of_action(&p, &v(&[0.0]), &catalog, 0).unwrap(), 4);
        let flat = PolicyParams::new(DVector::zeros(4), PolicyKind::Behavior);
        for j in 0..4 {
            assert_eq!(rank_of_action(&flat, &v(&[0.0]), &catalog, j).unwrap(), j + 1);
        }
    }

    proptest::proptest! {
        #[test]
        fn ranks_invariant_under_increasing_maps(scores in proptest::collection::vec(-3i32..3, 1..12)) {
            let raw: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
            let mapped: Vec<f64> = raw.iter().map(|x| x.exp() + x.powi(3)).collect();
            for item in 0..raw.len() {
                proptest::prop_assert_eq!(rank_in_scores(&raw, item).unwrap(), rank_in_scores(&mapped, item).unwrap());
            }
        }
    }

    fn one_hot_catalog(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    /// Logs drawn from a softmax over a fixed state with one-hot items.
    fn synthetic_logs(w: &PolicyParams, catalog: &DMatrix<f64>, state: &DVector<f64>, n: usize, seed: u64) -> Vec<Trajectory> {
        let probs = w.probabilities(state, catalog).unwrap();
        let dist = WeightedIndex::new(&probs).unwrap();
        let mut rng = seeded(seed);
        let steps = (0..n)
            .map(|t| {
                let item = dist.sample(&mut rng);
                Step {
                    state: state.clone(),
                    action: catalog.column(item).into_owned(),
                    item,
                    reward: 0.0,
                    timestamp: t as u64,
                }
            })
            .collect();
        vec![Trajectory { user_id: "u".into(), steps }]
    }

    #[test]
    fn single_item_catalog_picks_smallest_c() {
        let catalog = DMatrix::from_element(1, 1, 1.0);
        let traj = synthetic_logs(&PolicyParams::new(DVector::zeros(4), PolicyKind::Behavior), &catalog, &v(&[0.5]), 1, 0);
        let fit = fit_behavior_policy(&traj, &catalog, &BehaviorFitConfig::default()).unwrap();
        assert_eq!(fit.policy.c, Some(fit.grid[0].0));
        assert!(fit.grid.iter().all(|&(_, ll)| ll.abs() < 1e-12));
    }

    #[test]
    fn fitted_policy_close_to_generator() {
        // Item-only preferences: the summed features point along the
        // empirical item frequencies, which the grid rescales.
        let n = 20;
        let k = n;
        let catalog = one_hot_catalog(n);
        let mut w = DVector::zeros(joint_dim(k));
        for j in 0..n {
            w[k + j] = 1.5 * (j as f64 / n as f64);
        }
        let generator = PolicyParams::new(w, PolicyKind::Behavior);
        let state = DVector::zeros(k);
        let traj = synthetic_logs(&generator, &catalog, &state, 20_000, 4);
        let fit = fit_behavior_policy(&traj, &catalog, &BehaviorFitConfig::default()).unwrap();
        let fitted = -mean_log_likelihood(&fit.policy, &traj, &catalog).unwrap();
        let truth = -mean_log_likelihood(&generator, &traj, &catalog).unwrap();
        assert!((fitted - truth).abs() <= 0.05 * truth, "{fitted} vs {truth}");
        let uniform = PolicyParams::new(DVector::zeros(joint_dim(k)), PolicyKind::Behavior);
        assert!(mean_log_likelihood(&fit.policy, &traj, &catalog).unwrap() >= mean_log_likelihood(&uniform, &traj, &catalog).unwrap());
    }

    #[test]
    fn degenerate_features_give_uniform() {
        let catalog = DMatrix::zeros(2, 3);
        let traj = vec![Trajectory {
            user_id: "u".into(),
            steps: vec![Step {
                state: DVector::zeros(2),
                action: DVector::zeros(2),
                item: 0,
                reward: 1.0,
                timestamp: 0,
            }],
        }];
        // only the constant coordinate of g survives, which cancels in the softmax
        assert!(fit_behavior_policy(&[], &catalog, &BehaviorFitConfig::default()).is_err());
        let fit = fit_behavior_policy(&traj, &catalog, &BehaviorFitConfig::default()).unwrap();
        let probs = fit.policy.probabilities(&DVector::zeros(2), &catalog).unwrap();
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn calibration_respects_kl_budget() {
        let n = 10;
        let catalog = one_hot_catalog(n);
        let k = n;
        let mut wb = DVector::zeros(joint_dim(k));
        let mut theta = DVector::zeros(joint_dim(k));
        for j in 0..n {
            wb[k + j] = 0.2 * j as f64;
            theta[k + j] = -(j as f64);
        }
        let behavior = PolicyParams::new(wb, PolicyKind::Behavior);
        let traj = synthetic_logs(&behavior, &catalog, &DVector::zeros(k), 200, 1);
        let (alpha, kl) = calibrate_alpha(&theta, &behavior, 0.5, &traj, &catalog, &KlCalibration::default()).unwrap();
        assert!(kl <= 0.5 + 1e-12 && kl > 0.49, "{alpha} {kl}");
        let target = make_target_policy(&theta, alpha).unwrap();
        let mixed = mix_policies(&target, &behavior, 0.5).unwrap();
        let states: Vec<&DVector<f64>> = traj[0].steps.iter().map(|s| &s.state).collect();
        assert!((mean_kl(&mixed, &behavior, &states, &catalog).unwrap() - kl).abs() < 1e-9);
    }
}
