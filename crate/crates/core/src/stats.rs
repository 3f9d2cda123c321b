//! User-level bootstrap and the one-sided Wilcoxon signed-rank test.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::{derive_indexed, seeded, Rng};
use crate::state::Trajectory;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Largest sample size evaluated with the exact null distribution.
pub const EXACT_LIMIT: usize = 25;

/// One bootstrap draw: user indices sampled with replacement, plus a seed
/// for any randomness the evaluator needs (state sampling).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resample {
    pub index: usize,
    pub users: Vec<usize>,
    pub seed: u64,
}

impl Resample {
    /// How many times each of `n_users` users was drawn.
    pub fn counts(&self, n_users: usize) -> Vec<usize> {
        let mut c = vec![0; n_users];
        for &u in &self.users {
            c[u] += 1;
        }
        c
    }

    pub fn rng(&self) -> Rng {
        seeded(self.seed)
    }
}

pub fn draw_resamples(n_users: usize, resamples: usize, seed: u64) -> Vec<Resample> {
    (0..resamples)
        .map(|b| {
            let s = derive_indexed(seed, b as u64);
            let mut rng = seeded(s);
            let users = (0..n_users).map(|_| rng.random_range(0..n_users)).collect();
            Resample {
                index: b,
                users,
                seed: derive_indexed(s, u64::MAX),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// `Z_95 * sd`.
    pub half_width: f64,
    pub low: f64,
    pub high: f64,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn from_values(values: Vec<f64>, seed: u64) -> Result<Self> {
        let b = values.len();
        if b < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 resamples, got {b}")));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bootstrap value {bad}")));
        }
        let mean = values.iter().sum::<f64>() / b as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
        let sd = var.sqrt();
        let half_width = Z_95 * sd;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean,
            sd,
            half_width,
            low: mean - half_width,
            high: mean + half_width,
            percentile_low: quantile(&sorted, 0.025),
            percentile_high: quantile(&sorted, 0.975),
            resamples: b,
            seed,
            values,
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn run_resamples<T, F>(n_users: usize, resamples: usize, seed: u64, evaluator: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Resample) -> Result<T> + Sync,
{
    if resamples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 resamples, got {resamples}")));
    }
    if n_users == 0 {
        return Err(Error::EmptyDataset("no users to resample".into()));
    }
    draw_resamples(n_users, resamples, seed)
        .par_iter()
        .map(|r| {
            evaluator(r).map_err(|e| Error::Resample {
                index: r.index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Bootstrap a scalar statistic over users.
pub fn bootstrap_value<F>(n_users: usize, evaluator: F, resamples: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&Resample) -> Result<f64> + Sync,
{
    BootstrapResult::from_values(run_resamples(n_users, resamples, seed, evaluator)?, seed)
}

/// Bootstrap several statistics on shared resamples, so any two of the
/// results are paired by resample index.
pub fn bootstrap_many<F>(
    n_users: usize,
    outputs: usize,
    evaluator: F,
    resamples: usize,
    seed: u64,
) -> Result<Vec<BootstrapResult>>
where
    F: Fn(&Resample) -> Result<Vec<f64>> + Sync,
{
    let rows = run_resamples(n_users, resamples, seed, |r| {
        let v = evaluator(r)?;
        if v.len() != outputs {
            return Err(Error::DimensionMismatch {
                expected: outputs,
                actual: v.len(),
            });
        }
        Ok(v)
    })?;
    (0..outputs)
        .map(|j| BootstrapResult::from_values(rows.iter().map(|r| r[j]).collect(), seed))
        .collect()
}

/// Up to `count` distinct steps of a trajectory, drawn uniformly.
pub fn sample_states<'a>(trajectory: &'a Trajectory, count: usize, rng: &mut Rng) -> Vec<&'a DVector<f64>> {
    let n = trajectory.steps.len();
    if count >= n {
        return trajectory.steps.iter().map(|s| &s.state).collect();
    }
    let mut idx = sample(rng, n, count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &trajectory.steps[i].state).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of `|d|`, returned with the tie-group sizes.
fn midranks(abs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// `P(W+ >= observed)` under the sign-flip null, by dynamic programming
/// over doubled ranks (which are integers even with midranks).
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0.0f64; total + 1];
    ways[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let threshold = (2.0 * w_plus).round() as usize;
    let hits: f64 = ways[threshold..].iter().sum();
    hits / 2f64.powi(ranks.len() as i32)
}

fn normal_upper_tail(n: usize, w_plus: f64, ties: &[usize]) -> f64 {
    let n = n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// One-sided signed-rank test of the alternative that differences are positive.
pub fn wilcoxon_one_sided(differences: &[f64]) -> Result<WilcoxonResult> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Indistinguishable);
    }
    if nonzero.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "{} non-zero differences; the signed-rank test needs at least 5",
            nonzero.len()
        )));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w_plus = nonzero.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).fold(0.0, |acc, (_, r)| acc + r);
    let n = nonzero.len();
    let exact = n <= EXACT_LIMIT;
    let p = if exact {
        exact_upper_tail(&ranks, w_plus)
    } else {
        normal_upper_tail(n, w_plus, &ties)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value: p.clamp(0.0, 1.0),
        exact,
    })
}

/// Normal approximation regardless of `n`; exposed for diagnostics.
pub fn wilcoxon_normal_approximation(differences: &[f64]) -> Result<WilcoxonResult> {
    let exact = wilcoxon_one_sided(differences)?;
    let nonzero: Vec<f64> = differences.iter().filter(|d| **d != 0.0).map(|d| d.abs()).collect();
    let (_, ties) = midranks(&nonzero);
    Ok(WilcoxonResult {
        p_value: normal_upper_tail(exact.n, exact.w_plus, &ties).clamp(0.0, 1.0),
        exact: false,
        ..exact
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub test: WilcoxonResult,
}

impl PairedComparison {
    /// Test that `b` exceeds `a` on resamples aligned by index.
    pub fn from_results(a: &BootstrapResult, b: &BootstrapResult) -> Result<Self> {
        if a.seed != b.seed || a.values.len() != b.values.len() {
            return Err(Error::InvalidArgument("bootstrap results do not share resamples".into()));
        }
        let diffs: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| y - x).collect();
        Ok(Self {
            a: a.values.clone(),
            b: b.values.clone(),
            test: wilcoxon_one_sided(&diffs)?,
        })
    }

    pub fn p_value(&self) -> f64 {
        self.test.p_value
    }
}

/// Run both evaluators on the same resamples and test that `B > A`.
pub fn compare_policies<FA, FB>(
    n_users: usize,
    evaluator_a: FA,
    evaluator_b: FB,
    resamples: usize,
    seed: u64,
) -> Result<PairedComparison>
where
    FA: Fn(&Resample) -> Result<f64> + Sync,
    FB: Fn(&Resample) -> Result<f64> + Sync,
{
    let res = bootstrap_many(n_users, 2, |r| Ok(vec![evaluator_a(r)?, evaluator_b(r)?]), resamples, seed)?;
    PairedComparison::from_results(&res[0], &res[1])
}
