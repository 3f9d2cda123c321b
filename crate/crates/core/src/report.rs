//! End-of-run tables, rank histograms and the discount sweep of Q weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{concat, joint_batches, lstdq, Ridge};
use crate::policy::{rank_in_scores, PolicyParams};
use crate::state::Trajectory;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub method: String,
    pub mean: f64,
    pub sd: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub policy: String,
    pub estimator: String,
    pub mean: f64,
    /// 95% half-width, `1.96 * sd` over resamples.
    pub half_width: f64,
    pub sd: f64,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub resamples: usize,
}

/// One-sided test that `better` has higher value than `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub baseline: String,
    pub better: String,
    pub p_value: f64,
    pub w_plus: f64,
    pub n: usize,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub policy: String,
    pub n_items: usize,
    /// Ranks `1 + b * bin_width .. 1 + (b + 1) * bin_width` fall in bin `b` (last bin open-ended).
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl RankHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    /// `ln |theta_i / theta_const|`; `None` where the weight is exactly zero.
    pub log_abs: Vec<Option<f64>>,
    /// Mean of `|theta_i / theta_const|` over the state, item and product blocks.
    pub block_means: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    pub k: usize,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub parameters: Vec<(String, String)>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_samples: usize,
    pub gamma: f64,
    pub users_before_filter: usize,
    pub users_after_count_filter: usize,
    pub users_after_positive_filter: usize,
    pub reward_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDiagnostic {
    pub policy: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub mean_kl: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_mean: f64,
    pub effective_sample_size: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub metadata: RunMetadata,
    pub mse_table: Vec<MseRow>,
    pub value_table: Vec<ValueRow>,
    pub p_values: Vec<PValueRow>,
    pub rank_histograms: Vec<RankHistogram>,
    pub gamma_sweep: GammaSweep,
    pub diagnostics: Vec<PolicyDiagnostic>,
}

/// Grid used when none is given: fixed points plus the data's own discount.
pub fn default_gamma_grid(dataset_gamma: f64) -> Vec<f64> {
    let mut grid = vec![0.0, 0.5, 0.9, 0.99];
    if (0.0..1.0).contains(&dataset_gamma) && !grid.contains(&dataset_gamma) {
        grid.push(dataset_gamma);
    }
    grid.sort_by(f64::total_cmp);
    grid
}

/// Fit LSTDQ at every discount in `grid` and normalize each weight vector
/// by the absolute weight of the constant feature.
pub fn gamma_sweep(trajectories: &[Trajectory], grid: &[f64], ridge: Ridge) -> Result<GammaSweep> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty gamma grid".into()));
    }
    if let Some(g) = grid.iter().find(|g| !(0.0..1.0).contains(*g)) {
        return Err(Error::InvalidArgument(format!("gamma {g} outside [0, 1)")));
    }
    let batch = concat(&joint_batches(trajectories)?);
    let d = batch
        .rows
        .first()
        .map(|r| r.phi.len())
        .ok_or_else(|| Error::EmptyDataset("no transitions for the sweep".into()))?;
    let k = (d - 1) / 3;
    let points = grid
        .par_iter()
        .map(|&gamma| {
            let theta = lstdq(&batch, gamma, ridge)?.theta;
            Ok(sweep_point(gamma, &theta, k))
        })
        .collect::<Result<_>>()?;
    Ok(GammaSweep { k, points })
}

fn sweep_point(gamma: f64, theta: &DVector<f64>, k: usize) -> SweepPoint {
    let c = theta[3 * k].abs();
    let normalized: Vec<Option<f64>> = theta
        .iter()
        .map(|&t| if c > 0.0 && t != 0.0 { Some(t / c) } else { None })
        .collect();
    if c == 0.0 && theta.iter().any(|&t| t != 0.0) {
        log::warn!("gamma sweep at {gamma}: constant weight is zero, normalization undefined");
    }
    let block = |b: usize| {
        normalized[b * k..(b + 1) * k].iter().map(|x| x.map_or(0.0, f64::abs)).sum::<f64>() / k.max(1) as f64
    };
    SweepPoint {
        gamma,
        log_abs: normalized.iter().map(|x| x.map(|v| v.abs().ln())).collect(),
        block_means: [block(0), block(1), block(2)],
    }
}

/// Histogram of the rank each policy gives the logged item, over every logged step.
pub fn rank_histogram(
    name: &str,
    policy: &PolicyParams,
    trajectories: &[Trajectory],
    catalog: &DMatrix<f64>,
    bins: usize,
) -> Result<RankHistogram> {
    let n = catalog.ncols();
    let bins = bins.clamp(1, n.max(1));
    let bin_width = n as f64 / bins as f64;
    let ranks: Vec<usize> = trajectories
        .par_iter()
        .flat_map_iter(|t| t.steps.iter())
        .map(|s| rank_in_scores(policy.scores(&s.state, catalog)?.as_slice(), s.item))
        .collect::<Result<_>>()?;
    let mut counts = vec![0; bins];
    for r in ranks {
        let b = (((r - 1) as f64) / bin_width).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Ok(RankHistogram {
        policy: name.to_string(),
        n_items: n,
        bin_width,
        counts,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Plain-text rendering of the report, as written to `report.txt`.
pub fn render_text(r: &PipelineReport) -> String {
    let mut s = String::new();
    let m = &r.metadata;
    let _ = writeln!(s, "run");
    let _ = writeln!(s, "  seed            {}", m.seed);
    let _ = writeln!(s, "  users           {}", m.n_users);
    let _ = writeln!(s, "  items           {}", m.n_items);
    let _ = writeln!(s, "  interactions    {}", m.n_samples);
    let _ = writeln!(s, "  gamma           {:.6}", m.gamma);
    let _ = writeln!(
        s,
        "  users filtered  {} -> {} (count) -> {} (positive)",
        m.users_before_filter, m.users_after_count_filter, m.users_after_positive_filter
    );
    let _ = writeln!(s, "  reward range    [{}, {}]", m.reward_range.0, m.reward_range.1);
    for (k, v) in &m.parameters {
        let _ = writeln!(s, "  {k:<15} {v}");
    }

    let _ = writeln!(s, "\nprediction error (held-out MSE, mean +- sd over folds)");
    let _ = writeln!(s, "  {:<10} {:>12} {:>12} {:>6}", "method", "mse", "sd", "folds");
    for row in &r.mse_table {
        let _ = writeln!(s, "  {:<10} {:>12.6} {:>12.6} {:>6}", row.method, row.mean, row.sd, row.folds);
    }

    let _ = writeln!(s, "\npolicy value (bootstrap mean +- 95% half-width)");
    let _ = writeln!(
        s,
        "  {:<10} {:<10} {:>12} {:>12} {:>12} {:>12} {:>6}",
        "policy", "estimator", "mean", "half-width", "p2.5", "p97.5", "B"
    );
    for row in &r.value_table {
        let _ = writeln!(
            s,
            "  {:<10} {:<10} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>6}",
            row.policy, row.estimator, row.mean, row.half_width, row.percentile_low, row.percentile_high, row.resamples
        );
    }

    let _ = writeln!(s, "\none-sided Wilcoxon signed-rank tests (alternative: better > baseline)");
    let _ = writeln!(s, "  {:<10} {:<10} {:>12} {:>10} {:>6}", "better", "baseline", "p", "W+", "n");
    for row in &r.p_values {
        let _ = writeln!(
            s,
            "  {:<10} {:<10} {:>12.4e} {:>10.1} {:>6}",
            row.better, row.baseline, row.p_value, row.w_plus, row.n
        );
    }

    let _ = writeln!(s, "\npolicy diagnostics");
    let _ = writeln!(
        s,
        "  {:<10} {:>10} {:>6} {:>8} {:>10} {:>10} {:>10} {:>12}",
        "policy", "alpha", "beta", "kl", "rho min", "rho max", "rho mean", "ess"
    );
    for d in &r.diagnostics {
        let _ = writeln!(
            s,
            "  {:<10} {:>10} {:>6} {:>8.4} {:>10.4} {:>10.4} {:>10.4} {:>12.1}",
            d.policy,
            d.alpha.map_or("-".into(), |a| format!("{a:.4e}")),
            d.beta.map_or("-".into(), |b| format!("{b:.2}")),
            d.mean_kl,
            d.rho_min,
            d.rho_max,
            d.rho_mean,
            d.effective_sample_size
        );
    }

    let _ = writeln!(s, "\nQ weight blocks by gamma (mean |theta / theta_const|)");
    let _ = writeln!(s, "  {:>8} {:>12} {:>12} {:>12}", "gamma", "state", "item", "product");
    for p in &r.gamma_sweep.points {
        let _ = writeln!(
            s,
            "  {:>8.4} {:>12.6} {:>12.6} {:>12.6}",
            p.gamma, p.block_means[0], p.block_means[1], p.block_means[2]
        );
    }

    let _ = writeln!(s, "\nrank histograms (logged item rank under each policy)");
    for h in &r.rank_histograms {
        let top = h.counts.first().copied().unwrap_or(0);
        let _ = writeln!(
            s,
            "  {:<10} steps {:>8}  first bin {:>8} ({:.1}%)",
            h.policy,
            h.total(),
            top,
            100.0 * top as f64 / h.total().max(1) as f64
        );
    }
    s
}

fn gamma_sweep_csv(sweep: &GammaSweep) -> String {
    let k = sweep.k;
    let mut s = String::from("gamma");
    for block in ["state", "item", "product"] {
        for i in 0..k {
            let _ = write!(s, ",{block}_{i}");
        }
    }
    s.push_str(",const\n");
    for p in &sweep.points {
        let _ = write!(s, "{}", p.gamma);
        for v in &p.log_abs {
            let _ = write!(s, ",{}", fmt_opt(*v));
        }
        s.push('\n');
    }
    s
}

fn histogram_csv(h: &RankHistogram) -> String {
    let mut s = String::from("bin,rank_low,rank_high,count\n");
    let last = h.counts.len().saturating_sub(1);
    for (b, c) in h.counts.iter().enumerate() {
        let lo = (b as f64 * h.bin_width).floor() as usize + 1;
        let hi = if b == last { h.n_items } else { ((b + 1) as f64 * h.bin_width).floor() as usize };
        let _ = writeln!(s, "{b},{lo},{hi},{c}");
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `report.txt`, `report.json`, `gamma_sweep.csv` and one
/// `rank_hist_<policy>.csv` per policy into `dir`.
pub fn emit_report(report: &PipelineReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("report.txt"), &render_text(report))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Record {
        path: dir.join("report.json"),
        message: e.to_string(),
    })?;
    write(&dir.join("report.json"), &json)?;
    write(&dir.join("gamma_sweep.csv"), &gamma_sweep_csv(&report.gamma_sweep))?;
    for h in &report.rank_histograms {
        write(&dir.join(format!("rank_hist_{}.csv", h.policy)), &histogram_csv(h))?;
    }
    Ok(())
}
