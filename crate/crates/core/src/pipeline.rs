//! The staged end-to-end run.
//!
//! Each stage writes one JSON record into the work directory. A record holds
//! a fingerprint of everything that determines it (upstream fingerprint,
//! stage parameters, input bytes for the first stage), so a rerun with the
//! same configuration skips finished stages and reproduces the same report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    discounted_return, importance_ratios, lstd, lstdq, monte_carlo_value, per_trajectory_equations, concat,
    joint_batches, state_batches, NormalEquations, OffPolicyFit, Ridge, RhoDiagnostics, TransitionBatch, ValueWeights,
    EstimatorKind,
};
use crate::factorize::{
    als_fit, cross_validate, svd_fit, AlsConfig, CvResult, LatentModel, Method, SparseRatings, SvdConfig,
};
use crate::ingest::{filter_users, parse_str, scale_rewards, Dataset, FormatConfig};
use crate::policy::{
    calibrate_alpha, fit_behavior_policy, make_target_policy, mean_kl, mean_log_likelihood, mix_policies,
    BehaviorFit, BehaviorFitConfig, KlCalibration, PolicyKind, PolicyParams,
};
use crate::report::{
    default_gamma_grid, emit_report, gamma_sweep, rank_histogram, MseRow, PValueRow, PipelineReport,
    PolicyDiagnostic, RunMetadata, ValueRow, DEFAULT_BINS,
};
use crate::rng::{derive_labeled, seeded};
use crate::state::{build_trajectories, Trajectory};
use crate::stats::{bootstrap_many, sample_states, BootstrapResult, PairedComparison};

/// Value used for unobserved cells in the SVD back-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SvdFill {
    Zero,
    Mean,
}

impl fmt::Display for SvdFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SvdFill::Zero => "zero",
            SvdFill::Mean => "mean",
        })
    }
}

impl FromStr for SvdFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(SvdFill::Zero),
            "mean" => Ok(SvdFill::Mean),
            other => Err(Error::InvalidArgument(format!("svd_fill must be `zero` or `mean`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub workdir: PathBuf,
    pub delimiter: String,
    pub header: Option<bool>,
    /// Back-end whose latent model feeds the state builder.
    pub method: Method,
    /// Methods scored by cross-validation for the MSE table.
    pub cv_methods: Vec<Method>,
    pub k: usize,
    pub lambda: f64,
    /// `0` skips cross-validation.
    pub folds: usize,
    pub svd_fill: SvdFill,
    pub min_interactions: usize,
    /// Drop users without a positive reward; applies to binary rewards only.
    pub require_positive: bool,
    pub scale_rewards: bool,
    /// `None` uses `1 - users / interactions`.
    pub gamma: Option<f64>,
    pub epsilon: Ridge,
    /// `None` calibrates alpha against `target_kl`.
    pub alpha: Option<f64>,
    pub target_kl: f64,
    pub beta: f64,
    pub rho_clip: Option<f64>,
    pub resamples: usize,
    pub states_per_trajectory: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("interactions.csv"),
            workdir: PathBuf::from("work"),
            delimiter: ",".into(),
            header: None,
            method: Method::Als,
            cv_methods: vec![Method::Svd, Method::Als, Method::Mean],
            k: 20,
            lambda: 0.1,
            folds: 10,
            svd_fill: SvdFill::Zero,
            min_interactions: 20,
            require_positive: true,
            scale_rewards: false,
            gamma: None,
            epsilon: Ridge::Auto,
            alpha: None,
            target_kl: 0.5,
            beta: 0.5,
            rho_clip: None,
            resamples: 200,
            states_per_trajectory: 5,
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse `{value}`")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn show_opt<T: fmt::Display>(x: &Option<T>, none: &str) -> String {
    x.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub const KEYS: [&'static str; 23] = [
        "input",
        "workdir",
        "delimiter",
        "header",
        "method",
        "cv_methods",
        "k",
        "lambda",
        "folds",
        "svd_fill",
        "min_interactions",
        "require_positive",
        "scale_rewards",
        "gamma",
        "epsilon",
        "alpha",
        "target_kl",
        "beta",
        "rho_clip",
        "resamples",
        "states_per_trajectory",
        "seed",
        "config_version",
    ];

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "input" => self.input = PathBuf::from(value),
            "workdir" => self.workdir = PathBuf::from(value),
            "delimiter" => {
                self.delimiter = match value {
                    "tab" | "\\t" => "\t".into(),
                    "comma" => ",".into(),
                    other => other.into(),
                }
            }
            "header" => {
                self.header = match value {
                    "auto" => None,
                    "true" => Some(true),
                    "false" => Some(false),
                    other => return Err(Error::InvalidArgument(format!("header: expected auto, true or false, got `{other}`"))),
                }
            }
            "method" => self.method = value.parse()?,
            "cv_methods" => {
                self.cv_methods = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?
                }
            }
            "k" => self.k = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "svd_fill" => self.svd_fill = value.parse()?,
            "min_interactions" => self.min_interactions = parse_num(key, value)?,
            "require_positive" => self.require_positive = parse_num(key, value)?,
            "scale_rewards" => self.scale_rewards = parse_num(key, value)?,
            "gamma" => self.gamma = parse_auto(key, value, "auto")?,
            "epsilon" => self.epsilon = value.parse()?,
            "alpha" => self.alpha = parse_auto(key, value, "auto")?,
            "target_kl" => self.target_kl = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "rho_clip" => self.rho_clip = parse_auto(key, value, "none")?,
            "resamples" => self.resamples = parse_num(key, value)?,
            "states_per_trajectory" => self.states_per_trajectory = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "config_version" => {}
            other => return Err(Error::InvalidArgument(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            config.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.folds == 1 {
            return bad("folds must be 0 (skip) or at least 2".into());
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return bad(format!("gamma must lie in [0, 1), got {g}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.target_kl > 0.0) {
            return bad("target_kl must be positive".into());
        }
        if self.alpha.is_some_and(|a| !(a > 0.0)) {
            return bad("alpha must be positive".into());
        }
        if self.rho_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("rho_clip must be positive".into());
        }
        if self.resamples < 2 {
            return bad("resamples must be at least 2".into());
        }
        if self.states_per_trajectory == 0 {
            return bad("states_per_trajectory must be positive".into());
        }
        Ok(())
    }

    /// Value of one key in the form [`Self::set`] accepts.
    pub fn get(&self, key: &str) -> String {
        match key {
            "input" => self.input.display().to_string(),
            "workdir" => self.workdir.display().to_string(),
            "delimiter" => match self.delimiter.as_str() {
                "\t" => "tab".into(),
                d => d.into(),
            },
            "header" => show_opt(&self.header, "auto"),
            "method" => self.method.to_string(),
            "cv_methods" => {
                if self.cv_methods.is_empty() {
                    "none".into()
                } else {
                    self.cv_methods.iter().map(Method::to_string).collect::<Vec<_>>().join(",")
                }
            }
            "k" => self.k.to_string(),
            "lambda" => self.lambda.to_string(),
            "folds" => self.folds.to_string(),
            "svd_fill" => self.svd_fill.to_string(),
            "min_interactions" => self.min_interactions.to_string(),
            "require_positive" => self.require_positive.to_string(),
            "scale_rewards" => self.scale_rewards.to_string(),
            "gamma" => show_opt(&self.gamma, "auto"),
            "epsilon" => match self.epsilon {
                Ridge::Auto => "auto".into(),
                Ridge::Fixed(e) => e.to_string(),
            },
            "alpha" => show_opt(&self.alpha, "auto"),
            "target_kl" => self.target_kl.to_string(),
            "beta" => self.beta.to_string(),
            "rho_clip" => show_opt(&self.rho_clip, "none"),
            "resamples" => self.resamples.to_string(),
            "states_per_trajectory" => self.states_per_trajectory.to_string(),
            "seed" => self.seed.to_string(),
            _ => String::new(),
        }
    }

    /// The configuration as `key = value` text that [`Self::parse`] reads back.
    pub fn to_text(&self) -> String {
        Self::KEYS[..Self::KEYS.len() - 1]
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    fn format(&self) -> FormatConfig {
        FormatConfig {
            delimiter: self.delimiter.clone(),
            header: self.header,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Factorize,
    States,
    Behavior,
    OnPolicy,
    Q,
    Policies,
    OffPolicy,
    Bootstrap,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Factorize,
        Stage::States,
        Stage::Behavior,
        Stage::OnPolicy,
        Stage::Q,
        Stage::Policies,
        Stage::OffPolicy,
        Stage::Bootstrap,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Factorize => "factorize",
            Stage::States => "states",
            Stage::Behavior => "behavior",
            Stage::OnPolicy => "onpolicy",
            Stage::Q => "q",
            Stage::Policies => "policies",
            Stage::OffPolicy => "offpolicy",
            Stage::Bootstrap => "bootstrap",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|&s| s == self)?;
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }

    /// Configuration keys that influence this stage directly.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["delimiter", "header", "min_interactions", "require_positive", "scale_rewards"],
            Stage::Factorize => &["method", "cv_methods", "k", "lambda", "folds", "svd_fill", "seed"],
            Stage::States => &[],
            Stage::Behavior => &["seed"],
            Stage::OnPolicy => &["gamma", "epsilon"],
            Stage::Q => &[],
            Stage::Policies => &["alpha", "target_kl", "beta", "seed"],
            Stage::OffPolicy => &["rho_clip"],
            Stage::Bootstrap => &["resamples", "states_per_trajectory", "seed"],
            Stage::Report => &[],
        }
    }

    fn file(self) -> String {
        format!("{}.json", self.name())
    }
}

fn fnv(bytes: &[u8], start: u64) -> u64 {
    bytes
        .iter()
        .fold(start, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    stage: String,
    fingerprint: String,
    data: T,
}

#[derive(Deserialize)]
struct Header {
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub dataset: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizeRecord {
    pub cv: Vec<CvResult>,
    pub model: LatentModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatesRecord {
    pub trajectories: usize,
    pub steps: usize,
    /// Hash of every state coordinate, checked when the trajectories are rebuilt.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub fit: BehaviorFit,
    pub mean_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnPolicyRecord {
    pub weights: ValueWeights,
    pub monte_carlo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QRecord {
    pub q: ValueWeights,
    pub myopic_q: ValueWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoliciesRecord {
    pub target: PolicyParams,
    pub myopic: PolicyParams,
    pub target_kl: f64,
    pub myopic_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyRecord {
    pub target: OffPolicyFit,
    pub myopic: OffPolicyFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub policy: String,
    pub estimator: EstimatorKind,
    pub result: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRecord {
    pub values: Vec<ValueEstimate>,
    pub comparisons: Vec<PValueRow>,
}

fn checksum(trajectories: &[Trajectory]) -> String {
    let mut h = FNV_OFFSET;
    for t in trajectories {
        h = fnv(t.user_id.as_bytes(), h);
        for s in &t.steps {
            for x in s.state.iter() {
                h = fnv(&x.to_bits().to_le_bytes(), h);
            }
        }
    }
    format!("{h:016x}")
}

/// Staged runner over one configuration.
pub struct Pipeline {
    pub config: RunConfig,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.config.workdir.join(stage.file())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.config.workdir.join("report")
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_labeled(self.config.seed, stage.name())
    }

    fn stored_fingerprint(&self, stage: Stage) -> Result<Option<String>> {
        let path = self.record_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::Record {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(Some(header.fingerprint))
    }

    /// What the fingerprint of `stage` must be given the records on disk.
    fn expected_fingerprint(&self, stage: Stage) -> Result<String> {
        let mut h = match stage.upstream() {
            Some(up) => {
                let fp = self.stored_fingerprint(up)?.ok_or_else(|| Error::MissingRecord {
                    stage: up.name(),
                    path: self.record_path(up),
                })?;
                fnv(fp.as_bytes(), FNV_OFFSET)
            }
            None => {
                let path = &self.config.input;
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                fnv(&bytes, FNV_OFFSET)
            }
        };
        h = fnv(stage.name().as_bytes(), h);
        for key in stage.keys() {
            h = fnv(format!("{key}={};", self.config.get(key)).as_bytes(), h);
        }
        Ok(format!("{h:016x}"))
    }

    pub fn is_current(&self, stage: Stage) -> Result<bool> {
        let stored = self.stored_fingerprint(stage)?;
        Ok(stored.is_some() && stored == Some(self.expected_fingerprint(stage)?))
    }

    fn save<T: Serialize>(&self, stage: Stage, fingerprint: String, data: &T) -> Result<()> {
        let dir = &self.config.workdir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = self.record_path(stage);
        let env = Envelope {
            stage: stage.name().to_string(),
            fingerprint,
            data,
        };
        let text = serde_json::to_string(&env).map_err(|e| Error::Record {
            path: path.clone(),
            message: e.to_string(),
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Load a stage's persisted record.
    pub fn load<T: DeserializeOwned>(&self, stage: Stage) -> Result<T> {
        let path = self.record_path(stage);
        if !path.exists() {
            return Err(Error::MissingRecord {
                stage: stage.name(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| Error::Record {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(env.data)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(self.load::<IngestRecord>(Stage::Ingest)?.dataset)
    }

    pub fn model(&self) -> Result<LatentModel> {
        Ok(self.load::<FactorizeRecord>(Stage::Factorize)?.model)
    }

    /// Rebuild the trajectories from the ingest and factorize records and
    /// check them against the states record.
    pub fn trajectories(&self) -> Result<(Vec<Trajectory>, LatentModel)> {
        let record: StatesRecord = self.load(Stage::States)?;
        let model = self.model()?;
        let trajs = build_trajectories(&self.dataset()?, &model)?;
        if checksum(&trajs) != record.checksum {
            return Err(Error::Record {
                path: self.record_path(Stage::States),
                message: "rebuilt states do not match the stored checksum; rerun build-states".into(),
            });
        }
        Ok((trajs, model))
    }

    /// Discount in effect: the override if set, the dataset estimate otherwise.
    pub fn gamma(&self) -> Result<f64> {
        match self.config.gamma {
            Some(g) => Ok(g),
            None => Ok(self.dataset()?.gamma),
        }
    }

    /// Run one stage from the records on disk, whether or not it is current.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let fingerprint = self.expected_fingerprint(stage).map_err(|e| wrap(stage, e))?;
        log::info!("stage {}", stage.name());
        self.execute(stage, fingerprint).map_err(|e| wrap(stage, e))
    }

    fn execute(&self, stage: Stage, fp: String) -> Result<()> {
        match stage {
            Stage::Ingest => self.save(stage, fp, &self.ingest()?),
            Stage::Factorize => self.save(stage, fp, &self.factorize()?),
            Stage::States => {
                let model = self.model()?;
                let trajs = build_trajectories(&self.dataset()?, &model)?;
                let rec = StatesRecord {
                    trajectories: trajs.len(),
                    steps: trajs.iter().map(Trajectory::len).sum(),
                    checksum: checksum(&trajs),
                };
                self.save(stage, fp, &rec)
            }
            Stage::Behavior => self.save(stage, fp, &self.behavior()?),
            Stage::OnPolicy => self.save(stage, fp, &self.on_policy()?),
            Stage::Q => self.save(stage, fp, &self.q()?),
            Stage::Policies => self.save(stage, fp, &self.policies()?),
            Stage::OffPolicy => self.save(stage, fp, &self.off_policy()?),
            Stage::Bootstrap => self.save(stage, fp, &self.bootstrap()?),
            Stage::Report => {
                let report = self.assemble_report()?;
                self.save(stage, fp, &report)?;
                emit_report(&report, self.report_dir())
            }
        }
    }

    /// Run every stage that is missing or out of date, then return the report.
    pub fn run_all(&self) -> Result<PipelineReport> {
        for stage in Stage::ALL {
            if self.is_current(stage).map_err(|e| wrap(stage, e))? {
                log::info!("stage {} is current; skipping", stage.name());
                continue;
            }
            self.run_stage(stage)?;
        }
        let report: PipelineReport = self.load(Stage::Report)?;
        if !self.report_dir().join("report.json").exists() {
            emit_report(&report, self.report_dir())?;
        }
        Ok(report)
    }

    fn ingest(&self) -> Result<IngestRecord> {
        let path = &self.config.input;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_str(&text, &self.config.format())?;
        let binary = records.iter().all(|r| r.reward == 0.0 || r.reward == 1.0);
        let mut dataset = filter_users(&records, self.config.min_interactions, self.config.require_positive && binary)?;
        if self.config.scale_rewards {
            dataset = scale_rewards(&dataset, (0.0, 1.0))?;
        }
        Ok(IngestRecord { dataset })
    }

    fn ratings(&self, dataset: &Dataset) -> Result<SparseRatings> {
        let ratings = SparseRatings::from_dataset(dataset)?;
        Ok(match self.config.svd_fill {
            SvdFill::Zero => ratings,
            SvdFill::Mean => {
                let mean = ratings.mean().unwrap_or(0.0);
                ratings.with_default(mean)
            }
        })
    }

    fn factorize(&self) -> Result<FactorizeRecord> {
        let c = &self.config;
        let dataset = self.dataset()?;
        let ratings = self.ratings(&dataset)?;
        let seed = self.stage_seed(Stage::Factorize);
        let mut cv = Vec::new();
        if c.folds >= 2 {
            for &method in &c.cv_methods {
                cv.push(cross_validate(&ratings, method, c.k, c.lambda, c.folds, derive_labeled(seed, "cv"))?);
            }
        }
        let model = match c.method {
            Method::Als => {
                als_fit(
                    &ratings,
                    &AlsConfig {
                        k: c.k,
                        lambda: c.lambda,
                        seed,
                        ..Default::default()
                    },
                )?
                .model
            }
            Method::Svd => svd_fit(
                &ratings,
                &SvdConfig {
                    k: c.k,
                    lambda: c.lambda,
                    seed,
                    ..Default::default()
                },
            )?,
            Method::Mean => {
                return Err(Error::InvalidArgument("the mean predictor has no latent vectors; use als or svd".into()))
            }
        };
        Ok(FactorizeRecord { cv, model })
    }

    fn behavior(&self) -> Result<BehaviorRecord> {
        let (trajs, model) = self.trajectories()?;
        let cfg = BehaviorFitConfig {
            seed: self.stage_seed(Stage::Behavior),
            ..Default::default()
        };
        let fit = fit_behavior_policy(&trajs, &model.items, &cfg)?;
        let ll = mean_log_likelihood(&fit.policy, &trajs, &model.items)?;
        Ok(BehaviorRecord {
            fit,
            mean_log_likelihood: ll,
        })
    }

    fn on_policy(&self) -> Result<OnPolicyRecord> {
        let (trajs, _) = self.trajectories()?;
        let gamma = self.gamma()?;
        let weights = lstd(&concat(&state_batches(&trajs)), gamma, self.config.epsilon)?;
        Ok(OnPolicyRecord {
            weights,
            monte_carlo: monte_carlo_value(&trajs, gamma)?,
        })
    }

    fn q(&self) -> Result<QRecord> {
        let (trajs, _) = self.trajectories()?;
        let batch = concat(&joint_batches(&trajs)?);
        let gamma = self.gamma()?;
        Ok(QRecord {
            q: lstdq(&batch, gamma, self.config.epsilon)?,
            myopic_q: lstdq(&batch, 0.0, self.config.epsilon)?,
        })
    }

    fn policies(&self) -> Result<PoliciesRecord> {
        let (trajs, model) = self.trajectories()?;
        let behavior = self.load::<BehaviorRecord>(Stage::Behavior)?.fit.policy;
        let q: QRecord = self.load(Stage::Q)?;
        let seed = self.stage_seed(Stage::Policies);
        let cal = KlCalibration {
            max_kl: self.config.target_kl,
            seed,
            ..Default::default()
        };
        let build = |theta: &DVector<f64>, kind: PolicyKind| -> Result<(PolicyParams, f64)> {
            let alpha = match self.config.alpha {
                Some(a) => a,
                None => calibrate_alpha(theta, &behavior, self.config.beta, &trajs, &model.items, &cal)?.0,
            };
            let mut p = mix_policies(&make_target_policy(theta, alpha)?, &behavior, self.config.beta)?;
            p.kind = kind;
            let states = kl_states(&trajs, cal.subsample, seed);
            let kl = mean_kl(&p, &behavior, &states, &model.items)?;
            Ok((p, kl))
        };
        let (target, target_kl) = build(&q.q.theta, PolicyKind::Target)?;
        let (myopic, myopic_kl) = build(&q.myopic_q.theta, PolicyKind::Myopic)?;
        Ok(PoliciesRecord {
            target,
            myopic,
            target_kl,
            myopic_kl,
        })
    }

    fn off_policy(&self) -> Result<OffPolicyRecord> {
        let (trajs, model) = self.trajectories()?;
        let behavior = self.load::<BehaviorRecord>(Stage::Behavior)?.fit.policy;
        let pol: PoliciesRecord = self.load(Stage::Policies)?;
        let gamma = self.gamma()?;
        let fit = |p: &PolicyParams| {
            crate::estimators::off_policy_lstd(
                &trajs,
                p,
                &behavior,
                &model.items,
                gamma,
                self.config.epsilon,
                self.config.rho_clip,
            )
        };
        Ok(OffPolicyRecord {
            target: fit(&pol.target)?,
            myopic: fit(&pol.myopic)?,
        })
    }

    fn bootstrap(&self) -> Result<BootstrapRecord> {
        let (trajs, model) = self.trajectories()?;
        let behavior = self.load::<BehaviorRecord>(Stage::Behavior)?.fit.policy;
        let pol: PoliciesRecord = self.load(Stage::Policies)?;
        let gamma = self.gamma()?;
        let values = bootstrap_policy_values(
            &trajs,
            &model.items,
            &behavior,
            &[&pol.target, &pol.myopic],
            gamma,
            self.config.epsilon,
            self.config.rho_clip,
            self.config.states_per_trajectory,
            self.config.resamples,
            self.stage_seed(Stage::Bootstrap),
        )?;
        let names = ["behavior", "behavior", "target", "myopic"];
        let kinds = [EstimatorKind::OnPolicy, EstimatorKind::Mc, EstimatorKind::OffPolicy, EstimatorKind::OffPolicy];
        let values: Vec<ValueEstimate> = values
            .into_iter()
            .zip(names.iter().zip(kinds))
            .map(|(result, (name, estimator))| ValueEstimate {
                policy: name.to_string(),
                estimator,
                result,
            })
            .collect();
        let pairs = [(0, 2, "behavior", "target"), (3, 2, "myopic", "target"), (0, 3, "behavior", "myopic")];
        let comparisons = pairs
            .iter()
            .map(|&(a, b, baseline, better)| {
                let c = PairedComparison::from_results(&values[a].result, &values[b].result)?;
                Ok(PValueRow {
                    baseline: baseline.into(),
                    better: better.into(),
                    p_value: c.test.p_value,
                    w_plus: c.test.w_plus,
                    n: c.test.n,
                    exact: c.test.exact,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BootstrapRecord { values, comparisons })
    }

    fn assemble_report(&self) -> Result<PipelineReport> {
        let dataset = self.dataset()?;
        let fact: FactorizeRecord = self.load(Stage::Factorize)?;
        let (trajs, model) = self.trajectories()?;
        let behavior: BehaviorRecord = self.load(Stage::Behavior)?;
        let pol: PoliciesRecord = self.load(Stage::Policies)?;
        let off: OffPolicyRecord = self.load(Stage::OffPolicy)?;
        let boot: BootstrapRecord = self.load(Stage::Bootstrap)?;
        let gamma = self.gamma()?;

        let reward_range = dataset
            .rewards()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
        let metadata = RunMetadata {
            seed: self.config.seed,
            parameters: RunConfig::KEYS[..RunConfig::KEYS.len() - 1]
                .iter()
                .filter(|k| !matches!(**k, "input" | "workdir"))
                .map(|k| (k.to_string(), self.config.get(k)))
                .collect(),
            n_users: dataset.n_users(),
            n_items: dataset.n_items(),
            n_samples: dataset.n_samples(),
            gamma,
            users_before_filter: dataset.filter.users_in,
            users_after_count_filter: dataset.filter.after_count_filter,
            users_after_positive_filter: dataset.filter.after_positive_filter,
            reward_range,
        };
        let mse_table = fact
            .cv
            .iter()
            .map(|c| MseRow {
                method: c.method.to_string(),
                mean: c.mean,
                sd: c.sd,
                folds: c.fold_mse.len(),
            })
            .collect();
        let value_table = boot
            .values
            .iter()
            .map(|v| ValueRow {
                policy: v.policy.clone(),
                estimator: v.estimator.to_string(),
                mean: v.result.mean,
                half_width: v.result.half_width,
                sd: v.result.sd,
                percentile_low: v.result.percentile_low,
                percentile_high: v.result.percentile_high,
                resamples: v.result.resamples,
            })
            .collect();
        let rank_histograms = [("behavior", &behavior.fit.policy), ("target", &pol.target), ("myopic", &pol.myopic)]
            .iter()
            .map(|(name, p)| rank_histogram(name, p, &trajs, &model.items, DEFAULT_BINS))
            .collect::<Result<_>>()?;
        let sweep = gamma_sweep(&trajs, &default_gamma_grid(gamma), self.config.epsilon)?;
        let diag = |name: &str, p: &PolicyParams, kl: f64, d: &RhoDiagnostics| PolicyDiagnostic {
            policy: name.into(),
            alpha: p.alpha,
            beta: p.beta,
            mean_kl: kl,
            rho_min: d.min,
            rho_max: d.max,
            rho_mean: d.mean,
            effective_sample_size: d.effective_sample_size,
            rows: d.rows,
        };
        let diagnostics = vec![
            diag("target", &pol.target, pol.target_kl, &off.target.diagnostics),
            diag("myopic", &pol.myopic, pol.myopic_kl, &off.myopic.diagnostics),
        ];
        Ok(PipelineReport {
            metadata,
            mse_table,
            value_table,
            p_values: boot.comparisons,
            rank_histograms,
            gamma_sweep: sweep,
            diagnostics,
        })
    }
}

fn wrap(stage: Stage, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.name(),
            source: Box::new(other),
        },
    }
}

fn kl_states(trajs: &[Trajectory], limit: usize, seed: u64) -> Vec<&DVector<f64>> {
    let all: Vec<&DVector<f64>> = trajs.iter().flat_map(|t| t.steps.iter().map(|s| &s.state)).collect();
    if all.len() <= limit {
        return all;
    }
    let mut idx = rand::seq::index::sample(&mut seeded(seed), all.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Bootstrap values on shared user resamples. Returns, in order: behavior
/// by on-policy LSTD, behavior by Monte-Carlo, then each of `targets` by
/// importance-weighted LSTD. Every LSTD value averages `theta . s` over the
/// same sampled states.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_policy_values(
    trajectories: &[Trajectory],
    catalog: &DMatrix<f64>,
    behavior: &PolicyParams,
    targets: &[&PolicyParams],
    gamma: f64,
    ridge: Ridge,
    rho_clip: Option<f64>,
    states_per_trajectory: usize,
    resamples: usize,
    seed: u64,
) -> Result<Vec<BootstrapResult>> {
    let base = state_batches(trajectories);
    let mut equations = vec![per_trajectory_equations(&base, gamma)?];
    for t in targets {
        let (rho, _) = importance_ratios(trajectories, t, behavior, catalog, rho_clip)?;
        let batches: Vec<TransitionBatch> = base
            .iter()
            .zip(&rho)
            .map(|(b, r)| b.clone().with_rho(r))
            .collect::<Result<_>>()?;
        equations.push(per_trajectory_equations(&batches, gamma)?);
    }
    let returns: Vec<f64> = trajectories.iter().map(|t| discounted_return(t, gamma)).collect();
    let dim = equations[0][0].dim();
    let m = trajectories.len();

    bootstrap_many(
        m,
        targets.len() + 2,
        |r| {
            let counts = r.counts(m);
            let thetas: Vec<DVector<f64>> = equations
                .iter()
                .map(|eqs| {
                    let mut total = NormalEquations::zeros(dim);
                    for (eq, &c) in eqs.iter().zip(&counts) {
                        if c > 0 {
                            total.add_repeated(eq, c);
                        }
                    }
                    total.solve(ridge).map(|(theta, _)| theta)
                })
                .collect::<Result<_>>()?;
            let mut rng = r.rng();
            let mut sums = vec![0.0; thetas.len()];
            let mut n_states = 0usize;
            for &u in &r.users {
                for s in sample_states(&trajectories[u], states_per_trajectory, &mut rng) {
                    for (acc, theta) in sums.iter_mut().zip(&thetas) {
                        *acc += theta.dot(s);
                    }
                    n_states += 1;
                }
            }
            let mc = r.users.iter().map(|&u| returns[u]).sum::<f64>() / m as f64;
            let mut out = Vec::with_capacity(thetas.len() + 1);
            out.push(sums[0] / n_states as f64);
            out.push(mc);
            out.extend(sums[1..].iter().map(|s| s / n_states as f64));
            Ok(out)
        },
        resamples,
        seed,
    )
}
