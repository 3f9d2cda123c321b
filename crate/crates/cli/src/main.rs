use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ltvrec::estimators::EstimatorKind;
use ltvrec::ingest::write_log;
use ltvrec::pipeline::{
    BehaviorRecord, BootstrapRecord, FactorizeRecord, IngestRecord, OffPolicyRecord, OnPolicyRecord, Pipeline,
    PoliciesRecord, QRecord, RunConfig, Stage, StatesRecord,
};
use ltvrec::report::{emit_report, render_text, PipelineReport};
use ltvrec::simulator::{LatentWorld, TabularMdp};
use ltvrec::{Error, Result};

/// Lifetime-value recommendation evaluation from logged interactions.
#[derive(Parser)]
#[command(name = "ltvrec", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Every configuration key as an optional flag; flags win over `--config`.
#[derive(Args, Default)]
struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<String>,
    #[arg(long, global = true)]
    workdir: Option<String>,
    /// Field separator: a literal string, `comma` or `tab`.
    #[arg(long, global = true)]
    delimiter: Option<String>,
    /// auto, true or false.
    #[arg(long, global = true)]
    header: Option<String>,
    /// als, svd or mean.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Comma-separated methods to cross-validate, or `none`.
    #[arg(long, global = true)]
    cv_methods: Option<String>,
    #[arg(long, global = true)]
    k: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<String>,
    #[arg(long, global = true)]
    folds: Option<String>,
    /// zero or mean.
    #[arg(long, global = true)]
    svd_fill: Option<String>,
    #[arg(long, global = true)]
    min_interactions: Option<String>,
    #[arg(long, global = true)]
    require_positive: Option<String>,
    #[arg(long, global = true, alias = "reward-scale")]
    scale_rewards: Option<String>,
    /// A value in [0, 1) or `auto`.
    #[arg(long, global = true)]
    gamma: Option<String>,
    /// Ridge: `auto` or a number.
    #[arg(long, global = true)]
    epsilon: Option<String>,
    /// Target sharpness or `auto` to calibrate against --target-kl.
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[arg(long, global = true)]
    target_kl: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    /// Cap on importance ratios, or `none`.
    #[arg(long, global = true)]
    rho_clip: Option<String>,
    #[arg(long, global = true)]
    resamples: Option<String>,
    #[arg(long, global = true)]
    states_per_trajectory: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 22] {
        [
            ("input", &self.input),
            ("workdir", &self.workdir),
            ("delimiter", &self.delimiter),
            ("header", &self.header),
            ("method", &self.method),
            ("cv_methods", &self.cv_methods),
            ("k", &self.k),
            ("lambda", &self.lambda),
            ("folds", &self.folds),
            ("svd_fill", &self.svd_fill),
            ("min_interactions", &self.min_interactions),
            ("require_positive", &self.require_positive),
            ("scale_rewards", &self.scale_rewards),
            ("gamma", &self.gamma),
            ("epsilon", &self.epsilon),
            ("alpha", &self.alpha),
            ("target_kl", &self.target_kl),
            ("beta", &self.beta),
            ("rho_clip", &self.rho_clip),
            ("resamples", &self.resamples),
            ("states_per_trajectory", &self.states_per_trajectory),
            ("seed", &self.seed),
        ]
    }

    fn config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum World {
    Tabular,
    Latent,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Onpolicy,
    Q,
    Offpolicy,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter the interaction log.
    Ingest,
    /// Write a synthetic log plus a `<out>.truth.json` sidecar of true values.
    Simulate {
        #[arg(long, value_enum, default_value = "latent")]
        world: World,
        #[arg(long, default_value_t = 3000)]
        users: usize,
        #[arg(long, default_value = "simulated.csv")]
        out: PathBuf,
        /// Continuation probability of the simulated episodes.
        #[arg(long = "sim-gamma", default_value_t = 0.95)]
        sim_gamma: f64,
        /// Tabular world size.
        #[arg(long, default_value_t = 5)]
        states: usize,
        #[arg(long, default_value_t = 3)]
        actions: usize,
        /// Latent world: regular and churn-inducing item counts.
        #[arg(long, default_value_t = 30)]
        items: usize,
        #[arg(long, default_value_t = 6)]
        churn_items: usize,
        /// Latent world: behavior softmax temperature.
        #[arg(long, default_value_t = 3.0)]
        temperature: f64,
        /// Latent world: rollouts per policy for the truth file.
        #[arg(long, default_value_t = 20_000)]
        truth_episodes: usize,
    },
    /// Fit the latent model and cross-validate.
    Factorize,
    /// Build per-user latent state trajectories.
    BuildStates,
    /// Fit the behavior policy to the logged choices.
    FitBehavior,
    /// Print value estimates of one kind.
    Evaluate {
        #[arg(long, value_enum, default_value = "onpolicy")]
        kind: Kind,
    },
    /// Build the target and myopic policies.
    Improve,
    /// Bootstrap the value estimates and run the paired tests.
    Compare {
        /// Restrict printed comparisons to pairs drawn from these policies.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
    },
    /// Assemble the report; `--out` writes the files to another directory too.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every missing or stale stage.
    RunAll,
    /// Print the effective configuration.
    ShowConfig,
}

fn stage(config: RunConfig, stage: Stage) -> Result<Pipeline> {
    let pipeline = Pipeline::new(config)?;
    pipeline.run_stage(stage)?;
    Ok(pipeline)
}

fn simulate(cmd: &Command, seed: u64) -> Result<()> {
    let Command::Simulate {
        world,
        users,
        out,
        sim_gamma,
        states,
        actions,
        items,
        churn_items,
        temperature,
        truth_episodes,
    } = cmd
    else {
        unreachable!()
    };
    let (log, truth) = match world {
        World::Tabular => {
            let mdp = TabularMdp::random(*states, *actions, *sim_gamma, seed)?;
            let behavior = mdp.uniform_policy();
            let log = mdp.generate_log(&behavior, *users, seed.wrapping_add(1))?;
            let truth = mdp.truth(&behavior, &log)?;
            (log, truth)
        }
        World::Latent => {
            let w = LatentWorld::self_preservation(*items, *churn_items, *sim_gamma, seed)?;
            let behavior = w.default_behavior(*temperature);
            let log = w.generate_log(&behavior, *users, seed.wrapping_add(1))?;
            let truth = w.truth(&behavior, &log, *truth_episodes, seed.wrapping_add(2))?;
            (log, truth)
        }
    };
    write_log(out, &log.records())?;
    let sidecar = truth_path(out);
    truth.write(&sidecar)?;
    println!("wrote {} steps from {} users to {}", log.n_steps(), users, out.display());
    for (name, v) in &truth.values {
        println!("true value {name:<9} {:.4} (se {:.4})", v.value, v.standard_error);
    }
    println!("truth file {}", sidecar.display());
    Ok(())
}

fn truth_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".truth.json");
    out.with_file_name(name)
}

fn evaluate(config: RunConfig, kind: Kind) -> Result<()> {
    match kind {
        Kind::Onpolicy | Kind::Mc => {
            let p = stage(config, Stage::OnPolicy)?;
            let rec: OnPolicyRecord = p.load(Stage::OnPolicy)?;
            if matches!(kind, Kind::Mc) {
                println!("{} behavior {:.6}", EstimatorKind::Mc, rec.monte_carlo);
            } else {
                let w = &rec.weights;
                println!("{} gamma {} epsilon {:.3e}", w.kind, w.gamma, w.epsilon);
                println!("theta {:?}", w.theta.as_slice());
            }
        }
        Kind::Q => {
            let p = stage(config, Stage::Q)?;
            let rec: QRecord = p.load(Stage::Q)?;
            for (name, w) in [("q", &rec.q), ("myopic_q", &rec.myopic_q)] {
                println!("{name} gamma {} epsilon {:.3e}", w.gamma, w.epsilon);
                println!("theta {:?}", w.theta.as_slice());
            }
        }
        Kind::Offpolicy => {
            let p = stage(config, Stage::OffPolicy)?;
            let rec: OffPolicyRecord = p.load(Stage::OffPolicy)?;
            for (name, fit) in [("target", &rec.target), ("myopic", &rec.myopic)] {
                let d = &fit.diagnostics;
                println!(
                    "{name} epsilon {:.3e} rho mean {:.4} min {:.3e} max {:.3e} ess {:.1}/{} floored {} clipped {}",
                    fit.weights.epsilon, d.mean, d.min, d.max, d.effective_sample_size, d.rows, d.floored, d.clipped
                );
                println!("theta {:?}", fit.weights.theta.as_slice());
            }
        }
    }
    Ok(())
}

fn print_report(report: &PipelineReport) {
    print!("{}", render_text(report));
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.overrides.config()?;
    if let Command::Simulate { .. } = cli.command {
        return simulate(&cli.command, config.seed);
    }
    match cli.command {
        Command::Simulate { .. } => unreachable!(),
        Command::ShowConfig => print!("{}", config.to_text()),
        Command::Ingest => {
            let p = stage(config, Stage::Ingest)?;
            let d = p.load::<IngestRecord>(Stage::Ingest)?.dataset;
            println!(
                "users {} items {} interactions {} gamma {}",
                d.n_users(),
                d.n_items(),
                d.n_samples(),
                d.gamma
            );
        }
        Command::Factorize => {
            let p = stage(config, Stage::Factorize)?;
            let rec: FactorizeRecord = p.load(Stage::Factorize)?;
            for cv in &rec.cv {
                println!("{:<5} mse {:.4} sd {:.4}", cv.method.to_string(), cv.mean, cv.sd);
            }
        }
        Command::BuildStates => {
            let p = stage(config, Stage::States)?;
            let rec: StatesRecord = p.load(Stage::States)?;
            println!("trajectories {} steps {}", rec.trajectories, rec.steps);
        }
        Command::FitBehavior => {
            let p = stage(config, Stage::Behavior)?;
            let rec: BehaviorRecord = p.load(Stage::Behavior)?;
            println!("mean log-likelihood per step {:.4}", rec.mean_log_likelihood);
        }
        Command::Evaluate { kind } => evaluate(config, kind)?,
        Command::Improve => {
            let p = stage(config, Stage::Policies)?;
            let rec: PoliciesRecord = p.load(Stage::Policies)?;
            println!("target KL {:.4} myopic KL {:.4}", rec.target_kl, rec.myopic_kl);
        }
        Command::Compare { policies } => {
            let p = stage(config, Stage::Bootstrap)?;
            let rec: BootstrapRecord = p.load(Stage::Bootstrap)?;
            let keep = |name: &str| policies.is_empty() || policies.iter().any(|q| q == name);
            for v in rec.values.iter().filter(|v| keep(&v.policy)) {
                println!(
                    "{:<9} {:<9} {:.4} +- {:.4} (B={})",
                    v.policy,
                    v.estimator.to_string(),
                    v.result.mean,
                    v.result.half_width,
                    v.result.resamples
                );
            }
            for c in rec.comparisons.iter().filter(|c| keep(&c.baseline) && keep(&c.better)) {
                println!("{} > {}: p = {:.3e} (n={})", c.better, c.baseline, c.p_value, c.n);
            }
        }
        Command::Report { out } => {
            let p = stage(config, Stage::Report)?;
            let report: PipelineReport = p.load(Stage::Report)?;
            if let Some(dir) = out {
                emit_report(&report, &dir)?;
            }
            print_report(&report);
        }
        Command::RunAll => {
            let report = Pipeline::new(config)?.run_all()?;
            print_report(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
