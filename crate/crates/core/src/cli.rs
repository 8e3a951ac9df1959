//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 internal error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::Serialize;

use crate::class::{check_assumptions, AssumptionReport, BellmanTargets, MemberIndexTuple};
use crate::complexity::record_residuals;
use crate::diagnostics::excess_loss_moments;
use crate::error::{Error, Result};
use crate::generators::{ChainParams, GenSpec, Instance, LinearGridParams, RandomTabularParams};
use crate::harness::{
    quantile, resolve_agent, run_seeds, theorem_bound, value_decomposition_check, ComplexityConfig, ExperimentConfig,
};
use crate::io::{
    complexity_report, csv_file_name, ensure_dir, inputs_hash, ledger_csv, load_config, load_instance,
    resolve_instance, to_json_pretty, unix_now, write_text, InstanceDocument, RegretSummary, RunManifest,
};
use crate::rng::{episode_seed, rng_from_seed, STREAM_POLICY};

#[derive(Debug, Parser)]
#[command(name = "cpsrl", version, about = "Conditional posterior sampling for episodic RL")]
pub struct Cli {
    /// Suppress progress and summary messages on standard error.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment config; writes regret_<seed>.csv files and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's "output", else the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Assumption checks and exact invariant diagnostics on an instance.
    Check {
        #[command(flatten)]
        input: InputArgs,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Complexity report: κ, decoupling checks, BE dimension, closed-form bounds.
    Complexity {
        #[command(flatten)]
        input: InputArgs,
        /// Horizon T for κ(b/T^β), the bounds and the check sequences (instance input only).
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a benchmark instance as JSON.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InputArgs {
    /// Experiment config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Instance file as written by `gen`.
    #[arg(long)]
    pub instance: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum GenName {
    Chain,
    RandomTabular,
    LinearGrid,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub name: GenName,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub actions: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Chain: probability that "right" advances.
    #[arg(long)]
    pub p_right: Option<f64>,
    /// Chain: mean of the single Bernoulli reward.
    #[arg(long)]
    pub reward_mean: Option<f64>,
    /// Chain: close only the reward function, without distractor members.
    #[arg(long)]
    pub no_distractors: bool,
    /// Random tabular: random seed members per step.
    #[arg(long)]
    pub members_per_step: Option<usize>,
    /// Linear grid: feature dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Linear grid: grid points per weight coordinate.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Write the instance here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenArgs {
    pub fn spec(&self) -> GenSpec {
        match self.name {
            GenName::Chain => {
                let d = ChainParams::default();
                GenSpec::Chain(ChainParams {
                    states: self.states.unwrap_or(d.states),
                    actions: self.actions.unwrap_or(d.actions),
                    horizon: self.horizon.unwrap_or(d.horizon),
                    p_right: self.p_right.unwrap_or(d.p_right),
                    reward_mean: self.reward_mean.unwrap_or(d.reward_mean),
                    distractors: !self.no_distractors,
                })
            }
            GenName::RandomTabular => {
                let d = RandomTabularParams::default();
                GenSpec::RandomTabular(RandomTabularParams {
                    states: self.states.unwrap_or(d.states),
                    actions: self.actions.unwrap_or(d.actions),
                    horizon: self.horizon.unwrap_or(d.horizon),
                    seed: self.seed.unwrap_or(d.seed),
                    members_per_step: self.members_per_step.unwrap_or(d.members_per_step),
                })
            }
            GenName::LinearGrid => {
                let d = LinearGridParams::default();
                GenSpec::LinearGrid(LinearGridParams {
                    d: self.d.unwrap_or(d.d),
                    grid: self.grid.unwrap_or(d.grid),
                    horizon: self.horizon.unwrap_or(d.horizon),
                    states: self.states.unwrap_or(d.states),
                    actions: self.actions.unwrap_or(d.actions),
                    seed: self.seed.unwrap_or(d.seed),
                })
            }
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn note(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => cmd_run(config, out.as_deref(), *seed_override, cli.quiet),
        Command::Check { input, out } => {
            let (inst, _) = load_input(input, 1000)?;
            let report = check_report(&inst)?;
            for w in &report.warnings {
                note(cli.quiet, format!("warning: {w}"));
            }
            emit(out.as_deref(), &to_json_pretty(&report))
        }
        Command::Complexity { input, episodes, out } => {
            let (inst, cfg) = load_input(input, *episodes)?;
            let report = complexity_for_config(&inst, &cfg)?;
            emit(out.as_deref(), &to_json_pretty(&report))
        }
        Command::Gen(args) => {
            let inst = args.spec().generate()?;
            emit(args.out.as_deref(), &to_json_pretty(&InstanceDocument::from_instance(&inst)))
        }
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Instance plus a config; instance files get a default config with `T = episodes`.
fn load_input(input: &InputArgs, episodes: usize) -> Result<(Instance, ExperimentConfig)> {
    match (&input.config, &input.instance) {
        (Some(c), _) => {
            let cfg = load_config(c)?;
            let inst = resolve_instance(&cfg, &base_dir(c))?;
            Ok((inst, cfg))
        }
        (None, Some(p)) => {
            let inst = load_instance(p)?;
            let cfg = ExperimentConfig {
                mdp: crate::harness::Source::Path {
                    path: p.display().to_string(),
                },
                class: None,
                agent: crate::harness::AgentConfig::new(crate::harness::AgentKind::ConditionalPs),
                episodes,
                seeds: vec![0],
                complexity: ComplexityConfig::default(),
                output: None,
            };
            cfg.validate()?;
            Ok((inst, cfg))
        }
        (None, None) => Err(Error::invalid("input", "pass --config or --instance")),
    }
}

fn epsilon_for(inst: &Instance, cfg: &ExperimentConfig) -> f64 {
    cfg.complexity.epsilon.unwrap_or_else(|| {
        let beta = cfg.agent.beta.unwrap_or(2.0);
        inst.class.bound_b() / (cfg.episodes as f64).powf(beta)
    })
}

/// Complexity report whose decoupling checks use one uniformly random tuple
/// sequence of length `T` per config seed.
pub fn complexity_for_config(inst: &Instance, cfg: &ExperimentConfig) -> Result<crate::io::ComplexityReport> {
    let n = inst.class.num_tuples();
    let records = cfg
        .seeds
        .iter()
        .map(|&s| {
            let seq: Vec<MemberIndexTuple> = (0..cfg.episodes)
                .map(|t| {
                    let mut rng = rng_from_seed(episode_seed(s, t as u64, STREAM_POLICY));
                    inst.class.tuple_from_index(rng.gen_range(0..n))
                })
                .collect();
            record_residuals(&inst.mdp, &inst.class, &seq)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = records.iter().collect();
    complexity_report(inst, &cfg.complexity, epsilon_for(inst, cfg), cfg.episodes, &refs)
}

fn cmd_run(config: &Path, out: Option<&Path>, seed_override: Option<u64>, quiet: bool) -> Result<()> {
    let started = unix_now();
    let clock = std::time::Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(s) = seed_override {
        cfg.seeds = vec![s];
    }
    let base = base_dir(config);
    let inst = resolve_instance(&cfg, &base)?;
    let agent = resolve_agent(&cfg.agent, &inst.mdp, &inst.class, cfg.episodes)?;
    let hash = inputs_hash(&cfg, &inst);
    note(
        quiet,
        format!(
            "running {} for T = {} on {} seed(s); |F| = {} tuples, eta = {}, lambda = {} ({})",
            agent.kind.name(),
            cfg.episodes,
            cfg.seeds.len(),
            inst.class.num_tuples(),
            agent.eta,
            agent.lambda,
            agent.lambda_source
        ),
    );
    let outputs = run_seeds(&agent, &inst.mdp, &inst.class, cfg.episodes, &cfg.seeds, &hash)?;

    let out_dir = match (out, &cfg.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base.join(o),
        (None, None) => PathBuf::from("."),
    };
    ensure_dir(&out_dir)?;
    let mut files = Vec::with_capacity(outputs.len());
    for o in &outputs {
        let name = csv_file_name(o.ledger.seed);
        write_text(&out_dir.join(&name), &ledger_csv(&o.ledger))?;
        files.push(name);
    }

    let records: Vec<_> = outputs.iter().filter_map(|o| o.record.as_ref()).collect();
    let complexity = complexity_report(&inst, &cfg.complexity, epsilon_for(&inst, &cfg), cfg.episodes, &records)?;
    let mut warnings: Vec<String> = outputs.first().map(|o| o.ledger.warnings.clone()).unwrap_or_default();
    let bound = match agent.kappa {
        Some(k) if agent.lambda > 0.0 => {
            match theorem_bound(k, agent.dc.value, agent.b, cfg.episodes, agent.eta, agent.lambda, inst.class.horizon(), agent.beta) {
                Ok(v) => Some(v),
                Err(e) => {
                    warnings.push(format!("regret bound not evaluated: {e}"));
                    None
                }
            }
        }
        _ => None,
    };
    if let Some(c) = complexity.dc_checks.iter().find(|c| !c.satisfied) {
        warnings.push(format!("decoupling inequality fails at mu = {} (lhs {} > rhs {})", c.mu, c.lhs, c.rhs));
    }
    let finals: Vec<f64> = outputs.iter().map(|o| o.ledger.cumulative()).collect();
    let summary = RegretSummary {
        median: quantile(&finals, 0.5),
        q25: quantile(&finals, 0.25),
        q75: quantile(&finals, 0.75),
    };
    for w in &warnings {
        note(quiet, format!("warning: {w}"));
    }
    note(
        quiet,
        format!(
            "cumulative regret: median {:.4} (IQR {:.4} .. {:.4}); bound {}",
            summary.median,
            summary.q25,
            summary.q75,
            bound.map_or("n/a".to_string(), |b| format!("{b:.4}"))
        ),
    );
    let manifest = RunManifest {
        seeds: cfg.seeds.clone(),
        config: cfg,
        content_hash: hash,
        files,
        agent,
        complexity,
        theorem_bound: bound,
        cumulative_regret: summary,
        warnings,
        started_unix: started,
        finished_unix: unix_now(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    write_text(&out_dir.join("manifest.json"), &to_json_pretty(&manifest))?;
    note(quiet, format!("wrote {}", out_dir.display()));
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub assumptions: AssumptionReport,
    pub num_tuples: u128,
    /// `κ(0)`; absent when the class is not complete.
    pub kappa_at_zero: Option<f64>,
    /// Largest `|Reg - (Σ residuals - Δf^1)|` over the sampled tuples.
    pub value_decomposition_max_gap: f64,
    pub value_decomposition_tuples: usize,
    /// Largest `|E[ΔL] - E_h^2|` over all `(h, i, j, x, a)`.
    pub excess_mean_max_error: f64,
    /// Largest `E[ΔL^2] - (4b^2/3) E_h^2` (should be <= 0).
    pub excess_variance_max_slack: f64,
    /// Largest `ln E exp(-ηΔL) + 0.25 η E_h^2` at `η = 0.4/b^2` (should be <= 0).
    pub excess_mgf_max_slack: f64,
    pub warnings: Vec<String>,
}

pub fn check_report(inst: &Instance) -> Result<CheckReport> {
    let (mdp, class) = (&inst.mdp, &inst.class);
    class.ensure_compatible(mdp)?;
    let assumptions = check_assumptions(mdp, class, 1e-9);
    let mut warnings = Vec::new();
    if !assumptions.all_hold() {
        warnings.push("some assumption fails; see the report".to_string());
    }
    let n = class.num_tuples();
    let picks: Vec<MemberIndexTuple> = if n <= 100 {
        (0..n).map(|k| class.tuple_from_index(k)).collect()
    } else {
        let mut rng = rng_from_seed(0);
        (0..100).map(|_| class.tuple_from_index(rng.gen_range(0..n))).collect()
    };
    let mut gap: f64 = 0.0;
    for f in &picks {
        gap = gap.max(value_decomposition_check(mdp, class, f)?.gap);
    }
    let targets = BellmanTargets::new(mdp, class);
    let b = class.bound_b();
    let eta = 0.4 / (b * b);
    let (mut mean_err, mut var_slack, mut mgf_slack) = (0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for h in 0..class.horizon() {
        for i in 0..class.sizes()[h] {
            for j in 0..class.size_or_terminal(h + 1) {
                for x in 0..mdp.num_states() {
                    for a in 0..mdp.num_actions() {
                        let m = excess_loss_moments(mdp, class, &targets, h, i, j, x, a, eta);
                        let e2 = m.residual * m.residual;
                        mean_err = mean_err.max((m.mean - e2).abs());
                        var_slack = var_slack.max(m.second_moment - 4.0 * b * b / 3.0 * e2);
                        mgf_slack = mgf_slack.max(m.log_mgf + 0.25 * eta * e2);
                    }
                }
            }
        }
    }
    Ok(CheckReport {
        kappa_at_zero: crate::class::kappa(class, 0.0, mdp).ok(),
        assumptions,
        num_tuples: n,
        value_decomposition_max_gap: gap,
        value_decomposition_tuples: picks.len(),
        excess_mean_max_error: mean_err,
        excess_variance_max_slack: var_slack,
        excess_mgf_max_slack: mgf_slack,
        warnings,
    })
}
