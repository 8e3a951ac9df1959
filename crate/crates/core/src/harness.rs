//! Episode loop, baselines, exact regret accounting and the regret bound.

use std::collections::HashMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{check_assumptions, greedy_policy, kappa, Backing, MemberIndexTuple, QFunctionClass};
use crate::complexity::{dc_bound_glm, dc_bound_linear, record_residuals, BeMode, ResidualSequenceRecord};
use crate::error::{Error, Result};
use crate::generators::GenSpec;
use crate::mdp::{
    occupancy_measures, optimal_values, policy_value, simulate_episode, DeterministicPolicy, TabularMdp,
};
use crate::posterior::{Hyperparameters, PosteriorState};
use crate::rng::{episode_seed, rng_from_seed, STREAM_ENV, STREAM_POLICY, STREAM_POSTERIOR};

/// Where an MDP or class comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Path {
        path: String,
    },
    Gen {
        gen: GenSpec,
    },
    Inline(serde_json::Value),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Sample from the conditional posterior, play greedily.
    ConditionalPs,
    /// Conditional posterior sampling with `λ = 0`.
    NoOptimism,
    /// Uniformly random action per `(h, x)`, redrawn every episode.
    Random,
    /// Play the posterior mode instead of a sample.
    GreedyFit,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::ConditionalPs => "conditional_ps",
            AgentKind::NoOptimism => "no_optimism",
            AgentKind::Random => "random",
            AgentKind::GreedyFit => "greedy_fit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(rename = "type")]
    pub kind: AgentKind,
    /// Defaults to `0.4 / b^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Defaults to the tuned value for `conditional_ps`, 0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Exponent in `ε = b / T^β`; defaults to 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl AgentConfig {
    pub fn new(kind: AgentKind) -> Self {
        AgentConfig {
            kind,
            eta: None,
            lambda: None,
            alpha: None,
            beta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityConfig {
    /// Defaults to `b / T^β`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_mu_list")]
    pub mu_list: Vec<f64>,
    #[serde(default)]
    pub be_mode: BeMode,
}

fn default_mu_list() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            epsilon: None,
            mu_list: default_mu_list(),
            be_mode: BeMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: Source,
    /// May be omitted when `mdp` is a generator, which then supplies the class too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<Source>,
    pub agent: AgentConfig,
    #[serde(rename = "T")]
    pub episodes: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub complexity: ComplexityConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::invalid("T", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "at least one seed is required"));
        }
        if let Some(eta) = self.agent.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid("agent.eta", format!("must be > 0, got {eta}")));
            }
        }
        if let Some(beta) = self.agent.beta {
            if !(beta > 0.0) {
                return Err(Error::invalid("agent.beta", format!("must be > 0, got {beta}")));
            }
        }
        if self.complexity.mu_list.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("complexity.mu_list", "entries must be > 0"));
        }
        Ok(())
    }
}

/// Decoupling-coefficient value used for tuning and the bound, and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcValue {
    pub value: f64,
    pub source: String,
}

/// Closed-form decoupling bound for the class's backing: linear in the feature
/// dimension, linear with `d = |X||A|` for tables, scaled by `(K/k)^2` for GLMs.
pub fn dc_for_class(mdp: &TabularMdp, class: &QFunctionClass, episodes: usize) -> Result<DcValue> {
    let big_h = class.horizon();
    Ok(match class.backing() {
        Backing::ExplicitTable => {
            let d = mdp.num_states() * mdp.num_actions();
            DcValue {
                value: dc_bound_linear(d, big_h, episodes),
                source: format!("linear bound, tabular d = |X||A| = {d}"),
            }
        }
        Backing::LinearFeatures { features, .. } => DcValue {
            value: dc_bound_linear(features.dim(), big_h, episodes),
            source: format!("linear bound, feature dimension d = {}", features.dim()),
        },
        Backing::GeneralizedLinear { features, link, .. } => {
            let (k, big_k) = link.lipschitz();
            DcValue {
                value: dc_bound_glm(features.dim(), big_h, episodes, k, big_k)?,
                source: format!("generalized linear bound, d = {}, k = {k}, K = {big_k}", features.dim()),
            }
        }
    })
}

/// Fully resolved agent settings for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAgent {
    pub kind: AgentKind,
    pub eta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub b: f64,
    pub kappa_eps: f64,
    /// `κ(b / T^β)`, when every cover set at that level is nonempty.
    pub kappa: Option<f64>,
    pub dc: DcValue,
    /// How `λ` was chosen.
    pub lambda_source: String,
}

impl ResolvedAgent {
    pub fn hyper(&self) -> Result<Hyperparameters> {
        Hyperparameters::new(self.eta, self.lambda, self.alpha)
    }
}

pub fn resolve_agent(
    agent: &AgentConfig,
    mdp: &TabularMdp,
    class: &QFunctionClass,
    episodes: usize,
) -> Result<ResolvedAgent> {
    class.ensure_compatible(mdp)?;
    let b = class.bound_b();
    let eta = agent.eta.unwrap_or(0.4 / (b * b));
    let alpha = agent.alpha.unwrap_or(1.0);
    let beta = agent.beta.unwrap_or(2.0);
    let kappa_eps = b / (episodes as f64).powf(beta);
    let kappa_val = kappa(class, kappa_eps, mdp).ok();
    let dc = dc_for_class(mdp, class, episodes)?;
    let (lambda, lambda_source) = match (agent.kind, agent.lambda) {
        (AgentKind::NoOptimism, Some(l)) if l != 0.0 => {
            return Err(Error::invalid("agent.lambda", "no_optimism fixes lambda = 0"));
        }
        (AgentKind::NoOptimism, _) => (0.0, "fixed at 0".to_string()),
        (_, Some(l)) => (l, "configured".to_string()),
        (AgentKind::ConditionalPs, None) => match kappa_val {
            Some(k) => (
                tuned_lambda(k, dc.value, b, episodes),
                format!("tuned sqrt(T kappa / (b^2 dc)) with kappa(eps = {kappa_eps:e}) and dc from {}", dc.source),
            ),
            None => {
                return Err(Error::invalid(
                    "agent.lambda",
                    format!("cannot tune: some cover set at eps = {kappa_eps:e} is empty; set lambda explicitly"),
                ))
            }
        },
        (_, None) => (0.0, "default 0".to_string()),
    };
    let resolved = ResolvedAgent {
        kind: agent.kind,
        eta,
        lambda,
        alpha,
        beta,
        b,
        kappa_eps,
        kappa: kappa_val,
        dc,
        lambda_source,
    };
    if agent.kind != AgentKind::Random {
        resolved.hyper()?;
    }
    Ok(resolved)
}

/// `λ = sqrt(T κ / (b^2 dc))`.
pub fn tuned_lambda(kappa_val: f64, dc: f64, b: f64, episodes: usize) -> f64 {
    (episodes as f64 * kappa_val / (b * b * dc)).sqrt()
}

/// `(λ/η) dc + (2T/λ) κ + 6 H T^{2-β} / λ + b T^{1-β}`.
#[allow(clippy::too_many_arguments)]
pub fn theorem_bound(
    kappa_val: f64,
    dc: f64,
    b: f64,
    episodes: usize,
    eta: f64,
    lambda: f64,
    horizon: usize,
    beta: f64,
) -> Result<f64> {
    let limit = 0.4 / (b * b);
    if eta > limit {
        return Err(Error::EtaTooLarge { eta, limit });
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", "must be > 0"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda", "must be > 0"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid("beta", "must be > 0"));
    }
    let t = episodes as f64;
    Ok(lambda / eta * dc
        + 2.0 * t / lambda * kappa_val
        + 6.0 * horizon as f64 * t.powf(2.0 - beta) / lambda
        + b * t.powf(1.0 - beta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedBound {
    pub eta: f64,
    pub lambda: f64,
    pub bound: f64,
}

/// The bound at `β = 2`, `η = 0.4 / b^2` and the tuned `λ`.
pub fn theorem_bound_tuned(kappa_val: f64, dc: f64, b: f64, episodes: usize, horizon: usize) -> Result<TunedBound> {
    let eta = 0.4 / (b * b);
    let lambda = tuned_lambda(kappa_val, dc, b, episodes);
    let bound = theorem_bound(kappa_val, dc, b, episodes, eta, lambda, horizon, 2.0)?;
    Ok(TunedBound { eta, lambda, bound })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    pub instantaneous_regret: f64,
    pub cumulative_regret: f64,
    /// `None` for agents that do not select a member tuple.
    pub sampled_tuple: Option<MemberIndexTuple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub seed: u64,
    pub agent: AgentKind,
    pub config_hash: String,
    pub v_star: f64,
    pub episodes: Vec<EpisodeRecord>,
    /// Assumption violations found before the run; the bound need not hold then.
    pub warnings: Vec<String>,
}

impl RegretLedger {
    pub fn cumulative(&self) -> f64 {
        self.episodes.last().map_or(0.0, |e| e.cumulative_regret)
    }

    /// Cumulative regret after the first `t` episodes.
    pub fn cumulative_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.episodes[t - 1].cumulative_regret
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub ledger: RegretLedger,
    /// Residuals of the played tuples; absent for the random baseline.
    pub record: Option<ResidualSequenceRecord>,
}

fn assumption_warnings(mdp: &TabularMdp, class: &QFunctionClass) -> Vec<String> {
    let r = check_assumptions(mdp, class, 1e-9);
    let mut out = Vec::new();
    if !r.realizable {
        out.push("class does not contain Q* (realizability fails)".to_string());
    }
    if !r.bounded {
        out.push(format!("member values leave [0, b-1] for b = {}", r.bound_b));
    }
    if !r.complete {
        out.push(format!(
            "class is not closed under the Bellman operator ({} violations)",
            r.completeness_violations.len()
        ));
    }
    out
}

/// Regret of a policy, with float noise around 0 snapped to 0.
fn regret_of(v_star: f64, value: f64) -> Result<f64> {
    let r = v_star - value;
    if r < -1e-10 {
        return Err(Error::Internal(format!("negative regret {r}: policy beats V*")));
    }
    Ok(r.max(0.0))
}

/// Conditional posterior sampling (or its no-optimism and mode-playing variants) for one seed.
pub fn run_algorithm1(
    agent: &ResolvedAgent,
    mdp: &TabularMdp,
    class: &QFunctionClass,
    episodes: usize,
    seed: u64,
    config_hash: &str,
) -> Result<RunOutput> {
    if agent.kind == AgentKind::Random {
        return Err(Error::invalid("agent.type", "random is a baseline; use run_baseline"));
    }
    class.ensure_compatible(mdp)?;
    let hyper = agent.hyper()?;
    let v_star = optimal_values(mdp).v1(mdp);
    let mut state = PosteriorState::new(class, hyper, mdp.initial_state())?;
    let mut values: HashMap<MemberIndexTuple, f64> = HashMap::new();
    let mut records = Vec::with_capacity(episodes);
    let mut played = Vec::with_capacity(episodes);
    let mut cumulative = 0.0;
    for t in 0..episodes {
        let chain = state.build_chain(class);
        let f = match agent.kind {
            AgentKind::GreedyFit => chain.mode(),
            _ => chain
                .sampler()
                .sample(&mut rng_from_seed(episode_seed(seed, t as u64, STREAM_POSTERIOR))),
        };
        let pi = greedy_policy(class, &f);
        let value = *values.entry(f.clone()).or_insert_with(|| policy_value(mdp, &pi));
        let regret = regret_of(v_star, value)?;
        cumulative += regret;
        let trajectory = simulate_episode(mdp, &pi, episode_seed(seed, t as u64, STREAM_ENV));
        state.update_losses(class, &trajectory)?;
        played.push(f.clone());
        records.push(EpisodeRecord {
            episode: t + 1,
            instantaneous_regret: regret,
            cumulative_regret: cumulative,
            sampled_tuple: Some(f),
        });
    }
    let record = record_residuals(mdp, class, &played)?;
    Ok(RunOutput {
        ledger: RegretLedger {
            seed,
            agent: agent.kind,
            config_hash: config_hash.to_string(),
            v_star,
            episodes: records,
            warnings: assumption_warnings(mdp, class),
        },
        record: Some(record),
    })
}

/// Baselines: uniformly random policies, or any posterior-based variant.
pub fn run_baseline(
    agent: &ResolvedAgent,
    mdp: &TabularMdp,
    class: &QFunctionClass,
    episodes: usize,
    seed: u64,
    config_hash: &str,
) -> Result<RunOutput> {
    if agent.kind != AgentKind::Random {
        return run_algorithm1(agent, mdp, class, episodes, seed, config_hash);
    }
    let v_star = optimal_values(mdp).v1(mdp);
    let (n, na, big_h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut records = Vec::with_capacity(episodes);
    let mut cumulative = 0.0;
    for t in 0..episodes {
        let mut rng = rng_from_seed(episode_seed(seed, t as u64, STREAM_POLICY));
        let actions = (0..big_h * n).map(|_| rng.gen_range(0..na)).collect();
        let pi = DeterministicPolicy::new(big_h, n, na, actions)?;
        let regret = regret_of(v_star, policy_value(mdp, &pi))?;
        cumulative += regret;
        // The trajectory is not used by this agent but is drawn to keep the
        // environment stream aligned with the learning agents.
        let _ = simulate_episode(mdp, &pi, episode_seed(seed, t as u64, STREAM_ENV));
        records.push(EpisodeRecord {
            episode: t + 1,
            instantaneous_regret: regret,
            cumulative_regret: cumulative,
            sampled_tuple: None,
        });
    }
    Ok(RunOutput {
        ledger: RegretLedger {
            seed,
            agent: agent.kind,
            config_hash: config_hash.to_string(),
            v_star,
            episodes: records,
            warnings: assumption_warnings(mdp, class),
        },
        record: None,
    })
}

/// Independent runs, one per seed, in parallel; results in seed order.
pub fn run_seeds(
    agent: &ResolvedAgent,
    mdp: &TabularMdp,
    class: &QFunctionClass,
    episodes: usize,
    seeds: &[u64],
    config_hash: &str,
) -> Result<Vec<RunOutput>> {
    seeds
        .par_iter()
        .map(|&s| run_baseline(agent, mdp, class, episodes, s, config_hash))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueDecomposition {
    /// `V*_1(x^1) - V^{π_f}_1(x^1)`.
    pub reg: f64,
    /// `E_{π_f} Σ_h E_h(f; x^h, a^h)`.
    pub sum_residual_terms: f64,
    /// `f^1(x^1) - V*_1(x^1)` with `f^1(x^1) = max_a f^1(x^1, a)`.
    pub delta_f1: f64,
    /// `|reg - (sum_residual_terms - delta_f1)|`.
    pub gap: f64,
}

pub fn value_decomposition_check(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    f: &MemberIndexTuple,
) -> Result<ValueDecomposition> {
    class.ensure_compatible(mdp)?;
    class.check_tuple(f)?;
    let opt = optimal_values(mdp);
    let v_star = opt.v1(mdp);
    let pi = greedy_policy(class, f);
    let reg = v_star - policy_value(mdp, &pi);
    let occ = occupancy_measures(mdp, &pi);
    let mut sum = 0.0;
    for (h, o) in occ.iter().enumerate() {
        let target = crate::mdp::bellman_apply(mdp, h, class.next_member(h, f.0.get(h + 1).copied().unwrap_or(0)));
        let member = class.member(h, f.get(h));
        for x in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                let p = o.get(x, a);
                if p != 0.0 {
                    sum += p * (member.get(x, a) - target.get(x, a));
                }
            }
        }
    }
    let delta_f1 = class.member(0, f.get(0)).max(mdp.initial_state()) - v_star;
    Ok(ValueDecomposition {
        reg,
        sum_residual_terms: sum,
        delta_f1,
        gap: (reg - (sum - delta_f1)).abs(),
    })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Least-squares fit of `y ≈ c x^p` in log-log space; returns `(c, p)`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let p = sxy / sxx;
    ((my - p * mx).exp(), p)
}
