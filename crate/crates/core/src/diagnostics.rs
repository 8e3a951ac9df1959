//! Exact checks of the excess-loss identities the regret analysis relies on.
//!
//! Every expectation here is a finite sum over the joint support of `(x', r)`
//! (Bernoulli or deterministic rewards), so the identities can be checked to
//! floating-point precision rather than statistically.

use serde::{Deserialize, Serialize};

use crate::class::{BellmanTargets, QFunctionClass};
use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories, transition_outcomes, DeterministicPolicy, TabularMdp, Trajectory};
use crate::numeric::log_sum_exp;
use crate::posterior::excess_loss_with;

/// Conditional moments of `ΔL^h(f_i^h, f_j^{h+1})` given `(x, a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessLossMoments {
    /// `E_h(f; x, a)`.
    pub residual: f64,
    /// `E[ΔL]`.
    pub mean: f64,
    /// `E[ΔL^2]`.
    pub second_moment: f64,
    /// `ln E exp(-η ΔL)` at the requested `η`.
    pub log_mgf: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn excess_loss_moments(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    targets: &BellmanTargets,
    h: usize,
    i: usize,
    j: usize,
    x: usize,
    a: usize,
    eta: f64,
) -> ExcessLossMoments {
    let outcomes = transition_outcomes(mdp, h, x, a);
    let mut mean = 0.0;
    let mut second = 0.0;
    let mut log_terms = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let d = excess_loss_with(targets, class, h, i, j, (x, a, o.reward, o.next_state));
        mean += o.prob * d;
        second += o.prob * d * d;
        log_terms.push(o.prob.ln() - eta * d);
    }
    ExcessLossMoments {
        residual: class.member(h, i).get(x, a) - targets.get(h, j).get(x, a),
        mean,
        second_moment: second,
        log_mgf: log_sum_exp(&log_terms),
    }
}

/// `ξ = -2η ΔL - ln E_{(x',r)|x,a} exp(-2η ΔL)` for step `h` of one trajectory.
pub fn martingale_increment(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    targets: &BellmanTargets,
    (h, i, j): (usize, usize, usize),
    eta: f64,
    trajectory: &Trajectory,
) -> f64 {
    let s = trajectory.steps[h];
    let d = excess_loss_with(targets, class, h, i, j, (s.state, s.action, s.reward, trajectory.next_state(h)));
    let m = excess_loss_moments(mdp, class, targets, h, i, j, s.state, s.action, 2.0 * eta);
    -2.0 * eta * d - m.log_mgf
}

/// `E exp(Σ_s ξ_s)` over every joint history of `policies.len()` episodes,
/// episode `s` played with `policies[s]`. Equals 1 for any fixed policy sequence.
pub fn martingale_expectation(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    member: (usize, usize, usize),
    eta: f64,
    policies: &[DeterministicPolicy],
    cap: usize,
) -> Result<f64> {
    let targets = BellmanTargets::new(mdp, class);
    let per_episode: Vec<Vec<(f64, f64)>> = policies
        .iter()
        .map(|pi| {
            Ok(enumerate_trajectories(mdp, pi, cap)?
                .into_iter()
                .map(|(p, tr)| (p, martingale_increment(mdp, class, &targets, member, eta, &tr)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let histories: u128 = per_episode.iter().map(|v| v.len() as u128).product();
    if histories > cap as u128 {
        return Err(Error::CapExceeded { size: histories, cap: cap as u128 });
    }
    // Walk the full product of per-episode outcomes rather than factorizing,
    // so the check does not presuppose independence across episodes.
    fn walk(level: usize, prob: f64, xi: f64, eps: &[Vec<(f64, f64)>]) -> f64 {
        match eps.get(level) {
            None => prob * xi.exp(),
            Some(outcomes) => outcomes
                .iter()
                .map(|&(p, x)| walk(level + 1, prob * p, xi + x, eps))
                .sum(),
        }
    }
    Ok(walk(0, 1.0, 0.0, &per_episode))
}
