//! Finite episodic MDPs: simulation and exact dynamic programming.
//!
//! Steps are indexed `0..horizon` throughout the crate; step `horizon` is the
//! implicit terminal step where every value function is zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNoise {
    /// The observed reward equals the mean.
    Deterministic,
    /// The observed reward is 1 with probability equal to the mean, else 0.
    Bernoulli,
}

impl RewardNoise {
    /// Support of the reward distribution with the given mean, as `(reward, prob)`
    /// pairs with positive probability.
    pub fn support(self, mean: f64) -> Vec<(f64, f64)> {
        match self {
            RewardNoise::Deterministic => vec![(mean, 1.0)],
            RewardNoise::Bernoulli => {
                let mut out = Vec::with_capacity(2);
                if mean < 1.0 {
                    out.push((0.0, 1.0 - mean));
                }
                if mean > 0.0 {
                    out.push((1.0, mean));
                }
                out
            }
        }
    }
}

/// A real-valued function on the state-action space, stored row-major by state.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        QTable {
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::invalid(
                "table",
                format!(
                    "expected {} entries for {num_states} states x {num_actions} actions, got {}",
                    num_states * num_actions,
                    values.len()
                ),
            ));
        }
        Ok(QTable {
            num_actions,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.values.len() / self.num_actions.max(1)
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.values[x * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, x: usize, a: usize, v: f64) {
        self.values[x * self.num_actions + a] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.num_actions..(x + 1) * self.num_actions]
    }

    /// `max_a f(x, a)`.
    pub fn max(&self, x: usize) -> f64 {
        self.row(x).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action at `x`; ties go to the lowest index.
    pub fn argmax(&self, x: usize) -> usize {
        let row = self.row(x);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> QTable {
        QTable {
            num_actions: self.num_actions,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `sum_{x,a} self(x,a) * other(x,a)`.
    pub fn dot(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    reward_noise: RewardNoise,
    /// `[h][x][a][x']`, dense.
    transitions: Vec<f64>,
    /// `[h][x][a]`, dense.
    mean_rewards: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        reward_noise: RewardNoise,
        transitions: Vec<f64>,
        mean_rewards: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::invalid("num_states", "must be positive"));
        }
        if num_actions == 0 {
            return Err(Error::invalid("num_actions", "must be positive"));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        if initial_state >= num_states {
            return Err(Error::invalid(
                "initial_state",
                format!("{initial_state} out of range for {num_states} states"),
            ));
        }
        let n_rows = horizon * num_states * num_actions;
        if transitions.len() != n_rows * num_states {
            return Err(Error::invalid(
                "transitions",
                format!("expected {} entries, got {}", n_rows * num_states, transitions.len()),
            ));
        }
        if mean_rewards.len() != n_rows {
            return Err(Error::invalid(
                "mean_rewards",
                format!("expected {n_rows} entries, got {}", mean_rewards.len()),
            ));
        }
        for h in 0..horizon {
            for x in 0..num_states {
                for a in 0..num_actions {
                    let row_idx = (h * num_states + x) * num_actions + a;
                    let row = &transitions[row_idx * num_states..(row_idx + 1) * num_states];
                    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                        return Err(Error::invalid(
                            format!("transitions[{h}][{x}][{a}]"),
                            format!("entry {p} is negative or not finite"),
                        ));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::invalid(
                            format!("transitions[{h}][{x}][{a}]"),
                            format!("row sums to {sum}, expected 1"),
                        ));
                    }
                    let r = mean_rewards[row_idx];
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::invalid(
                            format!("mean_rewards[{h}][{x}][{a}]"),
                            format!("{r} is outside [0, 1]"),
                        ));
                    }
                }
            }
        }
        Ok(TabularMdp {
            num_states,
            num_actions,
            horizon,
            initial_state,
            reward_noise,
            transitions,
            mean_rewards,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn initial_state(&self) -> usize {
        self.initial_state
    }
    pub fn reward_noise(&self) -> RewardNoise {
        self.reward_noise
    }
    pub fn transitions_flat(&self) -> &[f64] {
        &self.transitions
    }
    pub fn mean_rewards_flat(&self) -> &[f64] {
        &self.mean_rewards
    }

    #[inline]
    fn row_index(&self, h: usize, x: usize, a: usize) -> usize {
        (h * self.num_states + x) * self.num_actions + a
    }

    /// `P^h(. | x, a)`.
    #[inline]
    pub fn transition(&self, h: usize, x: usize, a: usize) -> &[f64] {
        let i = self.row_index(h, x, a) * self.num_states;
        &self.transitions[i..i + self.num_states]
    }

    #[inline]
    pub fn mean_reward(&self, h: usize, x: usize, a: usize) -> f64 {
        self.mean_rewards[self.row_index(h, x, a)]
    }

    pub fn reward_table(&self, h: usize) -> QTable {
        let n = self.num_states * self.num_actions;
        QTable {
            num_actions: self.num_actions,
            values: self.mean_rewards[h * n..(h + 1) * n].to_vec(),
        }
    }

    fn check_step(&self, h: usize) {
        assert!(h < self.horizon, "step {h} out of range for horizon {}", self.horizon);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// `x^{H+1}`; only used as a placeholder since `f^{H+1} = 0`.
    pub terminal_state: usize,
}

impl Trajectory {
    /// State observed after step `h`.
    pub fn next_state(&self, h: usize) -> usize {
        self.steps
            .get(h + 1)
            .map(|s| s.state)
            .unwrap_or(self.terminal_state)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    num_states: usize,
    /// `[h][x]`.
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(Error::invalid(
                "policy",
                format!("expected {} actions, got {}", horizon * num_states, actions.len()),
            ));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= num_actions) {
            return Err(Error::invalid("policy", format!("action {a} out of range")));
        }
        Ok(DeterministicPolicy { num_states, actions })
    }

    pub fn constant(mdp: &TabularMdp, action: usize) -> Self {
        assert!(action < mdp.num_actions());
        DeterministicPolicy {
            num_states: mdp.num_states(),
            actions: vec![action; mdp.horizon() * mdp.num_states()],
        }
    }

    /// Greedy policy with respect to per-step tables; ties go to the lowest action.
    pub fn greedy(tables: &[&QTable]) -> Self {
        let num_states = tables.first().map(|t| t.num_states()).unwrap_or(0);
        let actions = tables
            .iter()
            .flat_map(|t| (0..num_states).map(move |x| t.argmax(x)))
            .collect();
        DeterministicPolicy { num_states, actions }
    }

    #[inline]
    pub fn action(&self, h: usize, x: usize) -> usize {
        self.actions[h * self.num_states + x]
    }

    pub fn horizon(&self) -> usize {
        self.actions.len() / self.num_states.max(1)
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn sample_reward<R: Rng + ?Sized>(noise: RewardNoise, mean: f64, rng: &mut R) -> f64 {
    match noise {
        RewardNoise::Deterministic => mean,
        RewardNoise::Bernoulli => {
            let u: f64 = rng.gen();
            if u < mean {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Roll out one episode of `policy` from the initial state.
pub fn simulate_episode(mdp: &TabularMdp, policy: &DeterministicPolicy, rng_seed: u64) -> Trajectory {
    simulate_episode_with(mdp, policy, &mut rng_from_seed(rng_seed))
}

pub fn simulate_episode_with<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    rng: &mut R,
) -> Trajectory {
    let mut x = mdp.initial_state();
    let mut steps = Vec::with_capacity(mdp.horizon());
    for h in 0..mdp.horizon() {
        let a = policy.action(h, x);
        // Reward first, then next state: the draw order is part of the seed contract.
        let reward = sample_reward(mdp.reward_noise(), mdp.mean_reward(h, x, a), rng);
        let next = sample_index(mdp.transition(h, x, a), rng);
        steps.push(Step { state: x, action: a, reward });
        x = next;
    }
    Trajectory {
        steps,
        terminal_state: x,
    }
}

/// Bellman optimality operator: `[T*_h f](x,a) = r^h(x,a) + E_{x'} max_a' f(x',a')`.
/// `f_next = None` stands for the zero function.
pub fn bellman_apply(mdp: &TabularMdp, h: usize, f_next: Option<&QTable>) -> QTable {
    mdp.check_step(h);
    let next_max: Option<Vec<f64>> =
        f_next.map(|f| (0..mdp.num_states()).map(|x| f.max(x)).collect());
    backup(mdp, h, next_max.as_deref())
}

/// `r^h(x,a) + E_{x'} v(x')` for a next-step state-value vector.
pub fn backup(mdp: &TabularMdp, h: usize, v_next: Option<&[f64]>) -> QTable {
    let mut out = mdp.reward_table(h);
    if let Some(v) = v_next {
        for x in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                let ev: f64 = mdp.transition(h, x, a).iter().zip(v).map(|(p, v)| p * v).sum();
                out.set(x, a, out.get(x, a) + ev);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct OptimalValues {
    /// `Q*_h` for `h in 0..H`.
    pub q: Vec<QTable>,
    /// `V*_h` for `h in 0..=H`; `v[H]` is zero.
    pub v: Vec<Vec<f64>>,
}

impl OptimalValues {
    pub fn v1(&self, mdp: &TabularMdp) -> f64 {
        self.v[0][mdp.initial_state()]
    }

    pub fn greedy_policy(&self) -> DeterministicPolicy {
        DeterministicPolicy::greedy(&self.q.iter().collect::<Vec<_>>())
    }
}

pub fn optimal_values(mdp: &TabularMdp) -> OptimalValues {
    let big_h = mdp.horizon();
    let mut q: Vec<QTable> = Vec::with_capacity(big_h);
    let mut v = vec![vec![0.0; mdp.num_states()]; big_h + 1];
    for h in (0..big_h).rev() {
        let qh = backup(mdp, h, Some(&v[h + 1]));
        v[h] = (0..mdp.num_states()).map(|x| qh.max(x)).collect();
        q.push(qh);
    }
    q.reverse();
    OptimalValues { q, v }
}

/// `V^pi_h(x)` for all `h in 0..=H`.
pub fn policy_values(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Vec<Vec<f64>> {
    let big_h = mdp.horizon();
    let mut v = vec![vec![0.0; mdp.num_states()]; big_h + 1];
    for h in (0..big_h).rev() {
        for x in 0..mdp.num_states() {
            let a = policy.action(h, x);
            let ev: f64 = mdp
                .transition(h, x, a)
                .iter()
                .zip(&v[h + 1])
                .map(|(p, v)| p * v)
                .sum();
            v[h][x] = mdp.mean_reward(h, x, a) + ev;
        }
    }
    v
}

/// `V^pi_1(x^1)` by exact backward induction.
pub fn policy_value(mdp: &TabularMdp, policy: &DeterministicPolicy) -> f64 {
    policy_values(mdp, policy)[0][mdp.initial_state()]
}

/// Exact state-action distribution at every step under `policy`.
pub fn occupancy_measures(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Vec<QTable> {
    let n = mdp.num_states();
    let mut d = vec![0.0; n];
    d[mdp.initial_state()] = 1.0;
    let mut out = Vec::with_capacity(mdp.horizon());
    for h in 0..mdp.horizon() {
        let mut occ = QTable::zeros(n, mdp.num_actions());
        let mut next = vec![0.0; n];
        for x in 0..n {
            if d[x] == 0.0 {
                continue;
            }
            let a = policy.action(h, x);
            occ.set(x, a, d[x]);
            for (y, p) in mdp.transition(h, x, a).iter().enumerate() {
                next[y] += d[x] * p;
            }
        }
        out.push(occ);
        d = next;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next_state: usize,
    pub reward: f64,
    pub prob: f64,
}

/// Joint support of `(x', r)` given `(h, x, a)`, restricted to positive probability.
pub fn transition_outcomes(mdp: &TabularMdp, h: usize, x: usize, a: usize) -> Vec<Outcome> {
    let rewards = mdp.reward_noise().support(mdp.mean_reward(h, x, a));
    let mut out = Vec::new();
    for (y, &p) in mdp.transition(h, x, a).iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        for &(r, q) in &rewards {
            out.push(Outcome {
                next_state: y,
                reward: r,
                prob: p * q,
            });
        }
    }
    out
}

/// Every trajectory `policy` can produce, with its probability.
pub fn enumerate_trajectories(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    cap: usize,
) -> Result<Vec<(f64, Trajectory)>> {
    let mut out = Vec::new();
    let mut steps = Vec::with_capacity(mdp.horizon());
    enumerate_rec(mdp, policy, 0, mdp.initial_state(), 1.0, &mut steps, &mut out, cap)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rec(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    h: usize,
    x: usize,
    prob: f64,
    steps: &mut Vec<Step>,
    out: &mut Vec<(f64, Trajectory)>,
    cap: usize,
) -> Result<()> {
    if h == mdp.horizon() {
        if out.len() >= cap {
            return Err(Error::CapExceeded {
                size: out.len() as u128 + 1,
                cap: cap as u128,
            });
        }
        out.push((
            prob,
            Trajectory {
                steps: steps.clone(),
                terminal_state: x,
            },
        ));
        return Ok(());
    }
    let a = policy.action(h, x);
    for o in transition_outcomes(mdp, h, x, a) {
        steps.push(Step {
            state: x,
            action: a,
            reward: o.reward,
        });
        enumerate_rec(mdp, policy, h + 1, o.next_state, prob * o.prob, steps, out, cap)?;
        steps.pop();
    }
    Ok(())
}
