//! Benchmark instances. Every generator returns an MDP together with a finite
//! class that is closed under the exact Bellman operator, so realizability,
//! boundedness and completeness hold by construction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::class::{closure_class, dedup_tables, FeatureMap, QFunctionClass};
use crate::error::{Error, Result};
use crate::mdp::{QTable, RewardNoise, TabularMdp};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug)]
pub struct Instance {
    pub mdp: TabularMdp,
    pub class: QFunctionClass,
}

/// Generator name plus parameters, as used by `gen` and by `{"gen": ...}` config sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum GenSpec {
    Chain(ChainParams),
    RandomTabular(RandomTabularParams),
    LinearGrid(LinearGridParams),
}

impl GenSpec {
    pub fn generate(&self) -> Result<Instance> {
        match self {
            GenSpec::Chain(p) => chain(p),
            GenSpec::RandomTabular(p) => random_tabular(p),
            GenSpec::LinearGrid(p) => linear_grid(p),
        }
    }
}

/// River-swim style chain. "Right" (action 1) advances with probability
/// `p_right` and otherwise stays; every other action moves one state left.
/// The only reward is at the last state under "right" on the final step, and
/// the walk starts `H - 1` moves away from it, so a policy must commit to
/// "right" on every step to ever see a reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub p_right: f64,
    pub reward_mean: f64,
    /// Add the zero function and a unit indicator of `(x, right)` for every
    /// state `x` at the last step before closing the class.
    pub distractors: bool,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            states: 5,
            actions: 2,
            horizon: 3,
            p_right: 0.85,
            reward_mean: 0.9,
            distractors: true,
        }
    }
}

pub fn chain(p: &ChainParams) -> Result<Instance> {
    if p.states == 0 || p.horizon == 0 {
        return Err(Error::invalid("states/horizon", "must be positive"));
    }
    if p.actions < 2 {
        return Err(Error::invalid("actions", "chain needs at least 2 actions"));
    }
    if !(p.p_right > 0.0 && p.p_right <= 1.0) {
        return Err(Error::invalid("p_right", "must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&p.reward_mean) {
        return Err(Error::invalid("reward_mean", "must lie in [0, 1]"));
    }
    let (n, na, big_h) = (p.states, p.actions, p.horizon);
    let right = 1;
    let goal = n - 1;
    let start = n.saturating_sub(big_h);
    let mut transitions = vec![0.0; big_h * n * na * n];
    let mut rewards = vec![0.0; big_h * n * na];
    for h in 0..big_h {
        for x in 0..n {
            for a in 0..na {
                let base = ((h * n + x) * na + a) * n;
                if a == right {
                    let y = (x + 1).min(goal);
                    transitions[base + y] += p.p_right;
                    transitions[base + x] += 1.0 - p.p_right;
                } else {
                    transitions[base + x.saturating_sub(1)] = 1.0;
                }
            }
        }
    }
    rewards[((big_h - 1) * n + goal) * na + right] = p.reward_mean;
    let mdp = TabularMdp::new(n, na, big_h, start, RewardNoise::Bernoulli, transitions, rewards)?;
    let mut seeds = vec![Vec::new(); big_h];
    if p.distractors {
        let last = &mut seeds[big_h - 1];
        last.push(QTable::zeros(n, na));
        for x in 0..n {
            let mut t = QTable::zeros(n, na);
            t.set(x, right, 1.0);
            last.push(t);
        }
    }
    let class = closure_class(&mdp, seeds)?;
    Ok(Instance { mdp, class })
}

/// Random dense MDP with Bernoulli rewards; the class closes `members_per_step`
/// random tables per step (scaled to the step's value range) under `T*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomTabularParams {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub seed: u64,
    pub members_per_step: usize,
}

impl Default for RandomTabularParams {
    fn default() -> Self {
        RandomTabularParams {
            states: 3,
            actions: 2,
            horizon: 2,
            seed: 0,
            members_per_step: 2,
        }
    }
}

pub fn random_tabular(p: &RandomTabularParams) -> Result<Instance> {
    if p.states == 0 || p.actions == 0 || p.horizon == 0 {
        return Err(Error::invalid("states/actions/horizon", "must be positive"));
    }
    let (n, na, big_h) = (p.states, p.actions, p.horizon);
    let mut rng = rng_from_seed(p.seed);
    let mut transitions = Vec::with_capacity(big_h * n * na * n);
    for _ in 0..big_h * n * na {
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        transitions.extend(w.iter().map(|v| v / s));
    }
    let rewards: Vec<f64> = (0..big_h * n * na).map(|_| rng.gen::<f64>()).collect();
    let mdp = TabularMdp::new(n, na, big_h, 0, RewardNoise::Bernoulli, transitions, rewards)?;
    let seeds = (0..big_h)
        .map(|h| {
            let scale = (big_h - h) as f64;
            (0..p.members_per_step)
                .map(|_| QTable::from_values(n, na, (0..n * na).map(|_| scale * rng.gen::<f64>()).collect()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let class = closure_class(&mdp, seeds)?;
    Ok(Instance { mdp, class })
}

/// Linear MDP `P^h(x'|x,a) = <φ(x,a), μ_h(x')>`, `r^h(x,a) = <φ(x,a), θ_h>`
/// with φ on the probability simplex. The class at step `h` is a uniform weight
/// grid on `[0, H - h]^d` together with the exact Bellman images of every
/// next-step member, which stay linear in φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGridParams {
    pub d: usize,
    pub grid: usize,
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
    pub seed: u64,
}

impl Default for LinearGridParams {
    fn default() -> Self {
        LinearGridParams {
            d: 2,
            grid: 5,
            horizon: 2,
            states: 4,
            actions: 2,
            seed: 0,
        }
    }
}

pub fn linear_grid(p: &LinearGridParams) -> Result<Instance> {
    if p.d == 0 || p.grid == 0 || p.horizon == 0 || p.states == 0 || p.actions == 0 {
        return Err(Error::invalid("d/grid/horizon/states/actions", "must be positive"));
    }
    let (d, n, na, big_h) = (p.d, p.states, p.actions, p.horizon);
    let mut rng = rng_from_seed(p.seed);
    let simplex = |rng: &mut crate::rng::Rng, len: usize| -> Vec<f64> {
        let w: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    };
    let mut phi = Vec::with_capacity(n * na * d);
    for _ in 0..n * na {
        phi.extend(simplex(&mut rng, d));
    }
    let features = FeatureMap::new(n, na, d, phi)?;
    // mu[h][k] is a distribution over next states.
    let mu: Vec<Vec<Vec<f64>>> = (0..big_h).map(|_| (0..d).map(|_| simplex(&mut rng, n)).collect()).collect();
    let theta: Vec<Vec<f64>> = (0..big_h).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();

    let mut transitions = Vec::with_capacity(big_h * n * na * n);
    let mut rewards = Vec::with_capacity(big_h * n * na);
    for h in 0..big_h {
        for x in 0..n {
            for a in 0..na {
                let f = features.phi(x, a);
                for y in 0..n {
                    transitions.push((0..d).map(|k| f[k] * mu[h][k][y]).sum());
                }
                rewards.push(features.dot(x, a, &theta[h]));
            }
        }
    }
    let mdp = TabularMdp::new(n, na, big_h, 0, RewardNoise::Bernoulli, transitions, rewards)?;

    let grid_weights = |side: f64| -> Vec<Vec<f64>> {
        let pts: Vec<f64> = if p.grid == 1 {
            vec![0.0]
        } else {
            (0..p.grid).map(|k| side * k as f64 / (p.grid - 1) as f64).collect()
        };
        let mut out = vec![Vec::new()];
        for _ in 0..d {
            out = out
                .into_iter()
                .flat_map(|w| {
                    pts.iter().map(move |&v| {
                        let mut w = w.clone();
                        w.push(v);
                        w
                    })
                })
                .collect();
        }
        out
    };
    let mut weights: Vec<Vec<Vec<f64>>> = vec![Vec::new(); big_h];
    for h in (0..big_h).rev() {
        // T*_h f for f = <φ, w'>:  θ_h + Σ_x' μ_h(x') max_a <φ(x',a), w'>.
        let image = |next: Option<&Vec<f64>>| -> Vec<f64> {
            let v: Vec<f64> = match next {
                Some(w) => (0..n)
                    .map(|y| (0..na).map(|a| features.dot(y, a, w)).fold(f64::NEG_INFINITY, f64::max))
                    .collect(),
                None => vec![0.0; n],
            };
            (0..d)
                .map(|k| theta[h][k] + mu[h][k].iter().zip(&v).map(|(m, v)| m * v).sum::<f64>())
                .collect()
        };
        let mut ws = grid_weights((big_h - h) as f64);
        if h + 1 < big_h {
            let next = weights[h + 1].clone();
            ws.extend(next.iter().map(|w| image(Some(w))));
        } else {
            ws.push(image(None));
        }
        let mut uniq: Vec<Vec<f64>> = Vec::with_capacity(ws.len());
        for w in ws {
            if !uniq.contains(&w) {
                uniq.push(w);
            }
        }
        weights[h] = uniq;
    }
    let class = QFunctionClass::from_features(features, weights, None, None)?;
    Ok(Instance { mdp, class })
}

/// Explicit-table copy of a class with duplicate tables merged (priors summed).
pub fn dedup_class(class: &QFunctionClass) -> Result<QFunctionClass> {
    let mut members = Vec::with_capacity(class.horizon());
    let mut priors = Vec::with_capacity(class.horizon());
    for h in 0..class.horizon() {
        let uniq = dedup_tables(class.step(h).members.clone());
        let mut p = vec![0.0; uniq.len()];
        for (m, w) in class.step(h).members.iter().zip(class.prior(h)) {
            let k = uniq.iter().position(|u| u == m).expect("member present");
            p[k] += w;
        }
        members.push(uniq);
        priors.push(p);
    }
    QFunctionClass::from_tables(members, Some(priors))
}
