//! Acceptance suite: one PASS/FAIL line per criterion. Every quantity the
//! criteria compare against is recomputed here from the raw MDP tables and
//! class members rather than taken from the library.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cpsrl::class::{check_assumptions, kappa, kappa_alpha, kappa_alpha_limit, BellmanTargets, MemberIndexTuple};
use cpsrl::complexity::{dc_bound_linear, dc_inequality_check, helper_sum_sqrt, ResidualSequenceRecord};
use cpsrl::diagnostics::{excess_loss_moments, martingale_expectation};
use cpsrl::generators::{chain, linear_grid, random_tabular, ChainParams, Instance, LinearGridParams, RandomTabularParams};
use cpsrl::harness::{resolve_agent, run_seeds, theorem_bound, value_decomposition_check, RunOutput};
use cpsrl::io::{load_config, resolve_instance};
use cpsrl::mdp::{simulate_episode, RewardNoise};
use cpsrl::posterior::exact_posterior;
use cpsrl::rng::rng_from_seed;
use cpsrl::{DeterministicPolicy, Hyperparameters, PosteriorState, QFunctionClass, QTable, TabularMdp, Trajectory};

// ---------------------------------------------------------------- oracles

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn vmax(q: Option<&QTable>, x: usize) -> f64 {
    q.map_or(0.0, |q| (0..q.num_actions()).map(|a| q.get(x, a)).fold(f64::NEG_INFINITY, f64::max))
}

fn first_argmax(q: &QTable, x: usize) -> usize {
    let mut best = 0;
    for a in 1..q.num_actions() {
        if q.get(x, a) > q.get(x, best) {
            best = a;
        }
    }
    best
}

/// `r(x,a) + Σ_y P(y|x,a) max_a' next(y,a')`.
fn bellman_target(mdp: &TabularMdp, h: usize, next: Option<&QTable>, x: usize, a: usize) -> f64 {
    let p = mdp.transition(h, x, a);
    mdp.mean_reward(h, x, a) + (0..mdp.num_states()).map(|y| p[y] * vmax(next, y)).sum::<f64>()
}

fn next_table(class: &QFunctionClass, h: usize, j: usize) -> Option<&QTable> {
    (h + 1 < class.horizon()).then(|| class.member(h + 1, j))
}

fn bernoulli(mean: f64) -> Vec<(f64, f64)> {
    [(0.0, 1.0 - mean), (1.0, mean)].into_iter().filter(|(_, p)| *p > 0.0).collect()
}

/// `(E[ΔL], E[ΔL^2], ln E exp(-η ΔL), E_h)` by enumerating `(x', r)`.
fn oracle_excess(mdp: &TabularMdp, h: usize, f: &QTable, next: Option<&QTable>, x: usize, a: usize, eta: f64) -> [f64; 4] {
    let t = bellman_target(mdp, h, next, x, a);
    let p = mdp.transition(h, x, a);
    let (mut m1, mut m2, mut logs) = (0.0, 0.0, Vec::new());
    for y in (0..mdp.num_states()).filter(|&y| p[y] > 0.0) {
        for (r, pr) in bernoulli(mdp.mean_reward(h, x, a)) {
            let v = vmax(next, y);
            let d = (f.get(x, a) - r - v).powi(2) - (t - r - v).powi(2);
            let w = p[y] * pr;
            m1 += w * d;
            m2 += w * d * d;
            logs.push(w.ln() - eta * d);
        }
    }
    [m1, m2, lse(&logs), f.get(x, a) - t]
}

/// State distribution per step under a deterministic rule `pi(h, x)`.
fn occupancy(mdp: &TabularMdp, pi: &dyn Fn(usize, usize) -> usize) -> Vec<Vec<f64>> {
    let n = mdp.num_states();
    let mut d = vec![vec![0.0; n]; mdp.horizon()];
    d[0][mdp.initial_state()] = 1.0;
    for h in 0..mdp.horizon() - 1 {
        for x in 0..n {
            let p = mdp.transition(h, x, pi(h, x));
            for y in 0..n {
                d[h + 1][y] += d[h][x] * p[y];
            }
        }
    }
    d
}

fn optimal_v1(mdp: &TabularMdp) -> f64 {
    let n = mdp.num_states();
    let mut v = vec![0.0; n];
    for h in (0..mdp.horizon()).rev() {
        v = (0..n)
            .map(|x| {
                (0..mdp.num_actions())
                    .map(|a| {
                        let p = mdp.transition(h, x, a);
                        mdp.mean_reward(h, x, a) + (0..n).map(|y| p[y] * v[y]).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v[mdp.initial_state()]
}

/// Residual tables `E_h(f)` for a tuple.
fn residuals(mdp: &TabularMdp, class: &QFunctionClass, f: &MemberIndexTuple) -> Vec<QTable> {
    (0..class.horizon())
        .map(|h| {
            let q = class.member(h, f.get(h));
            let next = next_table(class, h, if h + 1 < class.horizon() { f.get(h + 1) } else { 0 });
            let mut e = QTable::zeros(mdp.num_states(), mdp.num_actions());
            for x in 0..mdp.num_states() {
                for a in 0..mdp.num_actions() {
                    e.set(x, a, q.get(x, a) - bellman_target(mdp, h, next, x, a));
                }
            }
            e
        })
        .collect()
}

struct Decomp {
    reg: f64,
    residual_sum: f64,
    delta: f64,
}

fn oracle_decomposition(mdp: &TabularMdp, class: &QFunctionClass, f: &MemberIndexTuple) -> Decomp {
    let pi = |h: usize, x: usize| first_argmax(class.member(h, f.get(h)), x);
    let d = occupancy(mdp, &pi);
    let e = residuals(mdp, class, f);
    let (mut v_pi, mut residual_sum) = (0.0, 0.0);
    for h in 0..mdp.horizon() {
        for x in 0..mdp.num_states() {
            v_pi += d[h][x] * mdp.mean_reward(h, x, pi(h, x));
            residual_sum += d[h][x] * e[h].get(x, pi(h, x));
        }
    }
    let v_star = optimal_v1(mdp);
    Decomp {
        reg: v_star - v_pi,
        residual_sum,
        delta: vmax(Some(class.member(0, f.get(0))), mdp.initial_state()) - v_star,
    }
}

/// `κ(ε) = Σ_h max_j -ln p_0^h({i : ||f_i^h - T f_j^{h+1}||_∞ <= ε})`; `None` on an empty cover.
fn oracle_kappa_steps(mdp: &TabularMdp, class: &QFunctionClass, eps: f64) -> Option<Vec<f64>> {
    (0..class.horizon())
        .map(|h| {
            let nj = if h + 1 < class.horizon() { class.sizes()[h + 1] } else { 1 };
            let mut worst: f64 = f64::NEG_INFINITY;
            for j in 0..nj {
                let next = next_table(class, h, j);
                let mass: f64 = (0..class.sizes()[h])
                    .filter(|&i| {
                        let q = class.member(h, i);
                        (0..mdp.num_states()).all(|x| {
                            (0..mdp.num_actions()).all(|a| (q.get(x, a) - bellman_target(mdp, h, next, x, a)).abs() <= eps)
                        })
                    })
                    .map(|i| class.prior(h)[i])
                    .sum();
                if mass <= 0.0 {
                    return None;
                }
                worst = worst.max(-mass.ln());
            }
            Some(worst)
        })
        .collect()
}

fn oracle_bound(kappa: f64, dc: f64, b: f64, t: f64, eta: f64, lambda: f64, h: f64, beta: f64) -> f64 {
    lambda / eta * dc + 2.0 * t / lambda * kappa + 6.0 * h * t.powf(2.0 - beta) / lambda + b * t.powf(1.0 - beta)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` on `ln x`.
fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn random_policy(rng: &mut impl Rng, mdp: &TabularMdp) -> DeterministicPolicy {
    let acts = (0..mdp.horizon() * mdp.num_states())
        .map(|_| rng.gen_range(0..mdp.num_actions()))
        .collect();
    DeterministicPolicy::new(mdp.horizon(), mdp.num_states(), mdp.num_actions(), acts).unwrap()
}

fn random_mdp(rng: &mut impl Rng, n: usize, na: usize, horizon: usize) -> TabularMdp {
    let mut p = Vec::new();
    for _ in 0..horizon * n * na {
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        p.extend(w.iter().map(|v| v / s));
    }
    let r = (0..horizon * n * na).map(|_| rng.gen::<f64>()).collect();
    TabularMdp::new(n, na, horizon, 0, RewardNoise::Bernoulli, p, r).unwrap()
}

// ---------------------------------------------------------------- criteria

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Σ_s TD loss of `(f^h_i, f^{h+1}_j)` over the observed trajectories.
fn td_loss(class: &QFunctionClass, trajs: &[Trajectory], h: usize, i: usize, j: usize) -> f64 {
    let q = class.member(h, i);
    let next = next_table(class, h, j);
    trajs
        .iter()
        .map(|tr| {
            let s = tr.steps[h];
            (q.get(s.state, s.action) - s.reward - vmax(next, tr.next_state(h))).powi(2)
        })
        .sum()
}

/// Normalized posterior over tuple indices, straight from the product formula.
fn oracle_posterior(class: &QFunctionClass, hy: Hyperparameters, x1: usize, trajs: &[Trajectory]) -> Vec<f64> {
    let hz = class.horizon();
    let sizes = class.sizes();
    let next_size = |h: usize| if h + 1 < hz { sizes[h + 1] } else { 1 };
    let loss: Vec<Vec<Vec<f64>>> = (0..hz)
        .map(|h| {
            (0..sizes[h])
                .map(|i| (0..next_size(h)).map(|j| td_loss(class, trajs, h, i, j)).collect())
                .collect()
        })
        .collect();
    let norm: Vec<Vec<f64>> = (0..hz)
        .map(|h| {
            (0..next_size(h))
                .map(|j| {
                    let terms: Vec<f64> = (0..sizes[h])
                        .map(|g| class.prior(h)[g].ln() - hy.eta * loss[h][g][j])
                        .collect();
                    lse(&terms)
                })
                .collect()
        })
        .collect();
    let n = class.num_tuples();
    let logw: Vec<f64> = (0..n)
        .map(|u| {
            let f = class.tuple_from_index(u);
            let mut w = hy.lambda * vmax(Some(class.member(0, f.get(0))), x1);
            for h in 0..hz {
                let (i, j) = (f.get(h), if h + 1 < hz { f.get(h + 1) } else { 0 });
                w += class.prior(h)[i].ln() - hy.alpha * hy.eta * loss[h][i][j] - hy.alpha * norm[h][j];
            }
            w
        })
        .collect();
    let z = lse(&logw);
    logw.iter().map(|w| (w - z).exp()).collect()
}

/// Pearson χ² p-value with cells of expected count < 5 pooled.
fn chi_square_p(counts: &[u64], probs: &[f64], draws: u64) -> (f64, usize) {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut pool_e, mut pool_o) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * draws as f64;
        if e >= 5.0 {
            cells.push((e, c as f64));
        } else {
            pool_e += e;
            pool_o += c as f64;
        }
    }
    if pool_e > 0.0 || pool_o > 0.0 {
        if pool_e >= 5.0 || cells.is_empty() {
            cells.push((pool_e, pool_o));
        } else {
            let k = (0..cells.len()).min_by(|&a, &b| cells[a].0.total_cmp(&cells[b].0)).unwrap();
            cells[k].0 += pool_e;
            cells[k].1 += pool_o;
        }
    }
    if cells.len() < 2 {
        return (1.0, cells.len());
    }
    let stat: f64 = cells.iter().map(|(e, o)| (o - e).powi(2) / e).sum();
    let df = (cells.len() - 1) as f64;
    (1.0 - ChiSquared::new(df).unwrap().cdf(stat), cells.len())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let draws: u64 = 100_000;
    let (mut max_tv, mut max_sampler_tv, mut min_p) = (0.0f64, 0.0f64, 1.0f64);
    let mut failures = Vec::new();
    let instances = 24;
    for k in 0..instances {
        let mut rng = rng_from_seed(9000 + k);
        let base = random_tabular(&RandomTabularParams {
            states: 2 + (k as usize % 3),
            actions: 2,
            horizon: 2 + (k as usize % 2),
            seed: k,
            members_per_step: 1 + (k as usize % 3),
        })
        .unwrap();
        // Non-uniform priors so the prior factor is exercised.
        let members: Vec<Vec<QTable>> = base.class.steps().iter().map(|s| s.members.clone()).collect();
        let priors: Vec<Vec<f64>> = members
            .iter()
            .map(|ms| {
                let w: Vec<f64> = ms.iter().map(|_| rng.gen::<f64>() + 0.1).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        let class = QFunctionClass::from_tables(members, Some(priors)).unwrap();
        let mdp = &base.mdp;
        assert!(class.num_tuples() <= 10_000);
        let hy = Hyperparameters::new(
            [0.05, 0.1, 0.3][k as usize % 3],
            [0.0, 0.7, 2.0][(k as usize / 3) % 3],
            if k % 4 == 3 { 0.6 } else { 1.0 },
        )
        .unwrap();
        let mut state = PosteriorState::new(&class, hy, mdp.initial_state()).unwrap();
        let trajs: Vec<Trajectory> = (0..2 + k as usize)
            .map(|t| simulate_episode(mdp, &random_policy(&mut rng, mdp), 31 * k + t as u64))
            .collect();
        for tr in &trajs {
            state.update_losses(&class, tr).unwrap();
        }
        let truth = oracle_posterior(&class, hy, mdp.initial_state(), &trajs);
        let chain = state.build_chain(&class);
        let exact = exact_posterior(&chain).unwrap();
        let sampler = chain.sampler();
        let (mut tv, mut stv) = (0.0, 0.0);
        for (u, q) in truth.iter().enumerate() {
            let f = class.tuple_from_index(u as u128);
            tv += (exact.prob(&f) - q).abs();
            stv += (sampler.probability(&f) - q).abs();
        }
        max_tv = max_tv.max(0.5 * tv);
        max_sampler_tv = max_sampler_tv.max(0.5 * stv);

        let mut counts = vec![0u64; truth.len()];
        let mut srng = rng_from_seed(77_000 + k);
        for _ in 0..draws {
            counts[class.tuple_index(&sampler.sample(&mut srng)) as usize] += 1;
        }
        let (p, cells) = chi_square_p(&counts, &truth, draws);
        min_p = min_p.min(p);
        if p <= 0.01 {
            failures.push(format!("instance {k}: chi2 p = {p:.4} over {cells} cells"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = max_tv <= 1e-10 && max_sampler_tv <= 1e-10 && failures.is_empty() && secs < 60.0;
    outcome(
        pass,
        format!(
            "{instances} instances; max TV exact {max_tv:.2e}, sampler {max_sampler_tv:.2e} (tol 1e-10); min chi2 p {min_p:.4} (need > 0.01){}; {secs:.1}s (limit 60s)",
            if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join("; ")) }
        ),
    )
}

fn excess_samples() -> Vec<(Instance, usize, usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for s in 0..6u64 {
        let inst = random_tabular(&RandomTabularParams {
            states: 3 + s as usize % 2,
            actions: 2,
            horizon: 3,
            seed: 500 + s,
            members_per_step: 3,
        })
        .unwrap();
        let mut rng = rng_from_seed(600 + s);
        let mut picks = Vec::new();
        for _ in 0..10 {
            let hz = inst.class.horizon();
            let h = rng.gen_range(0..hz);
            let i = rng.gen_range(0..inst.class.sizes()[h]);
            let j = rng.gen_range(0..inst.class.size_or_terminal(h + 1));
            let x = rng.gen_range(0..inst.mdp.num_states());
            let a = rng.gen_range(0..inst.mdp.num_actions());
            picks.push((h, i, j, x, a));
        }
        for (h, i, j, x, a) in picks {
            out.push((inst.clone(), h, i, j, x, a));
        }
    }
    out
}

fn criterion_2(samples: &[(Instance, usize, usize, usize, usize, usize)]) -> Outcome {
    let (mut mean_err, mut var_slack, mut lib_diff, mut nonzero) = (0.0f64, f64::NEG_INFINITY, 0.0f64, 0);
    for (inst, h, i, j, x, a) in samples {
        let (mdp, class) = (&inst.mdp, &inst.class);
        assert_eq!(mdp.reward_noise(), RewardNoise::Bernoulli);
        let b = class.bound_b();
        let eta = 0.4 / (b * b);
        let [m1, m2, _, e] = oracle_excess(mdp, *h, class.member(*h, *i), next_table(class, *h, *j), *x, *a, eta);
        if e.abs() > 1e-6 {
            nonzero += 1;
        }
        mean_err = mean_err.max((m1 - e * e).abs());
        var_slack = var_slack.max(m2 - 4.0 * b * b / 3.0 * e * e);
        let lib = excess_loss_moments(mdp, class, &BellmanTargets::new(mdp, class), *h, *i, *j, *x, *a, eta);
        lib_diff = lib_diff.max((lib.mean - m1).abs()).max((lib.second_moment - m2).abs());
    }
    let pass = mean_err <= 1e-10 && var_slack <= 1e-10 && lib_diff <= 1e-10;
    outcome(
        pass,
        format!(
            "{} samples ({nonzero} with nonzero residual); max |E[dL] - E_h^2| {mean_err:.2e} (tol 1e-10); max E[dL^2] - (4b^2/3)E_h^2 {var_slack:.2e} (need <= 1e-10); library vs oracle {lib_diff:.2e}",
            samples.len()
        ),
    )
}

fn criterion_3(samples: &[(Instance, usize, usize, usize, usize, usize)]) -> Outcome {
    let (mut slack, mut lib_diff) = (f64::NEG_INFINITY, 0.0f64);
    for (inst, h, i, j, x, a) in samples {
        let (mdp, class) = (&inst.mdp, &inst.class);
        let b = class.bound_b();
        let eta = 0.4 / (b * b);
        let [_, _, lmgf, e] = oracle_excess(mdp, *h, class.member(*h, *i), next_table(class, *h, *j), *x, *a, eta);
        slack = slack.max(lmgf + 0.25 * eta * e * e);
        let lib = excess_loss_moments(mdp, class, &BellmanTargets::new(mdp, class), *h, *i, *j, *x, *a, eta);
        lib_diff = lib_diff.max((lib.log_mgf - lmgf).abs());
    }
    outcome(
        slack <= 1e-10 && lib_diff <= 1e-10,
        format!(
            "{} samples at eta = 0.4/b^2; max ln E exp(-eta dL) + 0.25 eta E_h^2 = {slack:.2e} (need <= 1e-10); library vs oracle {lib_diff:.2e}",
            samples.len()
        ),
    )
}

fn mix(h: u64, v: u64) -> u64 {
    cpsrl::rng::splitmix64(h ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct MartCtx<'a> {
    mdp: &'a TabularMdp,
    f: &'a QTable,
    next: Option<&'a QTable>,
    step: usize,
    eta: f64,
    episodes: usize,
}

impl MartCtx<'_> {
    fn delta(&self, x: usize, a: usize, r: f64, y: usize) -> f64 {
        let t = bellman_target(self.mdp, self.step, self.next, x, a);
        let v = vmax(self.next, y);
        (self.f.get(x, a) - r - v).powi(2) - (t - r - v).powi(2)
    }

    fn log_norm(&self, x: usize, a: usize) -> f64 {
        let p = self.mdp.transition(self.step, x, a);
        let mut terms = Vec::new();
        for y in (0..self.mdp.num_states()).filter(|&y| p[y] > 0.0) {
            for (r, pr) in bernoulli(self.mdp.mean_reward(self.step, x, a)) {
                terms.push((p[y] * pr).ln() - 2.0 * self.eta * self.delta(x, a, r, y));
            }
        }
        lse(&terms)
    }

    /// `Σ_histories P(history) exp(Σ_s ξ_s)`; the action at `(h, x)` depends on the whole history so far.
    fn walk(&self, ep: usize, h: usize, x: usize, prob: f64, xi: f64, hist: u64) -> f64 {
        if ep == self.episodes {
            return prob * xi.exp();
        }
        if h == self.mdp.horizon() {
            return self.walk(ep + 1, 0, self.mdp.initial_state(), prob, xi, mix(hist, 0xE0));
        }
        let a = (mix(hist, (h * 16 + x) as u64) % self.mdp.num_actions() as u64) as usize;
        let p = self.mdp.transition(h, x, a);
        let mut total = 0.0;
        for y in (0..self.mdp.num_states()).filter(|&y| p[y] > 0.0) {
            for (r, pr) in bernoulli(self.mdp.mean_reward(h, x, a)) {
                let add = if h == self.step {
                    -2.0 * self.eta * self.delta(x, a, r, y) - self.log_norm(x, a)
                } else {
                    0.0
                };
                let next_hist = mix(hist, ((x * 7 + a) * 3 + r as usize) as u64 * 101 + y as u64);
                total += self.walk(ep, h + 1, y, prob * p[y] * pr, xi + add, next_hist);
            }
        }
        total
    }
}

fn criterion_4() -> Outcome {
    let mut rng = rng_from_seed(4040);
    let mdp = random_mdp(&mut rng, 2, 2, 2);
    let members: Vec<Vec<QTable>> = (0..2)
        .map(|h| {
            (0..4)
                .map(|_| QTable::from_values(2, 2, (0..4).map(|_| (2 - h) as f64 * rng.gen::<f64>()).collect()).unwrap())
                .collect()
        })
        .collect();
    let class = QFunctionClass::from_tables(members, None).unwrap();
    let b = class.bound_b();
    let eta = 0.4 / (b * b);
    let (mut worst_adaptive, mut worst_fixed) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let f = [rng.gen_range(0..4), rng.gen_range(0..4)];
        for step in 0..2 {
            let j = if step == 0 { f[1] } else { 0 };
            let ctx = MartCtx {
                mdp: &mdp,
                f: class.member(step, f[step]),
                next: next_table(&class, step, j),
                step,
                eta,
                episodes: 3,
            };
            let seed_hist = rng.gen::<u64>();
            let e = ctx.walk(0, 0, mdp.initial_state(), 1.0, 0.0, seed_hist);
            worst_adaptive = worst_adaptive.max((e - 1.0).abs());
            let policies: Vec<DeterministicPolicy> = (0..3).map(|_| random_policy(&mut rng, &mdp)).collect();
            let lib = martingale_expectation(&mdp, &class, (step, f[step], j), eta, &policies, 1 << 20).unwrap();
            worst_fixed = worst_fixed.max((lib - 1.0).abs());
        }
    }
    outcome(
        worst_adaptive <= 1e-8 && worst_fixed <= 1e-8,
        format!(
            "20 random f x 2 steps, 3 episodes; max |E exp(sum xi) - 1|: history-dependent policies {worst_adaptive:.2e}, library with fixed policies {worst_fixed:.2e} (tol 1e-8)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let instances = [
        random_tabular(&RandomTabularParams {
            states: 4,
            actions: 3,
            horizon: 3,
            seed: 55,
            members_per_step: 3,
        })
        .unwrap(),
        chain(&ChainParams::default()).unwrap(),
        linear_grid(&LinearGridParams::default()).unwrap(),
    ];
    let (mut gap, mut lib_gap, mut lib_diff) = (0.0f64, 0.0f64, 0.0f64);
    let mut rng = rng_from_seed(5050);
    for inst in &instances {
        for _ in 0..100 {
            let f = inst.class.tuple_from_index(rng.gen_range(0..inst.class.num_tuples()));
            let o = oracle_decomposition(&inst.mdp, &inst.class, &f);
            gap = gap.max((o.reg - (o.residual_sum - o.delta)).abs());
            let lib = value_decomposition_check(&inst.mdp, &inst.class, &f).unwrap();
            lib_gap = lib_gap.max(lib.gap);
            lib_diff = lib_diff
                .max((lib.reg - o.reg).abs())
                .max((lib.sum_residual_terms - o.residual_sum).abs())
                .max((lib.delta_f1 - o.delta).abs());
        }
    }
    outcome(
        gap < 1e-10 && lib_gap < 1e-10 && lib_diff < 1e-10,
        format!("3 instances x 100 tuples; max gap oracle {gap:.2e}, library {lib_gap:.2e} (tol 1e-10); library vs oracle terms {lib_diff:.2e}"),
    )
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct ConfigRun {
    inst: Instance,
    agent: cpsrl::harness::ResolvedAgent,
    episodes: usize,
    outputs: Vec<RunOutput>,
    secs: f64,
}

fn run_config(name: &str) -> ConfigRun {
    let start = Instant::now();
    let path = configs_dir().join(name);
    let cfg = load_config(&path).unwrap();
    let inst = resolve_instance(&cfg, &configs_dir()).unwrap();
    let agent = resolve_agent(&cfg.agent, &inst.mdp, &inst.class, cfg.episodes).unwrap();
    let outputs = run_seeds(&agent, &inst.mdp, &inst.class, cfg.episodes, &cfg.seeds, "").unwrap();
    ConfigRun {
        inst,
        agent,
        episodes: cfg.episodes,
        outputs,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn criterion_6(cps: &ConfigRun) -> Outcome {
    let (mdp, class) = (&cps.inst.mdp, &cps.inst.class);
    let t = cps.episodes;
    let tuples = class.num_tuples();
    let complete = check_assumptions(mdp, class, 0.0).complete;
    let b = class.bound_b();
    let eps = b / (t as f64).powf(cps.agent.beta);
    let k = oracle_kappa_steps(mdp, class, eps).map(|v| v.iter().sum::<f64>());
    let Some(k) = k else {
        return outcome(false, format!("empty cover set at eps = {eps}"));
    };
    let (n, na, hz) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let dc = 2.0 * (n * na * hz) as f64 * (1.0 + (2.0 * hz as f64 * t as f64).ln());
    let bound = oracle_bound(k, dc, b, t as f64, cps.agent.eta, cps.agent.lambda, hz as f64, cps.agent.beta);
    let lib_bound = theorem_bound(k, dc, b, t, cps.agent.eta, cps.agent.lambda, hz, cps.agent.beta).unwrap();
    let ts = [250.0, 500.0, 1000.0, 2000.0];
    let meds: Vec<f64> = ts
        .iter()
        .map(|&x| median(&cps.outputs.iter().map(|o| o.ledger.cumulative_at(x as usize)).collect::<Vec<_>>()))
        .collect();
    let p = loglog_slope(&ts, &meds);
    let final_med = meds[3];
    let pass = complete
        && tuples <= 500
        && cps.outputs.len() == 10
        && final_med < bound
        && p < 0.9
        && (lib_bound - bound).abs() <= 1e-9 * bound
        && cps.agent.kappa.is_some_and(|lk| (lk - k).abs() <= 1e-12)
        && cps.secs < 600.0;
    outcome(
        pass,
        format!(
            "chain |F| = {tuples} tuples, closed = {complete}; kappa({eps:.1e}) = {k:.4}, dc = {dc:.2}, lambda = {:.4}, eta = {}; median Reg at T = 250/500/1000/2000: {:.2}/{:.2}/{:.2}/{:.2}; bound {bound:.2} (a: {}); exponent p = {p:.3} (b: need < 0.9); {:.1}s",
            cps.agent.lambda,
            cps.agent.eta,
            meds[0],
            meds[1],
            meds[2],
            meds[3],
            if final_med < bound { "below" } else { "NOT below" },
            cps.secs
        ),
    )
}

/// Recomputes the record's prefix sums from the played tuples.
fn oracle_record_prefix(mdp: &TabularMdp, class: &QFunctionClass, rec: &ResidualSequenceRecord, n: usize) -> (f64, f64) {
    let tuples: Vec<MemberIndexTuple> = (0..n).map(|t| rec.tuple(t).clone()).collect();
    let occ: Vec<(Vec<Vec<f64>>, Vec<Vec<usize>>)> = tuples
        .iter()
        .map(|f| {
            let acts: Vec<Vec<usize>> = (0..class.horizon())
                .map(|h| (0..mdp.num_states()).map(|x| first_argmax(class.member(h, f.get(h)), x)).collect())
                .collect();
            let d = occupancy(mdp, &|h, x| acts[h][x]);
            (d, acts)
        })
        .collect();
    let res: Vec<Vec<QTable>> = tuples.iter().map(|f| residuals(mdp, class, f)).collect();
    let expect = |s: usize, t: usize, sq: bool| -> f64 {
        let (d, acts) = &occ[s];
        let mut tot = 0.0;
        for h in 0..class.horizon() {
            for x in 0..mdp.num_states() {
                let e = res[t][h].get(x, acts[h][x]);
                tot += d[h][x] * if sq { e * e } else { e };
            }
        }
        tot
    };
    let lhs = (0..n).map(|t| expect(t, t, false)).sum();
    let cross = (0..n).map(|t| (0..t).map(|s| expect(s, t, true)).sum::<f64>()).sum();
    (lhs, cross)
}

fn criterion_7(runs: &[&ConfigRun]) -> Outcome {
    let mus = [0.1, 0.5, 1.0];
    let (mut checks, mut failed, mut record_err) = (0, Vec::new(), 0.0f64);
    let mut parts = Vec::new();
    for run in runs {
        let (mdp, class) = (&run.inst.mdp, &run.inst.class);
        let d = class.backing().feature_dim().unwrap_or(mdp.num_states() * mdp.num_actions());
        let k = dc_bound_linear(d, mdp.horizon(), run.episodes);
        let mut min_margin = f64::INFINITY;
        for (si, o) in run.outputs.iter().enumerate() {
            let rec = o.record.as_ref().expect("record");
            for &mu in &mus {
                let c = dc_inequality_check(rec, mu, k).unwrap();
                checks += 1;
                min_margin = min_margin.min(c.rhs - c.lhs);
                if !c.satisfied {
                    failed.push(format!("seed #{si} mu {mu}: lhs {:.3} > rhs {:.3}", c.lhs, c.rhs));
                }
            }
            if si == 0 {
                let n = 60.min(rec.num_episodes());
                let (lhs, cross) = oracle_record_prefix(mdp, class, rec, n);
                record_err = record_err
                    .max((lhs - rec.lhs_prefix(n)).abs())
                    .max((cross - rec.cross_prefix(n)).abs() / cross.abs().max(1.0));
            }
        }
        parts.push(format!("d = {d}, K = {k:.2}, min rhs - lhs {min_margin:.2}"));
    }
    outcome(
        failed.is_empty() && record_err <= 1e-9,
        format!(
            "{checks} checks over mu in {{0.1, 0.5, 1.0}}; {}; record prefix vs oracle {record_err:.2e}{}",
            parts.join("; "),
            if failed.is_empty() { String::new() } else { format!(" [{}]", failed.join("; ")) }
        ),
    )
}

fn criterion_8(cps: &ConfigRun, none: &ConfigRun) -> Outcome {
    let pairs: Vec<(f64, f64)> = cps
        .outputs
        .iter()
        .zip(&none.outputs)
        .map(|(a, b)| {
            assert_eq!(a.ledger.seed, b.ledger.seed);
            (a.ledger.cumulative(), b.ledger.cumulative())
        })
        .collect();
    let wins = pairs.iter().filter(|(a, b)| a < b).count();
    let ma = median(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let mb = median(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    outcome(
        wins >= 7 && none.agent.lambda == 0.0,
        format!(
            "tuned lambda = {:.4} wins {wins}/10 paired seeds vs lambda = 0 (need >= 7); median Reg(2000) {ma:.2} vs {mb:.2}",
            cps.agent.lambda
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = rng_from_seed(9090);
    let (mut worst, mut lib_diff) = (f64::NEG_INFINITY, 0.0f64);
    for k in 0..1000 {
        let n = rng.gen_range(1..=50);
        let xs: Vec<f64> = match k % 4 {
            0 => (1..=n).map(|i| 1.0 / i as f64).collect(),
            1 => (0..n).map(|_| rng.gen::<f64>() + 1e-9).collect(),
            2 => (0..n).map(|_| (6.0 * rng.gen::<f64>() - 3.0).exp()).collect(),
            _ => (1..=n).map(|i| (i as f64).powf(-rng.gen_range(0.0..2.0))).collect(),
        };
        let num: f64 = xs.iter().sum();
        let den: f64 = xs.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum::<f64>().sqrt();
        let ratio = num / den;
        worst = worst.max(ratio - (1.0 + (n as f64).ln()).sqrt());
        lib_diff = lib_diff.max((helper_sum_sqrt(&xs).unwrap() - ratio).abs());
    }
    outcome(
        worst <= 1e-12 && lib_diff <= 1e-12,
        format!("1000 sequences, n <= 50; max ratio - sqrt(1 + ln n) = {worst:.3e} (need <= 1e-12); library vs oracle {lib_diff:.1e}"),
    )
}

fn criterion_10() -> Outcome {
    let mut exact: Vec<(String, Instance)> = (0..4)
        .map(|s| {
            let p = RandomTabularParams {
                states: 3 + s % 2,
                actions: 2,
                horizon: 2 + s % 2,
                seed: 100 + s as u64,
                members_per_step: 2 + s % 2,
            };
            (format!("random_tabular#{s}"), random_tabular(&p).unwrap())
        })
        .collect();
    exact.push(("chain".into(), chain(&ChainParams::default()).unwrap()));
    let lin = linear_grid(&LinearGridParams::default()).unwrap();

    let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.005).collect();
    let mut problems = Vec::new();
    let (mut bound_margin, mut alpha_gap, mut lib_diff) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut check = |name: &str, inst: &Instance, eps_list: &[f64], mono: &[f64]| {
        let (mdp, class) = (&inst.mdp, &inst.class);
        let uniform = class.steps().iter().all(|s| s.prior.iter().all(|p| (p * s.prior.len() as f64 - 1.0).abs() < 1e-12));
        if !uniform || !check_assumptions(mdp, class, 1e-9).complete {
            problems.push(format!("{name}: prior not uniform or class not complete"));
        }
        let ln_f = (class.num_tuples() as f64).ln();
        for &eps in eps_list {
            match (oracle_kappa_steps(mdp, class, eps), kappa(class, eps, mdp)) {
                (Some(steps), Ok(lib)) => {
                    let k: f64 = steps.iter().sum();
                    lib_diff = lib_diff.max((k - lib).abs());
                    bound_margin = bound_margin.min(ln_f - k);
                    if k > ln_f + 1e-12 {
                        problems.push(format!("{name}: kappa({eps}) = {k} > ln|F| = {ln_f}"));
                    }
                    let ka = kappa_alpha(class, 0.999, eps, mdp).unwrap();
                    let lim = kappa_alpha_limit(class, eps, mdp).unwrap();
                    for h in 0..class.horizon() {
                        alpha_gap = alpha_gap.max((ka[h] - lim[h]).abs()).max((lim[h] - steps[h]).abs());
                    }
                }
                (o, l) => problems.push(format!("{name}: kappa({eps}) oracle {o:?}, library {l:?}")),
            }
        }
        let ks: Vec<f64> = mono.iter().filter_map(|&e| kappa(class, e, mdp).ok()).collect();
        if ks.len() != mono.len() || ks.windows(2).any(|w| w[1] > w[0]) {
            problems.push(format!("{name}: kappa not nonincreasing on the eps grid"));
        }
    };
    for (name, inst) in &exact {
        check(name, inst, &[0.0, 0.01, 0.1], &grid);
    }
    // Completeness of the linear grid holds only up to rounding, so ε = 0 is excluded there.
    check("linear_grid", &lin, &[0.01, 0.1], &grid[1..]);
    outcome(
        problems.is_empty() && alpha_gap <= 1e-2 && lib_diff <= 1e-12,
        format!(
            "6 instances, eps in {{0, 0.01, 0.1}} (linear grid: eps > 0); min ln|F| - kappa = {bound_margin:.3}; monotone on 41-point grid; max |kappa_0.999 - limit| {alpha_gap:.2e} (tol 1e-2); library vs oracle {lib_diff:.1e}{}",
            if problems.is_empty() { String::new() } else { format!(" [{}]", problems.join("; ")) }
        ),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["chain_cps.json", "chain_no_optimism.json", "linear_grid_cps.json"] {
        let mut bytes = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{name}.{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_cpsrl"))
                .arg("run")
                .arg("--config")
                .arg(configs_dir().join(name))
                .arg("--out")
                .arg(&out)
                .args(["--seed-override", "7", "--quiet"])
                .status()
                .unwrap();
            pass &= status.success();
            bytes.push(std::fs::read(out.join("regret_7.csv")).unwrap_or_default());
        }
        let same = !bytes[0].is_empty() && bytes[0] == bytes[1];
        pass &= same;
        notes.push(format!("{name}: {} bytes, {}", bytes[0].len(), if same { "identical" } else { "DIFFERENT" }));
    }
    outcome(pass, format!("two CLI runs per config with seed 7; {}", notes.join("; ")))
}

fn main() {
    let suite_start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "posterior exactness", criterion_1()));
    let samples = excess_samples();
    results.push((2, "excess-loss mean/variance", criterion_2(&samples)));
    results.push((3, "excess-loss moment bound", criterion_3(&samples)));
    results.push((4, "martingale identity", criterion_4()));
    results.push((5, "value decomposition", criterion_5()));
    let cps = run_config("chain_cps.json");
    let none = run_config("chain_no_optimism.json");
    let lin = run_config("linear_grid_cps.json");
    results.push((6, "regret vs bound, sublinearity", criterion_6(&cps)));
    results.push((7, "decoupling inequality", criterion_7(&[&cps, &lin])));
    results.push((8, "optimism ablation", criterion_8(&cps, &none)));
    results.push((9, "sum/sqrt helper inequality", criterion_9()));
    results.push((10, "kappa sanity", criterion_10()));
    results.push((11, "reproducibility", criterion_11()));

    println!();
    for (n, name, o) in &results {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "\nacceptance: {} passed, {failed} failed ({:.1}s)",
        results.len() - failed,
        suite_start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
