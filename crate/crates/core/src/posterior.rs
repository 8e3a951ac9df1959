//! Exact conditional posterior over a finite class.
//!
//! The posterior after `t` episodes is
//!
//! ```text
//! p(f | S_t) ∝ exp(λ f^1(x^1)) Π_h p_0^h(f^h) exp(-η L^h(f^h, f^{h+1})) / E_{f~ ~ p_0^h} exp(-η L^h(f~, f^{h+1}))
//! ```
//!
//! Every factor couples only `f^h` and `f^{h+1}`, so the joint is a chain and
//! can be normalized, marginalized and sampled exactly with one backward
//! sweep of log-space messages followed by ancestral sampling from step 0.
//!
//! The `alpha < 1` generalization scales the loss and log-normalizer by
//! `alpha` while keeping the full prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::class::{BellmanTargets, MemberIndexTuple, QFunctionClass};
use crate::error::{Error, Result};
use crate::mdp::{TabularMdp, Trajectory};
use crate::numeric::{argmax, log_sum_exp, log_weights_to_cdf, sample_cdf};
use crate::rng::rng_from_seed;

/// Default cap on `Π_h |F_h|` for full enumeration.
pub const DEFAULT_TUPLE_CAP: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Likelihood temperature `η > 0`.
    pub eta: f64,
    /// Optimism `λ >= 0`.
    pub lambda: f64,
    /// Generalization parameter `α ∈ (0, 1]`; 1 is the plain posterior.
    pub alpha: f64,
}

impl Hyperparameters {
    pub fn new(eta: f64, lambda: f64, alpha: f64) -> Result<Self> {
        let h = Hyperparameters { eta, lambda, alpha };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("agent.eta", format!("must be > 0, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("agent.lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("agent.alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Dense `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Simulator-side cache of `D^h[j] = Σ_s (T*_h f_j^{h+1}(x_s,a_s) - r_s - f_j^{h+1}(x_s'))^2`,
/// used to evaluate the generalized posterior in its excess-loss form.
#[derive(Clone, Debug)]
struct ExcessCache {
    targets: BellmanTargets,
    d: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PosteriorState {
    hyper: Hyperparameters,
    initial_state: usize,
    episodes: usize,
    /// `C^h[i][j]`, rows over `F_h`, columns over `F_{h+1}` (one column at the last step).
    losses: Vec<Matrix>,
    excess: Option<ExcessCache>,
}

impl PosteriorState {
    pub fn new(class: &QFunctionClass, hyper: Hyperparameters, initial_state: usize) -> Result<Self> {
        hyper.validate()?;
        if initial_state >= class.num_states() {
            return Err(Error::invalid("initial_state", "out of range for class"));
        }
        let losses = (0..class.horizon())
            .map(|h| Matrix::zeros(class.size_or_terminal(h), class.size_or_terminal(h + 1)))
            .collect();
        Ok(PosteriorState {
            hyper,
            initial_state,
            episodes: 0,
            losses,
            excess: None,
        })
    }

    /// Also track the `T*`-dependent cache so [`PosteriorState::build_chain_excess_form`]
    /// can be used. Must be called before the first update.
    pub fn with_excess_tracking(mut self, mdp: &TabularMdp, class: &QFunctionClass) -> Self {
        assert_eq!(self.episodes, 0, "excess tracking must start from an empty history");
        let d = (0..class.horizon()).map(|h| vec![0.0; class.size_or_terminal(h + 1)]).collect();
        self.excess = Some(ExcessCache {
            targets: BellmanTargets::new(mdp, class),
            d,
        });
        self
    }

    pub fn hyper(&self) -> Hyperparameters {
        self.hyper
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn losses(&self, h: usize) -> &Matrix {
        &self.losses[h]
    }

    pub fn excess_offsets(&self, h: usize) -> Option<&[f64]> {
        self.excess.as_ref().map(|e| e.d[h].as_slice())
    }

    /// Adds one episode's squared TD errors to every `C^h[i][j]`.
    pub fn update_losses(&mut self, class: &QFunctionClass, trajectory: &Trajectory) -> Result<()> {
        if trajectory.len() != class.horizon() {
            return Err(Error::invalid(
                "trajectory",
                format!("expected {} steps, got {}", class.horizon(), trajectory.len()),
            ));
        }
        for (h, step) in trajectory.steps.iter().enumerate() {
            let x_next = trajectory.next_state(h);
            let n_next = class.size_or_terminal(h + 1);
            let fitted: Vec<f64> = class.step(h)
                .members
                .iter()
                .map(|f| f.get(step.state, step.action) - step.reward)
                .collect();
            let next_values: Vec<f64> = (0..n_next).map(|j| class.state_value(h + 1, j, x_next)).collect();
            let c = &mut self.losses[h];
            for (i, fi) in fitted.iter().enumerate() {
                for (j, vj) in next_values.iter().enumerate() {
                    let e = fi - vj;
                    c.data[i * n_next + j] += e * e;
                }
            }
            if let Some(ex) = self.excess.as_mut() {
                for (j, vj) in next_values.iter().enumerate() {
                    let e = ex.targets.get(h, j).get(step.state, step.action) - step.reward - vj;
                    ex.d[h][j] += e * e;
                }
            }
        }
        self.episodes += 1;
        Ok(())
    }

    /// Chain of log-potentials encoding the posterior (or its `α`-generalization).
    pub fn build_chain(&self, class: &QFunctionClass) -> LogWeightChain {
        let zero_offsets: Vec<Vec<f64>> = self.losses.iter().map(|c| vec![0.0; c.cols()]).collect();
        self.chain_with_offsets(class, &zero_offsets)
    }

    /// Same distribution written with excess losses `ΔL = L - D[j]`. The offsets
    /// cancel between the loss term and the log-normalizer, so this agrees with
    /// [`PosteriorState::build_chain`] up to floating point.
    pub fn build_chain_excess_form(&self, class: &QFunctionClass) -> Option<LogWeightChain> {
        let ex = self.excess.as_ref()?;
        Some(self.chain_with_offsets(class, &ex.d))
    }

    fn chain_with_offsets(&self, class: &QFunctionClass, offsets: &[Vec<f64>]) -> LogWeightChain {
        let Hyperparameters { eta, lambda, alpha } = self.hyper;
        let unary = class.step(0)
            .members
            .iter()
            .map(|f| lambda * f.max(self.initial_state))
            .collect();
        let pairwise = self
            .losses
            .iter()
            .enumerate()
            .map(|(h, c)| {
                let log_prior: Vec<f64> = class.prior(h).iter().map(|p| p.ln()).collect();
                let mut psi = Matrix::zeros(c.rows(), c.cols());
                for j in 0..c.cols() {
                    let shifted: Vec<f64> = (0..c.rows()).map(|i| c.get(i, j) - offsets[h][j]).collect();
                    let terms: Vec<f64> = shifted
                        .iter()
                        .zip(&log_prior)
                        .map(|(l, lp)| lp - eta * l)
                        .collect();
                    let log_norm = log_sum_exp(&terms);
                    for i in 0..c.rows() {
                        psi.set(i, j, log_prior[i] - alpha * eta * shifted[i] - alpha * log_norm);
                    }
                }
                psi
            })
            .collect();
        LogWeightChain { unary, pairwise }
    }
}

/// Unnormalized log-density over member tuples:
/// `u(i_0) + Σ_h ψ_h(i_h, i_{h+1})`, with `i_H = 0` standing for the zero function.
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeightChain {
    pub unary: Vec<f64>,
    pub pairwise: Vec<Matrix>,
}

impl LogWeightChain {
    pub fn horizon(&self) -> usize {
        self.pairwise.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pairwise.iter().map(|m| m.rows()).collect()
    }

    pub fn num_tuples(&self) -> u128 {
        self.sizes().iter().map(|&s| s as u128).product()
    }

    pub fn log_weight(&self, f: &MemberIndexTuple) -> f64 {
        let idx = f.as_slice();
        let mut lw = self.unary[idx[0]];
        for (h, psi) in self.pairwise.iter().enumerate() {
            let j = idx.get(h + 1).copied().unwrap_or(0);
            lw += psi.get(idx[h], j);
        }
        lw
    }

    /// `β_h(i) = ln Σ_j exp(ψ_h(i, j) + β_{h+1}(j))`, with `β_H = [0]`.
    pub fn backward_messages(&self) -> Vec<Vec<f64>> {
        let big_h = self.horizon();
        let mut beta = vec![Vec::new(); big_h + 1];
        beta[big_h] = vec![0.0];
        for h in (0..big_h).rev() {
            let psi = &self.pairwise[h];
            beta[h] = (0..psi.rows())
                .map(|i| {
                    let terms: Vec<f64> = psi.row(i).iter().zip(&beta[h + 1]).map(|(p, b)| p + b).collect();
                    log_sum_exp(&terms)
                })
                .collect();
        }
        beta
    }

    /// `α_h(j) = ln Σ_i exp(α_{h-1}(i) + ψ_{h-1}(i, j))`, with `α_0 = u`.
    pub fn forward_messages(&self) -> Vec<Vec<f64>> {
        let big_h = self.horizon();
        let mut fwd = Vec::with_capacity(big_h + 1);
        fwd.push(self.unary.clone());
        for h in 0..big_h {
            let psi = &self.pairwise[h];
            let next = (0..psi.cols())
                .map(|j| {
                    let terms: Vec<f64> = (0..psi.rows()).map(|i| fwd[h][i] + psi.get(i, j)).collect();
                    log_sum_exp(&terms)
                })
                .collect();
            fwd.push(next);
        }
        fwd
    }

    pub fn log_partition(&self) -> f64 {
        let beta = self.backward_messages();
        let root: Vec<f64> = self.unary.iter().zip(&beta[0]).map(|(u, b)| u + b).collect();
        log_sum_exp(&root)
    }

    /// Per-step marginal distributions.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let beta = self.backward_messages();
        let fwd = self.forward_messages();
        let log_z = log_sum_exp(&self.unary.iter().zip(&beta[0]).map(|(u, b)| u + b).collect::<Vec<_>>());
        (0..self.horizon())
            .map(|h| fwd[h].iter().zip(&beta[h]).map(|(a, b)| (a + b - log_z).exp()).collect())
            .collect()
    }

    /// Precomputes the root and conditional CDFs for repeated draws.
    pub fn sampler(&self) -> ChainSampler {
        let beta = self.backward_messages();
        let root_log: Vec<f64> = self.unary.iter().zip(&beta[0]).map(|(u, b)| u + b).collect();
        let conditionals = (1..self.horizon())
            .map(|h| {
                let psi = &self.pairwise[h - 1];
                (0..psi.rows())
                    .map(|i| {
                        let lw: Vec<f64> = psi.row(i).iter().zip(&beta[h]).map(|(p, b)| p + b).collect();
                        log_weights_to_cdf(&lw)
                    })
                    .collect()
            })
            .collect();
        ChainSampler {
            root: log_weights_to_cdf(&root_log),
            conditionals,
        }
    }

    /// Highest-weight tuple by max-sum; lowest indices win ties.
    pub fn mode(&self) -> MemberIndexTuple {
        let big_h = self.horizon();
        // best[h][i]: best log-weight of the suffix starting at step h with i_h = i.
        let mut best = vec![Vec::new(); big_h + 1];
        let mut choice: Vec<Vec<usize>> = vec![Vec::new(); big_h];
        best[big_h] = vec![0.0];
        for h in (0..big_h).rev() {
            let psi = &self.pairwise[h];
            let mut b = Vec::with_capacity(psi.rows());
            let mut c = Vec::with_capacity(psi.rows());
            for i in 0..psi.rows() {
                let scores: Vec<f64> = psi.row(i).iter().zip(&best[h + 1]).map(|(p, s)| p + s).collect();
                let j = argmax(&scores);
                b.push(scores[j]);
                c.push(j);
            }
            best[h] = b;
            choice[h] = c;
        }
        let root: Vec<f64> = self.unary.iter().zip(&best[0]).map(|(u, b)| u + b).collect();
        let mut out = Vec::with_capacity(big_h);
        let mut i = argmax(&root);
        for h in 0..big_h {
            out.push(i);
            i = choice[h][i];
        }
        MemberIndexTuple(out)
    }
}

/// Ancestral sampler: `i_0` from its marginal, then `i_h | i_{h-1}`.
#[derive(Clone, Debug)]
pub struct ChainSampler {
    root: Vec<f64>,
    /// `conditionals[h-1][i_{h-1}]` is the CDF of `i_h`.
    conditionals: Vec<Vec<Vec<f64>>>,
}

impl ChainSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MemberIndexTuple {
        let mut out = Vec::with_capacity(self.conditionals.len() + 1);
        let mut i = sample_cdf(&self.root, rng);
        out.push(i);
        for cond in &self.conditionals {
            i = sample_cdf(&cond[i], rng);
            out.push(i);
        }
        MemberIndexTuple(out)
    }

    /// Probability the sampler assigns to `f`, read off the CDFs it draws from.
    pub fn probability(&self, f: &MemberIndexTuple) -> f64 {
        let idx = f.as_slice();
        let mass = |cdf: &[f64], i: usize| if i == 0 { cdf[0] } else { cdf[i] - cdf[i - 1] };
        let mut p = mass(&self.root, idx[0]);
        for (h, cond) in self.conditionals.iter().enumerate() {
            p *= mass(&cond[idx[h]], idx[h + 1]);
        }
        p
    }
}

/// One exact draw from the chain, deterministic given the seed.
pub fn sample_posterior(chain: &LogWeightChain, rng_seed: u64) -> MemberIndexTuple {
    chain.sampler().sample(&mut rng_from_seed(rng_seed))
}

/// Normalized probabilities of every member tuple, in mixed-radix order with step 0 most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleDistribution {
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl TupleDistribution {
    pub fn tuple(&self, index: usize) -> MemberIndexTuple {
        decode_tuple(&self.sizes, index as u128)
    }

    pub fn index(&self, f: &MemberIndexTuple) -> usize {
        self.sizes
            .iter()
            .zip(f.as_slice())
            .fold(0usize, |acc, (&n, &i)| acc * n + i)
    }

    pub fn prob(&self, f: &MemberIndexTuple) -> f64 {
        self.probs[self.index(f)]
    }

    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self.probs.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MemberIndexTuple, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (self.tuple(i), p))
    }
}

pub fn decode_tuple(sizes: &[usize], mut index: u128) -> MemberIndexTuple {
    let mut out = vec![0; sizes.len()];
    for h in (0..sizes.len()).rev() {
        out[h] = (index % sizes[h] as u128) as usize;
        index /= sizes[h] as u128;
    }
    MemberIndexTuple(out)
}

/// Full enumeration of the chain's distribution.
pub fn exact_posterior(chain: &LogWeightChain) -> Result<TupleDistribution> {
    exact_posterior_capped(chain, DEFAULT_TUPLE_CAP)
}

pub fn exact_posterior_capped(chain: &LogWeightChain, cap: u128) -> Result<TupleDistribution> {
    let total = chain.num_tuples();
    if total > cap {
        return Err(Error::CapExceeded { size: total, cap });
    }
    let sizes = chain.sizes();
    let log_w: Vec<f64> = (0..total)
        .map(|k| chain.log_weight(&decode_tuple(&sizes, k)))
        .collect();
    let log_z = log_sum_exp(&log_w);
    let probs = log_w.iter().map(|l| (l - log_z).exp()).collect();
    Ok(TupleDistribution { sizes, probs })
}

/// `ΔL^h = (f^h(x,a) - r - f^{h+1}(x'))^2 - (T*_h f^{h+1}(x,a) - r - f^{h+1}(x'))^2`.
pub fn excess_loss_delta(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    h: usize,
    f_h: usize,
    f_next: usize,
    transition: (usize, usize, f64, usize),
) -> f64 {
    let target = crate::mdp::bellman_apply(mdp, h, class.next_member(h, f_next));
    let (x, a, r, x_next) = transition;
    let v_next = class.state_value(h + 1, f_next, x_next);
    let fit = class.member(h, f_h).get(x, a) - r - v_next;
    let bayes = target.get(x, a) - r - v_next;
    fit * fit - bayes * bayes
}

/// [`excess_loss_delta`] with precomputed targets.
pub fn excess_loss_with(
    targets: &BellmanTargets,
    class: &QFunctionClass,
    h: usize,
    f_h: usize,
    f_next: usize,
    transition: (usize, usize, f64, usize),
) -> f64 {
    let (x, a, r, x_next) = transition;
    let v_next = class.state_value(h + 1, f_next, x_next);
    let fit = class.member(h, f_h).get(x, a) - r - v_next;
    let bayes = targets.get(h, f_next).get(x, a) - r - v_next;
    fit * fit - bayes * bayes
}
