//! Finite Q-function classes `F = F_1 x ... x F_H` with stagewise priors,
//! assumption checks and the prior-mass complexity `kappa`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{bellman_apply, optimal_values, DeterministicPolicy, QTable, TabularMdp};
use crate::numeric::log_sum_exp;
use crate::rng::rng_from_seed;

const PRIOR_SUM_TOL: f64 = 1e-12;

/// Link function of a generalized linear class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Link {
    Identity,
    /// `sigma(z) = k z + (K - k) (logistic(4z) - 1/2)`, whose slope lies in `[k, K]`
    /// on the whole real line.
    SigmoidLike {
        k: f64,
        #[serde(rename = "K")]
        big_k: f64,
    },
}

impl Link {
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Link::Identity => z,
            Link::SigmoidLike { k, big_k } => k * z + (big_k - k) * (1.0 / (1.0 + (-4.0 * z).exp()) - 0.5),
        }
    }

    /// `(k, K)` such that `k <= |sigma'| <= K`.
    pub fn lipschitz(&self) -> (f64, f64) {
        match *self {
            Link::Identity => (1.0, 1.0),
            Link::SigmoidLike { k, big_k } => (k, big_k),
        }
    }

    fn validate(&self) -> Result<()> {
        let (k, big_k) = self.lipschitz();
        if !(k > 0.0 && k <= big_k && big_k.is_finite()) {
            return Err(Error::invalid("link", format!("need 0 < k <= K < inf, got k={k}, K={big_k}")));
        }
        Ok(())
    }
}

/// Feature map `phi(x, a) in R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(num_states: usize, num_actions: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != num_states * num_actions * dim {
            return Err(Error::invalid(
                "features",
                format!("expected {num_states} x {num_actions} x {dim} entries, got {}", values.len()),
            ));
        }
        Ok(FeatureMap {
            num_states,
            num_actions,
            dim,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn phi(&self, x: usize, a: usize) -> &[f64] {
        let i = (x * self.num_actions + a) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn dot(&self, x: usize, a: usize, w: &[f64]) -> f64 {
        self.phi(x, a).iter().zip(w).map(|(p, w)| p * w).sum()
    }

    fn evaluate(&self, w: &[f64], link: &Link) -> QTable {
        let mut t = QTable::zeros(self.num_states, self.num_actions);
        for x in 0..self.num_states {
            for a in 0..self.num_actions {
                t.set(x, a, link.apply(self.dot(x, a, w)));
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backing {
    ExplicitTable,
    LinearFeatures {
        features: FeatureMap,
        /// `[h][i]` weight vectors.
        weights: Vec<Vec<Vec<f64>>>,
    },
    GeneralizedLinear {
        features: FeatureMap,
        weights: Vec<Vec<Vec<f64>>>,
        link: Link,
    },
}

impl Backing {
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            Backing::ExplicitTable => None,
            Backing::LinearFeatures { features, .. } | Backing::GeneralizedLinear { features, .. } => {
                Some(features.dim())
            }
        }
    }

    pub fn link(&self) -> Option<Link> {
        match self {
            Backing::ExplicitTable => None,
            Backing::LinearFeatures { .. } => Some(Link::Identity),
            Backing::GeneralizedLinear { link, .. } => Some(*link),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepClass {
    pub members: Vec<QTable>,
    pub prior: Vec<f64>,
}

/// One member index per step, identifying `f in F`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberIndexTuple(pub Vec<usize>);

impl MemberIndexTuple {
    pub fn get(&self, h: usize) -> usize {
        self.0[h]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Display for MemberIndexTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFunctionClass {
    num_states: usize,
    num_actions: usize,
    steps: Vec<StepClass>,
    bound_b: f64,
    backing: Backing,
}

impl QFunctionClass {
    /// Explicit tables, `members[h][i]`. `priors = None` means uniform per step.
    pub fn from_tables(members: Vec<Vec<QTable>>, priors: Option<Vec<Vec<f64>>>) -> Result<Self> {
        Self::assemble(members, priors, Backing::ExplicitTable)
    }

    /// Linear (`link = None` or identity) or generalized linear members
    /// `f_i^h(x,a) = sigma(<phi(x,a), w_i^h>)`.
    pub fn from_features(
        features: FeatureMap,
        weights: Vec<Vec<Vec<f64>>>,
        link: Option<Link>,
        priors: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let link = link.unwrap_or(Link::Identity);
        link.validate()?;
        let mut members = Vec::with_capacity(weights.len());
        for (h, ws) in weights.iter().enumerate() {
            let mut step = Vec::with_capacity(ws.len());
            for (i, w) in ws.iter().enumerate() {
                if w.len() != features.dim() {
                    return Err(Error::invalid(
                        format!("weights[{h}][{i}]"),
                        format!("expected dimension {}, got {}", features.dim(), w.len()),
                    ));
                }
                step.push(features.evaluate(w, &link));
            }
            members.push(step);
        }
        let backing = match link {
            Link::Identity => Backing::LinearFeatures { features, weights },
            link => Backing::GeneralizedLinear {
                features,
                weights,
                link,
            },
        };
        Self::assemble(members, priors, backing)
    }

    fn assemble(members: Vec<Vec<QTable>>, priors: Option<Vec<Vec<f64>>>, backing: Backing) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("members", "class needs at least one step"));
        }
        let (num_states, num_actions) = match members[0].first() {
            Some(t) => (t.num_states(), t.num_actions()),
            None => return Err(Error::invalid("members[0]", "step has no members")),
        };
        let priors = match priors {
            Some(p) => {
                if p.len() != members.len() {
                    return Err(Error::invalid(
                        "prior",
                        format!("expected {} steps, got {}", members.len(), p.len()),
                    ));
                }
                p
            }
            None => members.iter().map(|m| vec![1.0 / m.len() as f64; m.len()]).collect(),
        };
        let mut steps = Vec::with_capacity(members.len());
        for (h, (ms, prior)) in members.into_iter().zip(priors).enumerate() {
            if ms.is_empty() {
                return Err(Error::invalid(format!("members[{h}]"), "step has no members"));
            }
            if prior.len() != ms.len() {
                return Err(Error::invalid(
                    format!("prior[{h}]"),
                    format!("expected {} entries, got {}", ms.len(), prior.len()),
                ));
            }
            if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!("prior[{h}]"), "entries must be nonnegative"));
            }
            let s: f64 = prior.iter().sum();
            if (s - 1.0).abs() > PRIOR_SUM_TOL {
                return Err(Error::invalid(format!("prior[{h}]"), format!("sums to {s}, expected 1")));
            }
            for (i, m) in ms.iter().enumerate() {
                if m.num_states() != num_states || m.num_actions() != num_actions {
                    return Err(Error::invalid(
                        format!("members[{h}][{i}]"),
                        format!("expected {num_states} x {num_actions} table"),
                    ));
                }
                if m.values().iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("members[{h}][{i}]"), "non-finite value"));
                }
            }
            steps.push(StepClass { members: ms, prior });
        }
        let max_value = steps
            .iter()
            .flat_map(|s| s.members.iter().map(|m| m.max_value()))
            .fold(0.0, f64::max);
        Ok(QFunctionClass {
            num_states,
            num_actions,
            steps,
            bound_b: 1.0 + max_value,
            backing,
        })
    }

    /// Override the declared range bound `b`.
    pub fn with_bound(mut self, b: f64) -> Result<Self> {
        if !(b >= 1.0 && b.is_finite()) {
            return Err(Error::invalid("bound_b", format!("need finite b >= 1, got {b}")));
        }
        self.bound_b = b;
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn bound_b(&self) -> f64 {
        self.bound_b
    }
    pub fn backing(&self) -> &Backing {
        &self.backing
    }
    pub fn steps(&self) -> &[StepClass] {
        &self.steps
    }
    pub fn step(&self, h: usize) -> &StepClass {
        &self.steps[h]
    }
    pub fn member(&self, h: usize, i: usize) -> &QTable {
        &self.steps[h].members[i]
    }
    pub fn prior(&self, h: usize) -> &[f64] {
        &self.steps[h].prior
    }

    /// `|F_h|` for `h in 0..H`.
    pub fn sizes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.members.len()).collect()
    }

    /// `|F_h|` with the convention `|F_{H+1}| = 1`.
    pub fn size_or_terminal(&self, h: usize) -> usize {
        self.steps.get(h).map(|s| s.members.len()).unwrap_or(1)
    }

    pub fn num_tuples(&self) -> u128 {
        self.steps.iter().map(|s| s.members.len() as u128).product()
    }

    /// `max_a f_j^{h}(x, a)`, zero at the terminal step.
    pub fn state_value(&self, h: usize, j: usize, x: usize) -> f64 {
        match self.steps.get(h) {
            Some(s) => s.members[j].max(x),
            None => 0.0,
        }
    }

    /// Next-step member table or `None` for the terminal zero function.
    pub fn next_member(&self, h: usize, j: usize) -> Option<&QTable> {
        self.steps.get(h + 1).map(|s| &s.members[j])
    }

    pub fn check_tuple(&self, f: &MemberIndexTuple) -> Result<()> {
        if f.0.len() != self.horizon() {
            return Err(Error::invalid("tuple", format!("expected {} indices, got {}", self.horizon(), f.0.len())));
        }
        for (h, &i) in f.0.iter().enumerate() {
            if i >= self.steps[h].members.len() {
                return Err(Error::invalid(format!("tuple[{h}]"), format!("index {i} out of range")));
            }
        }
        Ok(())
    }

    /// Mixed-radix decoding with step 0 most significant.
    pub fn tuple_from_index(&self, mut index: u128) -> MemberIndexTuple {
        let sizes = self.sizes();
        let mut out = vec![0; sizes.len()];
        for h in (0..sizes.len()).rev() {
            out[h] = (index % sizes[h] as u128) as usize;
            index /= sizes[h] as u128;
        }
        MemberIndexTuple(out)
    }

    pub fn tuple_index(&self, f: &MemberIndexTuple) -> u128 {
        self.sizes()
            .iter()
            .zip(&f.0)
            .fold(0u128, |acc, (&n, &i)| acc * n as u128 + i as u128)
    }

    pub fn is_compatible(&self, mdp: &TabularMdp) -> bool {
        self.num_states == mdp.num_states() && self.num_actions == mdp.num_actions() && self.horizon() == mdp.horizon()
    }

    pub fn ensure_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.is_compatible(mdp) {
            Ok(())
        } else {
            Err(Error::invalid(
                "class",
                format!(
                    "class is {} states x {} actions x {} steps, MDP is {} x {} x {}",
                    self.num_states,
                    self.num_actions,
                    self.horizon(),
                    mdp.num_states(),
                    mdp.num_actions(),
                    mdp.horizon()
                ),
            ))
        }
    }
}

/// `T*_h f_j^{h+1}` for every step and next-step member, computed once.
#[derive(Clone, Debug)]
pub struct BellmanTargets {
    /// `[h][j]`; at the last step only `j = 0` (the zero function).
    targets: Vec<Vec<QTable>>,
}

impl BellmanTargets {
    pub fn new(mdp: &TabularMdp, class: &QFunctionClass) -> Self {
        let targets = (0..class.horizon())
            .map(|h| match class.steps.get(h + 1) {
                Some(next) => next.members.iter().map(|f| bellman_apply(mdp, h, Some(f))).collect(),
                None => vec![bellman_apply(mdp, h, None)],
            })
            .collect();
        BellmanTargets { targets }
    }

    pub fn get(&self, h: usize, j: usize) -> &QTable {
        &self.targets[h][j]
    }

    pub fn step(&self, h: usize) -> &[QTable] {
        &self.targets[h]
    }
}

/// `pi_f(x, h) = argmax_a f^h(x, a)`, lowest index on ties.
pub fn greedy_policy(class: &QFunctionClass, f: &MemberIndexTuple) -> DeterministicPolicy {
    let tables: Vec<&QTable> = f.0.iter().enumerate().map(|(h, &i)| class.member(h, i)).collect();
    DeterministicPolicy::greedy(&tables)
}

/// `E_h(f; x, a) = f^h(x,a) - [T*_h f^{h+1}](x,a)`.
pub fn bellman_residual(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    f: &MemberIndexTuple,
    h: usize,
    x: usize,
    a: usize,
) -> f64 {
    let target = bellman_apply(mdp, h, class.next_member(h, next_index(f, h)));
    class.member(h, f.get(h)).get(x, a) - target.get(x, a)
}

fn next_index(f: &MemberIndexTuple, h: usize) -> usize {
    f.0.get(h + 1).copied().unwrap_or(0)
}

/// Whole residual table `E(f_i^h, f_j^{h+1}; ., .)`.
pub fn residual_table(class: &QFunctionClass, targets: &BellmanTargets, h: usize, i: usize, j: usize) -> QTable {
    let f = class.member(h, i);
    let t = targets.get(h, j);
    let vals = f.values().iter().zip(t.values()).map(|(a, b)| a - b).collect();
    QTable::from_values(f.num_states(), f.num_actions(), vals).expect("matching dimensions")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub step: usize,
    pub member: usize,
    pub state: usize,
    pub action: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessViolation {
    pub step: usize,
    pub next_member: usize,
    /// Smallest sup-distance from `T*_h f_j^{h+1}` to a member of `F_h`.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub realizable: bool,
    pub bounded: bool,
    pub complete: bool,
    /// Per step, the index of a member within `tol` of `Q*_h`, if any.
    pub realizable_witness: Vec<Option<usize>>,
    pub bound_b: f64,
    pub bound_violations: Vec<BoundViolation>,
    pub completeness_violations: Vec<CompletenessViolation>,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.realizable && self.bounded && self.complete
    }

    /// Member tuple matching `Q*` when realizable.
    pub fn q_star_tuple(&self) -> Option<MemberIndexTuple> {
        self.realizable_witness
            .iter()
            .copied()
            .collect::<Option<Vec<_>>>()
            .map(MemberIndexTuple)
    }
}

/// Realizability, boundedness (against the declared `b`) and completeness,
/// all decided by exact enumeration over the finite class.
pub fn check_assumptions(mdp: &TabularMdp, class: &QFunctionClass, tol: f64) -> AssumptionReport {
    let opt = optimal_values(mdp);
    let realizable_witness: Vec<Option<usize>> = (0..class.horizon())
        .map(|h| {
            class.steps[h]
                .members
                .iter()
                .position(|m| m.sup_distance(&opt.q[h]) <= tol)
        })
        .collect();

    let upper = class.bound_b() - 1.0;
    let mut bound_violations = Vec::new();
    for (h, step) in class.steps.iter().enumerate() {
        for (i, m) in step.members.iter().enumerate() {
            for x in 0..class.num_states() {
                for a in 0..class.num_actions() {
                    let v = m.get(x, a);
                    if v < -tol || v > upper + tol {
                        bound_violations.push(BoundViolation {
                            step: h,
                            member: i,
                            state: x,
                            action: a,
                            value: v,
                        });
                    }
                }
            }
        }
    }

    let targets = BellmanTargets::new(mdp, class);
    let mut completeness_violations = Vec::new();
    for h in 0..class.horizon() {
        for (j, t) in targets.step(h).iter().enumerate() {
            let distance = class.steps[h]
                .members
                .iter()
                .map(|m| m.sup_distance(t))
                .fold(f64::INFINITY, f64::min);
            if distance > tol {
                completeness_violations.push(CompletenessViolation {
                    step: h,
                    next_member: j,
                    distance,
                });
            }
        }
    }

    AssumptionReport {
        realizable: realizable_witness.iter().all(Option::is_some),
        bounded: bound_violations.is_empty(),
        complete: completeness_violations.is_empty(),
        realizable_witness,
        bound_b: class.bound_b(),
        bound_violations,
        completeness_violations,
    }
}

/// Smallest `b >= 1` with every member value in `[0, b - 1]`.
pub fn boundedness_b(class: &QFunctionClass) -> Result<f64> {
    let mut max_value: f64 = 0.0;
    for (h, step) in class.steps.iter().enumerate() {
        for (i, m) in step.members.iter().enumerate() {
            for x in 0..class.num_states() {
                for a in 0..class.num_actions() {
                    let v = m.get(x, a);
                    if v < 0.0 {
                        return Err(Error::NegativeValue {
                            step: h,
                            member: i,
                            state: x,
                            action: a,
                            value: v,
                        });
                    }
                    max_value = max_value.max(v);
                }
            }
        }
    }
    Ok(1.0 + max_value)
}

/// `p_0^h(F_h(eps, f_j^{h+1}))` for every step `h` and next-step member `j`.
pub fn cover_masses(class: &QFunctionClass, epsilon: f64, mdp: &TabularMdp) -> Vec<Vec<f64>> {
    let targets = BellmanTargets::new(mdp, class);
    cover_masses_with(class, epsilon, &targets)
}

pub fn cover_masses_with(class: &QFunctionClass, epsilon: f64, targets: &BellmanTargets) -> Vec<Vec<f64>> {
    (0..class.horizon())
        .map(|h| {
            let step = &class.steps[h];
            targets
                .step(h)
                .iter()
                .map(|t| {
                    step.members
                        .iter()
                        .zip(&step.prior)
                        .filter(|(m, _)| m.sup_distance(t) <= epsilon)
                        .map(|(_, p)| p)
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn first_empty(masses: &[Vec<f64>], support: impl Fn(usize, usize) -> bool) -> Option<Error> {
    for (h, row) in masses.iter().enumerate() {
        for (j, &m) in row.iter().enumerate() {
            if m <= 0.0 && support(h, j) {
                return Some(Error::EmptyCoverSet { step: h, next_member: j });
            }
        }
    }
    None
}

/// `kappa^h(1, eps) = sup_{f^{h+1}} ln 1 / p_0^h(F_h(eps, f^{h+1}))` per step.
pub fn kappa_per_step(class: &QFunctionClass, epsilon: f64, mdp: &TabularMdp) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon", format!("must be >= 0, got {epsilon}")));
    }
    let masses = cover_masses(class, epsilon, mdp);
    if let Some(e) = first_empty(&masses, |_, _| true) {
        return Err(e);
    }
    Ok(masses
        .iter()
        .map(|row| row.iter().map(|m| -m.ln()).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// `kappa(eps) = sup_f sum_h ln 1 / p_0^h(F_h(eps, f^{h+1}))`.
///
/// The summand at step `h` depends on `f` only through `f^{h+1}`, and distinct
/// steps involve distinct coordinates, so the supremum splits into per-step maxima.
pub fn kappa(class: &QFunctionClass, epsilon: f64, mdp: &TabularMdp) -> Result<f64> {
    Ok(kappa_per_step(class, epsilon, mdp)?.iter().sum())
}

/// `kappa^h(alpha, eps) = (1 - alpha) ln E_{f^{h+1} ~ p_0^{h+1}} p_0^h(F_h(eps, f^{h+1}))^{-alpha / (1 - alpha)}`.
pub fn kappa_alpha(class: &QFunctionClass, alpha: f64, epsilon: f64, mdp: &TabularMdp) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon", format!("must be >= 0, got {epsilon}")));
    }
    let masses = cover_masses(class, epsilon, mdp);
    let next_prior = |h: usize, j: usize| -> f64 {
        match class.steps.get(h + 1) {
            Some(s) => s.prior[j],
            None => 1.0,
        }
    };
    if let Some(e) = first_empty(&masses, |h, j| next_prior(h, j) > 0.0) {
        return Err(e);
    }
    let expo = alpha / (1.0 - alpha);
    Ok(masses
        .iter()
        .enumerate()
        .map(|(h, row)| {
            let terms: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|(j, _)| next_prior(h, *j) > 0.0)
                .map(|(j, m)| next_prior(h, j).ln() - expo * m.ln())
                .collect();
            (1.0 - alpha) * log_sum_exp(&terms)
        })
        .collect())
}

/// The `alpha -> 1` limit of [`kappa_alpha`]: the per-step supremum over the
/// support of `p_0^{h+1}`.
pub fn kappa_alpha_limit(class: &QFunctionClass, epsilon: f64, mdp: &TabularMdp) -> Result<Vec<f64>> {
    let masses = cover_masses(class, epsilon, mdp);
    let next_prior = |h: usize, j: usize| class.steps.get(h + 1).map(|s| s.prior[j]).unwrap_or(1.0);
    if let Some(e) = first_empty(&masses, |h, j| next_prior(h, j) > 0.0) {
        return Err(e);
    }
    Ok(masses
        .iter()
        .enumerate()
        .map(|(h, row)| {
            row.iter()
                .enumerate()
                .filter(|(j, _)| next_prior(h, *j) > 0.0)
                .map(|(_, m)| -m.ln())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Checks `k |<phi, w - w'>| <= |sigma(<phi,w>) - sigma(<phi,w'>)| <= K |<phi, w - w'>|`
/// on `samples` random member pairs and state-actions. Always true for explicit tables.
pub fn check_link_lipschitz(class: &QFunctionClass, samples: usize, seed: u64) -> bool {
    let (features, weights, link) = match class.backing() {
        Backing::ExplicitTable => return true,
        Backing::LinearFeatures { features, weights } => (features, weights, Link::Identity),
        Backing::GeneralizedLinear { features, weights, link } => (features, weights, *link),
    };
    let (k, big_k) = link.lipschitz();
    let mut rng = rng_from_seed(seed);
    for _ in 0..samples {
        let h = rng.gen_range(0..weights.len());
        let i = rng.gen_range(0..weights[h].len());
        let j = rng.gen_range(0..weights[h].len());
        let x = rng.gen_range(0..features.num_states());
        let a = rng.gen_range(0..features.num_actions());
        let z1 = features.dot(x, a, &weights[h][i]);
        let z2 = features.dot(x, a, &weights[h][j]);
        let dz = (z1 - z2).abs();
        let ds = (link.apply(z1) - link.apply(z2)).abs();
        let slack = 1e-12 * (1.0 + dz);
        if ds < k * dz - slack || ds > big_k * dz + slack {
            return false;
        }
    }
    true
}

/// Closes per-step seed members under exact `T*`: the last step gets
/// `T*_H 0`, every earlier step gets `T*_h f` for each `f in F_{h+1}`. Seeds are
/// appended after the closure images; exact duplicates are dropped. Priors are uniform.
pub fn closure_class(mdp: &TabularMdp, seeds: Vec<Vec<QTable>>) -> Result<QFunctionClass> {
    let big_h = mdp.horizon();
    if seeds.len() != big_h {
        return Err(Error::invalid("seeds", format!("expected {big_h} steps, got {}", seeds.len())));
    }
    let mut steps: Vec<Vec<QTable>> = vec![Vec::new(); big_h];
    let mut seeds = seeds;
    for h in (0..big_h).rev() {
        let mut members: Vec<QTable> = match steps.get(h + 1) {
            Some(next) if h + 1 < big_h => next.iter().map(|f| bellman_apply(mdp, h, Some(f))).collect(),
            _ => vec![bellman_apply(mdp, h, None)],
        };
        members.append(&mut seeds[h]);
        steps[h] = dedup_tables(members);
    }
    QFunctionClass::from_tables(steps, None)
}

pub(crate) fn dedup_tables(tables: Vec<QTable>) -> Vec<QTable> {
    let mut out: Vec<QTable> = Vec::with_capacity(tables.len());
    for t in tables {
        if !out.iter().any(|u| u == &t) {
            out.push(t);
        }
    }
    out
}
