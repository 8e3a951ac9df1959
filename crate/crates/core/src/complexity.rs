//! Structural complexity: decoupling-coefficient checks, closed-form bounds,
//! the Bellman-Eluder dimension and the sum/sqrt helper inequality.

use std::collections::HashMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{greedy_policy, residual_table, BellmanTargets, MemberIndexTuple, QFunctionClass};
use crate::error::{Error, Result};
use crate::mdp::{occupancy_measures, QTable, TabularMdp};
use crate::rng::rng_from_seed;

const MEASURE_TOL: f64 = 1e-12;
/// Largest number of distinct measures per step the exhaustive search accepts.
pub const EXACT_TINY_MAX_MEASURES: usize = 8;

/// Exact on-policy Bellman residuals of a sequence `f_1, ..., f_T`.
///
/// Cross terms `E_{π_{f_s}}[E_h(f_t)^2]` depend on `(f_s, f_t)` only, so they
/// are kept once per ordered pair of distinct tuples appearing in the sequence
/// rather than once per `(s, t)`.
#[derive(Clone, Debug)]
pub struct ResidualSequenceRecord {
    horizon: usize,
    /// Index into `distinct` for each episode.
    episode_tuple: Vec<usize>,
    distinct: Vec<MemberIndexTuple>,
    /// `on_policy[u][h] = E_{π_u}[E_h(f_u; x^h, a^h)]`.
    on_policy: Vec<Vec<f64>>,
    /// `cross[u][v][h] = E_{π_u}[E_h(f_v; x^h, a^h)^2]`.
    cross: Vec<Vec<Vec<f64>>>,
}

impl ResidualSequenceRecord {
    pub fn num_episodes(&self) -> usize {
        self.episode_tuple.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn tuple(&self, t: usize) -> &MemberIndexTuple {
        &self.distinct[self.episode_tuple[t]]
    }

    pub fn num_distinct(&self) -> usize {
        self.distinct.len()
    }

    /// `E_{π_{f_t}}[E_h(f_t; x^h, a^h)]`.
    pub fn residual(&self, t: usize, h: usize) -> f64 {
        self.on_policy[self.episode_tuple[t]][h]
    }

    /// `E_{π_{f_s}}[E_h(f_t; x^h, a^h)^2]`, defined for `s < t`.
    pub fn cross(&self, s: usize, t: usize, h: usize) -> f64 {
        assert!(s < t, "cross terms are stored for s < t only");
        self.cross[self.episode_tuple[s]][self.episode_tuple[t]][h]
    }

    /// `Σ_h Σ_t E_{π_{f_t}}[E_h(f_t)]` over the first `n` episodes.
    pub fn lhs_prefix(&self, n: usize) -> f64 {
        self.episode_tuple[..n]
            .iter()
            .map(|&u| self.on_policy[u].iter().sum::<f64>())
            .sum()
    }

    /// `Σ_h Σ_t Σ_{s<t} E_{π_{f_s}}[E_h(f_t)^2]` over the first `n` episodes.
    pub fn cross_prefix(&self, n: usize) -> f64 {
        let mut seen = vec![0usize; self.distinct.len()];
        let mut total = 0.0;
        for &v in &self.episode_tuple[..n] {
            for (u, &c) in seen.iter().enumerate() {
                if c > 0 {
                    total += c as f64 * self.cross[u][v].iter().sum::<f64>();
                }
            }
            seen[v] += 1;
        }
        total
    }

    pub fn lhs(&self) -> f64 {
        self.lhs_prefix(self.num_episodes())
    }

    pub fn cross_total(&self) -> f64 {
        self.cross_prefix(self.num_episodes())
    }
}

struct TupleTables {
    occupancy: Vec<QTable>,
    residuals: Vec<QTable>,
}

fn tuple_tables(class: &QFunctionClass, targets: &BellmanTargets, mdp: &TabularMdp, f: &MemberIndexTuple) -> TupleTables {
    let occupancy = occupancy_measures(mdp, &greedy_policy(class, f));
    let residuals = (0..class.horizon())
        .map(|h| residual_table(class, targets, h, f.get(h), f.0.get(h + 1).copied().unwrap_or(0)))
        .collect();
    TupleTables { occupancy, residuals }
}

pub fn record_residuals(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    f_sequence: &[MemberIndexTuple],
) -> Result<ResidualSequenceRecord> {
    class.ensure_compatible(mdp)?;
    let targets = BellmanTargets::new(mdp, class);
    let mut ids: HashMap<&MemberIndexTuple, usize> = HashMap::new();
    let mut distinct = Vec::new();
    let mut episode_tuple = Vec::with_capacity(f_sequence.len());
    for f in f_sequence {
        class.check_tuple(f)?;
        let next = ids.len();
        let id = *ids.entry(f).or_insert_with(|| {
            distinct.push(f.clone());
            next
        });
        episode_tuple.push(id);
    }
    let tables: Vec<TupleTables> = distinct
        .par_iter()
        .map(|f| tuple_tables(class, &targets, mdp, f))
        .collect();
    let squared: Vec<Vec<QTable>> = tables
        .iter()
        .map(|t| t.residuals.iter().map(|e| e.map(|v| v * v)).collect())
        .collect();
    let big_h = class.horizon();
    let on_policy = tables
        .iter()
        .map(|t| (0..big_h).map(|h| t.occupancy[h].dot(&t.residuals[h])).collect())
        .collect();
    let cross = tables
        .par_iter()
        .map(|tu| {
            squared
                .iter()
                .map(|sv| (0..big_h).map(|h| tu.occupancy[h].dot(&sv[h])).collect())
                .collect()
        })
        .collect();
    Ok(ResidualSequenceRecord {
        horizon: big_h,
        episode_tuple,
        distinct,
        on_policy,
        cross,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcCheck {
    pub mu: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// Evaluates `Σ_h Σ_t E[E_h] <= μ Σ_h Σ_t Σ_{s<t} E[E_h^2] + K / (4μ)`.
pub fn dc_inequality_check(record: &ResidualSequenceRecord, mu: f64, k: f64) -> Result<DcCheck> {
    if !(mu > 0.0) {
        return Err(Error::invalid("mu", format!("must be > 0, got {mu}")));
    }
    let lhs = record.lhs();
    let rhs = mu * record.cross_total() + k / (4.0 * mu);
    Ok(DcCheck {
        mu,
        k,
        lhs,
        rhs,
        satisfied: lhs <= rhs,
    })
}

/// Smallest `K` for which the sequence satisfies the inequality at `μ` (never negative).
pub fn dc_required_k(record: &ResidualSequenceRecord, mu: f64) -> f64 {
    (4.0 * mu * (record.lhs() - mu * record.cross_total())).max(0.0)
}

/// `2 d H (1 + ln(2 H T))`.
pub fn dc_bound_linear(d: usize, horizon: usize, episodes: usize) -> f64 {
    let (d, h, t) = (d as f64, horizon as f64, episodes as f64);
    2.0 * d * h * (1.0 + (2.0 * h * t).ln())
}

/// `2 d H (K/k)^2 (1 + ln(2 H T))`.
pub fn dc_bound_glm(d: usize, horizon: usize, episodes: usize, k: f64, big_k: f64) -> Result<f64> {
    if !(k > 0.0 && k <= big_k) {
        return Err(Error::invalid("link", format!("need 0 < k <= K, got k = {k}, K = {big_k}")));
    }
    let ratio = big_k / k;
    Ok(dc_bound_linear(d, horizon, episodes) * ratio * ratio)
}

/// `(1 + 4μ + ln T) H dim`.
pub fn dc_bound_from_be(be_dim: usize, horizon: usize, episodes: usize, mu: f64) -> f64 {
    (1.0 + 4.0 * mu + (episodes as f64).ln()) * horizon as f64 * be_dim as f64
}

/// Best-of-`n` search for the largest `K` a uniformly random tuple sequence of
/// length `episodes` needs at `μ`. A lower bound on the decoupling coefficient.
pub fn adversarial_dc_search(
    mdp: &TabularMdp,
    class: &QFunctionClass,
    episodes: usize,
    mu: f64,
    n_sequences: usize,
    seed: u64,
) -> Result<f64> {
    let n = class.num_tuples();
    let k = (0..n_sequences)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_from_seed(crate::rng::episode_seed(seed, s as u64, crate::rng::STREAM_POLICY));
            let seq: Vec<MemberIndexTuple> = (0..episodes)
                .map(|_| class.tuple_from_index(rng.gen_range(0..n)))
                .collect();
            record_residuals(mdp, class, &seq).map(|r| dc_required_k(&r, mu))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(k)
}

/// `Σ x_i / sqrt(Σ i x_i^2)` with 1-based `i`; never exceeds `sqrt(1 + ln n)`.
pub fn helper_sum_sqrt(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("xs", "must be nonempty"));
    }
    if let Some((index, &value)) = xs.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveEntry { index, value });
    }
    let sum: f64 = xs.iter().sum();
    let weighted: f64 = xs.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum();
    Ok(sum / weighted.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BeMode {
    /// Exhaustive when every step has at most 8 distinct measures, greedy otherwise.
    #[default]
    Auto,
    ExactTiny,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeDimReport {
    pub value: usize,
    /// The search actually used (never `Auto`).
    pub mode: BeMode,
    /// True when `value` is only a lower bound.
    pub lower_bound: bool,
    pub per_step: Vec<usize>,
}

/// Distinct step-`h` occupancy measures over all greedy policies of class members.
pub fn greedy_occupancy_measures(mdp: &TabularMdp, class: &QFunctionClass, cap: usize) -> Result<Vec<Vec<QTable>>> {
    let n = mdp.num_states();
    let mut start = vec![0.0; n];
    start[mdp.initial_state()] = 1.0;
    let mut dists = vec![start];
    let mut out = Vec::with_capacity(class.horizon());
    for h in 0..class.horizon() {
        let mut measures: Vec<QTable> = Vec::new();
        let mut next: Vec<Vec<f64>> = Vec::new();
        for d in &dists {
            for f in &class.step(h).members {
                let mut occ = QTable::zeros(n, mdp.num_actions());
                let mut nd = vec![0.0; n];
                for x in 0..n {
                    if d[x] == 0.0 {
                        continue;
                    }
                    let a = f.argmax(x);
                    occ.set(x, a, d[x]);
                    for (y, p) in mdp.transition(h, x, a).iter().enumerate() {
                        nd[y] += d[x] * p;
                    }
                }
                if !measures.iter().any(|m| m.sup_distance(&occ) <= MEASURE_TOL) {
                    measures.push(occ);
                }
                if !next
                    .iter()
                    .any(|e: &Vec<f64>| e.iter().zip(&nd).all(|(a, b)| (a - b).abs() <= MEASURE_TOL))
                {
                    next.push(nd);
                }
                if measures.len() > cap || next.len() > cap {
                    return Err(Error::CapExceeded {
                        size: measures.len().max(next.len()) as u128,
                        cap: cap as u128,
                    });
                }
            }
        }
        out.push(measures);
        dists = next;
    }
    Ok(out)
}

/// Residual functions `f_i^h - T*_h f_j^{h+1}` for all member pairs, deduplicated.
fn residual_functions(class: &QFunctionClass, targets: &BellmanTargets, h: usize) -> Vec<QTable> {
    let mut out: Vec<QTable> = Vec::new();
    for i in 0..class.sizes()[h] {
        for j in 0..class.size_or_terminal(h + 1) {
            let g = residual_table(class, targets, h, i, j);
            if !out.iter().any(|e| e.sup_distance(&g) == 0.0) {
                out.push(g);
            }
        }
    }
    out
}

/// Feasible set for `ε'` as a single interval `(lo, hi)`: each position's
/// constraint is a union over functions, so the feasible set is a union of intervals.
#[derive(Clone, Debug)]
struct Feasible(Vec<(f64, f64)>);

impl Feasible {
    fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn length(&self) -> f64 {
        self.0.iter().map(|(a, b)| b - a).sum()
    }

    /// Intersect with `∪_g [lo_g, hi_g)`. Only `lo < hi` matters for emptiness
    /// since every upper end is open.
    fn intersect(&self, union: &[(f64, f64)]) -> Feasible {
        let mut out = Vec::new();
        for &(a, b) in &self.0 {
            for &(c, d) in union {
                let lo = a.max(c);
                let hi = b.min(d);
                if lo < hi {
                    out.push((lo, hi));
                }
            }
        }
        Feasible(merge(out))
    }
}

fn merge(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Search state: running `Σ_k (E_{ν_k} g)^2` for every function.
struct Search<'a> {
    /// `values[m][g] = E_{ν_m}[g]`.
    values: &'a [Vec<f64>],
}

impl Search<'_> {
    fn candidate_union(&self, m: usize, sums: &[f64]) -> Vec<(f64, f64)> {
        self.values[m]
            .iter()
            .zip(sums)
            .filter_map(|(v, s)| {
                let lo = s.sqrt();
                let hi = v.abs();
                (lo < hi).then_some((lo, hi))
            })
            .collect()
    }

    fn push(&self, m: usize, sums: &[f64]) -> Vec<f64> {
        sums.iter().zip(&self.values[m]).map(|(s, v)| s + v * v).collect()
    }

    fn exact(&self, used: &mut Vec<bool>, sums: &[f64], feasible: &Feasible) -> usize {
        let mut best = 0;
        for m in 0..self.values.len() {
            if used[m] {
                continue;
            }
            let next = feasible.intersect(&self.candidate_union(m, sums));
            if next.is_empty() {
                continue;
            }
            used[m] = true;
            let depth = 1 + self.exact(used, &self.push(m, sums), &next);
            used[m] = false;
            best = best.max(depth);
            if best == self.values.len() {
                break;
            }
        }
        best
    }

    fn greedy(&self, epsilon: f64) -> usize {
        let n_g = self.values.first().map_or(0, |v| v.len());
        let mut sums = vec![0.0; n_g];
        let mut feasible = Feasible(vec![(epsilon, f64::INFINITY)]);
        let mut used = vec![false; self.values.len()];
        let mut len = 0;
        loop {
            let mut pick: Option<(usize, Feasible)> = None;
            for m in 0..self.values.len() {
                if used[m] {
                    continue;
                }
                let next = feasible.intersect(&self.candidate_union(m, &sums));
                if next.is_empty() {
                    continue;
                }
                if pick.as_ref().is_none_or(|(_, p)| next.length() > p.length()) {
                    pick = Some((m, next));
                }
            }
            match pick {
                None => return len,
                Some((m, next)) => {
                    used[m] = true;
                    sums = self.push(m, &sums);
                    feasible = next;
                    len += 1;
                }
            }
        }
    }
}

/// `ε`-Bellman-Eluder dimension with measures = greedy-policy occupancy
/// measures and functions = Bellman residuals of all member pairs.
///
/// A sequence counts if one `ε' > ε` makes every element `ε'`-independent of
/// its predecessors: some residual `g` has `sqrt(Σ_{k<i} (E_{ν_k} g)^2) <= ε' < |E_{ν_i} g|`.
pub fn bellman_eluder_dim(mdp: &TabularMdp, class: &QFunctionClass, epsilon: f64, mode: BeMode) -> Result<BeDimReport> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon", format!("must be >= 0, got {epsilon}")));
    }
    class.ensure_compatible(mdp)?;
    let targets = BellmanTargets::new(mdp, class);
    let measures = greedy_occupancy_measures(mdp, class, 100_000)?;
    let largest = measures.iter().map(Vec::len).max().unwrap_or(0);
    let used_mode = match mode {
        BeMode::Auto if largest <= EXACT_TINY_MAX_MEASURES => BeMode::ExactTiny,
        BeMode::Auto => BeMode::Greedy,
        BeMode::ExactTiny if largest > EXACT_TINY_MAX_MEASURES => {
            return Err(Error::CapExceeded {
                size: largest as u128,
                cap: EXACT_TINY_MAX_MEASURES as u128,
            })
        }
        m => m,
    };
    let per_step: Vec<usize> = (0..class.horizon())
        .map(|h| {
            let funcs = residual_functions(class, &targets, h);
            let values: Vec<Vec<f64>> = measures[h]
                .iter()
                .map(|nu| funcs.iter().map(|g| nu.dot(g)).collect())
                .collect();
            let search = Search { values: &values };
            match used_mode {
                BeMode::Greedy => search.greedy(epsilon),
                _ => {
                    let sums = vec![0.0; funcs.len()];
                    let mut used = vec![false; values.len()];
                    search.exact(&mut used, &sums, &Feasible(vec![(epsilon, f64::INFINITY)]))
                }
            }
        })
        .collect();
    Ok(BeDimReport {
        value: per_step.iter().copied().max().unwrap_or(0),
        mode: used_mode,
        lower_bound: used_mode == BeMode::Greedy,
        per_step,
    })
}
