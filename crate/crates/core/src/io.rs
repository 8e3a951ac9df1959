//! JSON documents for instances, configs and reports; CSV regret series; run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class::{Backing, FeatureMap, Link, QFunctionClass};
use crate::complexity::{
    bellman_eluder_dim, dc_bound_from_be, dc_bound_linear, dc_inequality_check, BeDimReport, DcCheck,
    ResidualSequenceRecord,
};
use crate::error::{Error, Result};
use crate::generators::Instance;
use crate::harness::{dc_for_class, ComplexityConfig, ExperimentConfig, RegretLedger, ResolvedAgent, Source};
use crate::mdp::{QTable, RewardNoise, TabularMdp};

/// Dense MDP document; arrays indexed `[h][x][a][x']` and `[h][x][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_state: usize,
    pub reward_noise: RewardNoise,
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    pub mean_rewards: Vec<Vec<Vec<f64>>>,
}

fn check_len(field: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(field, format!("expected length {want}, got {got}")));
    }
    Ok(())
}

impl MdpDocument {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (n, na, big_h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
        MdpDocument {
            num_states: n,
            num_actions: na,
            horizon: big_h,
            initial_state: mdp.initial_state(),
            reward_noise: mdp.reward_noise(),
            transitions: (0..big_h)
                .map(|h| {
                    (0..n)
                        .map(|x| (0..na).map(|a| mdp.transition(h, x, a).to_vec()).collect())
                        .collect()
                })
                .collect(),
            mean_rewards: (0..big_h)
                .map(|h| (0..n).map(|x| (0..na).map(|a| mdp.mean_reward(h, x, a)).collect()).collect())
                .collect(),
        }
    }

    pub fn to_mdp(&self) -> Result<TabularMdp> {
        let (n, na, big_h) = (self.num_states, self.num_actions, self.horizon);
        check_len("transitions", self.transitions.len(), big_h)?;
        check_len("mean_rewards", self.mean_rewards.len(), big_h)?;
        let mut transitions = Vec::with_capacity(big_h * n * na * n);
        let mut rewards = Vec::with_capacity(big_h * n * na);
        for h in 0..big_h {
            check_len(&format!("transitions[{h}]"), self.transitions[h].len(), n)?;
            check_len(&format!("mean_rewards[{h}]"), self.mean_rewards[h].len(), n)?;
            for x in 0..n {
                check_len(&format!("transitions[{h}][{x}]"), self.transitions[h][x].len(), na)?;
                check_len(&format!("mean_rewards[{h}][{x}]"), self.mean_rewards[h][x].len(), na)?;
                for a in 0..na {
                    let row = &self.transitions[h][x][a];
                    check_len(&format!("transitions[{h}][{x}][{a}]"), row.len(), n)?;
                    transitions.extend_from_slice(row);
                    rewards.push(self.mean_rewards[h][x][a]);
                }
            }
        }
        TabularMdp::new(n, na, big_h, self.initial_state, self.reward_noise, transitions, rewards)
    }
}

/// Class document: explicit tables or features + weights (+ optional link).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassDocument {
    Tables {
        /// `[h][i][x][a]`.
        members: Vec<Vec<Vec<Vec<f64>>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound_b: Option<f64>,
    },
    Features {
        /// `[x][a][d]`.
        features: Vec<Vec<Vec<f64>>>,
        /// `[h][i][d]`.
        weights: Vec<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        link: Option<Link>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound_b: Option<f64>,
    },
}

impl ClassDocument {
    pub fn from_class(class: &QFunctionClass) -> Self {
        let prior = Some((0..class.horizon()).map(|h| class.prior(h).to_vec()).collect());
        let (n, na) = (class.num_states(), class.num_actions());
        let features_doc = |fm: &FeatureMap| -> Vec<Vec<Vec<f64>>> {
            (0..n).map(|x| (0..na).map(|a| fm.phi(x, a).to_vec()).collect()).collect()
        };
        let bound_b = Some(class.bound_b());
        match class.backing() {
            Backing::ExplicitTable => ClassDocument::Tables {
                members: class
                    .steps()
                    .iter()
                    .map(|s| {
                        s.members
                            .iter()
                            .map(|m| (0..n).map(|x| m.row(x).to_vec()).collect())
                            .collect()
                    })
                    .collect(),
                prior,
                bound_b,
            },
            Backing::LinearFeatures { features, weights } => ClassDocument::Features {
                features: features_doc(features),
                weights: weights.clone(),
                link: None,
                prior,
                bound_b,
            },
            Backing::GeneralizedLinear {
                features,
                weights,
                link,
            } => ClassDocument::Features {
                features: features_doc(features),
                weights: weights.clone(),
                link: Some(*link),
                prior,
                bound_b,
            },
        }
    }

    pub fn to_class(&self) -> Result<QFunctionClass> {
        let (class, bound_b) = match self {
            ClassDocument::Tables { members, prior, bound_b } => {
                let mut tables = Vec::with_capacity(members.len());
                for (h, step) in members.iter().enumerate() {
                    let mut out = Vec::with_capacity(step.len());
                    for (i, m) in step.iter().enumerate() {
                        let na = m.first().map_or(0, Vec::len);
                        let mut vals = Vec::with_capacity(m.len() * na);
                        for (x, row) in m.iter().enumerate() {
                            check_len(&format!("members[{h}][{i}][{x}]"), row.len(), na)?;
                            vals.extend_from_slice(row);
                        }
                        out.push(
                            QTable::from_values(m.len(), na, vals)
                                .map_err(|e| Error::invalid(format!("members[{h}][{i}]"), e.to_string()))?,
                        );
                    }
                    tables.push(out);
                }
                (QFunctionClass::from_tables(tables, prior.clone())?, *bound_b)
            }
            ClassDocument::Features {
                features,
                weights,
                link,
                prior,
                bound_b,
            } => {
                let n = features.len();
                let na = features.first().map_or(0, Vec::len);
                let d = features.first().and_then(|r| r.first()).map_or(0, Vec::len);
                let mut flat = Vec::with_capacity(n * na * d);
                for (x, row) in features.iter().enumerate() {
                    check_len(&format!("features[{x}]"), row.len(), na)?;
                    for (a, phi) in row.iter().enumerate() {
                        check_len(&format!("features[{x}][{a}]"), phi.len(), d)?;
                        flat.extend_from_slice(phi);
                    }
                }
                let fm = FeatureMap::new(n, na, d, flat)?;
                (
                    QFunctionClass::from_features(fm, weights.clone(), *link, prior.clone())?,
                    *bound_b,
                )
            }
        };
        match bound_b {
            Some(b) => class.with_bound(b),
            None => Ok(class),
        }
    }
}

/// A generated or saved benchmark: MDP plus class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDocument {
    pub mdp: MdpDocument,
    pub class: ClassDocument,
}

impl InstanceDocument {
    pub fn from_instance(inst: &Instance) -> Self {
        InstanceDocument {
            mdp: MdpDocument::from_mdp(&inst.mdp),
            class: ClassDocument::from_class(&inst.class),
        }
    }

    pub fn to_instance(&self) -> Result<Instance> {
        Ok(Instance {
            mdp: self.mdp.to_mdp()?,
            class: self.class.to_class()?,
        })
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable document") + "\n"
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Json {
        context: context.to_string(),
        source,
    })
}

fn from_value<T: for<'de> Deserialize<'de>>(value: &serde_json::Value, context: &str) -> Result<T> {
    T::deserialize(value).map_err(|source| Error::Json {
        context: context.to_string(),
        source,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse(&read_text(path)?, &path.display().to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_instance(path: &Path) -> Result<Instance> {
    let doc: InstanceDocument = parse(&read_text(path)?, &path.display().to_string())?;
    doc.to_instance()
}

/// Loads a JSON value from a source; files may hold either the bare document
/// or an instance document, in which case `key` selects the part.
fn source_value(source: &Source, key: &str, base: &Path) -> Result<Option<serde_json::Value>> {
    match source {
        Source::Inline(v) => Ok(Some(v.clone())),
        Source::Path { path } => {
            let p = base.join(path);
            let v: serde_json::Value = parse(&read_text(&p)?, &p.display().to_string())?;
            Ok(Some(match v.get(key) {
                Some(part) if v.get("mdp").is_some() && v.get("class").is_some() => part.clone(),
                _ => v,
            }))
        }
        Source::Gen { .. } => Ok(None),
    }
}

/// Builds the MDP and class named by a config. Relative paths resolve against `base`.
pub fn resolve_instance(cfg: &ExperimentConfig, base: &Path) -> Result<Instance> {
    let generated = match &cfg.mdp {
        Source::Gen { gen } => Some(gen.generate()?),
        _ => None,
    };
    let mdp = match (&generated, source_value(&cfg.mdp, "mdp", base)?) {
        (Some(inst), _) => inst.mdp.clone(),
        (None, Some(v)) => from_value::<MdpDocument>(&v, "mdp")?.to_mdp()?,
        (None, None) => unreachable!("non-generator sources always yield a value"),
    };
    let class = match &cfg.class {
        Some(Source::Gen { gen }) => gen.generate()?.class,
        Some(src) => {
            let v = source_value(src, "class", base)?.expect("non-generator source");
            from_value::<ClassDocument>(&v, "class")?.to_class()?
        }
        None => match (&generated, &cfg.mdp) {
            (Some(inst), _) => inst.class.clone(),
            (None, Source::Path { path }) => {
                let p = base.join(path);
                let v: serde_json::Value = parse(&read_text(&p)?, &p.display().to_string())?;
                match v.get("class") {
                    Some(c) => from_value::<ClassDocument>(c, "class")?.to_class()?,
                    None => return Err(Error::invalid("class", "missing, and the mdp file has no \"class\" key")),
                }
            }
            _ => return Err(Error::invalid("class", "missing")),
        },
    };
    class.ensure_compatible(&mdp)?;
    Ok(Instance { mdp, class })
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" + content`, hex encoded.
pub fn content_hash(content: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", content.len()).as_bytes());
    hasher.update(content.as_bytes());
    hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of the resolved inputs: config echo plus the instance documents.
pub fn inputs_hash(cfg: &ExperimentConfig, inst: &Instance) -> String {
    let doc = serde_json::json!({
        "config": cfg,
        "instance": InstanceDocument::from_instance(inst),
    });
    content_hash(&serde_json::to_string(&doc).expect("serializable"))
}

pub const CSV_HEADER: &str = "episode,instantaneous_regret,cumulative_regret,sampled_tuple";

pub fn ledger_csv(ledger: &RegretLedger) -> String {
    let mut out = String::with_capacity(64 * (ledger.episodes.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for e in &ledger.episodes {
        let tuple = e.sampled_tuple.as_ref().map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", e.episode, e.instantaneous_regret, e.cumulative_regret, tuple);
    }
    out
}

pub fn csv_file_name(seed: u64) -> String {
    format!("regret_{seed}.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub linear: f64,
    pub glm: f64,
    pub from_be: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// `None` when some cover set at `kappa_eps` is empty.
    pub kappa: Option<f64>,
    pub kappa_eps: f64,
    pub dc_checks: Vec<DcCheck>,
    pub be_dim: BeDimReport,
    pub bounds: BoundsReport,
}

/// κ, the dc checks of every record against the class's closed-form K at each μ,
/// the BE dimension at the same ε, and the closed-form bounds. `from_be` uses the largest μ.
pub fn complexity_report(
    inst: &Instance,
    cfg: &ComplexityConfig,
    epsilon: f64,
    episodes: usize,
    records: &[&ResidualSequenceRecord],
) -> Result<ComplexityReport> {
    let (mdp, class) = (&inst.mdp, &inst.class);
    let kappa = crate::class::kappa(class, epsilon, mdp).ok();
    let dc = dc_for_class(mdp, class, episodes)?;
    let mut dc_checks = Vec::new();
    for rec in records {
        for &mu in &cfg.mu_list {
            dc_checks.push(dc_inequality_check(rec, mu, dc.value)?);
        }
    }
    let be_dim = bellman_eluder_dim(mdp, class, epsilon, cfg.be_mode)?;
    let d_tab = mdp.num_states() * mdp.num_actions();
    let d = class.backing().feature_dim().unwrap_or(d_tab);
    let mu_max = cfg.mu_list.iter().copied().fold(0.0, f64::max);
    Ok(ComplexityReport {
        kappa,
        kappa_eps: epsilon,
        dc_checks,
        bounds: BoundsReport {
            linear: dc_bound_linear(d, class.horizon(), episodes),
            glm: dc.value,
            from_be: dc_bound_from_be(be_dim.value, class.horizon(), episodes, mu_max),
        },
        be_dim,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub content_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub agent: ResolvedAgent,
    pub complexity: ComplexityReport,
    /// Absent when `λ = 0` or `κ` is undefined.
    pub theorem_bound: Option<f64>,
    pub cumulative_regret: RegretSummary,
    pub warnings: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_clock_seconds: f64,
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path.to_path_buf())
}
