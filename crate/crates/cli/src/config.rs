//! Experiment configuration: a TOML document naming the mode, the seeds, the
//! environment, the trainer settings, and a catalog of attack types that the
//! training prior and the deployment target refer to by name.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use metasg::aggregation::{
    AggregationRule, BackdoorDefense, DefenseAction, DefenseMode, PostDefense,
};
use metasg::attacks::AttackTypeSpec;
use metasg::bsmg::EnvConfig;
use metasg::meta::{MetaConfig, OnlineConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PretrainMetaRl,
    PretrainMetaSg,
    PretrainBse,
    Adapt,
    Evaluate,
    AggBench,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PretrainMetaRl => "pretrain-meta-rl",
            Mode::PretrainMetaSg => "pretrain-meta-sg",
            Mode::PretrainBse => "pretrain-bse",
            Mode::Adapt => "adapt",
            Mode::Evaluate => "evaluate",
            Mode::AggBench => "agg-bench",
        }
    }

    pub fn is_pretraining(self) -> bool {
        matches!(
            self,
            Mode::PretrainMetaRl | Mode::PretrainMetaSg | Mode::PretrainBse
        )
    }
}

/// One entry of the training prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorEntry {
    pub name: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// How the initial policy of every RL attacker type is produced: best
/// responses against each listed classical defense in turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerPretrain {
    pub against: Vec<AggregationRule>,
    /// Best-response steps per listed defense.
    pub steps: usize,
    pub kappa_a: f64,
    /// Initial log standard deviation of the attacker policy.
    pub log_std: f64,
    /// Episode length of the pretraining rollouts.
    pub horizon: usize,
}

impl Default for AttackerPretrain {
    fn default() -> Self {
        let mut bounded = DefenseAction::open(DefenseMode::Backdoor);
        bounded.backdoor = BackdoorDefense {
            noise_variance: 0.0,
            norm_bound: 2.0,
            post: Some(PostDefense::NeuronClip { range: 5.0 }),
        };
        AttackerPretrain {
            against: vec![
                AggregationRule::Krum { byzantine: 5 },
                AggregationRule::ClippingMedian { norm_bound: 2.0 },
                AggregationRule::Defense { action: bounded },
            ],
            steps: 5,
            kappa_a: 0.01,
            log_std: -1.0,
            horizon: 10,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_log_std() -> f64 {
    -1.0
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_bench_instances() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Environment settings. `types`, `type_distribution` and
    /// `fixed_defense` are filled in from the catalog, the prior and
    /// `defense_fixed`, and must be left at their defaults here.
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub attack_catalog: Vec<AttackTypeSpec>,
    /// Attack types trained against, by catalog name.
    #[serde(default)]
    pub prior: Vec<PriorEntry>,
    /// The attack met at deployment; the first prior entry when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// A classical aggregation rule used instead of a defender policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense_fixed: Option<AggregationRule>,
    /// Defender policy to deploy or adapt; a fresh policy when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub attacker_pretrain: AttackerPretrain,
    /// Initial log standard deviation of a fresh defender policy.
    #[serde(default = "default_log_std")]
    pub init_log_std: f64,
    /// Write the meta policy every this many outer iterations; 0 keeps only
    /// the final one.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Fill `wall_ms` in the metrics. Off by default because timings differ
    /// between runs and would break byte-identical metrics.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default = "default_bench_instances")]
    pub bench_instances: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Schema {
                path: if path == "." { String::new() } else { path },
                message: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Schema {
            path: String::new(),
            message: e.to_string(),
        })
    }

    fn catalog_index(&self, name: &str) -> Option<usize> {
        self.attack_catalog.iter().position(|t| t.name == name)
    }

    /// Name of the deployment attack.
    pub fn target_name(&self) -> Option<&str> {
        self.target
            .as_deref()
            .or(self.prior.first().map(|p| p.name.as_str()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let schema = |path: &str, message: String| CliError::Schema {
            path: path.to_string(),
            message,
        };
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(schema(
                "run_id",
                "must be non-empty and use only letters, digits, `-`, `_` or `.`".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(schema("seeds", "at least one seed is required".into()));
        }
        if let Some(i) = self.seeds.iter().position(|&s| s > i64::MAX as u64) {
            return Err(schema(
                &format!("seeds[{i}]"),
                "must not exceed the largest TOML integer".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for (i, t) in self.attack_catalog.iter().enumerate() {
            if !names.insert(t.name.as_str()) {
                return Err(schema(
                    &format!("attack_catalog[{i}].name"),
                    format!("duplicate name `{}`", t.name),
                ));
            }
        }
        for (i, p) in self.prior.iter().enumerate() {
            if self.catalog_index(&p.name).is_none() {
                return Err(schema(
                    &format!("prior[{i}].name"),
                    format!("`{}` is not in attack_catalog", p.name),
                ));
            }
            if !(p.weight.is_finite() && p.weight > 0.0) {
                return Err(schema(
                    &format!("prior[{i}].weight"),
                    "must be positive".into(),
                ));
            }
        }
        if let Some(t) = &self.target {
            if self.catalog_index(t).is_none() {
                return Err(schema("target", format!("`{t}` is not in attack_catalog")));
            }
        }
        let defaults = EnvConfig::default();
        if self.env.types != defaults.types
            || self.env.type_distribution != defaults.type_distribution
        {
            return Err(schema(
                "env.types",
                "list attacks in attack_catalog and select them with prior".into(),
            ));
        }
        if self.env.fixed_defense.is_some() {
            return Err(schema("env.fixed_defense", "use defense_fixed".into()));
        }
        if let Some(AggregationRule::Defense { action }) = &self.defense_fixed {
            action
                .validate()
                .map_err(|e| schema("defense_fixed.action", e.to_string()))?;
        }
        match self.mode {
            Mode::AggBench => {
                if self.bench_instances == 0 {
                    return Err(schema("bench_instances", "must be positive".into()));
                }
                return Ok(());
            }
            m if m.is_pretraining() => {
                if self.prior.is_empty() {
                    return Err(schema(
                        "prior",
                        format!("{} needs at least one prior entry", m.name()),
                    ));
                }
                if self.defense_fixed.is_some() {
                    return Err(schema(
                        "defense_fixed",
                        format!("{} trains a defender policy", m.name()),
                    ));
                }
                self.meta
                    .validate()
                    .map_err(|e| schema("meta", e.to_string()))?;
            }
            Mode::Adapt if self.defense_fixed.is_some() => {
                return Err(schema(
                    "defense_fixed",
                    "adapt updates a defender policy".into(),
                ));
            }
            _ => {}
        }
        if self.target_name().is_none() {
            return Err(schema(
                "target",
                format!("{} needs a target attack", self.mode.name()),
            ));
        }
        if self.defense_fixed.is_some() && self.policy_checkpoint.is_some() {
            return Err(schema(
                "policy_checkpoint",
                "cannot be combined with defense_fixed".into(),
            ));
        }
        let p = &self.attacker_pretrain;
        if !(p.kappa_a.is_finite() && p.kappa_a >= 0.0) || p.horizon == 0 {
            return Err(schema(
                "attacker_pretrain",
                "kappa_a must be non-negative and horizon positive".into(),
            ));
        }
        self.env_config()
            .validate()
            .map_err(|e| schema("env", e.to_string()))?;
        Ok(())
    }

    /// Names of the environment's types, in type-index order: the prior
    /// entries, then the target when it is not among them.
    pub fn type_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.prior.iter().map(|p| p.name.clone()).collect();
        if let Some(t) = self.target_name() {
            if !names.iter().any(|n| n == t) {
                names.push(t.to_string());
            }
        }
        names
    }

    /// The environment with its types resolved from the catalog. The target
    /// gets prior weight zero when it is not a training type.
    pub fn env_config(&self) -> EnvConfig {
        let names = self.type_names();
        let types: Vec<AttackTypeSpec> = names
            .iter()
            .filter_map(|n| {
                self.catalog_index(n)
                    .map(|i| self.attack_catalog[i].clone())
            })
            .collect();
        let total: f64 = self.prior.iter().map(|p| p.weight).sum();
        let type_distribution = if total > 0.0 {
            names
                .iter()
                .map(|n| {
                    self.prior
                        .iter()
                        .find(|p| &p.name == n)
                        .map_or(0.0, |p| p.weight / total)
                })
                .collect()
        } else {
            vec![1.0 / names.len().max(1) as f64; names.len()]
        };
        let mut env = self.env.clone();
        if !types.is_empty() {
            env.types = types;
            env.type_distribution = type_distribution;
        }
        env.fixed_defense = self.defense_fixed;
        env
    }

    /// Index of the target in the resolved environment.
    pub fn target_index(&self) -> Option<usize> {
        let t = self.target_name()?;
        self.type_names().iter().position(|n| n == t)
    }

    /// Short label of the deployed defense.
    pub fn defense_label(&self) -> String {
        match &self.defense_fixed {
            Some(rule) => rule_label(rule),
            None => "policy".to_string(),
        }
    }
}

pub fn rule_label(rule: &AggregationRule) -> String {
    serde_json::to_value(rule)
        .ok()
        .and_then(|v| v.get("rule").and_then(|r| r.as_str()).map(str::to_string))
        .unwrap_or_else(|| "unknown".to_string())
}
