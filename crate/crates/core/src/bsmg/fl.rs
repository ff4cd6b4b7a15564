//! The federated-learning game: one step is one FL round.
//!
//! Clients `0..m1` of the active type run its backdoor behavior, clients
//! `m1..m1+m2` its untargeted behavior, and every other client trains
//! honestly. The defender observes the flattened global model plus
//! `(round / H, previous surrogate loss)`; the attacker additionally sees the
//! fraction of this round's sampled clients it controls.

use std::collections::BTreeMap;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{validate_distribution, MarkovGame, StepInfo, Transition};
use crate::aggregation::{
    post_train, AggregationRule, BackdoorDefense, DefenseAction, DefenseMode, PostDefense,
    UntargetedDefense,
};
use crate::attacks::{
    backdoor_craft, eb_craft, ipm_craft, lmp_craft, rl_backdoor_lambda, rl_backdoor_update,
    rl_untargeted_update, AttackAction, AttackTypeSpec, BackdoorAttack, BenignStats, Knowledge,
    UntargetedAttack,
};
use crate::data::{
    gen_synthetic_dataset, local_update, loss_f_dprime, loss_f_prime, split_non_iid, ClientShard,
    LocalTraining, ModelSpec, ParamVec, Sample,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::policy::{PolicyParams, Role, Squash};
use crate::seed::{self, tag};

/// Synthetic data layout of the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub separation: f64,
    pub samples_per_client: usize,
    /// Non-i.i.d. level `q`.
    pub q: f64,
    /// Client groups for the non-i.i.d. split; the class count when absent.
    pub groups: Option<usize>,
    /// Size of the server-held surrogate set used for rewards.
    pub surrogate_size: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            separation: 3.0,
            samples_per_client: 30,
            q: 0.5,
            groups: None,
            surrogate_size: 100,
            test_per_class: 200,
        }
    }
}

/// Upper ends of the defender's action ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionBounds {
    pub a_max: f64,
    pub d_max: f64,
    pub e_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        ActionBounds {
            a_max: 10.0,
            d_max: 1.0,
            e_max: 10.0,
        }
    }
}

/// Which post-training repair the defender's third backdoor coordinate
/// drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PostMode {
    #[default]
    None,
    NeuronClip,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n_clients: usize,
    pub sampling_rate: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub local: LocalTraining,
    /// Standard deviation of the initial global weights.
    pub init_std: f64,
    /// When set and the active type carries a trigger, the defender's reward
    /// is `-F''` with this trade-off instead of `-F`.
    pub lambda_prime: Option<f64>,
    pub post_mode: PostMode,
    /// Apply post-training repair after every round instead of only the last.
    pub post_every_round: bool,
    pub defense_mode: DefenseMode,
    pub bounds: ActionBounds,
    /// A classical rule that replaces the defender's policy.
    pub fixed_defense: Option<AggregationRule>,
    /// Compute test accuracy and the true client loss every round.
    pub diagnostics: bool,
    pub types: Vec<AttackTypeSpec>,
    pub type_distribution: Vec<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_clients: 100,
            sampling_rate: 0.1,
            horizon: 30,
            gamma: 0.99,
            model: ModelSpec::linear(8, 4),
            data: DataConfig::default(),
            local: LocalTraining::default(),
            init_std: 0.01,
            lambda_prime: None,
            post_mode: PostMode::None,
            post_every_round: false,
            defense_mode: DefenseMode::Untargeted,
            bounds: ActionBounds::default(),
            fixed_defense: None,
            diagnostics: true,
            types: vec![AttackTypeSpec::benign("benign")],
            type_distribution: vec![1.0],
        }
    }
}

impl EnvConfig {
    pub fn groups(&self) -> usize {
        self.data.groups.unwrap_or(self.model.classes)
    }

    pub fn sample_size(&self) -> usize {
        ((self.sampling_rate * self.n_clients as f64).round() as usize).clamp(1, self.n_clients)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sampling_rate {} outside (0, 1]",
                self.sampling_rate
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if !self.n_clients.is_multiple_of(self.groups()) {
            return Err(Error::Config(format!(
                "{} clients cannot form {} equal groups",
                self.n_clients,
                self.groups()
            )));
        }
        if self.data.samples_per_client == 0
            || self.data.surrogate_size == 0
            || self.data.test_per_class == 0
        {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if let Some(lp) = self.lambda_prime {
            if !(0.0..=1.0).contains(&lp) {
                return Err(Error::Config(format!("lambda_prime {lp} outside [0, 1]")));
            }
        }
        let b = &self.bounds;
        if !(b.a_max > 0.0 && b.d_max > 0.0 && b.e_max > 0.0)
            || !(b.a_max + b.d_max + b.e_max).is_finite()
        {
            return Err(Error::Config(
                "action bounds must be positive and finite".into(),
            ));
        }
        if self.types.is_empty() || self.types.len() != self.type_distribution.len() {
            return Err(Error::Config(
                "type_distribution must have one entry per type".into(),
            ));
        }
        validate_distribution(&self.type_distribution).map_err(|e| Error::Config(e.to_string()))?;
        for t in &self.types {
            t.validate(self.model.dim, self.model.classes)?;
            if t.malicious_count() >= self.n_clients {
                return Err(Error::Config(format!(
                    "type `{}`: m1 + m2 must be below n_clients",
                    t.name
                )));
            }
        }
        if let Some(AggregationRule::Defense { action }) = &self.fixed_defense {
            action.validate()?;
        }
        Ok(())
    }

    /// Defender action dimension: three per active pipeline, zero under a
    /// fixed rule.
    pub fn defender_action_dim(&self) -> usize {
        if self.fixed_defense.is_some() {
            return 0;
        }
        match self.defense_mode {
            DefenseMode::Untargeted | DefenseMode::Backdoor => 3,
            DefenseMode::Mixed => 6,
        }
    }
}

/// The game state `(w_g, identity)` plus the round bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub w_g: ParamVec,
    /// Malicious flags aligned with `sampled_ids`.
    pub identity: Vec<bool>,
    pub round: usize,
    pub sampled_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FlState {
    pub global: GlobalState,
    pub xi: usize,
    /// Surrogate loss of the current global model.
    pub prev_loss: f64,
    history: BTreeMap<usize, ParamVec>,
    sampling: ChaCha8Rng,
    episode_seed: u64,
}

/// Per-type attack material prepared once per environment.
#[derive(Debug, Clone)]
struct TypeData {
    /// The backdoor clients' pooled, partly triggered data.
    backdoor_shard: Option<ClientShard>,
    /// Triggered surrogate inputs relabeled to the target.
    surrogate_triggered: Vec<Sample>,
    /// Triggered test inputs whose true label differs from the target.
    test_triggered: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FlEnv {
    config: EnvConfig,
    shards: Vec<ClientShard>,
    surrogate: Vec<Sample>,
    test: Vec<Sample>,
    types: Vec<TypeData>,
}

impl FlEnv {
    /// Builds client data, the surrogate and test sets, and each type's
    /// poisoned data from `seed`.
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let d = &config.data;
        let total = config.n_clients * d.samples_per_client;
        let per_class = total.div_ceil(m.classes);
        let dataset = gen_synthetic_dataset(
            m.dim,
            m.classes,
            per_class,
            d.separation,
            seed::derive(seed, tag::DATA),
        )?;
        let shards = split_non_iid(
            &dataset,
            config.n_clients,
            config.groups(),
            d.q,
            seed::derive(seed, tag::SPLIT),
        )?;
        if shards.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(
                "a client received no data; raise samples_per_client".into(),
            ));
        }
        let surrogate = gen_synthetic_dataset(
            m.dim,
            m.classes,
            d.surrogate_size.div_ceil(m.classes),
            d.separation,
            seed::derive(seed, tag::SURROGATE),
        )?;
        let test = gen_synthetic_dataset(
            m.dim,
            m.classes,
            d.test_per_class,
            d.separation,
            seed::derive(seed, tag::TEST),
        )?;
        let types = config
            .types
            .iter()
            .enumerate()
            .map(|(xi, t)| {
                let Some(trigger) = &t.trigger else {
                    return Ok(TypeData {
                        backdoor_shard: None,
                        surrogate_triggered: Vec::new(),
                        test_triggered: Vec::new(),
                    });
                };
                let target = trigger.target_label;
                let backdoor_shard = if t.m1 > 0 {
                    let pooled: Vec<Sample> = shards[..t.m1]
                        .iter()
                        .flat_map(|s| s.samples.clone())
                        .collect();
                    let mut shard = ClientShard::new(0, pooled);
                    shard.poison(
                        trigger,
                        t.poison_ratio,
                        seed::derive_path(seed, &[tag::ATTACK, xi as u64]),
                    )?;
                    if shard.poisoned_samples().is_empty() {
                        return Err(Error::Config(format!(
                            "type `{}`: poisoning produced no samples",
                            t.name
                        )));
                    }
                    Some(shard)
                } else {
                    None
                };
                let surrogate_triggered = surrogate
                    .iter()
                    .filter(|s| s.label != target)
                    .map(|s| {
                        Ok(Sample {
                            features: trigger.stamp(&s.features)?,
                            label: target,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let test_triggered = test
                    .iter()
                    .filter(|s| s.label != target)
                    .map(|s| trigger.stamp(&s.features))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TypeData {
                    backdoor_shard,
                    surrogate_triggered,
                    test_triggered,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FlEnv {
            config,
            shards,
            surrogate,
            test,
            types,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn surrogate(&self) -> &[Sample] {
        &self.surrogate
    }

    pub fn test_set(&self) -> &[Sample] {
        &self.test
    }

    pub fn observation_dim(&self) -> usize {
        self.config.model.param_count() + 2
    }

    fn type_spec(&self, xi: usize) -> &AttackTypeSpec {
        &self.config.types[xi]
    }

    fn sample_clients(&self, state: &mut FlState) {
        let t = self.type_spec(state.xi);
        let mut ids = index::sample(
            &mut state.sampling,
            self.config.n_clients,
            self.config.sample_size(),
        )
        .into_vec();
        ids.sort_unstable();
        state.global.identity = ids.iter().map(|&i| i < t.malicious_count()).collect();
        state.global.sampled_ids = ids;
    }

    /// Fresh episode of type `xi`: Gaussian initial weights, round 0, first
    /// client subset drawn.
    pub fn reset_state(&self, xi: usize, seed: u64) -> Result<FlState> {
        if xi >= self.config.types.len() {
            return Err(invalid(
                "xi",
                format!("type {xi} of {}", self.config.types.len()),
            ));
        }
        let w_g = self
            .config
            .model
            .init_params(self.config.init_std, seed::derive(seed, tag::INIT));
        let prev_loss = self.config.model.loss(&w_g, &self.surrogate)?;
        let mut state = FlState {
            global: GlobalState {
                w_g,
                identity: Vec::new(),
                round: 0,
                sampled_ids: Vec::new(),
            },
            xi,
            prev_loss,
            history: BTreeMap::new(),
            sampling: seed::rng(seed::derive(seed, tag::SAMPLING)),
            episode_seed: seed,
        };
        self.sample_clients(&mut state);
        Ok(state)
    }

    /// Maps a defender action vector onto the configured pipeline.
    pub fn defense_from_vector(&self, v: &[f64]) -> Result<DefenseAction> {
        let dim = match self.config.defense_mode {
            DefenseMode::Mixed => 6,
            _ => 3,
        };
        check_dim(dim, v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("defense action"));
        }
        let mut action = DefenseAction::open(self.config.defense_mode);
        let untargeted = |u: &[f64]| UntargetedDefense {
            trim_fraction: u[0],
            norm_bound: u[1],
            cosine_threshold: u[2],
        };
        let backdoor = |b: &[f64]| BackdoorDefense {
            noise_variance: b[0],
            norm_bound: b[1],
            post: match self.config.post_mode {
                PostMode::None => None,
                PostMode::NeuronClip => Some(PostDefense::NeuronClip { range: b[2] }),
                PostMode::Prune => Some(PostDefense::Prune { rate: b[2] }),
            },
        };
        match self.config.defense_mode {
            DefenseMode::Untargeted => action.untargeted = untargeted(v),
            DefenseMode::Backdoor => action.backdoor = backdoor(v),
            DefenseMode::Mixed => {
                action.untargeted = untargeted(&v[..3]);
                action.backdoor = backdoor(&v[3..]);
            }
        }
        action.validate()?;
        Ok(action)
    }

    /// Squashing ranges of the defender's action vector.
    pub fn defender_bounds(&self) -> Vec<(f64, f64)> {
        let b = &self.config.bounds;
        let post_high = match self.config.post_mode {
            PostMode::Prune => 1.0,
            _ => b.e_max,
        };
        let untargeted = [(0.0, 0.5), (0.0, b.a_max), (-1.0, 1.0)];
        let backdoor = [(0.0, b.d_max), (0.0, b.a_max), (0.0, post_high)];
        match self.config.defense_mode {
            DefenseMode::Untargeted => untargeted.to_vec(),
            DefenseMode::Backdoor => backdoor.to_vec(),
            DefenseMode::Mixed => untargeted.iter().chain(&backdoor).copied().collect(),
        }
    }

    /// Squashing ranges of type `xi`'s attacker action: backdoor group
    /// `(boost, lambda, norm cap)` first, then untargeted `(a1, a2, a3)`.
    pub fn attacker_bounds(&self, xi: usize) -> Vec<(f64, f64)> {
        let t = self.type_spec(xi);
        let mut out = Vec::new();
        if matches!(t.backdoor, Some(BackdoorAttack::Rl)) {
            out.extend([
                (1.0, 50.0),
                (0.0, 1.0),
                (0.0, 2.0 * self.config.bounds.a_max),
            ]);
        }
        if matches!(t.untargeted, Some(UntargetedAttack::Rl)) {
            out.extend([(0.0, 10.0), (-5.0, 5.0), (-2.0, 2.0)]);
        }
        out
    }

    /// An affine defender policy with zero mean map over this environment's
    /// observation and action ranges.
    pub fn defender_policy(&self, log_std: f64) -> Result<PolicyParams> {
        let bounds = self
            .defender_bounds()
            .into_iter()
            .map(|(lo, hi)| Squash::sigmoid(lo, hi))
            .collect();
        PolicyParams::affine(Role::Defender, self.observation_dim(), bounds, log_std)
    }

    /// An affine attacker policy for type `xi`; `None` for static types.
    pub fn attacker_policy(&self, xi: usize, log_std: f64) -> Result<Option<PolicyParams>> {
        let bounds: Vec<Squash> = self
            .attacker_bounds(xi)
            .into_iter()
            .map(|(lo, hi)| Squash::sigmoid(lo, hi))
            .collect();
        if bounds.is_empty() {
            return Ok(None);
        }
        PolicyParams::affine(Role::Attacker, self.observation_dim() + 1, bounds, log_std).map(Some)
    }

    fn benign_updates(&self, state: &FlState, ids: &[usize], stream: u64) -> Result<Vec<ParamVec>> {
        let round = state.global.round as u64;
        ids.par_iter()
            .map(|&id| {
                local_update(
                    &self.config.model,
                    &state.global.w_g,
                    &self.shards[id],
                    &self.config.local,
                    seed::derive_path(state.episode_seed, &[stream, round, id as u64]),
                )
            })
            .collect()
    }

    /// Crafts the malicious updates of the sampled attackers. `rl_action`
    /// drives the RL groups; `benign` are this round's honest updates.
    fn craft(
        &self,
        state: &FlState,
        rl_action: &[f64],
        benign: &[ParamVec],
    ) -> Result<AttackAction> {
        let t = self.type_spec(state.xi);
        check_dim(t.action_dim(), rl_action.len())?;
        let sampled: Vec<usize> = state
            .global
            .sampled_ids
            .iter()
            .zip(&state.global.identity)
            .filter(|(_, &bad)| bad)
            .map(|(&id, _)| id)
            .collect();
        let mut out = AttackAction::default();
        let w = &state.global.w_g;
        let round = state.global.round as u64;
        let mut rl = rl_action;
        let backdoor_ids: Vec<usize> = sampled.iter().copied().filter(|&i| i < t.m1).collect();
        if let Some(kind) = t.backdoor {
            let rl_part = if matches!(kind, BackdoorAttack::Rl) {
                let (head, tail) = rl.split_at(3);
                rl = tail;
                head
            } else {
                &[]
            };
            if !backdoor_ids.is_empty() {
                let shard = self.types[state.xi]
                    .backdoor_shard
                    .as_ref()
                    .ok_or(Error::Empty("backdoor data"))?;
                let trigger = t.trigger.as_ref().ok_or(Error::Empty("trigger"))?;
                let training = t.local.unwrap_or(self.config.local);
                let s = seed::derive_path(state.episode_seed, &[tag::ATTACK, round]);
                let update = match kind {
                    BackdoorAttack::Static { scale } => backdoor_craft(
                        &self.config.model,
                        w,
                        shard,
                        trigger,
                        scale,
                        t.lambda,
                        &training,
                        s,
                    )?,
                    BackdoorAttack::Rl => {
                        let lambda = rl_backdoor_lambda(rl_part);
                        let g = backdoor_craft(
                            &self.config.model,
                            w,
                            shard,
                            trigger,
                            1.0,
                            lambda,
                            &training,
                            s,
                        )?;
                        rl_backdoor_update(rl_part, &g)?
                    }
                };
                for id in backdoor_ids {
                    out.updates.insert(id, update.clone());
                }
            }
        }
        let untargeted_ids: Vec<usize> = sampled.iter().copied().filter(|&i| i >= t.m1).collect();
        if let (Some(kind), false) = (t.untargeted, untargeted_ids.is_empty()) {
            let estimates = match t.knowledge {
                Knowledge::Omniscient if !benign.is_empty() => benign.to_vec(),
                _ => {
                    let own: Vec<usize> = (t.m1..t.m1 + t.m2).collect();
                    self.benign_updates(state, &own, tag::ATTACK)?
                }
            };
            let stats = BenignStats::estimate(&estimates)?;
            let update = match kind {
                UntargetedAttack::Ipm { epsilon } => ipm_craft(&stats.mean, epsilon, 1)?.remove(0),
                UntargetedAttack::Lmp { z } if estimates.len() >= 2 => {
                    lmp_craft(&estimates, z, 1)?.remove(0)
                }
                // A single estimate has no spread to exploit.
                UntargetedAttack::Lmp { .. } => stats.mean.clone(),
                UntargetedAttack::Eb { boost } => eb_craft(&stats.mean.scaled(-1.0), boost)?,
                UntargetedAttack::Rl => rl_untargeted_update(rl, &stats)?,
            };
            for id in untargeted_ids {
                out.updates.insert(id, update.clone());
            }
        }
        Ok(out)
    }

    /// One FL round with the attacker's RL action (empty for static types).
    pub fn step_with(
        &self,
        state: &mut FlState,
        rule: &AggregationRule,
        rl_action: &[f64],
    ) -> Result<Transition> {
        self.check_round(state)?;
        let benign_ids = self.benign_ids(state);
        let benign = self.benign_updates(state, &benign_ids, tag::CLIENT)?;
        let attack = self.craft(state, rl_action, &benign)?;
        self.finish_round(state, rule, &benign_ids, benign, &attack)
    }

    /// One FL round with explicitly given malicious updates. `attack` must
    /// hold exactly the sampled malicious clients.
    pub fn env_step(
        &self,
        state: &mut FlState,
        rule: &AggregationRule,
        attack: &AttackAction,
    ) -> Result<Transition> {
        self.check_round(state)?;
        let benign_ids = self.benign_ids(state);
        let benign = self.benign_updates(state, &benign_ids, tag::CLIENT)?;
        self.finish_round(state, rule, &benign_ids, benign, attack)
    }

    fn check_round(&self, state: &FlState) -> Result<()> {
        if state.global.round >= self.config.horizon {
            return Err(Error::RoundOverflow {
                round: state.global.round,
                horizon: self.config.horizon,
            });
        }
        Ok(())
    }

    fn benign_ids(&self, state: &FlState) -> Vec<usize> {
        state
            .global
            .sampled_ids
            .iter()
            .zip(&state.global.identity)
            .filter(|(_, &bad)| !bad)
            .map(|(&id, _)| id)
            .collect()
    }

    fn finish_round(
        &self,
        state: &mut FlState,
        rule: &AggregationRule,
        benign_ids: &[usize],
        benign: Vec<ParamVec>,
        attack: &AttackAction,
    ) -> Result<Transition> {
        let p = self.config.model.param_count();
        let malicious: Vec<usize> = state
            .global
            .sampled_ids
            .iter()
            .zip(&state.global.identity)
            .filter(|(_, &bad)| bad)
            .map(|(&id, _)| id)
            .collect();
        if attack.updates.len() != malicious.len()
            || malicious.iter().any(|id| !attack.updates.contains_key(id))
        {
            return Err(invalid(
                "attack",
                "updates must cover exactly the sampled malicious clients",
            ));
        }
        let mut by_client: BTreeMap<usize, ParamVec> =
            benign_ids.iter().copied().zip(benign).collect();
        for (&id, u) in &attack.updates {
            check_dim(p, u.len())?;
            if !u.is_finite() {
                return Err(Error::NonFinite("malicious update"));
            }
            by_client.insert(id, u.clone());
        }
        let ids = state.global.sampled_ids.clone();
        let updates: Vec<ParamVec> = ids.iter().map(|id| by_client[id].clone()).collect();
        for (id, u) in ids.iter().zip(&updates) {
            state
                .history
                .entry(*id)
                .and_modify(|h| h.axpy(1.0, u))
                .or_insert_with(|| u.clone());
        }
        let history: Vec<ParamVec> = ids.iter().map(|id| state.history[id].clone()).collect();
        let round = state.global.round;
        let agg = rule.aggregate(
            &updates,
            &history,
            seed::derive_path(state.episode_seed, &[tag::NOISE, round as u64]),
        )?;
        let mut w = state.global.w_g.sub(&agg);
        if let Some(action) = rule.post_defense() {
            if self.config.post_every_round || round + 1 == self.config.horizon {
                w = post_train(&action, &w, &self.config.model)?;
            }
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("global model"));
        }

        let t = self.type_spec(state.xi);
        let td = &self.types[state.xi];
        let model = &self.config.model;
        let surrogate_loss = model.loss(&w, &self.surrogate)?;
        let r_d = match (self.config.lambda_prime, &t.trigger) {
            (Some(lp), Some(trigger)) => {
                let triggered = self
                    .surrogate
                    .iter()
                    .map(|s| trigger.stamp(&s.features))
                    .collect::<Result<Vec<_>>>()?;
                -loss_f_dprime(model, &w, &self.surrogate, &triggered, lp)?
            }
            _ => -surrogate_loss,
        };
        let identity = state.global.identity.clone();
        let r_a = if identity.iter().any(|&b| b) {
            let rho = t.rho();
            let backdoor_loss = if t.m1 > 0 && !td.surrogate_triggered.is_empty() {
                loss_f_prime(
                    model,
                    &w,
                    &self.surrogate,
                    &td.surrogate_triggered,
                    t.lambda,
                )?
            } else {
                0.0
            };
            (1.0 - rho) * surrogate_loss - rho * backdoor_loss
        } else {
            0.0
        };
        let mut info = StepInfo {
            surrogate_loss: Some(surrogate_loss),
            identity,
            ..StepInfo::default()
        };
        if self.config.diagnostics {
            info.main_accuracy = Some(model.accuracy(&w, &self.test)?);
            let mut total = 0.0;
            for shard in &self.shards {
                total += model.loss(&w, &shard.samples)?;
            }
            info.true_loss = Some(total / self.shards.len() as f64);
            if t.trigger.is_some() && !td.test_triggered.is_empty() {
                let target = t.trigger.as_ref().map(|tr| tr.target_label).unwrap_or(0);
                info.backdoor_accuracy = Some(model.target_rate(&w, &td.test_triggered, target)?);
            }
        }

        state.global.w_g = w;
        state.global.round += 1;
        state.prev_loss = surrogate_loss;
        self.sample_clients(state);
        Ok(Transition { r_d, r_a, info })
    }

    fn observation(&self, state: &FlState) -> Vec<f64> {
        let mut obs = state.global.w_g.to_vec();
        obs.push(state.global.round as f64 / self.config.horizon as f64);
        obs.push(state.prev_loss);
        obs
    }
}

impl MarkovGame for FlEnv {
    type State = FlState;

    fn type_count(&self) -> usize {
        self.config.types.len()
    }

    fn max_horizon(&self) -> usize {
        self.config.horizon
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn defender_action_dim(&self) -> usize {
        self.config.defender_action_dim()
    }

    fn attacker_action_dim(&self, xi: usize) -> usize {
        self.type_spec(xi).action_dim()
    }

    fn reset(&self, xi: usize, seed: u64) -> Result<FlState> {
        self.reset_state(xi, seed)
    }

    fn defender_obs(&self, state: &FlState) -> Vec<f64> {
        self.observation(state)
    }

    fn attacker_obs(&self, state: &FlState) -> Vec<f64> {
        let mut obs = self.observation(state);
        let n = state.global.identity.len().max(1) as f64;
        obs.push(state.global.identity.iter().filter(|&&b| b).count() as f64 / n);
        obs
    }

    fn step(&self, state: &mut FlState, defender: &[f64], attacker: &[f64]) -> Result<Transition> {
        let rule = match &self.config.fixed_defense {
            Some(rule) => *rule,
            None => AggregationRule::Defense {
                action: self.defense_from_vector(defender)?,
            },
        };
        self.step_with(state, &rule, attacker)
    }
}
