//! The Bayesian Stackelberg Markov game: a common game interface, rollouts,
//! discounted returns, type sampling, and trajectory dumps.
//!
//! Step `t` (0-based) of a trajectory carries discount `gamma^(t+1)`, so a
//! trajectory's return is `sum_{t=1}^H gamma^t r^t`.

mod fl;
pub mod toy;

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{PolicyParams, Role};
use crate::seed;

pub use fl::{ActionBounds, DataConfig, EnvConfig, FlEnv, FlState, GlobalState, PostMode};

/// Per-step diagnostics. Fields that a game does not produce stay `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub main_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backdoor_accuracy: Option<f64>,
    /// Malicious flags of the clients sampled for this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub identity: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub r_d: f64,
    pub r_a: f64,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub defender_obs: Vec<f64>,
    pub defender_action: Vec<f64>,
    pub attacker_obs: Vec<f64>,
    pub attacker_action: Vec<f64>,
    pub r_d: f64,
    pub r_a: f64,
    pub logprob_d: f64,
    pub logprob_a: f64,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub type_index: usize,
    pub steps: Vec<StepRecord>,
}

/// A two-player Markov game with a private attacker type.
///
/// Players that do not act in a game (or for a type) have action dimension
/// zero; their recorded actions are empty and they need no policy.
pub trait MarkovGame: Sync {
    type State;

    fn type_count(&self) -> usize;
    fn max_horizon(&self) -> usize;
    fn gamma(&self) -> f64;
    fn defender_action_dim(&self) -> usize;
    fn attacker_action_dim(&self, xi: usize) -> usize;
    fn reset(&self, xi: usize, seed: u64) -> Result<Self::State>;
    fn defender_obs(&self, state: &Self::State) -> Vec<f64>;
    fn attacker_obs(&self, state: &Self::State) -> Vec<f64>;
    fn step(
        &self,
        state: &mut Self::State,
        defender: &[f64],
        attacker: &[f64],
    ) -> Result<Transition>;
}

fn act(
    policy: Option<&PolicyParams>,
    dim: usize,
    obs: &[f64],
    role: Role,
    xi: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if dim == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let p = policy.ok_or(match role {
        Role::Defender => invalid("theta", "the game needs a defender policy"),
        Role::Attacker => Error::MissingPolicy(xi),
    })?;
    if p.act_dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: p.act_dim(),
        });
    }
    if p.role != role {
        return Err(invalid("policy", format!("expected a {role:?} policy")));
    }
    p.sample_seeded(obs, seed)
}

/// Plays `horizon` steps of type `xi`. The environment, the defender's draws
/// and the attacker's draws use separate streams derived from `seed`.
pub fn rollout<G: MarkovGame>(
    game: &G,
    theta: Option<&PolicyParams>,
    phi: Option<&PolicyParams>,
    xi: usize,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    if horizon == 0 || horizon > game.max_horizon() {
        return Err(invalid(
            "horizon",
            format!("{horizon} outside 1..={}", game.max_horizon()),
        ));
    }
    if xi >= game.type_count() {
        return Err(invalid("xi", format!("type {xi} of {}", game.type_count())));
    }
    let mut state = game.reset(xi, seed::derive(seed, seed::tag::ENV))?;
    let mut steps = Vec::with_capacity(horizon);
    for t in 0..horizon as u64 {
        let defender_obs = game.defender_obs(&state);
        let attacker_obs = game.attacker_obs(&state);
        let (defender_action, logprob_d) = act(
            theta,
            game.defender_action_dim(),
            &defender_obs,
            Role::Defender,
            xi,
            seed::derive_path(seed, &[seed::tag::POLICY_D, t]),
        )?;
        let (attacker_action, logprob_a) = act(
            phi,
            game.attacker_action_dim(xi),
            &attacker_obs,
            Role::Attacker,
            xi,
            seed::derive_path(seed, &[seed::tag::POLICY_A, t]),
        )?;
        let tr = game.step(&mut state, &defender_action, &attacker_action)?;
        if !tr.r_d.is_finite() || !tr.r_a.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        steps.push(StepRecord {
            defender_obs,
            defender_action,
            attacker_obs,
            attacker_action,
            r_d: tr.r_d,
            r_a: tr.r_a,
            logprob_d,
            logprob_a,
            info: tr.info,
        });
    }
    Ok(Trajectory {
        type_index: xi,
        steps,
    })
}

/// `n` independent rollouts; trajectory `i` uses seed `derive(seed, i)`.
/// Runs in parallel, results are in index order.
pub fn rollout_batch<G: MarkovGame>(
    game: &G,
    theta: Option<&PolicyParams>,
    phi: Option<&PolicyParams>,
    xi: usize,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| rollout(game, theta, phi, xi, horizon, seed::derive(seed, i)))
        .collect()
}

/// `sum_{t=1}^H gamma^t r^t` for `role`.
pub fn discounted_return(trajectory: &Trajectory, gamma: f64, role: Role) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for step in &trajectory.steps {
        discount *= gamma;
        total += discount
            * match role {
                Role::Defender => step.r_d,
                Role::Attacker => step.r_a,
            };
    }
    total
}

/// Mean discounted return over a batch.
pub fn mean_return(trajectories: &[Trajectory], gamma: f64, role: Role) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories
        .iter()
        .map(|t| discounted_return(t, gamma, role))
        .sum::<f64>()
        / trajectories.len() as f64
}

pub fn validate_distribution(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::Empty("type distribution"));
    }
    if q.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(invalid(
            "Q",
            "probabilities must be finite and non-negative",
        ));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid("Q", format!("sums to {total}, not 1")));
    }
    Ok(())
}

/// Categorical draw from `q`.
pub fn sample_type<R: Rng>(q: &[f64], rng: &mut R) -> Result<usize> {
    validate_distribution(q)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in q.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left `acc` slightly below one: take the last type with mass.
    Ok(q.iter().rposition(|p| *p > 0.0).unwrap_or(0))
}

#[derive(Serialize)]
struct DumpLine<'a> {
    round: usize,
    type_index: usize,
    defender_action: &'a [f64],
    attacker_action: &'a [f64],
    r_d: f64,
    r_a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    surrogate_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    main_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backdoor_accuracy: Option<f64>,
}

/// One JSON object per step: `round`, `type_index`, both action vectors,
/// `r_d`, `r_a`, and whichever of `surrogate_loss`, `true_loss`,
/// `main_accuracy`, `backdoor_accuracy` the game reported.
pub fn dump_trajectory(trajectory: &Trajectory) -> Result<String> {
    let mut out = String::new();
    for (round, s) in trajectory.steps.iter().enumerate() {
        let line = DumpLine {
            round,
            type_index: trajectory.type_index,
            defender_action: &s.defender_action,
            attacker_action: &s.attacker_action,
            r_d: s.r_d,
            r_a: s.r_a,
            surrogate_loss: s.info.surrogate_loss,
            true_loss: s.info.true_loss,
            main_accuracy: s.info.main_accuracy,
            backdoor_accuracy: s.info.backdoor_accuracy,
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Config(e.to_string()))?;
        let _ = writeln!(out, "{json}");
    }
    Ok(out)
}
