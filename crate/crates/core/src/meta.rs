//! Defender training: Reptile meta-RL against static attacks, meta-Stackelberg
//! learning against best-responding attackers, the Bayesian Stackelberg
//! baseline without adaptation, and online adaptation.
//!
//! Seed layout, for outer iteration `t` and batch slot `k` of a run seeded
//! with `s`:
//!
//! * type draws: `derive_path(s, [TYPES, t])`
//! * the adaptation that enters the meta update: `derive_path(s, [ADAPT, t, k])`
//! * the adaptation the attacker responds to: `derive_path(s, [READAPT, t, k])`
//! * the attacker's best response: `derive_path(s, [RESPONSE, t, k])`
//!
//! Gradient step `i` of an adaptation or a best response seeded with `u`
//! rolls out its batch with seed `derive(u, i)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsmg::{
    mean_return, rollout_batch, sample_type, validate_distribution, MarkovGame, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::policy::{mc_policy_gradient, Baseline, PolicyParams, Role};
use crate::seed::{self, tag};

/// Early stop for the attacker's best response: stop once the last `window`
/// gradient norms are all below `tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceStop {
    pub tolerance: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Outer iterations `T` (Reptile) or `N_D` (meta-Stackelberg).
    pub outer_iters: usize,
    /// Types per batch `K`, drawn with replacement from `Q`.
    pub types_per_batch: usize,
    /// Adaptation steps `l`.
    pub adapt_steps: usize,
    /// Inner step size `eta`.
    pub eta: f64,
    /// Meta step size `kappa` (`kappa_D`).
    pub kappa: f64,
    /// Attacker step size `kappa_A`.
    pub kappa_a: f64,
    /// Attacker best-response steps `N_A`.
    pub attacker_steps: usize,
    /// Trajectories per gradient estimate `N_b`.
    pub batch_size: usize,
    pub horizon: usize,
    pub baseline: Baseline,
    /// Gradient norms above this are rescaled to it.
    pub grad_clip: f64,
    pub convergence: Option<ConvergenceStop>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            outer_iters: 50,
            types_per_batch: 2,
            adapt_steps: 1,
            eta: 0.01,
            kappa: 0.5,
            kappa_a: 0.01,
            attacker_steps: 5,
            batch_size: 8,
            horizon: 10,
            baseline: Baseline::BatchMean,
            grad_clip: 1e3,
            convergence: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_iters", self.outer_iters),
            ("types_per_batch", self.types_per_batch),
            ("adapt_steps", self.adapt_steps),
            ("batch_size", self.batch_size),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("eta", self.eta),
            ("kappa", self.kappa),
            ("kappa_a", self.kappa_a),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if let Some(c) = self.convergence {
            if c.window == 0 || !(c.tolerance > 0.0) {
                return Err(Error::Config(
                    "convergence stop needs a positive window and tolerance".into(),
                ));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` to norm `clip` when it is longer; returns the original norm.
fn clip_gradient(g: &mut [f64], clip: f64) -> f64 {
    let n = norm(g);
    if n > clip {
        log::warn!("gradient norm {n:.3e} clipped to {clip:.3e}");
        let s = clip / n;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    n
}

/// One Monte-Carlo gradient of `role`'s objective from a fresh batch, after
/// clipping, with the batch and the pre-clip norm.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient<G: MarkovGame>(
    game: &G,
    theta: Option<&PolicyParams>,
    phi: Option<&PolicyParams>,
    xi: usize,
    role: Role,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64, Vec<Trajectory>)> {
    let batch = rollout_batch(game, theta, phi, xi, cfg.horizon, cfg.batch_size, seed)?;
    let params = match role {
        Role::Defender => theta,
        Role::Attacker => phi,
    }
    .ok_or(invalid(
        "policy",
        "the differentiated player needs a policy",
    ))?;
    let mut g = mc_policy_gradient(&batch, params, game.gamma(), role, cfg.baseline)?;
    let n = clip_gradient(&mut g, cfg.grad_clip);
    Ok((g, n, batch))
}

/// Result of [`inner_adapt`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub theta: PolicyParams,
    /// Flat parameters after each step.
    pub iterates: Vec<Vec<f64>>,
    /// `theta(l) - theta(0)`, accumulated step by step.
    pub displacement: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Mean defender return of each step's batch.
    pub returns: Vec<f64>,
}

/// `steps` on-policy gradient-ascent steps on the defender's return against
/// the fixed attacker `(phi, xi)`: `theta(k+1) = theta(k) + eta * g(theta(k))`.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt<G: MarkovGame>(
    game: &G,
    theta: &PolicyParams,
    phi: Option<&PolicyParams>,
    xi: usize,
    steps: usize,
    eta: f64,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<Adaptation> {
    let base = theta.flat();
    let mut displacement = vec![0.0; base.len()];
    let mut current = theta.clone();
    let mut out = Adaptation {
        theta: theta.clone(),
        iterates: Vec::with_capacity(steps),
        displacement: Vec::new(),
        grad_norms: Vec::with_capacity(steps),
        returns: Vec::with_capacity(steps),
    };
    for k in 0..steps as u64 {
        let (g, n, batch) = policy_gradient(
            game,
            Some(&current),
            phi,
            xi,
            Role::Defender,
            cfg,
            seed::derive(seed, k),
        )?;
        for (d, gi) in displacement.iter_mut().zip(&g) {
            *d += eta * gi;
        }
        let flat: Vec<f64> = base.iter().zip(&displacement).map(|(b, d)| b + d).collect();
        current = theta.with_flat(&flat)?;
        out.iterates.push(flat);
        out.grad_norms.push(n);
        out.returns
            .push(mean_return(&batch, game.gamma(), Role::Defender));
    }
    out.theta = current;
    out.displacement = displacement;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub phi: PolicyParams,
    pub grad_norms: Vec<f64>,
    /// Mean attacker return of each step's batch.
    pub returns: Vec<f64>,
}

/// Up to `steps` policy-gradient ascent steps on the attacker's return
/// against the frozen defender `theta` (absent under a fixed defense).
#[allow(clippy::too_many_arguments)]
pub fn attacker_best_response<G: MarkovGame>(
    game: &G,
    theta: Option<&PolicyParams>,
    phi0: &PolicyParams,
    xi: usize,
    steps: usize,
    kappa_a: f64,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<BestResponse> {
    let mut phi = phi0.clone();
    let mut out = BestResponse {
        phi: phi0.clone(),
        grad_norms: Vec::new(),
        returns: Vec::new(),
    };
    for k in 0..steps as u64 {
        let (g, n, batch) = policy_gradient(
            game,
            theta,
            Some(&phi),
            xi,
            Role::Attacker,
            cfg,
            seed::derive(seed, k),
        )?;
        let flat: Vec<f64> = phi
            .flat()
            .iter()
            .zip(&g)
            .map(|(p, gi)| p + kappa_a * gi)
            .collect();
        phi = phi.with_flat(&flat)?;
        out.grad_norms.push(n);
        out.returns
            .push(mean_return(&batch, game.gamma(), Role::Attacker));
        if let Some(stop) = cfg.convergence {
            let w = stop.window;
            if out.grad_norms.len() >= w
                && out.grad_norms[out.grad_norms.len() - w..]
                    .iter()
                    .all(|&x| x < stop.tolerance)
            {
                log::debug!(
                    "best response for type {xi} converged after {} steps",
                    k + 1
                );
                break;
            }
        }
    }
    out.phi = phi;
    Ok(out)
}

/// One outer iteration of a trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub types: Vec<usize>,
    pub theta_before: Vec<f64>,
    /// Adapted parameters per batch slot (`theta` itself for the baseline).
    pub adapted: Vec<Vec<f64>>,
    pub theta_after: Vec<f64>,
    /// Mean defender return of each slot's last batch.
    pub returns: Vec<f64>,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub theta: PolicyParams,
    /// Attacker policies per type, as updated by the trainer.
    pub phis: Vec<Option<PolicyParams>>,
    pub trace: Vec<OuterRecord>,
}

fn check_inputs<G: MarkovGame>(
    game: &G,
    phis: &[Option<PolicyParams>],
    q: &[f64],
    cfg: &MetaConfig,
) -> Result<()> {
    cfg.validate()?;
    validate_distribution(q)?;
    if q.len() != game.type_count() || phis.len() != game.type_count() {
        return Err(Error::Config(format!(
            "{} types, but Q has {} entries and {} attacker policies were given",
            game.type_count(),
            q.len(),
            phis.len()
        )));
    }
    Ok(())
}

fn attacker_for(
    game: &impl MarkovGame,
    phis: &[Option<PolicyParams>],
    xi: usize,
) -> Result<Option<PolicyParams>> {
    if game.attacker_action_dim(xi) == 0 {
        return Ok(None);
    }
    phis[xi].clone().map(Some).ok_or(Error::MissingPolicy(xi))
}

fn draw_types(q: &[f64], k: usize, seed: u64, t: usize) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed::derive_path(seed, &[tag::TYPES, t as u64]));
    (0..k).map(|_| sample_type(q, &mut rng)).collect()
}

/// `theta + (kappa / K) * sum_k displacement_k`, summed in slot order.
fn meta_step(theta: &PolicyParams, displacements: &[Vec<f64>], kappa: f64) -> Result<PolicyParams> {
    let base = theta.flat();
    let mut sum = vec![0.0; base.len()];
    for d in displacements {
        for (s, v) in sum.iter_mut().zip(d) {
            *s += v;
        }
    }
    let scale = kappa / displacements.len() as f64;
    let flat: Vec<f64> = base.iter().zip(&sum).map(|(b, s)| b + scale * s).collect();
    theta.with_flat(&flat)
}

/// Reptile meta-RL against static attacker policies: each iteration draws
/// `K` types, adapts to each for `l` steps, and moves `theta` by
/// `(kappa / K) * sum (theta_xi(l) - theta)`.
pub fn reptile_meta_rl<G: MarkovGame>(
    game: &G,
    theta0: &PolicyParams,
    phis: &[Option<PolicyParams>],
    q: &[f64],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<MetaOutcome> {
    check_inputs(game, phis, q, cfg)?;
    let mut theta = theta0.clone();
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    for t in 0..cfg.outer_iters {
        let types = draw_types(q, cfg.types_per_batch, seed, t)?;
        let adaptations = types
            .par_iter()
            .enumerate()
            .map(|(k, &xi)| {
                let phi = attacker_for(game, phis, xi)?;
                let s = seed::derive_path(seed, &[tag::ADAPT, t as u64, k as u64]);
                inner_adapt(
                    game,
                    &theta,
                    phi.as_ref(),
                    xi,
                    cfg.adapt_steps,
                    cfg.eta,
                    cfg,
                    s,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let next = meta_step(
            &theta,
            &adaptations
                .iter()
                .map(|a| a.displacement.clone())
                .collect::<Vec<_>>(),
            cfg.kappa,
        )?;
        trace.push(record(t, types, &theta, &adaptations, &next));
        theta = next;
    }
    Ok(MetaOutcome {
        theta,
        phis: phis.to_vec(),
        trace,
    })
}

fn record(
    t: usize,
    types: Vec<usize>,
    before: &PolicyParams,
    ad: &[Adaptation],
    after: &PolicyParams,
) -> OuterRecord {
    OuterRecord {
        iteration: t,
        types,
        theta_before: before.flat(),
        adapted: ad.iter().map(|a| a.theta.flat()).collect(),
        theta_after: after.flat(),
        returns: ad
            .iter()
            .map(|a| a.returns.last().copied().unwrap_or(f64::NAN))
            .collect(),
        max_grad_norm: ad
            .iter()
            .flat_map(|a| a.grad_norms.iter().copied())
            .fold(0.0, f64::max),
    }
}

/// Meta-Stackelberg learning. Per sampled type: adapt `theta` against the
/// current attacker, let the attacker best-respond to the adapted defense
/// for `N_A` steps, re-adapt `theta` against the responded attacker, and use
/// the re-adapted parameters in the Reptile update. The responded attacker
/// persists for the next iteration; if a type fills several slots the last
/// slot's attacker is kept.
pub fn meta_stackelberg<G: MarkovGame>(
    game: &G,
    theta0: &PolicyParams,
    phis0: &[Option<PolicyParams>],
    q: &[f64],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<MetaOutcome> {
    check_inputs(game, phis0, q, cfg)?;
    let mut theta = theta0.clone();
    let mut phis = phis0.to_vec();
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    for t in 0..cfg.outer_iters {
        let types = draw_types(q, cfg.types_per_batch, seed, t)?;
        let slots = types
            .par_iter()
            .enumerate()
            .map(|(k, &xi)| {
                let path = |tg: u64| seed::derive_path(seed, &[tg, t as u64, k as u64]);
                let mut phi = attacker_for(game, &phis, xi)?;
                if let (Some(p), true) = (&phi, cfg.attacker_steps > 0) {
                    let pre = inner_adapt(
                        game,
                        &theta,
                        Some(p),
                        xi,
                        cfg.adapt_steps,
                        cfg.eta,
                        cfg,
                        path(tag::READAPT),
                    )?;
                    let br = attacker_best_response(
                        game,
                        Some(&pre.theta),
                        p,
                        xi,
                        cfg.attacker_steps,
                        cfg.kappa_a,
                        cfg,
                        path(tag::RESPONSE),
                    )?;
                    phi = Some(br.phi);
                }
                let post = inner_adapt(
                    game,
                    &theta,
                    phi.as_ref(),
                    xi,
                    cfg.adapt_steps,
                    cfg.eta,
                    cfg,
                    path(tag::ADAPT),
                )?;
                Ok((post, phi))
            })
            .collect::<Result<Vec<_>>>()?;
        let adaptations: Vec<Adaptation> = slots.iter().map(|(a, _)| a.clone()).collect();
        let next = meta_step(
            &theta,
            &adaptations
                .iter()
                .map(|a| a.displacement.clone())
                .collect::<Vec<_>>(),
            cfg.kappa,
        )?;
        for (&xi, (_, phi)) in types.iter().zip(slots) {
            if phi.is_some() {
                phis[xi] = phi;
            }
        }
        trace.push(record(t, types, &theta, &adaptations, &next));
        theta = next;
    }
    Ok(MetaOutcome { theta, phis, trace })
}

/// Bayesian Stackelberg baseline: the meta-Stackelberg loop without any
/// adaptation. Attackers best-respond to `theta` itself and `theta` moves by
/// the averaged direct gradient, `theta + (kappa * eta / K) * sum_k g_k`,
/// which is the one-step meta update with `theta_xi(1) - theta = eta g_k`.
pub fn bse_baseline<G: MarkovGame>(
    game: &G,
    theta0: &PolicyParams,
    phis0: &[Option<PolicyParams>],
    q: &[f64],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<MetaOutcome> {
    check_inputs(game, phis0, q, cfg)?;
    let mut theta = theta0.clone();
    let mut phis = phis0.to_vec();
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    for t in 0..cfg.outer_iters {
        let types = draw_types(q, cfg.types_per_batch, seed, t)?;
        let slots = types
            .par_iter()
            .enumerate()
            .map(|(k, &xi)| {
                let path = |tg: u64| seed::derive_path(seed, &[tg, t as u64, k as u64]);
                let mut phi = attacker_for(game, &phis, xi)?;
                if let (Some(p), true) = (&phi, cfg.attacker_steps > 0) {
                    let br = attacker_best_response(
                        game,
                        Some(&theta),
                        p,
                        xi,
                        cfg.attacker_steps,
                        cfg.kappa_a,
                        cfg,
                        path(tag::RESPONSE),
                    )?;
                    phi = Some(br.phi);
                }
                let (g, n, batch) = policy_gradient(
                    game,
                    Some(&theta),
                    phi.as_ref(),
                    xi,
                    Role::Defender,
                    cfg,
                    path(tag::ADAPT),
                )?;
                let step: Vec<f64> = g.iter().map(|v| cfg.eta * v).collect();
                let ad = Adaptation {
                    theta: theta.clone(),
                    iterates: Vec::new(),
                    displacement: step,
                    grad_norms: vec![n],
                    returns: vec![mean_return(&batch, game.gamma(), Role::Defender)],
                };
                Ok((ad, phi))
            })
            .collect::<Result<Vec<_>>>()?;
        let adaptations: Vec<Adaptation> = slots.iter().map(|(a, _)| a.clone()).collect();
        let next = meta_step(
            &theta,
            &adaptations
                .iter()
                .map(|a| a.displacement.clone())
                .collect::<Vec<_>>(),
            cfg.kappa,
        )?;
        for (&xi, (_, phi)) in types.iter().zip(slots) {
            if phi.is_some() {
                phis[xi] = phi;
            }
        }
        trace.push(record(t, types, &theta, &adaptations, &next));
        theta = next;
    }
    Ok(MetaOutcome { theta, phis, trace })
}

/// Online adaptation budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    /// Environment rounds available for adaptation in total.
    pub rounds: usize,
    /// Maximum number of policy updates.
    pub steps: usize,
    pub eta: f64,
    /// Episodes per update.
    pub batch_size: usize,
    pub horizon: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            rounds: 50,
            steps: 5,
            eta: 0.01,
            batch_size: 1,
            horizon: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutcome {
    pub theta: PolicyParams,
    /// Every episode played while adapting, in order.
    pub trajectories: Vec<Trajectory>,
    pub updates: usize,
}

/// Runs the deployed policy in the real environment and updates it from the
/// surrogate rewards it collects, one gradient step per batch of
/// `batch_size` episodes, until `steps` updates are made or the next batch
/// would exceed the round budget.
#[allow(clippy::too_many_arguments)]
pub fn online_adapt<G: MarkovGame>(
    game: &G,
    theta: &PolicyParams,
    phi: Option<&PolicyParams>,
    xi: usize,
    online: &OnlineConfig,
    baseline: Baseline,
    grad_clip: f64,
    seed: u64,
) -> Result<OnlineOutcome> {
    if online.batch_size == 0 || online.horizon == 0 {
        return Err(invalid("online", "batch_size and horizon must be positive"));
    }
    let per_update = online.batch_size * online.horizon;
    let mut current = theta.clone();
    let mut trajectories = Vec::new();
    let mut used = 0;
    let mut updates = 0;
    while updates < online.steps && used + per_update <= online.rounds {
        let batch = rollout_batch(
            game,
            Some(&current),
            phi,
            xi,
            online.horizon,
            online.batch_size,
            seed::derive(seed, updates as u64),
        )?;
        let mut g = mc_policy_gradient(&batch, &current, game.gamma(), Role::Defender, baseline)?;
        clip_gradient(&mut g, grad_clip);
        let flat: Vec<f64> = current
            .flat()
            .iter()
            .zip(&g)
            .map(|(p, gi)| p + online.eta * gi)
            .collect();
        current = current.with_flat(&flat)?;
        trajectories.extend(batch);
        used += per_update;
        updates += 1;
    }
    Ok(OnlineOutcome {
        theta: current,
        trajectories,
        updates,
    })
}

/// Mean defender return of `theta` over `episodes` rollouts.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<G: MarkovGame>(
    game: &G,
    theta: Option<&PolicyParams>,
    phi: Option<&PolicyParams>,
    xi: usize,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let batch = rollout_batch(game, theta, phi, xi, horizon, episodes, seed)?;
    Ok(mean_return(&batch, game.gamma(), Role::Defender))
}

/// Values of a defender against type `xi` under the equilibrium evaluation
/// protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolValue {
    /// The deployed policy against the attacker's response to it.
    pub pre_adaptation: f64,
    /// The policy adapted for `l` steps against the given attacker, evaluated
    /// against the attacker's response to the adapted policy.
    pub post_adaptation: f64,
    pub adapted: PolicyParams,
}

/// Evaluation protocol for equilibrium comparisons: the attacker re-best-
/// responds (`N_A` steps from `phi`) to whichever defense is deployed before
/// the defender's return is measured over `episodes` rollouts. With
/// `adapt = false` the post-adaptation value equals the pre-adaptation one.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_protocol<G: MarkovGame>(
    game: &G,
    theta: &PolicyParams,
    phi: Option<&PolicyParams>,
    xi: usize,
    adapt: bool,
    cfg: &MetaConfig,
    episodes: usize,
    seed: u64,
) -> Result<ProtocolValue> {
    let respond = |defense: &PolicyParams, s: u64| -> Result<Option<PolicyParams>> {
        match phi {
            Some(p) if cfg.attacker_steps > 0 => Ok(Some(
                attacker_best_response(
                    game,
                    Some(defense),
                    p,
                    xi,
                    cfg.attacker_steps,
                    cfg.kappa_a,
                    cfg,
                    s,
                )?
                .phi,
            )),
            _ => Ok(phi.cloned()),
        }
    };
    let eval_seed = seed::derive(seed, tag::EVAL);
    let phi_pre = respond(theta, seed::derive_path(seed, &[tag::RESPONSE, 0]))?;
    let pre = evaluate(
        game,
        Some(theta),
        phi_pre.as_ref(),
        xi,
        cfg.horizon,
        episodes,
        eval_seed,
    )?;
    if !adapt {
        return Ok(ProtocolValue {
            pre_adaptation: pre,
            post_adaptation: pre,
            adapted: theta.clone(),
        });
    }
    let ad = inner_adapt(
        game,
        theta,
        phi,
        xi,
        cfg.adapt_steps,
        cfg.eta,
        cfg,
        seed::derive(seed, tag::ADAPT),
    )?;
    let phi_post = respond(&ad.theta, seed::derive_path(seed, &[tag::RESPONSE, 1]))?;
    let post = evaluate(
        game,
        Some(&ad.theta),
        phi_post.as_ref(),
        xi,
        cfg.horizon,
        episodes,
        eval_seed,
    )?;
    Ok(ProtocolValue {
        pre_adaptation: pre,
        post_adaptation: post,
        adapted: ad.theta,
    })
}
