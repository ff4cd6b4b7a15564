//! Desk-scale experiment setups shared by the tests, the acceptance suite
//! and the example configurations.

use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{
    AggregationRule, BackdoorDefense, DefenseAction, DefenseMode, PostDefense,
};
use crate::attacks::{AttackTypeSpec, BackdoorAttack, UntargetedAttack};
use crate::bsmg::toy::{BilinearGame, QuadraticTasks};
use crate::bsmg::{rollout, DataConfig, EnvConfig, FlEnv, MarkovGame, StepInfo};
use crate::data::{LocalTraining, ModelSpec, TriggerSpec};
use crate::error::Result;
use crate::meta::{
    bse_baseline, evaluate, evaluate_protocol, inner_adapt, meta_stackelberg, reptile_meta_rl,
    MetaConfig,
};
use crate::policy::{PolicyArch, PolicyParams, Role, Squash};
use crate::seed;

pub const IPM_EPSILON: f64 = 6.0;
pub const IPM_ROUNDS: usize = 100;
pub const BACKDOOR_ROUNDS: usize = 50;
pub const BACKDOOR_SCALE: f64 = 20.0;

fn twenty_clients(dim: usize, rounds: usize, rule: AggregationRule) -> EnvConfig {
    EnvConfig {
        n_clients: 20,
        sampling_rate: 1.0,
        horizon: rounds,
        model: ModelSpec::linear(dim, 4),
        data: DataConfig {
            separation: 3.0,
            q: 0.2,
            ..DataConfig::default()
        },
        local: LocalTraining {
            lr: 0.3,
            iterations: 5,
            batch_size: 128,
        },
        fixed_defense: Some(rule),
        ..EnvConfig::default()
    }
}

/// Four-class logistic regression over 20 clients, all sampled every round;
/// with `attack` four of them run IPM with `epsilon = 6`.
pub fn ipm_env(attack: bool, rule: AggregationRule) -> EnvConfig {
    let ty = if attack {
        AttackTypeSpec::untargeted(
            "ipm",
            UntargetedAttack::Ipm {
                epsilon: IPM_EPSILON,
            },
            4,
        )
    } else {
        AttackTypeSpec::benign("no-attack")
    };
    EnvConfig {
        types: vec![ty],
        type_distribution: vec![1.0],
        ..twenty_clients(8, IPM_ROUNDS, rule)
    }
}

pub fn backdoor_trigger() -> TriggerSpec {
    TriggerSpec::tail_patch(10, 2, 6.0, 0)
}

/// The same task in 10 dimensions with a two-coordinate trigger on pure
/// noise features; with `attack` client 0 runs the model-replacement
/// backdoor with scale 20. Without it the type still carries the trigger so
/// backdoor accuracy is reported.
pub fn backdoor_env(attack: bool, rule: AggregationRule) -> EnvConfig {
    let mut ty = AttackTypeSpec::backdoor(
        "model-replacement",
        BackdoorAttack::Static {
            scale: BACKDOOR_SCALE,
        },
        1,
        backdoor_trigger(),
    );
    ty.poison_ratio = 0.8;
    ty.local = Some(LocalTraining {
        lr: 0.3,
        iterations: 30,
        batch_size: 128,
    });
    if !attack {
        ty = AttackTypeSpec {
            trigger: Some(backdoor_trigger()),
            ..AttackTypeSpec::benign("no-attack")
        };
    }
    EnvConfig {
        types: vec![ty],
        type_distribution: vec![1.0],
        ..twenty_clients(10, BACKDOOR_ROUNDS, rule)
    }
}

/// Plays every round of a fixed-defense environment with static attackers
/// and returns the diagnostics of the last round.
pub fn final_round(config: EnvConfig, seed: u64) -> Result<StepInfo> {
    let horizon = config.horizon;
    let env = FlEnv::new(config, seed)?;
    let trajectory = rollout(&env, None, None, 0, horizon, seed)?;
    Ok(trajectory
        .steps
        .last()
        .map(|s| s.info.clone())
        .unwrap_or_default())
}

/// Norm clipping at 0.3, noise variance 1e-4, and pruning half of the
/// output weights after the last round.
pub fn backdoor_defense() -> AggregationRule {
    let mut action = DefenseAction::open(DefenseMode::Backdoor);
    action.backdoor = BackdoorDefense {
        noise_variance: 1e-4,
        norm_bound: 0.3,
        post: Some(PostDefense::Prune { rate: 0.5 }),
    };
    AggregationRule::Defense { action }
}

/// Prior over the two types of every toy fixture.
pub const TOY_PRIOR: [f64; 2] = [0.5, 0.5];

/// Two one-step tasks with optima at -1 and +1.
pub fn quadratic_tasks() -> Result<QuadraticTasks> {
    QuadraticTasks::new(vec![-1.0, 1.0], 1)
}

/// Attacker types with targets 2 and 4, played against fixed attacker
/// policies centered on the targets. The targets sit away from the origin so
/// that an untrained defender starts far from both.
pub fn bilinear_tasks() -> Result<(BilinearGame, Vec<Option<PolicyParams>>)> {
    let targets = vec![2.0, 4.0];
    let phis = targets
        .iter()
        .map(|&t| Some(scalar_policy(Role::Attacker, t, -0.5)))
        .collect();
    Ok((BilinearGame::new(targets, 0.5)?, phis))
}

/// Attacker types with targets -1 and +1 and coupling 0.5, starting from
/// policies centered on the targets. Against a best-responding attacker a
/// fixed defense cannot serve both types at once.
pub fn bilinear_game() -> Result<(BilinearGame, Vec<Option<PolicyParams>>)> {
    let targets = vec![-1.0, 1.0];
    let phis = targets
        .iter()
        .map(|&t| Some(scalar_policy(Role::Attacker, t, -0.5)))
        .collect();
    Ok((BilinearGame::new(targets, 0.5)?, phis))
}

/// An affine policy on the constant toy observation with mean `mean`.
pub fn scalar_policy(role: Role, mean: f64, log_std: f64) -> PolicyParams {
    PolicyParams {
        role,
        arch: PolicyArch::Affine,
        obs_dim: 1,
        weights: vec![0.0, mean],
        log_std: vec![log_std],
        bounds: vec![Squash::Identity],
    }
}

/// A toy policy whose weight and bias are standard normal draws.
pub fn random_scalar_policy(role: Role, seed: u64) -> PolicyParams {
    let mut rng = seed::rng(seed);
    let mut p = scalar_policy(role, 0.0, -0.5);
    for w in &mut p.weights {
        *w = StandardNormal.sample(&mut rng);
    }
    p
}

/// Meta-training on the toy task fixtures: 100 iterations, two types per
/// batch, one adaptation step.
pub fn toy_meta_config() -> MetaConfig {
    MetaConfig {
        outer_iters: 100,
        types_per_batch: 2,
        adapt_steps: 1,
        eta: 0.2,
        kappa: 0.5,
        batch_size: 64,
        horizon: 1,
        ..MetaConfig::default()
    }
}

/// Stackelberg training on [`bilinear_game`]: attackers best-respond with
/// ten steps of size 0.1.
pub fn toy_stackelberg_config() -> MetaConfig {
    MetaConfig {
        outer_iters: 150,
        types_per_batch: 4,
        kappa: 0.3,
        kappa_a: 0.1,
        attacker_steps: 10,
        batch_size: 128,
        ..toy_meta_config()
    }
}

/// Episodes per evaluation in the toy trials.
pub const TOY_EVAL_EPISODES: usize = 4000;

/// Prior-weighted defender values of one meta-adaptation trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationTrial {
    /// The meta policy as trained.
    pub pre: f64,
    /// The meta policy after `l` adaptation steps.
    pub post: f64,
    /// The meta-training start point after the same adaptation.
    pub random_post: f64,
}

/// Meta-trains from a random initial policy with Reptile, then adapts both
/// the meta policy and the initial policy to every type with the same
/// adaptation seed and evaluates them on common episodes.
pub fn adaptation_trial<G: MarkovGame>(
    game: &G,
    phis: &[Option<PolicyParams>],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<AdaptationTrial> {
    let init = random_scalar_policy(Role::Defender, seed::derive(seed, seed::tag::INIT));
    let meta = reptile_meta_rl(game, &init, phis, &TOY_PRIOR, cfg, seed)?.theta;
    let mut trial = AdaptationTrial {
        pre: 0.0,
        post: 0.0,
        random_post: 0.0,
    };
    for (xi, q) in TOY_PRIOR.iter().enumerate() {
        let phi = phis[xi].as_ref();
        let eval_seed = seed::derive_path(seed, &[seed::tag::EVAL, xi as u64]);
        let adapt_seed = seed::derive(eval_seed, seed::tag::ADAPT);
        let value = |theta: &PolicyParams| {
            evaluate(
                game,
                Some(theta),
                phi,
                xi,
                cfg.horizon,
                TOY_EVAL_EPISODES,
                eval_seed,
            )
        };
        let adapted = inner_adapt(
            game,
            &meta,
            phi,
            xi,
            cfg.adapt_steps,
            cfg.eta,
            cfg,
            adapt_seed,
        )?;
        let random = inner_adapt(
            game,
            &init,
            phi,
            xi,
            cfg.adapt_steps,
            cfg.eta,
            cfg,
            adapt_seed,
        )?;
        trial.pre += q * value(&meta)?;
        trial.post += q * value(&adapted.theta)?;
        trial.random_post += q * value(&random.theta)?;
    }
    Ok(trial)
}

/// Per-type defender values of meta-Stackelberg and BSE training on
/// [`bilinear_game`] from the same start, both measured against attackers
/// that re-best-respond to the deployed defense. The meta policy is adapted
/// before deployment; the BSE policy is deployed as trained.
#[derive(Debug, Clone, PartialEq)]
pub struct StackelbergTrial {
    pub meta_sg: Vec<f64>,
    pub bse: Vec<f64>,
}

pub fn stackelberg_trial(cfg: &MetaConfig, seed: u64) -> Result<StackelbergTrial> {
    let (game, phis) = bilinear_game()?;
    let theta0 = scalar_policy(Role::Defender, 0.0, -0.5);
    let sg = meta_stackelberg(&game, &theta0, &phis, &TOY_PRIOR, cfg, seed)?.theta;
    let bse = bse_baseline(&game, &theta0, &phis, &TOY_PRIOR, cfg, seed)?.theta;
    let mut trial = StackelbergTrial {
        meta_sg: Vec::new(),
        bse: Vec::new(),
    };
    for (xi, phi) in phis.iter().enumerate() {
        let eval_seed = seed::derive_path(seed, &[seed::tag::EVAL, xi as u64]);
        let a = evaluate_protocol(
            &game,
            &sg,
            phi.as_ref(),
            xi,
            true,
            cfg,
            TOY_EVAL_EPISODES,
            eval_seed,
        )?;
        let b = evaluate_protocol(
            &game,
            &bse,
            phi.as_ref(),
            xi,
            false,
            cfg,
            TOY_EVAL_EPISODES,
            eval_seed,
        )?;
        trial.meta_sg.push(a.post_adaptation);
        trial.bse.push(b.pre_adaptation);
    }
    Ok(trial)
}
