use metasg::bsmg::toy::{BanditArm, GaussianBandit};
use metasg::bsmg::{discounted_return, rollout_batch, Trajectory};
use metasg::policy::{mc_policy_gradient, Baseline, PolicyArch, PolicyParams, Role, Squash};
use metasg::seed;
use rand::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Log-density of a squashed diagonal Gaussian, from the change-of-variables
/// formula, for an affine policy.
fn oracle_log_density(p: &PolicyParams, obs: &[f64], action: &[f64]) -> f64 {
    let d = p.obs_dim;
    let mut total = 0.0;
    for (i, &a) in action.iter().enumerate() {
        let row = &p.weights[i * (d + 1)..(i + 1) * (d + 1)];
        let mean: f64 = row[..d].iter().zip(obs).map(|(w, x)| w * x).sum::<f64>() + row[d];
        let sd = p.log_std[i].exp();
        let (u, jac) = match p.bounds[i] {
            Squash::Identity => (a, 1.0),
            Squash::Sigmoid { low, high } => {
                let y = (a - low) / (high - low);
                ((y / (1.0 - y)).ln(), (high - low) * y * (1.0 - y))
            }
        };
        total += -0.5 * ((u - mean) / sd).powi(2) - sd.ln() - 0.5 * LN_2PI - jac.ln();
    }
    total
}

fn random_policy(arch: PolicyArch, rng: &mut impl Rng) -> PolicyParams {
    let bounds = vec![
        Squash::sigmoid(0.0, 0.5),
        Squash::sigmoid(-1.0, 1.0),
        Squash::Identity,
    ];
    let p = PolicyParams::new(Role::Defender, arch, 4, bounds, 0.0, rng.random()).unwrap();
    let flat: Vec<f64> = (0..p.flat_len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    p.with_flat(&flat).unwrap()
}

fn interior_action(rng: &mut impl Rng) -> Vec<f64> {
    vec![
        rng.random_range(0.02..0.48),
        rng.random_range(-0.95..0.95),
        rng.random_range(-3.0..3.0),
    ]
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn log_density_matches_change_of_variables() {
    let mut rng = seed::rng(1);
    for _ in 0..100 {
        let p = random_policy(PolicyArch::Affine, &mut rng);
        let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let action = interior_action(&mut rng);
        let got = p.log_prob(&obs, &action).unwrap();
        assert!((got - oracle_log_density(&p, &obs, &action)).abs() < 1e-9);
    }
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = seed::rng(2);
    for arch in [PolicyArch::Affine, PolicyArch::Hidden { width: 5 }] {
        for _ in 0..100 {
            let p = random_policy(arch, &mut rng);
            let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let action = interior_action(&mut rng);
            let g = p.log_prob_grad(&obs, &action).unwrap();
            let base = p.flat();
            let h = 1e-5;
            let fd: Vec<f64> = (0..base.len())
                .map(|i| {
                    let mut v = base.clone();
                    v[i] += h;
                    let up = p.with_flat(&v).unwrap().log_prob(&obs, &action).unwrap();
                    v[i] -= 2.0 * h;
                    let down = p.with_flat(&v).unwrap().log_prob(&obs, &action).unwrap();
                    (up - down) / (2.0 * h)
                })
                .collect();
            let err = relative_error(&g, &fd);
            assert!(err < 1e-4, "{arch:?}: relative error {err}");
        }
    }
}

fn bandit() -> (GaussianBandit, PolicyParams) {
    let arms = vec![
        BanditArm {
            curvature: 1.0,
            center: 0.5,
            slope: 0.0,
        },
        BanditArm {
            curvature: 0.5,
            center: -1.0,
            slope: 0.3,
        },
    ];
    let game = GaussianBandit::new(arms, 0.9).unwrap();
    let mut p = PolicyParams::affine(Role::Defender, 1, vec![Squash::Identity; 2], 0.0).unwrap();
    p.weights = vec![0.2, -0.1, 0.1, 0.4];
    p.log_std = vec![-0.3, 0.2];
    (game, p)
}

/// Per-trajectory terms `(R - b) * score` and their per-coordinate mean and
/// standard error.
fn estimator_terms(
    batch: &[Trajectory],
    p: &PolicyParams,
    gamma: f64,
    baseline: Baseline,
) -> (Vec<f64>, Vec<f64>) {
    let returns: Vec<f64> = batch
        .iter()
        .map(|t| discounted_return(t, gamma, Role::Defender))
        .collect();
    let b = match baseline {
        Baseline::None => 0.0,
        Baseline::BatchMean => returns.iter().sum::<f64>() / returns.len() as f64,
    };
    let n = batch.len() as f64;
    let terms: Vec<Vec<f64>> = batch
        .iter()
        .zip(&returns)
        .map(|(t, r)| {
            let s = &t.steps[0];
            p.log_prob_grad(&s.defender_obs, &s.defender_action)
                .unwrap()
                .into_iter()
                .map(|g| (r - b) * g)
                .collect()
        })
        .collect();
    let dim = p.flat_len();
    let mean: Vec<f64> = (0..dim)
        .map(|i| terms.iter().map(|t| t[i]).sum::<f64>() / n)
        .collect();
    let se: Vec<f64> = (0..dim)
        .map(|i| {
            (terms.iter().map(|t| (t[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                / n.sqrt()
        })
        .collect();
    (mean, se)
}

/// `dJ/dparams` for the bandit: each arm's mean is weight + bias, and
/// `J = gamma * sum_i (-k_i ((mu_i - c_i)^2 + sd_i^2) + s_i mu_i)`.
fn analytic_gradient(game: &GaussianBandit, p: &PolicyParams) -> Vec<f64> {
    let mut g = vec![0.0; p.flat_len()];
    for (i, arm) in game.arms.iter().enumerate() {
        let mu = p.weights[2 * i] + p.weights[2 * i + 1];
        let dmu = game.gamma * (-2.0 * arm.curvature * (mu - arm.center) + arm.slope);
        g[2 * i] = dmu;
        g[2 * i + 1] = dmu;
        let var = (2.0 * p.log_std[i]).exp();
        g[4 + i] = game.gamma * (-2.0 * arm.curvature * var);
    }
    g
}

#[test]
fn baseline_leaves_the_expectation_unchanged() {
    let (game, p) = bandit();
    let batch = rollout_batch(&game, Some(&p), None, 0, 1, 20_000, 5).unwrap();
    let (plain, se_plain) = estimator_terms(&batch, &p, game.gamma, Baseline::None);
    let (centered, se_centered) = estimator_terms(&batch, &p, game.gamma, Baseline::BatchMean);
    let truth = analytic_gradient(&game, &p);
    for i in 0..truth.len() {
        let joint = (se_plain[i].powi(2) + se_centered[i].powi(2)).sqrt();
        assert!(
            (plain[i] - centered[i]).abs() <= 3.0 * joint,
            "coordinate {i}"
        );
        assert!(
            (centered[i] - truth[i]).abs() <= 3.0 * se_centered[i],
            "coordinate {i}"
        );
    }
    let library =
        mc_policy_gradient(&batch, &p, game.gamma, Role::Defender, Baseline::BatchMean).unwrap();
    for (a, b) in library.iter().zip(&centered) {
        assert!((a - b).abs() < 1e-9);
    }
}
