//! Squashed-Gaussian policies and the Monte-Carlo policy gradient.
//!
//! A policy maps an observation to a Gaussian mean through an affine map
//! (or a one-hidden-layer tanh network) with a state-independent
//! `log_std`. Each action dimension is then either left as is or squashed
//! into `(low, high)` by `low + (high - low) * sigmoid(u)`. Log-densities
//! include the change-of-variables correction, so the score of a bounded
//! action is the Gaussian score of its pre-image.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bsmg::{discounted_return, Trajectory};
use crate::error::{check_dim, invalid, Error, Result};
use crate::seed;

/// Pre-squash values are confined to this range so that squashed actions
/// stay strictly inside their bounds in floating point.
pub const SQUASH_LIMIT: f64 = 12.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Defender,
    Attacker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Squash {
    Identity,
    Sigmoid { low: f64, high: f64 },
}

impl Squash {
    pub fn sigmoid(low: f64, high: f64) -> Self {
        Squash::Sigmoid { low, high }
    }

    fn forward(&self, u: f64) -> f64 {
        match *self {
            Squash::Identity => u,
            Squash::Sigmoid { low, high } => {
                let u = u.clamp(-SQUASH_LIMIT, SQUASH_LIMIT);
                low + (high - low) / (1.0 + (-u).exp())
            }
        }
    }

    /// Pre-image of `a` and `log |da/du|`; boundary actions are rejected.
    fn inverse(&self, a: f64) -> Result<(f64, f64)> {
        match *self {
            Squash::Identity => {
                if !a.is_finite() {
                    return Err(Error::NonFinite("action"));
                }
                Ok((a, 0.0))
            }
            Squash::Sigmoid { low, high } => {
                let y = (a - low) / (high - low);
                if !(y > 0.0 && y < 1.0) {
                    return Err(invalid("action", format!("{a} not inside ({low}, {high})")));
                }
                Ok(((y / (1.0 - y)).ln(), ((high - low) * y * (1.0 - y)).ln()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Squash::Sigmoid { low, high }
                if !(low < high) || !low.is_finite() || !high.is_finite() =>
            {
                Err(invalid(
                    "bounds",
                    format!("need finite low < high, got ({low}, {high})"),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyArch {
    Affine,
    Hidden { width: usize },
}

/// Policy parameters. `weights` holds the mean network, `log_std` one entry
/// per action dimension. The flat layout used by gradients is
/// `weights ++ log_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub role: Role,
    pub arch: PolicyArch,
    pub obs_dim: usize,
    pub weights: Vec<f64>,
    pub log_std: Vec<f64>,
    pub bounds: Vec<Squash>,
}

fn weight_count(arch: PolicyArch, obs_dim: usize, act_dim: usize) -> usize {
    match arch {
        PolicyArch::Affine => act_dim * (obs_dim + 1),
        PolicyArch::Hidden { width } => width * obs_dim + width + act_dim * width + act_dim,
    }
}

impl PolicyParams {
    /// Zero mean map (hidden layers get small random input weights) and a
    /// constant `log_std`.
    pub fn new(
        role: Role,
        arch: PolicyArch,
        obs_dim: usize,
        bounds: Vec<Squash>,
        log_std: f64,
        seed: u64,
    ) -> Result<Self> {
        for b in &bounds {
            b.validate()?;
        }
        let act_dim = bounds.len();
        let mut weights = vec![0.0; weight_count(arch, obs_dim, act_dim)];
        if let PolicyArch::Hidden { width } = arch {
            if width == 0 {
                return Err(invalid("width", "must be positive"));
            }
            let mut rng = seed::rng(seed);
            let scale = 1.0 / (obs_dim.max(1) as f64).sqrt();
            for w in &mut weights[..width * obs_dim] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = scale * z;
            }
        }
        Ok(PolicyParams {
            role,
            arch,
            obs_dim,
            weights,
            log_std: vec![log_std; act_dim],
            bounds,
        })
    }

    pub fn affine(role: Role, obs_dim: usize, bounds: Vec<Squash>, log_std: f64) -> Result<Self> {
        Self::new(role, PolicyArch::Affine, obs_dim, bounds, log_std, 0)
    }

    pub fn act_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn flat_len(&self) -> usize {
        self.weights.len() + self.log_std.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_dim(self.flat_len(), flat.len())?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        let mut out = self.clone();
        let n = self.weights.len();
        out.weights.copy_from_slice(&flat[..n]);
        out.log_std.copy_from_slice(&flat[n..]);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.bounds {
            b.validate()?;
        }
        check_dim(
            weight_count(self.arch, self.obs_dim, self.act_dim()),
            self.weights.len(),
        )?;
        check_dim(self.act_dim(), self.log_std.len())?;
        if self
            .weights
            .iter()
            .chain(&self.log_std)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        check_dim(self.obs_dim, obs.len())?;
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    /// Hidden activations (empty for affine policies) and the Gaussian mean.
    fn forward(&self, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, k) = (self.obs_dim, self.act_dim());
        match self.arch {
            PolicyArch::Affine => {
                let mean = (0..k)
                    .map(|i| {
                        let row = &self.weights[i * (d + 1)..(i + 1) * (d + 1)];
                        row[..d].iter().zip(obs).map(|(w, x)| w * x).sum::<f64>() + row[d]
                    })
                    .collect();
                (Vec::new(), mean)
            }
            PolicyArch::Hidden { width: h } => {
                let w = &self.weights;
                let hid: Vec<f64> = (0..h)
                    .map(|j| {
                        let s: f64 = w[j * d..(j + 1) * d]
                            .iter()
                            .zip(obs)
                            .map(|(a, b)| a * b)
                            .sum();
                        (s + w[h * d + j]).tanh()
                    })
                    .collect();
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                let mean = (0..k)
                    .map(|i| {
                        w[w2 + i * h..w2 + (i + 1) * h]
                            .iter()
                            .zip(&hid)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            + w[b2 + i]
                    })
                    .collect();
                (hid, mean)
            }
        }
    }

    /// Pre-squash Gaussian mean.
    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        Ok(self.forward(obs).1)
    }

    /// The action the policy takes with its noise switched off.
    pub fn mode_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mean = self.mean(obs)?;
        Ok(mean
            .iter()
            .zip(&self.bounds)
            .map(|(&m, b)| b.forward(m))
            .collect())
    }

    /// Draws an action and returns it with its log-density.
    pub fn sample<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mean = self.mean(obs)?;
        let mut action = Vec::with_capacity(mean.len());
        let mut logp = 0.0;
        for ((&m, &ls), b) in mean.iter().zip(&self.log_std).zip(&self.bounds) {
            let z: f64 = StandardNormal.sample(rng);
            let sd = ls.exp();
            let mut u = m + sd * z;
            if let Squash::Sigmoid { low, high } = *b {
                u = u.clamp(-SQUASH_LIMIT, SQUASH_LIMIT);
                let s = 1.0 / (1.0 + (-u).exp());
                logp -= ((high - low) * s * (1.0 - s)).ln();
            }
            let e = (u - m) / sd;
            logp += -0.5 * e * e - ls - 0.5 * LN_2PI;
            action.push(b.forward(u));
        }
        Ok((action, logp))
    }

    pub fn sample_seeded(&self, obs: &[f64], seed: u64) -> Result<(Vec<f64>, f64)> {
        self.sample(obs, &mut seed::rng(seed))
    }

    /// Log-density of `action` at `obs`.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        check_dim(self.act_dim(), action.len())?;
        let mean = self.mean(obs)?;
        let mut total = 0.0;
        for i in 0..action.len() {
            let (u, log_jac) = self.bounds[i].inverse(action[i])?;
            let var = (2.0 * self.log_std[i]).exp();
            total += -0.5 * (u - mean[i]).powi(2) / var - self.log_std[i] - 0.5 * LN_2PI - log_jac;
        }
        Ok(total)
    }

    /// Gradient of [`PolicyParams::log_prob`] over the flat parameters.
    pub fn log_prob_grad(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.act_dim(), action.len())?;
        let (hid, mean) = {
            self.check_obs(obs)?;
            self.forward(obs)
        };
        let (d, k) = (self.obs_dim, self.act_dim());
        let nw = self.weights.len();
        let mut g = vec![0.0; self.flat_len()];
        let mut delta = vec![0.0; k];
        for i in 0..k {
            let (u, _) = self.bounds[i].inverse(action[i])?;
            let var = (2.0 * self.log_std[i]).exp();
            delta[i] = (u - mean[i]) / var;
            g[nw + i] = (u - mean[i]).powi(2) / var - 1.0;
        }
        match self.arch {
            PolicyArch::Affine => {
                for i in 0..k {
                    let row = i * (d + 1);
                    for j in 0..d {
                        g[row + j] = delta[i] * obs[j];
                    }
                    g[row + d] = delta[i];
                }
            }
            PolicyArch::Hidden { width: h } => {
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                for i in 0..k {
                    for j in 0..h {
                        g[w2 + i * h + j] = delta[i] * hid[j];
                    }
                    g[b2 + i] = delta[i];
                }
                for j in 0..h {
                    let back: f64 = (0..k)
                        .map(|i| self.weights[w2 + i * h + j] * delta[i])
                        .sum();
                    let da = back * (1.0 - hid[j] * hid[j]);
                    for m in 0..d {
                        g[j * d + m] = da * obs[m];
                    }
                    g[h * d + j] = da;
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    #[default]
    BatchMean,
}

/// Monte-Carlo policy gradient for `role`:
/// `(1/N) sum_tau (R(tau) - b) sum_t grad log pi(a_t | o_t)`, with `R` the
/// discounted return and `b` zero or the batch-mean return.
pub fn mc_policy_gradient(
    trajectories: &[Trajectory],
    params: &PolicyParams,
    gamma: f64,
    role: Role,
    baseline: Baseline,
) -> Result<Vec<f64>> {
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory batch"));
    }
    let returns: Vec<f64> = trajectories
        .iter()
        .map(|t| discounted_return(t, gamma, role))
        .collect();
    let b = match baseline {
        Baseline::None => 0.0,
        Baseline::BatchMean => returns.iter().sum::<f64>() / returns.len() as f64,
    };
    let mut grad = vec![0.0; params.flat_len()];
    let n = trajectories.len() as f64;
    for (traj, &ret) in trajectories.iter().zip(&returns) {
        let advantage = ret - b;
        let mut score = vec![0.0; params.flat_len()];
        for step in &traj.steps {
            let (obs, action) = match role {
                Role::Defender => (&step.defender_obs, &step.defender_action),
                Role::Attacker => (&step.attacker_obs, &step.attacker_action),
            };
            if action.is_empty() {
                continue;
            }
            for (s, g) in score.iter_mut().zip(params.log_prob_grad(obs, action)?) {
                *s += g;
            }
        }
        for (acc, s) in grad.iter_mut().zip(&score) {
            *acc += advantage * s / n;
        }
    }
    Ok(grad)
}

const CHECKPOINT_MAGIC: &str = "metasg-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: a header (version, role, architecture, dims, bounds)
/// followed by one decimal value per line, `weights` then `log_std`.
pub fn write_checkpoint(params: &PolicyParams) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    let role = match params.role {
        Role::Defender => "defender",
        Role::Attacker => "attacker",
    };
    let _ = writeln!(out, "role {role}");
    match params.arch {
        PolicyArch::Affine => out.push_str("arch affine\n"),
        PolicyArch::Hidden { width } => {
            let _ = writeln!(out, "arch hidden {width}");
        }
    }
    let _ = writeln!(out, "obs_dim {}", params.obs_dim);
    let _ = writeln!(out, "act_dim {}", params.act_dim());
    out.push_str("bounds");
    for b in &params.bounds {
        match b {
            Squash::Identity => out.push_str(" identity"),
            Squash::Sigmoid { low, high } => {
                let _ = write!(out, " sigmoid:{low}:{high}");
            }
        }
    }
    out.push('\n');
    let _ = writeln!(out, "values {}", params.flat_len());
    for v in params.flat() {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<PolicyParams> {
    let mut lines = text.lines().enumerate();
    let mut next = |key: &str| -> Result<(usize, String)> {
        let (n, line) = lines.next().ok_or(Error::Parse {
            line: 0,
            reason: format!("missing `{key}`"),
        })?;
        let rest = line.strip_prefix(key).ok_or(Error::Parse {
            line: n + 1,
            reason: format!("expected `{key}`"),
        })?;
        Ok((n + 1, rest.trim().to_string()))
    };
    let perr = |line: usize, reason: &str| Error::Parse {
        line,
        reason: reason.to_string(),
    };
    let (n, version) = next(CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(perr(n, "unsupported checkpoint version"));
    }
    let (n, role) = next("role")?;
    let role = match role.as_str() {
        "defender" => Role::Defender,
        "attacker" => Role::Attacker,
        _ => return Err(perr(n, "unknown role")),
    };
    let (n, arch) = next("arch")?;
    let arch = match arch.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["affine"] => PolicyArch::Affine,
        ["hidden", w] => PolicyArch::Hidden {
            width: w.parse().map_err(|_| perr(n, "bad width"))?,
        },
        _ => return Err(perr(n, "unknown architecture")),
    };
    let (n, obs_dim) = next("obs_dim")?;
    let obs_dim: usize = obs_dim.parse().map_err(|_| perr(n, "bad obs_dim"))?;
    let (n, act_dim) = next("act_dim")?;
    let act_dim: usize = act_dim.parse().map_err(|_| perr(n, "bad act_dim"))?;
    let (n, bounds) = next("bounds")?;
    let bounds = bounds
        .split_whitespace()
        .map(|tok| {
            if tok == "identity" {
                return Ok(Squash::Identity);
            }
            let parts: Vec<&str> = tok.split(':').collect();
            match parts.as_slice() {
                ["sigmoid", lo, hi] => Ok(Squash::Sigmoid {
                    low: lo.parse().map_err(|_| perr(n, "bad bound"))?,
                    high: hi.parse().map_err(|_| perr(n, "bad bound"))?,
                }),
                _ => Err(perr(n, "bad bound")),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if bounds.len() != act_dim {
        return Err(perr(n, "bounds count differs from act_dim"));
    }
    let (n, count) = next("values")?;
    let count: usize = count.parse().map_err(|_| perr(n, "bad value count"))?;
    let mut values = Vec::with_capacity(count);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|_| perr(i + 1, "bad value"))?,
        );
    }
    if values.len() != count {
        return Err(perr(n, "value count mismatch"));
    }
    let template = PolicyParams {
        role,
        arch,
        obs_dim,
        weights: vec![0.0; weight_count(arch, obs_dim, act_dim)],
        log_std: vec![0.0; act_dim],
        bounds,
    };
    let out = template.with_flat(&values)?;
    out.validate()?;
    Ok(out)
}
