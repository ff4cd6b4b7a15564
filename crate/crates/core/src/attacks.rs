//! Attacker behaviors: static crafting rules (IPM, LMP, explicit boosting,
//! model-replacement backdoor) and the 3-dimensional RL action maps.
//!
//! All malicious clients controlled by one attack group submit the same
//! crafted update in a round.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{
    minibatch, sgd_delta, ClientShard, LocalTraining, ModelSpec, ParamVec, TriggerSpec,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Ipm,
    Lmp,
    Eb,
    BackdoorStatic,
    RlUntargeted,
    RlBackdoor,
}

/// Behavior of the `m2` untargeted clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UntargetedAttack {
    Ipm { epsilon: f64 },
    Lmp { z: f64 },
    Eb { boost: f64 },
    Rl,
}

/// Behavior of the `m1` backdoor clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackdoorAttack {
    Static { scale: f64 },
    Rl,
}

/// Where the attacker's benign statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Knowledge {
    /// Honest updates computed on the malicious clients' own data.
    #[default]
    Own,
    /// The true updates of the sampled benign clients.
    Omniscient,
}

fn default_lambda() -> f64 {
    0.5
}

fn default_poison_ratio() -> f64 {
    0.5
}

/// An attacker type: which behaviors its clients run and how many clients it
/// controls. Clients `0..m1` run the backdoor behavior and `m1..m1+m2` the
/// untargeted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTypeSpec {
    pub name: String,
    #[serde(default)]
    pub untargeted: Option<UntargetedAttack>,
    #[serde(default)]
    pub backdoor: Option<BackdoorAttack>,
    #[serde(default)]
    pub m1: usize,
    #[serde(default)]
    pub m2: usize,
    #[serde(default)]
    pub trigger: Option<TriggerSpec>,
    /// Main/backdoor trade-off of the attacker's local objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_poison_ratio")]
    pub poison_ratio: f64,
    #[serde(default)]
    pub knowledge: Knowledge,
    /// Local training used for backdoor crafting; the environment's benign
    /// setting when absent.
    #[serde(default)]
    pub local: Option<LocalTraining>,
}

impl AttackTypeSpec {
    /// A type with no malicious behavior.
    pub fn benign(name: &str) -> Self {
        AttackTypeSpec {
            name: name.to_string(),
            untargeted: None,
            backdoor: None,
            m1: 0,
            m2: 0,
            trigger: None,
            lambda: default_lambda(),
            poison_ratio: default_poison_ratio(),
            knowledge: Knowledge::Own,
            local: None,
        }
    }

    pub fn untargeted(name: &str, attack: UntargetedAttack, m2: usize) -> Self {
        AttackTypeSpec {
            untargeted: Some(attack),
            m2,
            ..Self::benign(name)
        }
    }

    pub fn backdoor(name: &str, attack: BackdoorAttack, m1: usize, trigger: TriggerSpec) -> Self {
        AttackTypeSpec {
            backdoor: Some(attack),
            m1,
            trigger: Some(trigger),
            ..Self::benign(name)
        }
    }

    pub fn kinds(&self) -> Vec<AttackKind> {
        let mut out = Vec::new();
        match self.backdoor {
            Some(BackdoorAttack::Static { .. }) => out.push(AttackKind::BackdoorStatic),
            Some(BackdoorAttack::Rl) => out.push(AttackKind::RlBackdoor),
            None => {}
        }
        match self.untargeted {
            Some(UntargetedAttack::Ipm { .. }) => out.push(AttackKind::Ipm),
            Some(UntargetedAttack::Lmp { .. }) => out.push(AttackKind::Lmp),
            Some(UntargetedAttack::Eb { .. }) => out.push(AttackKind::Eb),
            Some(UntargetedAttack::Rl) => out.push(AttackKind::RlUntargeted),
            None => {}
        }
        out
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.untargeted, Some(UntargetedAttack::Rl))
            || matches!(self.backdoor, Some(BackdoorAttack::Rl))
    }

    /// Attacker action dimension: three per RL-driven group.
    pub fn action_dim(&self) -> usize {
        let mut d = 0;
        if matches!(self.backdoor, Some(BackdoorAttack::Rl)) {
            d += 3;
        }
        if matches!(self.untargeted, Some(UntargetedAttack::Rl)) {
            d += 3;
        }
        d
    }

    pub fn malicious_count(&self) -> usize {
        self.m1 + self.m2
    }

    /// `rho = m1 / (m1 + m2)`.
    pub fn rho(&self) -> f64 {
        if self.malicious_count() == 0 {
            0.0
        } else {
            self.m1 as f64 / self.malicious_count() as f64
        }
    }

    pub fn validate(&self, dim: usize, classes: usize) -> Result<()> {
        if self.m1 > 0 && self.backdoor.is_none() {
            return Err(Error::Config(format!(
                "type `{}`: m1 > 0 without a backdoor behavior",
                self.name
            )));
        }
        if self.m2 > 0 && self.untargeted.is_none() {
            return Err(Error::Config(format!(
                "type `{}`: m2 > 0 without an untargeted behavior",
                self.name
            )));
        }
        if self.backdoor.is_some() {
            let t = self.trigger.as_ref().ok_or_else(|| {
                Error::Config(format!("type `{}`: backdoor without a trigger", self.name))
            })?;
            check_dim(dim, t.mask.len())?;
            check_dim(dim, t.pattern.len())?;
            if t.target_label >= classes {
                return Err(Error::Config(format!(
                    "type `{}`: target label out of range",
                    self.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.poison_ratio) {
            return Err(Error::Config(format!(
                "type `{}`: lambda and poison_ratio must lie in [0, 1]",
                self.name
            )));
        }
        match self.untargeted {
            Some(UntargetedAttack::Ipm { epsilon }) if !(epsilon >= 0.0) => {
                Err(Error::Config("IPM epsilon must be >= 0".into()))
            }
            Some(UntargetedAttack::Lmp { z }) if !(z > 0.0) => {
                Err(Error::Config("LMP z must be > 0".into()))
            }
            Some(UntargetedAttack::Eb { boost }) if !(boost >= 1.0) => {
                Err(Error::Config("EB boost must be >= 1".into()))
            }
            _ => match self.backdoor {
                Some(BackdoorAttack::Static { scale }) if !(scale >= 1.0) => {
                    Err(Error::Config("backdoor scale must be >= 1".into()))
                }
                _ => Ok(()),
            },
        }
    }
}

/// Crafted updates keyed by malicious client index; only sampled malicious
/// clients appear.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackAction {
    pub updates: BTreeMap<usize, ParamVec>,
}

/// Per-coordinate mean and population standard deviation of benign updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BenignStats {
    pub mean: ParamVec,
    pub std: ParamVec,
}

impl BenignStats {
    pub fn estimate(updates: &[ParamVec]) -> Result<Self> {
        let first = updates.first().ok_or(Error::Empty("benign estimates"))?;
        let dim = first.len();
        let n = updates.len() as f64;
        let mut mean = ParamVec::zeros(dim);
        for u in updates {
            check_dim(dim, u.len())?;
            mean.axpy(1.0 / n, u);
        }
        let mut var = ParamVec::zeros(dim);
        for u in updates {
            for j in 0..dim {
                let d = u[j] - mean[j];
                var[j] += d * d / n;
            }
        }
        let std = ParamVec(var.iter().map(|v| v.sqrt()).collect());
        Ok(BenignStats { mean, std })
    }
}

/// Inner product manipulation: every malicious update is `-epsilon * mean`.
pub fn ipm_craft(benign_mean: &ParamVec, epsilon: f64, m: usize) -> Result<Vec<ParamVec>> {
    if !(epsilon >= 0.0) {
        return Err(invalid("epsilon", "must be >= 0"));
    }
    if m == 0 {
        return Err(invalid("m", "must be >= 1"));
    }
    Ok(vec![benign_mean.scaled(-epsilon); m])
}

/// Directed deviation: `mu_j - sign(mu_j) z sigma_j` per coordinate, with
/// `sign(0) = 0`.
pub fn lmp_craft(benign: &[ParamVec], z: f64, m: usize) -> Result<Vec<ParamVec>> {
    if benign.len() < 2 {
        return Err(invalid("benign", "LMP needs at least 2 benign estimates"));
    }
    if !(z > 0.0) {
        return Err(invalid("z", "must be > 0"));
    }
    if m == 0 {
        return Err(invalid("m", "must be >= 1"));
    }
    let stats = BenignStats::estimate(benign)?;
    Ok(vec![lmp_from_stats(&stats, z); m])
}

fn lmp_from_stats(stats: &BenignStats, z: f64) -> ParamVec {
    ParamVec(
        stats
            .mean
            .iter()
            .zip(stats.std.iter())
            .map(|(&mu, &sd)| {
                let sign = if mu > 0.0 {
                    1.0
                } else if mu < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                mu - sign * z * sd
            })
            .collect(),
    )
}

/// Explicit boosting of an intended update.
pub fn eb_craft(intended: &ParamVec, boost: f64) -> Result<ParamVec> {
    if !(boost >= 1.0) {
        return Err(invalid("boost", "must be >= 1"));
    }
    Ok(intended.scaled(boost))
}

/// Local training on `F' = lambda F(clean) + (1 - lambda) F(poisoned)` where
/// the poisoned part is the shard's flagged samples. Returns `scale * delta`.
#[allow(clippy::too_many_arguments)]
pub fn backdoor_craft(
    spec: &ModelSpec,
    global: &[f64],
    shard: &ClientShard,
    trigger: &TriggerSpec,
    scale: f64,
    lambda: f64,
    training: &LocalTraining,
    seed: u64,
) -> Result<ParamVec> {
    if shard.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    if !(scale >= 1.0) {
        return Err(invalid("scale", "must be >= 1"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", "outside [0, 1]"));
    }
    let poisoned = shard.poisoned_samples();
    if poisoned.is_empty() {
        return Err(invalid("shard", "no triggered samples"));
    }
    for s in &poisoned {
        check_dim(trigger.mask.len(), s.features.len())?;
        if s.label != trigger.target_label {
            return Err(invalid(
                "shard",
                "poisoned sample does not carry the target label",
            ));
        }
    }
    let clean = shard.clean_samples();
    let lambda = if clean.is_empty() { 0.0 } else { lambda };
    let mut rng = seed::rng(seed);
    let delta = sgd_delta(global, training.lr, training.iterations, |p, _| {
        let pb = minibatch(&poisoned, training.batch_size, &mut rng);
        let mut g = spec.grad(p, &pb)?.scaled(1.0 - lambda);
        if lambda > 0.0 {
            let cb = minibatch(&clean, training.batch_size, &mut rng);
            g.axpy(lambda, &spec.grad(p, &cb)?);
        }
        Ok(g)
    })?;
    Ok(delta.scaled(scale))
}

fn check_action(action: &[f64]) -> Result<()> {
    check_dim(3, action.len())?;
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attack action"));
    }
    Ok(())
}

/// Untargeted RL action `(a1, a2, a3)`:
/// `a1 * (-mu) + a2 * (sigma (.) mu / |mu|) + a3 * mu`.
/// `(e, 0, 0)` is IPM with `epsilon = e`.
pub fn rl_untargeted_update(action: &[f64], stats: &BenignStats) -> Result<ParamVec> {
    check_action(action)?;
    let mu = &stats.mean;
    let norm = mu.norm();
    let mut out = mu.scaled(-action[0]);
    if action[1] != 0.0 && norm > 0.0 {
        for j in 0..out.len() {
            out[j] += action[1] * stats.std[j] * mu[j] / norm;
        }
    }
    if action[2] != 0.0 {
        out.axpy(action[2], mu);
    }
    Ok(out)
}

/// The `lambda` a backdoor RL action asks for.
pub fn rl_backdoor_lambda(action: &[f64]) -> f64 {
    action[1].clamp(0.0, 1.0)
}

/// Backdoor RL action `(a1, a2, a3)` applied to the update `g_bd` trained
/// with `lambda = a2`: boost by `max(1, a1)` and cap the norm at `a3`
/// (norm mimicry; `a3 <= 0` disables the cap).
pub fn rl_backdoor_update(action: &[f64], backdoor_update: &ParamVec) -> Result<ParamVec> {
    check_action(action)?;
    let boosted = if action[0] > 1.0 {
        backdoor_update.scaled(action[0])
    } else {
        backdoor_update.clone()
    };
    let norm = boosted.norm();
    if action[2] > 0.0 && norm > action[2] {
        Ok(boosted.scaled(action[2] / norm))
    } else {
        Ok(boosted)
    }
}

/// Which attacker group an RL action drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlGroup {
    Untargeted,
    Backdoor,
}

/// Inputs to [`rl_attack_apply`].
pub enum RlInputs<'a> {
    Untargeted(&'a BenignStats),
    /// Backdoor updates are produced lazily because the action picks `lambda`.
    Backdoor(&'a dyn Fn(f64) -> Result<ParamVec>),
}

/// Dispatches an RL action to the map of its group.
pub fn rl_attack_apply(action: &[f64], inputs: RlInputs<'_>) -> Result<ParamVec> {
    check_action(action)?;
    match inputs {
        RlInputs::Untargeted(stats) => rl_untargeted_update(action, stats),
        RlInputs::Backdoor(train) => {
            let g = train(rl_backdoor_lambda(action))?;
            rl_backdoor_update(action, &g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_dataset;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec(v.to_vec())
    }

    #[test]
    fn ipm_examples() {
        let mu = pv(&[2.0, -4.0]);
        assert!(ipm_craft(&mu, 0.0, 2)
            .unwrap()
            .iter()
            .all(|u| u.iter().all(|&v| v == 0.0)));
        let out = ipm_craft(&mu, 0.5, 3).unwrap();
        assert_eq!(out, vec![pv(&[-1.0, 2.0]); 3]);
        assert!(out[0].dot(&mu) < 0.0);
    }

    #[test]
    fn lmp_examples() {
        let out = lmp_craft(&[pv(&[1.0]), pv(&[3.0])], 1.5, 2).unwrap();
        assert_eq!(out, vec![pv(&[0.5]); 2]);
        let flat = lmp_craft(&[pv(&[2.0, -1.0]), pv(&[2.0, -1.0])], 3.0, 1).unwrap();
        assert_eq!(flat[0], pv(&[2.0, -1.0]));
        assert!(lmp_craft(&[pv(&[1.0])], 1.0, 1).is_err());
    }

    #[test]
    fn eb_examples() {
        let u = pv(&[0.6, 0.8]);
        assert_eq!(eb_craft(&u, 1.0).unwrap(), u);
        assert!((eb_craft(&u, 10.0).unwrap().norm() - 10.0).abs() < 1e-12);
        let clipped = crate::aggregation::norm_clip(&eb_craft(&u, 10.0).unwrap(), 1.0).unwrap();
        let direct = crate::aggregation::norm_clip(&u.scaled(10.0), 1.0).unwrap();
        assert_eq!(clipped, direct);
        assert!(eb_craft(&u, 0.5).is_err());
    }

    #[test]
    fn rl_untargeted_basis() {
        let stats = BenignStats {
            mean: pv(&[2.0, -4.0, 0.5]),
            std: pv(&[1.0, 0.5, 2.0]),
        };
        let zero = rl_untargeted_update(&[0.0, 0.0, 0.0], &stats).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert_eq!(
            rl_untargeted_update(&[1.0, 0.0, 0.0], &stats).unwrap(),
            ipm_craft(&stats.mean, 1.0, 1).unwrap()[0]
        );
        assert!(rl_untargeted_update(&[f64::NAN, 0.0, 0.0], &stats).is_err());
    }

    fn poisoned_shard() -> (ModelSpec, ClientShard, TriggerSpec) {
        let spec = ModelSpec::linear(4, 3);
        let trigger = TriggerSpec::tail_patch(4, 1, 5.0, 0);
        let mut shard = ClientShard::new(0, gen_synthetic_dataset(4, 3, 8, 3.0, 2).unwrap());
        shard.poison(&trigger, 0.5, 7).unwrap();
        (spec, shard, trigger)
    }

    #[test]
    fn backdoor_scale_and_null_step() {
        let (spec, shard, trigger) = poisoned_shard();
        let w = spec.init_params(0.1, 3);
        let tr = LocalTraining {
            lr: 0.1,
            iterations: 3,
            batch_size: 4,
        };
        let one = backdoor_craft(&spec, &w, &shard, &trigger, 1.0, 0.5, &tr, 9).unwrap();
        let twenty = backdoor_craft(&spec, &w, &shard, &trigger, 20.0, 0.5, &tr, 9).unwrap();
        assert_eq!(twenty, one.scaled(20.0));
        let still = LocalTraining { lr: 0.0, ..tr };
        let zero = backdoor_craft(&spec, &w, &shard, &trigger, 20.0, 0.5, &still, 9).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(backdoor_craft(
            &spec,
            &w,
            &ClientShard::new(0, vec![]),
            &trigger,
            1.0,
            0.5,
            &tr,
            9
        )
        .is_err());
        let clean = ClientShard::new(0, gen_synthetic_dataset(4, 3, 2, 3.0, 2).unwrap());
        assert!(backdoor_craft(&spec, &w, &clean, &trigger, 1.0, 0.5, &tr, 9).is_err());
    }

    #[test]
    fn rl_backdoor_rescale_identity() {
        let (spec, shard, trigger) = poisoned_shard();
        let w = spec.init_params(0.1, 3);
        let tr = LocalTraining {
            lr: 0.2,
            iterations: 2,
            batch_size: 100,
        };
        let train = |lambda: f64| backdoor_craft(&spec, &w, &shard, &trigger, 1.0, lambda, &tr, 1);
        let g_bd = train(0.0).unwrap();
        let out = rl_attack_apply(&[0.0, 0.0, g_bd.norm()], RlInputs::Backdoor(&train)).unwrap();
        assert_eq!(out, g_bd);
        let capped =
            rl_attack_apply(&[10.0, 0.0, 0.5 * g_bd.norm()], RlInputs::Backdoor(&train)).unwrap();
        assert!((capped.norm() - 0.5 * g_bd.norm()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ipm_anti_aligned(mu in prop::collection::vec(-10.0f64..10.0, 1..8), eps in 0.0f64..5.0) {
            let mu = ParamVec(mu);
            let u = &ipm_craft(&mu, eps, 1).unwrap()[0];
            let ip = u.dot(&mu);
            prop_assert!(ip <= 0.0);
            if eps > 0.0 && mu.norm() > 0.0 {
                prop_assert!(ip < 0.0);
            }
        }

        #[test]
        fn lmp_within_z_std(
            benign in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6),
            z in 0.1f64..4.0,
        ) {
            let benign: Vec<ParamVec> = benign.into_iter().map(ParamVec).collect();
            let stats = BenignStats::estimate(&benign).unwrap();
            let out = lmp_craft(&benign, z, 2).unwrap();
            prop_assert_eq!(&out[0], &out[1]);
            for j in 0..3 {
                prop_assert!((out[0][j] - stats.mean[j]).abs() <= z * stats.std[j] + 1e-12);
            }
        }

        #[test]
        fn lmp_deviation_monotone_in_z(
            benign in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6),
            z1 in 0.1f64..4.0, dz in 0.0f64..3.0,
        ) {
            let benign: Vec<ParamVec> = benign.into_iter().map(ParamVec).collect();
            let stats = BenignStats::estimate(&benign).unwrap();
            let a = &lmp_craft(&benign, z1, 1).unwrap()[0];
            let b = &lmp_craft(&benign, z1 + dz, 1).unwrap()[0];
            prop_assert!(b.sub(&stats.mean).norm() >= a.sub(&stats.mean).norm() - 1e-12);
        }
    }
}
