//! Small games with closed-form optima, used to check the learning
//! algorithms independently of federated training.
//!
//! Every player observes the constant feature `[1.0]`, so an affine policy's
//! mean is the sum of its weight and bias.

use serde::{Deserialize, Serialize};

use super::{MarkovGame, StepInfo, Transition};
use crate::error::{check_dim, invalid, Error, Result};

const OBS: [f64; 1] = [1.0];

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid("gamma", format!("{gamma} outside (0, 1)")));
    }
    Ok(())
}

fn check_action(dim: usize, a: &[f64]) -> Result<()> {
    check_dim(dim, a.len())?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyState {
    pub xi: usize,
    pub round: usize,
}

/// Defender-only task family: type `xi` pays `-(a - centers[xi])^2` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTasks {
    pub centers: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

impl QuadraticTasks {
    pub fn new(centers: Vec<f64>, horizon: usize) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Empty("task centers"));
        }
        if horizon == 0 {
            return Err(invalid("horizon", "must be positive"));
        }
        Ok(QuadraticTasks {
            centers,
            horizon,
            gamma: 0.9,
        })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        Ok(self)
    }
}

impl MarkovGame for QuadraticTasks {
    type State = ToyState;

    fn type_count(&self) -> usize {
        self.centers.len()
    }
    fn max_horizon(&self) -> usize {
        self.horizon
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn defender_action_dim(&self) -> usize {
        1
    }
    fn attacker_action_dim(&self, _xi: usize) -> usize {
        0
    }
    fn reset(&self, xi: usize, _seed: u64) -> Result<ToyState> {
        if xi >= self.centers.len() {
            return Err(invalid("xi", "unknown type"));
        }
        Ok(ToyState { xi, round: 0 })
    }
    fn defender_obs(&self, _state: &ToyState) -> Vec<f64> {
        OBS.to_vec()
    }
    fn attacker_obs(&self, _state: &ToyState) -> Vec<f64> {
        Vec::new()
    }
    fn step(
        &self,
        state: &mut ToyState,
        defender: &[f64],
        _attacker: &[f64],
    ) -> Result<Transition> {
        if state.round >= self.horizon {
            return Err(Error::RoundOverflow {
                round: state.round,
                horizon: self.horizon,
            });
        }
        check_action(1, defender)?;
        state.round += 1;
        Ok(Transition {
            r_d: -(defender[0] - self.centers[state.xi]).powi(2),
            r_a: 0.0,
            info: StepInfo::default(),
        })
    }
}

/// Two-player one-shot game. Type `xi` of the attacker wants to play
/// `targets[xi] + coupling * a_D`; the defender wants to match the attacker:
///
/// * `r_A = -(a_A - targets[xi] - coupling * a_D)^2`
/// * `r_D = -(a_D - a_A)^2`
///
/// Against a defender with mean action `m`, the attacker's best response
/// mean is `targets[xi] + coupling * m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearGame {
    pub targets: Vec<f64>,
    pub coupling: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl BilinearGame {
    pub fn new(targets: Vec<f64>, coupling: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Empty("attacker targets"));
        }
        if !coupling.is_finite() {
            return Err(Error::NonFinite("coupling"));
        }
        Ok(BilinearGame {
            targets,
            coupling,
            horizon: 1,
            gamma: 0.9,
        })
    }

    pub fn best_response_mean(&self, xi: usize, defender_mean: f64) -> f64 {
        self.targets[xi] + self.coupling * defender_mean
    }
}

impl MarkovGame for BilinearGame {
    type State = ToyState;

    fn type_count(&self) -> usize {
        self.targets.len()
    }
    fn max_horizon(&self) -> usize {
        self.horizon
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn defender_action_dim(&self) -> usize {
        1
    }
    fn attacker_action_dim(&self, _xi: usize) -> usize {
        1
    }
    fn reset(&self, xi: usize, _seed: u64) -> Result<ToyState> {
        if xi >= self.targets.len() {
            return Err(invalid("xi", "unknown type"));
        }
        Ok(ToyState { xi, round: 0 })
    }
    fn defender_obs(&self, _state: &ToyState) -> Vec<f64> {
        OBS.to_vec()
    }
    fn attacker_obs(&self, _state: &ToyState) -> Vec<f64> {
        OBS.to_vec()
    }
    fn step(&self, state: &mut ToyState, defender: &[f64], attacker: &[f64]) -> Result<Transition> {
        if state.round >= self.horizon {
            return Err(Error::RoundOverflow {
                round: state.round,
                horizon: self.horizon,
            });
        }
        check_action(1, defender)?;
        check_action(1, attacker)?;
        state.round += 1;
        let (d, a) = (defender[0], attacker[0]);
        Ok(Transition {
            r_d: -(d - a).powi(2),
            r_a: -(a - self.targets[state.xi] - self.coupling * d).powi(2),
            info: StepInfo::default(),
        })
    }
}

/// One arm of [`GaussianBandit`]: pays `-curvature (a - center)^2 + slope a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditArm {
    pub curvature: f64,
    pub center: f64,
    pub slope: f64,
}

/// Single-step, single-type bandit with one action dimension per arm; the
/// reward is the sum of the arms' payoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBandit {
    pub arms: Vec<BanditArm>,
    pub gamma: f64,
}

impl GaussianBandit {
    pub fn new(arms: Vec<BanditArm>, gamma: f64) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::Empty("bandit arms"));
        }
        check_gamma(gamma)?;
        Ok(GaussianBandit { arms, gamma })
    }
}

impl MarkovGame for GaussianBandit {
    type State = ToyState;

    fn type_count(&self) -> usize {
        1
    }
    fn max_horizon(&self) -> usize {
        1
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn defender_action_dim(&self) -> usize {
        self.arms.len()
    }
    fn attacker_action_dim(&self, _xi: usize) -> usize {
        0
    }
    fn reset(&self, xi: usize, _seed: u64) -> Result<ToyState> {
        if xi != 0 {
            return Err(invalid("xi", "the bandit has a single type"));
        }
        Ok(ToyState { xi, round: 0 })
    }
    fn defender_obs(&self, _state: &ToyState) -> Vec<f64> {
        OBS.to_vec()
    }
    fn attacker_obs(&self, _state: &ToyState) -> Vec<f64> {
        Vec::new()
    }
    fn step(
        &self,
        state: &mut ToyState,
        defender: &[f64],
        _attacker: &[f64],
    ) -> Result<Transition> {
        if state.round >= 1 {
            return Err(Error::RoundOverflow {
                round: state.round,
                horizon: 1,
            });
        }
        check_action(self.arms.len(), defender)?;
        state.round += 1;
        let r = self
            .arms
            .iter()
            .zip(defender)
            .map(|(arm, a)| -arm.curvature * (a - arm.center).powi(2) + arm.slope * a)
            .sum();
        Ok(Transition {
            r_d: r,
            r_a: 0.0,
            info: StepInfo::default(),
        })
    }
}
