//! Robust aggregation and post-training repair.
//!
//! Every operator works in update (delta) space: the server computes
//! `w_next = w - aggregate(updates)`. The defender's action parameterizes the
//! operators directly: `(b, a, c)` for the untargeted pipeline and
//! `(d, a, e | f)` for the backdoor pipeline.

pub mod reference;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Architecture, ModelSpec, ParamVec};
use crate::error::{check_dim, invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseMode {
    Untargeted,
    Backdoor,
    Mixed,
}

/// Untargeted pipeline parameters `(b, a, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UntargetedDefense {
    /// Per-side trim fraction `b` in `[0, 0.5)`.
    pub trim_fraction: f64,
    /// Norm bound `a`; infinity disables clipping.
    pub norm_bound: f64,
    /// FoolsGold cosine threshold `c` in `[-1, 1]`.
    pub cosine_threshold: f64,
}

/// Post-training repair applied to the final global model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PostDefense {
    NeuronClip { range: f64 },
    Prune { rate: f64 },
}

/// Backdoor pipeline parameters `(d, a, e | f)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdoorDefense {
    /// Gaussian noise variance `d`.
    pub noise_variance: f64,
    pub norm_bound: f64,
    #[serde(default)]
    pub post: Option<PostDefense>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseAction {
    pub mode: DefenseMode,
    pub untargeted: UntargetedDefense,
    pub backdoor: BackdoorDefense,
}

impl DefenseAction {
    /// All components at their identity setting: the plain mean.
    pub fn open(mode: DefenseMode) -> Self {
        DefenseAction {
            mode,
            untargeted: UntargetedDefense {
                trim_fraction: 0.0,
                norm_bound: f64::INFINITY,
                cosine_threshold: 1.0,
            },
            backdoor: BackdoorDefense {
                noise_variance: 0.0,
                norm_bound: f64::INFINITY,
                post: None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let u = &self.untargeted;
        if !(0.0..0.5).contains(&u.trim_fraction) {
            return Err(invalid(
                "b",
                format!("{} outside [0, 0.5)", u.trim_fraction),
            ));
        }
        if !(u.norm_bound > 0.0) || !(self.backdoor.norm_bound > 0.0) {
            return Err(invalid("a", "norm bound must be positive"));
        }
        if !(-1.0..=1.0).contains(&u.cosine_threshold) {
            return Err(invalid(
                "c",
                format!("{} outside [-1, 1]", u.cosine_threshold),
            ));
        }
        if !(self.backdoor.noise_variance >= 0.0) || !self.backdoor.noise_variance.is_finite() {
            return Err(invalid(
                "d",
                "noise variance must be finite and non-negative",
            ));
        }
        match self.backdoor.post {
            Some(PostDefense::NeuronClip { range }) if !(range > 0.0) => {
                Err(invalid("e", "clip range must be positive"))
            }
            Some(PostDefense::Prune { rate }) if !(0.0..=1.0).contains(&rate) => {
                Err(invalid("f", format!("{rate} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

fn check_updates(updates: &[ParamVec]) -> Result<usize> {
    let first = updates.first().ok_or(Error::Empty("update set"))?;
    for u in updates {
        check_dim(first.len(), u.len())?;
    }
    Ok(first.len())
}

pub fn mean(updates: &[ParamVec]) -> Result<ParamVec> {
    let dim = check_updates(updates)?;
    let mut out = ParamVec::zeros(dim);
    for u in updates {
        out.axpy(1.0, u);
    }
    let n = updates.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Number of values dropped from each side for trim fraction `b`.
pub fn trim_count(b: f64, n: usize) -> usize {
    (b * n as f64).floor() as usize
}

/// Coordinate-wise trimmed mean: drop the `floor(b n)` largest and smallest
/// values per coordinate and average the rest.
pub fn trimmed_mean(updates: &[ParamVec], b: f64) -> Result<ParamVec> {
    let weights = vec![1.0; updates.len()];
    weighted_trimmed_mean(updates, &weights, b)
}

/// Trimmed mean whose surviving values are averaged with per-update weights.
/// A coordinate whose survivors all carry zero weight aggregates to zero.
pub fn weighted_trimmed_mean(updates: &[ParamVec], weights: &[f64], b: f64) -> Result<ParamVec> {
    let dim = check_updates(updates)?;
    check_dim(updates.len(), weights.len())?;
    if !(0.0..0.5).contains(&b) {
        return Err(invalid("b", format!("{b} outside [0, 0.5)")));
    }
    let n = updates.len();
    let k = trim_count(b, n);
    if 2 * k >= n {
        return Err(invalid(
            "b",
            format!("trimming {k} per side leaves nothing of {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let out = (0..dim)
        .map(|j| {
            order.sort_by(|&x, &y| updates[x][j].total_cmp(&updates[y][j]).then(x.cmp(&y)));
            let (mut num, mut den) = (0.0, 0.0);
            for &i in &order[k..n - k] {
                num += weights[i] * updates[i][j];
                den += weights[i];
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    Ok(ParamVec(out))
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn coordinate_median(updates: &[ParamVec]) -> Result<ParamVec> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    let mut column = vec![0.0; n];
    let out = (0..dim)
        .map(|j| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u[j];
            }
            column.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect();
    Ok(ParamVec(out))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: for each update, the summed squared distance to its
/// `n - f - 2` nearest other updates.
pub fn krum_scores(updates: &[ParamVec], byzantine: usize) -> Result<Vec<f64>> {
    check_updates(updates)?;
    let n = updates.len();
    if n < byzantine + 3 {
        return Err(invalid(
            "f_count",
            format!("krum needs n >= f + 3, got n = {n}, f = {byzantine}"),
        ));
    }
    let m = n - byzantine - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&updates[i], &updates[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut row = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            row.clear();
            row.extend((0..n).filter(|&j| j != i).map(|j| dist[i * n + j]));
            row.select_nth_unstable_by(m - 1, f64::total_cmp);
            row[..m].iter().sum()
        })
        .collect())
}

/// Krum selection; ties go to the lowest index.
pub fn krum(updates: &[ParamVec], byzantine: usize) -> Result<(ParamVec, usize)> {
    let scores = krum_scores(updates, byzantine)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((updates[best].clone(), best))
}

/// Projects `update` onto the l2 ball of radius `a`.
pub fn norm_clip(update: &ParamVec, a: f64) -> Result<ParamVec> {
    if !(a > 0.0) {
        return Err(invalid("a", format!("norm bound {a} must be positive")));
    }
    let norm = update.norm();
    if norm <= a {
        Ok(update.clone())
    } else {
        Ok(update.scaled(a / norm))
    }
}

/// FoolsGold-style weights plus the indices whose history had zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FoolsGoldWeights {
    pub weights: Vec<f64>,
    pub zero_norm: Vec<usize>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Client `i` with maximal cosine `s_i` to any other history keeps weight 1
/// when `s_i <= c` and otherwise gets `max(0, (1 - s_i) / (1 - c))`.
pub fn foolsgold_weights(history: &[ParamVec], c: f64) -> Result<FoolsGoldWeights> {
    check_updates(history)?;
    if !(-1.0..=1.0).contains(&c) {
        return Err(invalid("c", format!("{c} outside [-1, 1]")));
    }
    let n = history.len();
    let zero_norm: Vec<usize> = (0..n).filter(|&i| history[i].norm() == 0.0).collect();
    if !zero_norm.is_empty() {
        log::warn!("foolsgold: zero-norm history for clients {zero_norm:?}; weight fixed at 1");
    }
    let weights = (0..n)
        .map(|i| {
            if n < 2 || zero_norm.contains(&i) {
                return 1.0;
            }
            let s = (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine(&history[i], &history[j]))
                .fold(f64::NEG_INFINITY, f64::max);
            if s <= c {
                1.0
            } else {
                ((1.0 - s) / (1.0 - c)).max(0.0)
            }
        })
        .collect();
    Ok(FoolsGoldWeights { weights, zero_norm })
}

/// Adds i.i.d. zero-mean Gaussian noise of variance `d` to every coordinate.
pub fn add_gaussian_noise(update: &ParamVec, d: f64, seed: u64) -> Result<ParamVec> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(invalid(
            "d",
            format!("noise variance {d} must be finite and >= 0"),
        ));
    }
    if d == 0.0 {
        return Ok(update.clone());
    }
    let normal = Normal::new(0.0, d.sqrt()).map_err(|e| invalid("d", e.to_string()))?;
    let mut rng = seed::rng(seed);
    Ok(ParamVec(
        update.iter().map(|v| v + normal.sample(&mut rng)).collect(),
    ))
}

/// Bounds each hidden neuron's outgoing weight vector to l2 norm `e`.
/// Linear models have no hidden neurons; their weights are clamped to `[-e, e]`.
pub fn neuron_clip(params: &ParamVec, e: f64, spec: &ModelSpec) -> Result<ParamVec> {
    if !(e > 0.0) {
        return Err(invalid("e", format!("clip range {e} must be positive")));
    }
    check_dim(spec.param_count(), params.len())?;
    let mut out = params.clone();
    match spec.architecture {
        Architecture::LinearSoftmax => {
            for v in &mut out[spec.output_weights()] {
                *v = v.clamp(-e, e);
            }
        }
        Architecture::Hidden { width: h } => {
            let w2 = spec.output_weights().start;
            for j in 0..h {
                let idx: Vec<usize> = (0..spec.classes).map(|k| w2 + k * h + j).collect();
                let norm = idx.iter().map(|&i| out[i] * out[i]).sum::<f64>().sqrt();
                if norm > e {
                    let scale = e / norm;
                    for i in idx {
                        out[i] *= scale;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Zeroes the `floor(f L)` smallest-magnitude output-layer weights.
pub fn prune(params: &ParamVec, f: f64, spec: &ModelSpec) -> Result<ParamVec> {
    if !(0.0..=1.0).contains(&f) {
        return Err(invalid("f", format!("prune rate {f} outside [0, 1]")));
    }
    check_dim(spec.param_count(), params.len())?;
    let range = spec.output_weights();
    let count = (f * range.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = range.collect();
    idx.sort_by(|&x, &y| params[x].abs().total_cmp(&params[y].abs()).then(x.cmp(&y)));
    let mut out = params.clone();
    for &i in idx.iter().take(count) {
        out[i] = 0.0;
    }
    Ok(out)
}

/// Runs the training-stage pipeline selected by `action.mode`:
///
/// * untargeted: clip to `a` -> FoolsGold weights with `c` -> weighted trimmed mean with `b`
/// * backdoor: clip to `a` -> mean -> Gaussian noise with variance `d`
/// * mixed: clip to `min(a_untargeted, a_backdoor)` -> FoolsGold -> trimmed mean -> noise
///
/// `history` holds each submitting client's accumulated update, aligned with
/// `updates`.
pub fn apply_defense(
    action: &DefenseAction,
    updates: &[ParamVec],
    history: &[ParamVec],
    seed: u64,
) -> Result<ParamVec> {
    action.validate()?;
    check_updates(updates)?;
    let bound = match action.mode {
        DefenseMode::Untargeted => action.untargeted.norm_bound,
        DefenseMode::Backdoor => action.backdoor.norm_bound,
        DefenseMode::Mixed => action.untargeted.norm_bound.min(action.backdoor.norm_bound),
    };
    let clipped = updates
        .iter()
        .map(|u| norm_clip(u, bound))
        .collect::<Result<Vec<_>>>()?;
    let robust = |clipped: &[ParamVec]| -> Result<ParamVec> {
        check_dim(clipped.len(), history.len())?;
        let weights = if clipped.len() >= 2 {
            foolsgold_weights(history, action.untargeted.cosine_threshold)?.weights
        } else {
            vec![1.0; clipped.len()]
        };
        weighted_trimmed_mean(clipped, &weights, action.untargeted.trim_fraction)
    };
    match action.mode {
        DefenseMode::Untargeted => robust(&clipped),
        DefenseMode::Backdoor => {
            add_gaussian_noise(&mean(&clipped)?, action.backdoor.noise_variance, seed)
        }
        DefenseMode::Mixed => {
            add_gaussian_noise(&robust(&clipped)?, action.backdoor.noise_variance, seed)
        }
    }
}

/// Applies the configured post-training repair `h(w)`.
pub fn post_train(action: &DefenseAction, params: &ParamVec, spec: &ModelSpec) -> Result<ParamVec> {
    match action.backdoor.post {
        Some(PostDefense::NeuronClip { range }) => neuron_clip(params, range, spec),
        Some(PostDefense::Prune { rate }) => prune(params, rate, spec),
        None => Err(invalid("post", "no post-training defense configured")),
    }
}

/// Server aggregation rule: an RL-parameterized defense action or one of the
/// classical fixed baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum AggregationRule {
    Mean,
    TrimmedMean {
        trim_fraction: f64,
    },
    Median,
    /// Norm clipping followed by the coordinate-wise median.
    ClippingMedian {
        norm_bound: f64,
    },
    Krum {
        byzantine: usize,
    },
    Defense {
        action: DefenseAction,
    },
}

impl AggregationRule {
    pub fn aggregate(
        &self,
        updates: &[ParamVec],
        history: &[ParamVec],
        seed: u64,
    ) -> Result<ParamVec> {
        match self {
            AggregationRule::Mean => mean(updates),
            AggregationRule::TrimmedMean { trim_fraction } => trimmed_mean(updates, *trim_fraction),
            AggregationRule::Median => coordinate_median(updates),
            AggregationRule::ClippingMedian { norm_bound } => {
                let clipped = updates
                    .iter()
                    .map(|u| norm_clip(u, *norm_bound))
                    .collect::<Result<Vec<_>>>()?;
                coordinate_median(&clipped)
            }
            AggregationRule::Krum { byzantine } => {
                // Krum degrades to the median when too few updates arrive.
                if updates.len() < byzantine + 3 {
                    coordinate_median(updates)
                } else {
                    Ok(krum(updates, *byzantine)?.0)
                }
            }
            AggregationRule::Defense { action } => apply_defense(action, updates, history, seed),
        }
    }

    pub fn post_defense(&self) -> Option<DefenseAction> {
        match self {
            AggregationRule::Defense { action } if action.backdoor.post.is_some() => Some(*action),
            _ => None,
        }
    }
}
