//! Synthetic datasets, client partitioning, trigger poisoning, and the small
//! differentiable classifiers trained by the federation.
//!
//! Parameters are flat vectors. A linear-softmax model stores `W (C x dim)`
//! row-major followed by the bias `b (C)`. The one-hidden-layer model stores
//! `W1 (h x dim)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)` with a tanh activation.
//! The output layer is `W` for the linear model and `W2` for the hidden one.

use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::seed;

/// Flat vector of model parameters or model updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ParamVec(pub Vec<f64>);

impl ParamVec {
    pub fn zeros(len: usize) -> Self {
        ParamVec(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, factor: f64) -> ParamVec {
        ParamVec(self.iter().map(|v| v * factor).collect())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += factor * b;
        }
    }

    pub fn sub(&self, other: &[f64]) -> ParamVec {
        ParamVec(self.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVec {
    fn from(v: Vec<f64>) -> Self {
        ParamVec(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One client's local data. `poisoned` runs parallel to `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub poisoned: Vec<bool>,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<Sample>) -> Self {
        let poisoned = vec![false; samples.len()];
        ClientShard {
            client_id,
            samples,
            poisoned,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.iter().any(|&p| p)
    }

    pub fn clean_samples(&self) -> Vec<Sample> {
        self.samples
            .iter()
            .zip(&self.poisoned)
            .filter(|(_, &p)| !p)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn poisoned_samples(&self) -> Vec<Sample> {
        self.samples
            .iter()
            .zip(&self.poisoned)
            .filter(|(_, &p)| p)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Replaces a `ratio` fraction of the shard by triggered copies relabeled
    /// to the target class and flags them. Samples already carrying the
    /// target label are never chosen.
    pub fn poison(&mut self, trigger: &TriggerSpec, ratio: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(invalid("ratio", format!("{ratio} outside [0, 1]")));
        }
        let mut candidates: Vec<usize> = (0..self.samples.len())
            .filter(|&i| self.samples[i].label != trigger.target_label && !self.poisoned[i])
            .collect();
        candidates.shuffle(&mut seed::rng(seed));
        let count = (ratio * self.samples.len() as f64).floor() as usize;
        for &i in candidates.iter().take(count) {
            self.samples[i] = apply_trigger(&self.samples[i], trigger)?;
            self.poisoned[i] = true;
        }
        Ok(())
    }
}

/// Backdoor trigger: masked coordinates are overwritten by `pattern` and the
/// label becomes `target_label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub mask: Vec<bool>,
    pub pattern: Vec<f64>,
    pub target_label: usize,
}

impl TriggerSpec {
    /// A trigger writing `value` into the last `width` coordinates.
    pub fn tail_patch(dim: usize, width: usize, value: f64, target_label: usize) -> Self {
        let width = width.min(dim);
        let mask: Vec<bool> = (0..dim).map(|i| i >= dim - width).collect();
        let pattern = mask.iter().map(|&m| if m { value } else { 0.0 }).collect();
        TriggerSpec {
            mask,
            pattern,
            target_label,
        }
    }

    pub fn stamp(&self, features: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.mask.len(), features.len())?;
        check_dim(self.mask.len(), self.pattern.len())?;
        Ok(features
            .iter()
            .zip(self.mask.iter().zip(&self.pattern))
            .map(|(&x, (&m, &p))| if m { p } else { x })
            .collect())
    }
}

pub fn apply_trigger(sample: &Sample, trigger: &TriggerSpec) -> Result<Sample> {
    Ok(Sample {
        features: trigger.stamp(&sample.features)?,
        label: trigger.target_label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    LinearSoftmax,
    Hidden { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub dim: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn linear(dim: usize, classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::LinearSoftmax,
            dim,
            classes,
        }
    }

    pub fn hidden(dim: usize, width: usize, classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Hidden { width },
            dim,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(invalid("classes", "must be at least 2"));
        }
        if let Architecture::Hidden { width: 0 } = self.architecture {
            return Err(invalid("width", "hidden layer must have at least one unit"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.dim, self.classes);
        match self.architecture {
            Architecture::LinearSoftmax => c * d + c,
            Architecture::Hidden { width: h } => h * d + h + c * h + c,
        }
    }

    /// Index range of the output-layer weight matrix (biases excluded).
    pub fn output_weights(&self) -> std::ops::Range<usize> {
        let (d, c) = (self.dim, self.classes);
        match self.architecture {
            Architecture::LinearSoftmax => 0..c * d,
            Architecture::Hidden { width: h } => {
                let start = h * d + h;
                start..start + c * h
            }
        }
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init_params(&self, std: f64, seed: u64) -> ParamVec {
        let mut rng = seed::rng(seed);
        let mut p = ParamVec::zeros(self.param_count());
        let (d, c) = (self.dim, self.classes);
        let weight_ranges = match self.architecture {
            #[allow(clippy::single_range_in_vec_init)]
            Architecture::LinearSoftmax => vec![0..c * d],
            Architecture::Hidden { width: h } => vec![0..h * d, self.output_weights()],
        };
        for range in weight_ranges {
            for v in &mut p[range] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
        p
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        check_dim(self.param_count(), params.len())
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        check_dim(self.dim, s.features.len())?;
        if s.label >= self.classes {
            return Err(invalid(
                "label",
                format!("{} not below class count {}", s.label, self.classes),
            ));
        }
        Ok(())
    }

    fn hidden_activations(&self, params: &[f64], x: &[f64], width: usize) -> Vec<f64> {
        let d = self.dim;
        let b1 = &params[width * d..width * d + width];
        (0..width)
            .map(|j| {
                let row = &params[j * d..(j + 1) * d];
                (dot(row, x) + b1[j]).tanh()
            })
            .collect()
    }

    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (d, c) = (self.dim, self.classes);
        match self.architecture {
            Architecture::LinearSoftmax => (0..c)
                .map(|k| dot(&params[k * d..(k + 1) * d], x) + params[c * d + k])
                .collect(),
            Architecture::Hidden { width: h } => {
                let hid = self.hidden_activations(params, x, h);
                let w2 = h * d + h;
                let b2 = w2 + c * h;
                (0..c)
                    .map(|k| dot(&params[w2 + k * h..w2 + (k + 1) * h], &hid) + params[b2 + k])
                    .collect()
            }
        }
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        argmax(&self.logits(params, x))
    }

    /// Cross-entropy of one sample under the given label, gradient optionally
    /// accumulated into `grad` with weight `weight`.
    fn sample_loss(
        &self,
        params: &[f64],
        x: &[f64],
        label: usize,
        grad: Option<(&mut [f64], f64)>,
    ) -> f64 {
        let (d, c) = (self.dim, self.classes);
        let hidden = match self.architecture {
            Architecture::Hidden { width } => {
                Some((width, self.hidden_activations(params, x, width)))
            }
            Architecture::LinearSoftmax => None,
        };
        let z = match &hidden {
            None => self.logits(params, x),
            Some((h, hid)) => {
                let w2 = h * d + h;
                let b2 = w2 + c * h;
                (0..c)
                    .map(|k| dot(&params[w2 + k * h..w2 + (k + 1) * h], hid) + params[b2 + k])
                    .collect()
            }
        };
        let lse = log_sum_exp(&z);
        let loss = lse - z[label];
        if let Some((g, weight)) = grad {
            let dz: Vec<f64> = (0..c)
                .map(|k| {
                    let p = (z[k] - lse).exp();
                    weight * (p - if k == label { 1.0 } else { 0.0 })
                })
                .collect();
            match hidden {
                None => {
                    for k in 0..c {
                        for j in 0..d {
                            g[k * d + j] += dz[k] * x[j];
                        }
                        g[c * d + k] += dz[k];
                    }
                }
                Some((h, hid)) => {
                    let w2 = h * d + h;
                    let b2 = w2 + c * h;
                    for k in 0..c {
                        for j in 0..h {
                            g[w2 + k * h + j] += dz[k] * hid[j];
                        }
                        g[b2 + k] += dz[k];
                    }
                    for j in 0..h {
                        let back: f64 = (0..c).map(|k| params[w2 + k * h + j] * dz[k]).sum();
                        let da = back * (1.0 - hid[j] * hid[j]);
                        for i in 0..d {
                            g[j * d + i] += da * x[i];
                        }
                        g[h * d + j] += da;
                    }
                }
            }
        }
        loss
    }

    /// Mean cross-entropy over `samples` (the loss `F`).
    pub fn loss(&self, params: &[f64], samples: &[Sample]) -> Result<f64> {
        self.check_params(params)?;
        if samples.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let mut total = 0.0;
        for s in samples {
            self.check_sample(s)?;
            total += self.sample_loss(params, &s.features, s.label, None);
        }
        Ok(total / samples.len() as f64)
    }

    /// Mean cross-entropy of `inputs` all relabeled to `label`.
    pub fn relabeled_loss(&self, params: &[f64], inputs: &[Vec<f64>], label: usize) -> Result<f64> {
        self.check_params(params)?;
        if inputs.is_empty() {
            return Err(Error::Empty("input set"));
        }
        if label >= self.classes {
            return Err(invalid("label", "outside class range"));
        }
        let mut total = 0.0;
        for x in inputs {
            check_dim(self.dim, x.len())?;
            total += self.sample_loss(params, x, label, None);
        }
        Ok(total / inputs.len() as f64)
    }

    /// Exact gradient of [`ModelSpec::loss`].
    pub fn grad(&self, params: &[f64], samples: &[Sample]) -> Result<ParamVec> {
        self.check_params(params)?;
        if samples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut g = ParamVec::zeros(params.len());
        let w = 1.0 / samples.len() as f64;
        for s in samples {
            self.check_sample(s)?;
            self.sample_loss(params, &s.features, s.label, Some((&mut g, w)));
        }
        Ok(g)
    }

    pub fn accuracy(&self, params: &[f64], samples: &[Sample]) -> Result<f64> {
        self.check_params(params)?;
        if samples.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let hits = samples
            .iter()
            .filter(|s| self.predict(params, &s.features) == s.label)
            .count();
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Fraction of `inputs` classified as `target`.
    pub fn target_rate(&self, params: &[f64], inputs: &[Vec<f64>], target: usize) -> Result<f64> {
        self.check_params(params)?;
        if inputs.is_empty() {
            return Err(Error::Empty("input set"));
        }
        let hits = inputs
            .iter()
            .filter(|x| self.predict(params, x) == target)
            .count();
        Ok(hits as f64 / inputs.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `F`: mean cross-entropy.
pub fn loss_f(spec: &ModelSpec, params: &[f64], samples: &[Sample]) -> Result<f64> {
    spec.loss(params, samples)
}

/// `F' = lambda * F(clean) + (1 - lambda) * F(poisoned)`.
pub fn loss_f_prime(
    spec: &ModelSpec,
    params: &[f64],
    clean: &[Sample],
    poisoned: &[Sample],
    lambda: f64,
) -> Result<f64> {
    check_unit("lambda", lambda)?;
    // Boundary weights skip the unused term so that an empty side is allowed.
    if lambda == 1.0 {
        return spec.loss(params, clean);
    }
    if lambda == 0.0 {
        return spec.loss(params, poisoned);
    }
    Ok(lambda * spec.loss(params, clean)? + (1.0 - lambda) * spec.loss(params, poisoned)?)
}

/// Backdoor-aware loss when the target label is unknown:
/// `lambda' * F(clean) - (1 - lambda') * min_c mean loss(triggered, c)`.
pub fn loss_f_dprime(
    spec: &ModelSpec,
    params: &[f64],
    clean: &[Sample],
    triggered: &[Vec<f64>],
    lambda_prime: f64,
) -> Result<f64> {
    check_unit("lambda_prime", lambda_prime)?;
    if triggered.is_empty() {
        return Err(Error::Empty("trigger set"));
    }
    let min_term = min_relabeled_loss(spec, params, triggered)?;
    if lambda_prime == 1.0 {
        return spec.loss(params, clean);
    }
    Ok(lambda_prime * spec.loss(params, clean)? - (1.0 - lambda_prime) * min_term)
}

/// `min_c mean loss(triggered, c)` over every class.
pub fn min_relabeled_loss(spec: &ModelSpec, params: &[f64], triggered: &[Vec<f64>]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for c in 0..spec.classes {
        best = best.min(spec.relabeled_loss(params, triggered, c)?);
    }
    Ok(best)
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(name, format!("{v} outside [0, 1]")));
    }
    Ok(())
}

/// Local SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTraining {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for LocalTraining {
    fn default() -> Self {
        LocalTraining {
            lr: 0.05,
            iterations: 1,
            batch_size: 128,
        }
    }
}

/// Draws a minibatch. A batch at least as large as the set is the set itself,
/// in its original order.
pub(crate) fn minibatch<R: Rng>(samples: &[Sample], batch_size: usize, rng: &mut R) -> Vec<Sample> {
    if batch_size >= samples.len() {
        return samples.to_vec();
    }
    rand::seq::index::sample(rng, samples.len(), batch_size)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect()
}

/// Runs `iterations` SGD steps from `global` and returns the accumulated
/// delta `global - params_after`.
pub(crate) fn sgd_delta<F>(
    global: &[f64],
    lr: f64,
    iterations: usize,
    mut batch_grad: F,
) -> Result<ParamVec>
where
    F: FnMut(&[f64], usize) -> Result<ParamVec>,
{
    let mut delta = ParamVec::zeros(global.len());
    let mut params = global.to_vec();
    for it in 0..iterations {
        let g = batch_grad(&params, it)?;
        delta.axpy(lr, &g);
        for (p, (w, d)) in params.iter_mut().zip(global.iter().zip(delta.iter())) {
            *p = w - d;
        }
    }
    Ok(delta)
}

/// Benign local training; returns the update `g = global - params_after`.
pub fn local_update(
    spec: &ModelSpec,
    global: &[f64],
    shard: &ClientShard,
    training: &LocalTraining,
    seed: u64,
) -> Result<ParamVec> {
    if shard.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    spec.check_params(global)?;
    let mut rng = seed::rng(seed);
    sgd_delta(global, training.lr, training.iterations, |p, _| {
        let batch = minibatch(&shard.samples, training.batch_size, &mut rng);
        spec.grad(p, &batch)
    })
}

/// Gaussian blobs: `classes` clusters of `n_per_class` points with unit
/// per-coordinate noise. Centers sit on coordinate axes at distances chosen
/// so every pair of centers is at least `separation` apart.
pub fn gen_synthetic_dataset(
    dim: usize,
    classes: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if dim == 0 {
        return Err(invalid("dim", "must be at least 1"));
    }
    if classes < 2 {
        return Err(invalid("classes", "must be at least 2"));
    }
    if n_per_class == 0 {
        return Err(invalid("n_per_class", "must be at least 1"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(invalid("separation", "must be positive"));
    }
    let centers = class_centers(dim, classes, separation);
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(classes * n_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let features = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            out.push(Sample { features, label });
        }
    }
    Ok(out)
}

/// Class `c` sits on axis `c mod dim` at radius `(1 + c / dim) * sep`.
/// Centers on different axes are `sqrt(2) * sep` or more apart and same-axis
/// neighbors exactly `sep`.
pub fn class_centers(dim: usize, classes: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            m[c % dim] = (1 + c / dim) as f64 * separation;
            m
        })
        .collect()
}

/// Non-i.i.d. partition. Clients form `groups` equal groups; a sample with
/// label `c` goes to group `c mod groups` with probability `q` and otherwise
/// to a uniformly random group. Inside a group the client is uniform.
pub fn split_non_iid(
    dataset: &[Sample],
    n_clients: usize,
    groups: usize,
    q: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    check_unit("q", q)?;
    if groups == 0 || n_clients == 0 || !n_clients.is_multiple_of(groups) {
        return Err(invalid(
            "n_clients",
            format!("{n_clients} clients cannot form {groups} equal groups"),
        ));
    }
    let per_group = n_clients / groups;
    let mut rng = seed::rng(seed);
    let mut shards: Vec<ClientShard> = (0..n_clients)
        .map(|i| ClientShard::new(i, Vec::new()))
        .collect();
    for s in dataset {
        let group = if rng.random::<f64>() < q {
            s.label % groups
        } else {
            rng.random_range(0..groups)
        };
        let client = group * per_group + rng.random_range(0..per_group);
        shards[client].samples.push(s.clone());
        shards[client].poisoned.push(false);
    }
    Ok(shards)
}

/// Writes a dataset dump: a `#dim=..,classes=..` header, then one sample per
/// line as `features..,label,poisoned` with `poisoned` in {0, 1}.
pub fn dump_samples(
    dim: usize,
    classes: usize,
    samples: &[Sample],
    poisoned: Option<&[bool]>,
) -> String {
    let mut out = format!("#dim={dim},classes={classes}\n");
    for (i, s) in samples.iter().enumerate() {
        for x in &s.features {
            let _ = write!(out, "{x},");
        }
        let flag = poisoned.map(|p| p[i]).unwrap_or(false) as u8;
        let _ = writeln!(out, "{},{flag}", s.label);
    }
    out
}

/// Parses [`dump_samples`] output into `(dim, classes, samples, flags)`.
pub fn parse_samples(text: &str) -> Result<(usize, usize, Vec<Sample>, Vec<bool>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Empty("dataset dump"))?;
    let parse_err = |line: usize, reason: &str| Error::Parse {
        line: line + 1,
        reason: reason.to_string(),
    };
    let header = header
        .strip_prefix("#dim=")
        .ok_or_else(|| parse_err(0, "missing #dim= header"))?;
    let (dim, classes) = header
        .split_once(",classes=")
        .ok_or_else(|| parse_err(0, "missing classes"))?;
    let dim: usize = dim.parse().map_err(|_| parse_err(0, "bad dim"))?;
    let classes: usize = classes.parse().map_err(|_| parse_err(0, "bad classes"))?;
    let mut samples = Vec::new();
    let mut flags = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(n, "wrong field count"));
        }
        let features = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(n, "bad feature")))
            .collect::<Result<Vec<_>>>()?;
        let label: usize = fields[dim].parse().map_err(|_| parse_err(n, "bad label"))?;
        if label >= classes {
            return Err(parse_err(n, "label outside class range"));
        }
        let flag = match fields[dim + 1] {
            "0" => false,
            "1" => true,
            _ => return Err(parse_err(n, "bad poisoned flag")),
        };
        samples.push(Sample { features, label });
        flags.push(flag);
    }
    Ok((dim, classes, samples, flags))
}
