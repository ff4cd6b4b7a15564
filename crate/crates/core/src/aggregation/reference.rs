//! Brute-force reference implementations of the aggregation rules and the
//! randomized equivalence suite that checks the production operators
//! against them.
//!
//! These are written independently of the production code paths: every
//! coordinate is fully sorted and every Krum score recomputes its distances
//! from scratch.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ParamVec;
use crate::seed;

pub fn trimmed_mean(updates: &[ParamVec], b: f64) -> Vec<f64> {
    let n = updates.len();
    let k = (b * n as f64).floor() as usize;
    (0..updates[0].len())
        .map(|j| {
            let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let kept = &col[k..n - k];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

pub fn median(updates: &[ParamVec]) -> Vec<f64> {
    let n = updates.len();
    (0..updates[0].len())
        .map(|j| {
            let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect()
}

pub fn krum_scores(updates: &[ParamVec], byzantine: usize) -> Vec<f64> {
    let n = updates.len();
    let m = n - byzantine - 2;
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..updates[i].len() {
                        let diff = updates[i][c] - updates[j][c];
                        s += diff * diff;
                    }
                    s
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[..m].iter().sum()
        })
        .collect()
}

pub fn krum_index(updates: &[ParamVec], byzantine: usize) -> usize {
    let scores = krum_scores(updates, byzantine);
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub max_error: f64,
}

/// A random instance: `n` in `[3, 30]`, `dim` in `[1, 50]`, standard normal
/// entries scaled by a random magnitude.
pub fn random_instance<R: Rng>(rng: &mut R) -> Vec<ParamVec> {
    let n = rng.random_range(3..=30);
    let dim = rng.random_range(1..=50);
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    (0..n)
        .map(|_| {
            ParamVec(
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        scale * z
                    })
                    .collect(),
            )
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs trimmed mean, median, and Krum against the references on
/// `instances` random inputs each.
pub fn equivalence_suite(instances: usize, tolerance: f64, seed: u64) -> Vec<SuiteResult> {
    let mut rng = seed::rng(seed);
    let mut tm = SuiteResult {
        name: "trimmed_mean",
        passed: 0,
        failed: 0,
        max_error: 0.0,
    };
    let mut md = SuiteResult {
        name: "coordinate_median",
        passed: 0,
        failed: 0,
        max_error: 0.0,
    };
    let mut kr = SuiteResult {
        name: "krum",
        passed: 0,
        failed: 0,
        max_error: 0.0,
    };
    let tally = |r: &mut SuiteResult, ok: bool, err: f64| {
        r.max_error = r.max_error.max(err);
        if ok {
            r.passed += 1;
        } else {
            r.failed += 1;
        }
    };
    for _ in 0..instances {
        let ups = random_instance(&mut rng);
        let n = ups.len();
        let b = rng.random_range(0.0..0.5);
        if 2 * super::trim_count(b, n) < n {
            let err = match super::trimmed_mean(&ups, b) {
                Ok(out) => max_abs_diff(&out, &trimmed_mean(&ups, b)),
                Err(_) => f64::INFINITY,
            };
            tally(&mut tm, err <= tolerance, err);
        } else {
            // Rejected inputs must be rejected.
            tally(&mut tm, super::trimmed_mean(&ups, b).is_err(), 0.0);
        }

        let err = match super::coordinate_median(&ups) {
            Ok(out) => max_abs_diff(&out, &median(&ups)),
            Err(_) => f64::INFINITY,
        };
        tally(&mut md, err <= tolerance, err);

        let f = rng.random_range(0..=n - 3);
        let ok_and_err = match (super::krum_scores(&ups, f), super::krum(&ups, f)) {
            (Ok(scores), Ok((_, idx))) => {
                let oracle = krum_scores(&ups, f);
                let rel = scores
                    .iter()
                    .zip(&oracle)
                    .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                    .fold(0.0, f64::max);
                (rel <= tolerance && idx == krum_index(&ups, f), rel)
            }
            _ => (false, f64::INFINITY),
        };
        tally(&mut kr, ok_and_err.0, ok_and_err.1);
    }
    vec![tm, md, kr]
}
