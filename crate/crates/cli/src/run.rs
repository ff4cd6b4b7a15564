//! Seeded execution of a configured experiment.
//!
//! Output layout under `<output_dir>/<run_id>/`:
//!
//! * `config.toml`: the configuration as run
//! * `seed-<s>/metrics.jsonl`: the deployment metrics of seed `s`
//! * `seed-<s>/trace.jsonl`: one record per outer iteration (pretraining)
//! * `seed-<s>/theta.policy`, `seed-<s>/phi-<type>.policy`: final policies
//! * `seed-<s>/checkpoints/theta-<t>.policy`: periodic meta policies
//! * `seed-<s>/bench.txt`: aggregation suite results (agg-bench)
//! * `seed-<s>/PARTIAL`: present, with the error, when the seed failed
//! * `summary.tsv`: final-round metrics per seed, their mean and std
//!
//! Every seed is independent. Within a seed, the environment is built from
//! the seed itself and the deployment episode is played with it too, so an
//! `evaluate` run of a fixed rule matches `fixtures::final_round`. Trainers,
//! attacker pretraining and online adaptation draw from streams derived from
//! the seed with their own tags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metasg::aggregation::reference::equivalence_suite;
use metasg::bsmg::{rollout, FlEnv, MarkovGame};
use metasg::meta::{
    attacker_best_response, bse_baseline, meta_stackelberg, online_adapt, reptile_meta_rl,
    MetaConfig, MetaOutcome,
};
use metasg::policy::{read_checkpoint, write_checkpoint, PolicyParams};
use metasg::seed::{self, tag};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, CliResult};
use crate::export::mean_std;
use crate::metrics::{read_metrics, MetricsHeader, MetricsWriter, SCHEMA, SCHEMA_VERSION};

/// Stream tags of the runner's own components.
pub mod stream {
    pub const TRAIN: u64 = 0x_7a1e;
    pub const PRETRAIN_ATTACKER: u64 = 0x_9a7a;
    pub const ONLINE: u64 = 0x_0111;
}

pub const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub summary: String,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.seeds.iter().filter(|s| s.error.is_some()).count()
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn mkdir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

/// Runs every seed of `cfg` and writes the summary. Seed failures are
/// reported in the returned outcomes and leave a partial-run marker; only
/// failures to set up the run directory are returned as errors.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunReport> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.join(&cfg.run_id);
    mkdir(&run_dir)?;
    write(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    let seeds: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let dir = seed_dir(&run_dir, s);
            let error = run_seed(cfg, &dir, s).err().map(|e| e.to_string());
            if let Some(e) = &error {
                log::error!("seed {s} failed: {e}");
                let _ = fs::write(dir.join(PARTIAL_MARKER), format!("{e}\n"));
            } else {
                log::info!("seed {s} done");
            }
            SeedOutcome {
                seed: s,
                dir,
                error,
            }
        })
        .collect();
    let summary = summarize(cfg, &run_dir, &seeds)?;
    write(&run_dir.join("summary.tsv"), &summary)?;
    Ok(RunReport {
        run_dir,
        seeds,
        summary,
    })
}

fn run_seed(cfg: &ExperimentConfig, dir: &Path, s: u64) -> CliResult<()> {
    mkdir(dir)?;
    let marker = dir.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| CliError::io(&marker, e))?;
    }
    let start = Instant::now();
    if cfg.mode == Mode::AggBench {
        return agg_bench(cfg, dir, s);
    }
    let env = FlEnv::new(cfg.env_config(), s)?;
    let names = cfg.type_names();
    let target = cfg.target_index().expect("validated config has a target");
    let header = MetricsHeader {
        schema: SCHEMA.to_string(),
        version: SCHEMA_VERSION,
        run_id: cfg.run_id.clone(),
        seed: s,
        mode: cfg.mode.name().to_string(),
        attack: names[target].clone(),
        defense: cfg.defense_label(),
    };
    let mut metrics = MetricsWriter::create(&dir.join("metrics.jsonl"), header)?;
    let wall = || {
        cfg.record_wall_time
            .then(|| start.elapsed().as_millis() as u64)
    };

    let mut phis = pretrain_attackers(cfg, s)?;
    let theta = match cfg.mode {
        Mode::Evaluate | Mode::Adapt => match (&cfg.defense_fixed, &cfg.policy_checkpoint) {
            (Some(_), _) => None,
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                Some(read_checkpoint(&text)?)
            }
            (None, None) => Some(env.defender_policy(cfg.init_log_std)?),
        },
        _ => {
            let theta0 = env.defender_policy(cfg.init_log_std)?;
            let q = env.config().type_distribution.clone();
            let train_seed = seed::derive(s, stream::TRAIN);
            let out = match cfg.mode {
                Mode::PretrainMetaRl => {
                    reptile_meta_rl(&env, &theta0, &phis, &q, &cfg.meta, train_seed)?
                }
                Mode::PretrainMetaSg => {
                    meta_stackelberg(&env, &theta0, &phis, &q, &cfg.meta, train_seed)?
                }
                _ => bse_baseline(&env, &theta0, &phis, &q, &cfg.meta, train_seed)?,
            };
            write_training(cfg, dir, &theta0, &out, &names)?;
            phis = out.phis;
            Some(out.theta)
        }
    };

    let mut deployed = theta;
    if cfg.mode == Mode::Adapt {
        let theta = deployed.as_ref().expect("adapt runs a policy");
        let phi = respond(&env, theta, phis[target].as_ref(), target, &cfg.meta, s, 0)?;
        let outcome = online_adapt(
            &env,
            theta,
            phi.as_ref(),
            target,
            &cfg.online,
            cfg.meta.baseline,
            cfg.meta.grad_clip,
            seed::derive(s, stream::ONLINE),
        )?;
        for t in &outcome.trajectories {
            metrics.append_episode(t, wall())?;
        }
        write(&dir.join("theta.policy"), &write_checkpoint(&outcome.theta))?;
        deployed = Some(outcome.theta);
    }

    let phi = match &deployed {
        Some(theta) => respond(&env, theta, phis[target].as_ref(), target, &cfg.meta, s, 1)?,
        None => phis[target].clone(),
    };
    let episode = rollout(
        &env,
        deployed.as_ref(),
        phi.as_ref(),
        target,
        env.config().horizon,
        s,
    )?;
    metrics.append_episode(&episode, wall())?;
    Ok(())
}

/// The target attacker's response to a deployed defender policy: the
/// configured number of best-response steps from its initial policy.
fn respond(
    env: &FlEnv,
    theta: &PolicyParams,
    phi: Option<&PolicyParams>,
    xi: usize,
    meta: &MetaConfig,
    s: u64,
    which: u64,
) -> CliResult<Option<PolicyParams>> {
    match phi {
        Some(p) if meta.attacker_steps > 0 => {
            let seed = seed::derive_path(s, &[tag::RESPONSE, which]);
            let br = attacker_best_response(
                env,
                Some(theta),
                p,
                xi,
                meta.attacker_steps,
                meta.kappa_a,
                meta,
                seed,
            )?;
            Ok(Some(br.phi))
        }
        _ => Ok(phi.cloned()),
    }
}

/// Initial policies of the RL attacker types: best responses against each
/// defense of the pretraining recipe in turn. Static types get `None`.
pub fn pretrain_attackers(cfg: &ExperimentConfig, s: u64) -> CliResult<Vec<Option<PolicyParams>>> {
    let base = cfg.env_config();
    let recipe = &cfg.attacker_pretrain;
    let probe = FlEnv::new(base.clone(), s)?;
    let meta = MetaConfig {
        horizon: recipe.horizon.min(base.horizon),
        ..cfg.meta.clone()
    };
    let mut phis = Vec::with_capacity(probe.type_count());
    for xi in 0..probe.type_count() {
        let Some(mut phi) = probe.attacker_policy(xi, recipe.log_std)? else {
            phis.push(None);
            continue;
        };
        if recipe.steps > 0 {
            for (j, rule) in recipe.against.iter().enumerate() {
                let mut fixed = base.clone();
                fixed.fixed_defense = Some(*rule);
                let env = FlEnv::new(fixed, s)?;
                let seed = seed::derive_path(s, &[stream::PRETRAIN_ATTACKER, xi as u64, j as u64]);
                phi = attacker_best_response(
                    &env,
                    None,
                    &phi,
                    xi,
                    recipe.steps,
                    recipe.kappa_a,
                    &meta,
                    seed,
                )?
                .phi;
            }
        }
        phis.push(Some(phi));
    }
    Ok(phis)
}

fn write_training(
    cfg: &ExperimentConfig,
    dir: &Path,
    theta0: &PolicyParams,
    out: &MetaOutcome,
    names: &[String],
) -> CliResult<()> {
    let mut trace = String::new();
    for rec in &out.trace {
        let line = serde_json::to_string(rec).map_err(|e| CliError::Schema {
            path: format!("trace[{}]", rec.iteration),
            message: e.to_string(),
        })?;
        let _ = writeln!(trace, "{line}");
    }
    write(&dir.join("trace.jsonl"), &trace)?;
    if cfg.checkpoint_every > 0 {
        let cdir = dir.join("checkpoints");
        mkdir(&cdir)?;
        for rec in out
            .trace
            .iter()
            .filter(|r| (r.iteration + 1) % cfg.checkpoint_every == 0)
        {
            let theta = theta0.with_flat(&rec.theta_after)?;
            write(
                &cdir.join(format!("theta-{}.policy", rec.iteration + 1)),
                &write_checkpoint(&theta),
            )?;
        }
    }
    write(&dir.join("theta.policy"), &write_checkpoint(&out.theta))?;
    for (phi, name) in out.phis.iter().zip(names) {
        if let Some(phi) = phi {
            write(
                &dir.join(format!("phi-{name}.policy")),
                &write_checkpoint(phi),
            )?;
        }
    }
    Ok(())
}

fn agg_bench(cfg: &ExperimentConfig, dir: &Path, s: u64) -> CliResult<()> {
    let results = equivalence_suite(cfg.bench_instances, 1e-9, s);
    let mut text = String::from("suite\tpassed\tfailed\tmax_error\n");
    for r in &results {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{:e}",
            r.name, r.passed, r.failed, r.max_error
        );
    }
    write(&dir.join("bench.txt"), &text)?;
    let failed: usize = results.iter().map(|r| r.failed).sum();
    if failed > 0 {
        return Err(CliError::Schema {
            path: "bench".into(),
            message: format!("{failed} instances disagree with the reference implementations"),
        });
    }
    Ok(())
}

const SUMMARY_COLUMNS: [&str; 6] = [
    "main_accuracy",
    "backdoor_accuracy",
    "surrogate_loss",
    "true_loss",
    "r_D",
    "r_A",
];

/// The summary table, rebuilt from the files on disk: the final-round
/// metrics of every seed followed by their mean and standard deviation, or
/// the suite counts for `agg-bench`.
pub fn summarize(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    seeds: &[SeedOutcome],
) -> CliResult<String> {
    let mut out = String::new();
    if cfg.mode == Mode::AggBench {
        out.push_str("seed\tsuite\tpassed\tfailed\tmax_error\n");
        for o in seeds {
            let path = seed_dir(run_dir, o.seed).join("bench.txt");
            let Ok(text) = fs::read_to_string(&path) else {
                let _ = writeln!(out, "{}\tfailed\t-\t-\t-", o.seed);
                continue;
            };
            for line in text.lines().skip(1) {
                let _ = writeln!(out, "{}\t{line}", o.seed);
            }
        }
        return Ok(out);
    }
    let _ = writeln!(out, "seed\t{}", SUMMARY_COLUMNS.join("\t"));
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); SUMMARY_COLUMNS.len()];
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for o in seeds {
        let path = seed_dir(run_dir, o.seed).join("metrics.jsonl");
        let last = match (&o.error, read_metrics(&path)) {
            (None, Ok((_, records))) => records.last().cloned(),
            _ => None,
        };
        let Some(r) = last else {
            let _ = writeln!(out, "{}\tfailed", o.seed);
            continue;
        };
        let values = [
            r.main_accuracy,
            r.backdoor_accuracy,
            r.surrogate_loss,
            r.true_loss,
            Some(r.r_d),
            Some(r.r_a),
        ];
        let _ = write!(out, "{}", o.seed);
        for (col, v) in columns.iter_mut().zip(values) {
            let _ = write!(out, "\t{}", cell(v));
            col.extend(v);
        }
        out.push('\n');
    }
    let stats: Vec<Option<(f64, f64)>> = columns
        .iter()
        .map(|c| (!c.is_empty()).then(|| mean_std(c)))
        .collect();
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let _ = write!(out, "{label}");
        for s in &stats {
            let _ = write!(
                out,
                "\t{}",
                cell(s.map(|(m, d)| if pick == 0 { m } else { d }))
            );
        }
        out.push('\n');
    }
    Ok(out)
}
