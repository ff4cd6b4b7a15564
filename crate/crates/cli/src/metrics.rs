//! Line-delimited metrics: a header object naming the schema version and the
//! run, then one record per FL round.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use metasg::bsmg::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "metasg-metrics";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub version: u32,
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub attack: String,
    pub defense: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub round: usize,
    /// Episode the round belongs to; online adaptation plays several before
    /// the deployment episode.
    pub episode: usize,
    pub main_accuracy: Option<f64>,
    pub backdoor_accuracy: Option<f64>,
    pub surrogate_loss: Option<f64>,
    pub true_loss: Option<f64>,
    #[serde(rename = "r_D")]
    pub r_d: f64,
    #[serde(rename = "r_A")]
    pub r_a: f64,
    /// The defender's raw action vector; empty under a fixed rule.
    pub defense_action: Vec<f64>,
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    fn check(&self) -> Result<(), String> {
        for (name, v) in [
            ("main_accuracy", self.main_accuracy),
            ("backdoor_accuracy", self.backdoor_accuracy),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Appends records to a metrics file, flushing after every line so a crash
/// loses at most the line being written.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    next_round: usize,
    next_episode: usize,
    header: MetricsHeader,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: MetricsHeader) -> CliResult<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            next_round: 0,
            next_episode: 0,
            header,
        };
        let line = serde_json::to_string(&w.header).expect("header serializes");
        w.write_line(&line)?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> CliResult<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }

    /// Appends every step of `trajectory` as one episode. `wall_ms` is
    /// recorded only when given.
    pub fn append_episode(
        &mut self,
        trajectory: &Trajectory,
        wall_ms: Option<u64>,
    ) -> CliResult<()> {
        for s in &trajectory.steps {
            let rec = MetricsRecord {
                run_id: self.header.run_id.clone(),
                seed: self.header.seed,
                round: self.next_round,
                episode: self.next_episode,
                main_accuracy: s.info.main_accuracy,
                backdoor_accuracy: s.info.backdoor_accuracy,
                surrogate_loss: s.info.surrogate_loss,
                true_loss: s.info.true_loss,
                r_d: s.r_d,
                r_a: s.r_a,
                defense_action: s.defender_action.clone(),
                wall_ms,
            };
            let line = serde_json::to_string(&rec).map_err(|e| CliError::Schema {
                path: format!("round {}", rec.round),
                message: e.to_string(),
            })?;
            self.write_line(&line)?;
            self.next_round += 1;
        }
        self.next_episode += 1;
        Ok(())
    }
}

/// Reads and validates a metrics file: the header must carry the current
/// schema version, every record must parse, accuracies must lie in
/// `[0, 1]`, and rounds must count up from zero without gaps.
pub fn read_metrics(path: &Path) -> CliResult<(MetricsHeader, Vec<MetricsRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let err = |line: usize, message: String| CliError::Schema {
        path: format!("{}:{line}", path.display()),
        message,
    };
    let mut lines = text.lines();
    let header: MetricsHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| err(1, "missing header".into()))?,
    )
    .map_err(|e| err(1, e.to_string()))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(err(
            1,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let rec: MetricsRecord =
            serde_json::from_str(line).map_err(|e| err(i + 2, e.to_string()))?;
        if rec.round != records.len() {
            return Err(err(
                i + 2,
                format!("round {} where {} was expected", rec.round, records.len()),
            ));
        }
        rec.check().map_err(|m| err(i + 2, m))?;
        records.push(rec);
    }
    Ok((header, records))
}
