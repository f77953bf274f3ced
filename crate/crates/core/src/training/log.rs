use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::objectives::ObjectiveValues;

pub const LOG_HEADER: &str =
    "phase,epoch,neg_entropy,l_cons,penalty,total,train_bacc,val_bacc,wall_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        }
    }
}

/// One epoch: batch-averaged objective terms and balanced accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub values: ObjectiveValues,
    pub train_bacc: f64,
    pub val_bacc: f64,
    pub wall_s: f64,
}

impl LogRow {
    pub(crate) fn new(
        phase: Phase,
        epoch: usize,
        sums: &ObjectiveValues,
        batches: usize,
        train_bacc: f64,
        val_bacc: f64,
        start: Instant,
    ) -> Self {
        let n = batches.max(1) as f64;
        LogRow {
            phase,
            epoch,
            values: ObjectiveValues {
                neg_entropy: sums.neg_entropy / n,
                consistency: sums.consistency / n,
                penalty: sums.penalty / n,
                total: sums.total / n,
            },
            train_bacc,
            val_bacc,
            wall_s: start.elapsed().as_secs_f64(),
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: f64| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v:.6}")
            }
        };
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.3}",
            self.phase.as_str(),
            self.epoch,
            self.values.neg_entropy,
            self.values.consistency,
            self.values.penalty,
            self.values.total,
            opt(self.train_bacc),
            opt(self.val_bacc),
            self.wall_s
        )
    }
}

/// Epoch rows kept in memory and, when a path is set, appended to a CSV
/// file as they arrive.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    file: Option<(PathBuf, File)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        TrainLog::default()
    }

    /// Appends to `path`, writing the header first if the file is new or empty.
    pub fn append_to(path: &Path) -> Result<Self> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = f.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(TrainLog {
            rows: Vec::new(),
            file: Some((path.to_path_buf(), f)),
        })
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}
