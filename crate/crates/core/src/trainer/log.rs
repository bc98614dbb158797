use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::EvalReport;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Everything that was minimized in this step.
    pub total: f64,
    /// Cross-entropy of each classification branch; empty without classification.
    pub per_branch: Vec<f64>,
    pub classification: Option<f64>,
    pub triplet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub report: EvalReport,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
    pub wall_time_secs: f64,
}

/// Equality ignores wall time.
impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.evals == other.evals
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Header { schema_version: u32 },
    Step(&'a StepRecord),
    Eval(&'a EvalSnapshot),
}

impl TrainLog {
    /// One JSON object per line: a header, then steps and evaluations in
    /// epoch order. Wall time is left out so equal runs give equal files.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header {
            schema_version: LOG_SCHEMA_VERSION,
        })?;
        out.push('\n');
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.epoch < s.epoch) {
                out += &serde_json::to_string(&Line::Eval(e))?;
                out.push('\n');
            }
            out += &serde_json::to_string(&Line::Step(s))?;
            out.push('\n');
        }
        for e in evals {
            out += &serde_json::to_string(&Line::Eval(e))?;
            out.push('\n');
        }
        Ok(out)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }

    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for s in &self.steps {
            if sums.len() <= s.epoch {
                sums.resize(s.epoch + 1, (0.0, 0));
            }
            sums[s.epoch].0 += s.total;
            sums[s.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}
