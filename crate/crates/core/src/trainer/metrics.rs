//! Run metrics as JSON lines, one tagged record per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::EvalRecord;
use crate::error::{Error, Result};
use crate::lattice::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub task_loss: f64,
    pub cost_loss: f64,
    /// Zero whenever the clustering term is inactive.
    pub clustering_loss: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitRecord {
    pub step: u64,
    pub objective: f64,
    pub iterations: usize,
    pub cluster_sizes: Vec<usize>,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step(StepRecord),
    Refit(RefitRecord),
    Eval(EvalRecord),
}

impl Record {
    pub fn step(&self) -> u64 {
        match self {
            Record::Step(r) => r.step,
            Record::Refit(r) => r.step,
            Record::Eval(r) => r.step,
        }
    }
}

/// Append-only record log of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<Record>,
}

impl RunMetrics {
    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn refits(&self) -> impl Iterator<Item = &RefitRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Refit(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Eval(s) => Some(s),
            _ => None,
        })
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals().last()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

pub fn write_metrics(path: &Path, metrics: &RunMetrics) -> Result<()> {
    write_atomic(path, metrics.to_jsonl()?.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    RunMetrics::from_jsonl(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut m = RunMetrics::default();
        m.push(Record::Step(StepRecord {
            step: 0,
            task_loss: 0.693,
            cost_loss: 0.5,
            clustering_loss: 0.0,
            total: 1.093,
            lr: 0.05,
        }));
        m.push(Record::Refit(RefitRecord {
            step: 50,
            objective: 1.25,
            iterations: 4,
            cluster_sizes: vec![3, 5],
            fingerprint: u64::MAX,
        }));
        let text = m.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"kind\":\"step\",\"step\":0,"));
        let back = RunMetrics::from_jsonl(&text, Path::new("m.jsonl")).unwrap();
        assert_eq!(back, m);
        assert!(RunMetrics::from_jsonl("{\"kind\":\"bogus\"}", Path::new("m")).is_err());
    }
}
