use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One executed instruction. Times are seconds since the start of the step
/// for real runs, or simulator ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub rank: usize,
    pub op: String,
    pub mb: Vec<usize>,
    pub start: f64,
    pub end: f64,
}

impl TraceEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Whether the op is compute (counts as busy time) rather than data movement.
    pub fn is_compute(&self) -> bool {
        matches!(
            self.op.as_str(),
            "Forward" | "ComputeLoss" | "BackwardP1" | "BackwardP2" | "BackwardFull" | "OptimizerStep"
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn ranks(&self) -> usize {
        self.events.iter().map(|e| e.rank + 1).max().unwrap_or(0)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace events serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidArgument(format!("bad trace line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { events })
    }

    /// Events shifted by `offset` (used to lay consecutive steps end to end).
    pub fn shifted(&self, offset: f64) -> Trace {
        Trace {
            events: self
                .events
                .iter()
                .map(|e| TraceEvent {
                    start: e.start + offset,
                    end: e.end + offset,
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.end).fold(0.0, f64::max)
    }
}
