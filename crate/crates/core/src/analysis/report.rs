use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::Trace;

use super::sim::{bubble_ratio_from_trace, Timeline};

/// Busy and idle time per rank for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleReport {
    pub busy: Vec<f64>,
    pub idle: Vec<f64>,
    pub makespan: f64,
    pub bubble_ratio: f64,
}

impl BubbleReport {
    pub fn from_timeline(timeline: &Timeline) -> Result<Self> {
        Self::from_trace(&timeline.to_trace())
    }

    pub fn from_trace(trace: &Trace) -> Result<Self> {
        let bubble_ratio = bubble_ratio_from_trace(trace)?;
        let start = trace.events.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
        let makespan = trace.makespan() - start;
        let busy: Vec<f64> = (0..trace.ranks())
            .map(|r| {
                trace
                    .events
                    .iter()
                    .filter(|e| e.rank == r && e.is_compute())
                    .map(|e| e.duration())
                    .sum()
            })
            .collect();
        let idle = busy.iter().map(|b| (makespan - b).max(0.0)).collect();
        Ok(Self {
            busy,
            idle,
            makespan,
            bubble_ratio,
        })
    }

    /// Throughput of `self` relative to `baseline` at equal work.
    pub fn gain_over(&self, baseline: &BubbleReport) -> f64 {
        baseline.makespan / self.makespan
    }
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: String,
    #[serde(rename = "P")]
    pub ranks: usize,
    #[serde(rename = "M")]
    pub micro_batches: usize,
    pub two_bp: bool,
    pub bubble_ratio: f64,
    pub gain: Option<f64>,
    /// Per-rank peaks joined with `;`.
    pub peak_act: String,
    pub peak_ideriv: String,
}

pub fn join_units<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

pub fn rows_to_json(rows: &[ReportRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::InvalidArgument(format!("json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_columns() {
        let row = ReportRow {
            kind: "1f1b-1".into(),
            ranks: 4,
            micro_batches: 4,
            two_bp: true,
            bubble_ratio: 0.2,
            gain: Some(1.4),
            peak_act: join_units(&[4, 3, 2, 1]),
            peak_ideriv: join_units(&[1, 2, 3, 4]),
        };
        let text = rows_to_csv(std::slice::from_ref(&row)).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "kind,P,M,two_bp,bubble_ratio,gain,peak_act,peak_ideriv"
        );
        assert_eq!(lines.next().unwrap(), "1f1b-1,4,4,true,0.2,1.4,4;3;2;1,1;2;3;4");
        let back: Vec<ReportRow> = serde_json::from_str(&rows_to_json(std::slice::from_ref(&row)).unwrap()).unwrap();
        assert_eq!(back, vec![row]);
    }
}
