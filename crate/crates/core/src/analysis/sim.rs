//! Discrete-event replay of instruction streams in integer ticks.

use std::collections::VecDeque;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{Trace, TraceEvent};
use crate::schedule::{Instruction, InstructionStream};

/// Compute costs of one rank, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCosts {
    pub t_f: u64,
    pub t_b1: u64,
    pub t_b2: u64,
}

impl Default for RankCosts {
    fn default() -> Self {
        Self { t_f: 1, t_b1: 1, t_b2: 1 }
    }
}

/// Per-rank compute costs plus a per-hop communication delay. A combined
/// backward costs `t_b1 + t_b2`; loads, sends, receives, the loss and the
/// optimizer step are free. Fractional costs are expressed by scaling every
/// field by a common factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub ranks: Vec<RankCosts>,
    pub t_comm: u64,
}

impl CostModel {
    pub fn unit(ranks: usize) -> Self {
        Self::uniform(ranks, RankCosts::default(), 0)
    }

    pub fn uniform(ranks: usize, costs: RankCosts, t_comm: u64) -> Self {
        Self {
            ranks: vec![costs; ranks],
            t_comm,
        }
    }

    fn cost(&self, rank: usize, ins: &Instruction) -> u64 {
        let c = self.ranks[rank];
        match ins {
            Instruction::Forward(_) => c.t_f,
            Instruction::BackwardP1(_) => c.t_b1,
            Instruction::BackwardP2 { micro_batches, .. } => micro_batches.len() as u64 * c.t_b2,
            Instruction::BackwardFull(_) => c.t_b1 + c.t_b2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TickEvent {
    pub rank: usize,
    pub op: &'static str,
    pub mb: Vec<usize>,
    pub start: u64,
    pub end: u64,
    pub compute: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Timeline {
    pub ranks: usize,
    pub events: Vec<TickEvent>,
}

impl Timeline {
    pub fn makespan(&self) -> u64 {
        let start = self.events.iter().map(|e| e.start).min().unwrap_or(0);
        self.events.iter().map(|e| e.end).max().unwrap_or(0) - start
    }

    pub fn busy(&self, rank: usize) -> u64 {
        self.events
            .iter()
            .filter(|e| e.rank == rank && e.compute)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// The same events as a trace, ticks converted to floats.
    pub fn to_trace(&self) -> Trace {
        Trace {
            events: self
                .events
                .iter()
                .map(|e| TraceEvent {
                    rank: e.rank,
                    op: e.op.to_string(),
                    mb: e.mb.clone(),
                    start: e.start as f64,
                    end: e.end as f64,
                })
                .collect(),
        }
    }
}

/// Runs every rank's stream in order. A receive completes once the matching
/// send happened `t_comm` ticks earlier; everything else starts when the
/// rank is free. Streams should be validated first.
pub fn simulate_timeline(streams: &[InstructionStream], cost: &CostModel) -> Result<Timeline> {
    let p = streams.len();
    if cost.ranks.len() != p {
        return Err(Error::InvalidArgument(format!(
            "cost model covers {} ranks, schedule has {p}",
            cost.ranks.len()
        )));
    }
    // queues[2r]: activations r -> r+1; queues[2r+1]: gradients r+1 -> r.
    let mut queues: Vec<VecDeque<(usize, u64)>> = vec![VecDeque::new(); 2 * p];
    let mut pc = vec![0usize; p];
    let mut clock = vec![0u64; p];
    let mut events = Vec::new();

    loop {
        let mut progressed = false;
        for r in 0..p {
            while let Some(ins) = streams[r].instructions.get(pc[r]) {
                let recv_queue = match ins {
                    Instruction::RecvAct(_) if r > 0 => Some(2 * (r - 1)),
                    Instruction::RecvGrad(_) => Some(2 * r + 1),
                    _ => None,
                };
                let start = clock[r];
                let end = if let Some(q) = recv_queue {
                    match queues[q].pop_front() {
                        Some((_, sent)) => start.max(sent + cost.t_comm),
                        None => break,
                    }
                } else {
                    start + cost.cost(r, ins)
                };
                match ins {
                    Instruction::SendAct(mb) => queues[2 * r].push_back((*mb, end)),
                    Instruction::SendGrad(mb) if r > 0 => queues[2 * (r - 1) + 1].push_back((*mb, end)),
                    _ => {}
                }
                events.push(TickEvent {
                    rank: r,
                    op: ins.op_name(),
                    mb: ins.micro_batches(),
                    start,
                    end,
                    compute: ins.is_compute(),
                });
                clock[r] = end;
                pc[r] += 1;
                progressed = true;
            }
        }
        if (0..p).all(|r| pc[r] == streams[r].len()) {
            break;
        }
        if !progressed {
            return Err(Error::InvalidArgument(
                "simulation stalled: every unfinished rank waits on a message that is never sent".into(),
            ));
        }
    }
    events.sort_by_key(|e| (e.rank, e.start, e.end));
    Ok(Timeline { ranks: p, events })
}

/// `1 - Σ busy / (P · makespan)`, exactly.
pub fn bubble_ratio_from_timeline(timeline: &Timeline) -> Result<Ratio<i64>> {
    let makespan = timeline.makespan();
    if timeline.events.is_empty() || timeline.ranks == 0 {
        return Err(Error::EmptyTimeline);
    }
    if makespan == 0 {
        return Ok(Ratio::from_integer(0));
    }
    let busy: u64 = (0..timeline.ranks).map(|r| timeline.busy(r)).sum();
    Ok(Ratio::from_integer(1) - Ratio::new(busy as i64, (timeline.ranks as u64 * makespan) as i64))
}

/// Bubble ratio of a wall-clock trace; busy time is the total duration of
/// compute events.
pub fn bubble_ratio_from_trace(trace: &Trace) -> Result<f64> {
    if trace.events.is_empty() {
        return Err(Error::EmptyTimeline);
    }
    let p = trace.ranks() as f64;
    let start = trace.events.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
    let makespan = trace.makespan() - start;
    if makespan <= 0.0 {
        return Ok(0.0);
    }
    let busy: f64 = trace.events.iter().filter(|e| e.is_compute()).map(TraceEvent::duration).sum();
    Ok((1.0 - busy / (p * makespan)).max(0.0))
}
