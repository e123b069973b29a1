//! Static per-rank instruction streams for synchronous pipeline schedules,
//! with and without deferred backward-p2.

mod text;
mod validate;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use text::parse_streams;
pub use validate::{validate_schedule, Rule, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "gpipe")]
    GPipe,
    #[serde(rename = "1f1b-1")]
    OneFOneB1,
    #[serde(rename = "1f1b-2")]
    OneFOneB2,
    #[serde(rename = "1f1b-2-memeff")]
    OneFOneB2MemEff,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Naive,
        ScheduleKind::GPipe,
        ScheduleKind::OneFOneB1,
        ScheduleKind::OneFOneB2,
        ScheduleKind::OneFOneB2MemEff,
    ];

    /// The four schedules that exist both with and without 2BP.
    pub const BASE: [ScheduleKind; 4] = [
        ScheduleKind::Naive,
        ScheduleKind::GPipe,
        ScheduleKind::OneFOneB1,
        ScheduleKind::OneFOneB2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Naive => "naive",
            ScheduleKind::GPipe => "gpipe",
            ScheduleKind::OneFOneB1 => "1f1b-1",
            ScheduleKind::OneFOneB2 => "1f1b-2",
            ScheduleKind::OneFOneB2MemEff => "1f1b-2-memeff",
        }
    }

    /// Micro-batch count the schedule is defined for at `ranks` stages.
    pub fn default_micro_batches(self, ranks: usize) -> usize {
        match self {
            ScheduleKind::Naive => 1,
            ScheduleKind::GPipe | ScheduleKind::OneFOneB1 => ranks,
            ScheduleKind::OneFOneB2 | ScheduleKind::OneFOneB2MemEff => 2 * ranks,
        }
    }

    fn is_one_f_one_b(self) -> bool {
        matches!(
            self,
            ScheduleKind::OneFOneB1 | ScheduleKind::OneFOneB2 | ScheduleKind::OneFOneB2MemEff
        )
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::ScheduleConfig(format!("unknown schedule kind '{s}'")))
    }
}

/// How a deferred backward-p2 over several micro-batches is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum B2Mode {
    /// Concatenate the saved inputs along the batch dimension and run once.
    #[default]
    Concat,
    /// Run once per micro-batch, in order.
    Loop,
}

impl B2Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            B2Mode::Concat => "concat",
            B2Mode::Loop => "loop",
        }
    }
}

impl FromStr for B2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(B2Mode::Concat),
            "loop" => Ok(B2Mode::Loop),
            _ => Err(Error::ScheduleConfig(format!("unknown backward-p2 mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction {
    LoadInput(usize),
    Forward(usize),
    SendAct(usize),
    RecvAct(usize),
    ComputeLoss(usize),
    SendGrad(usize),
    RecvGrad(usize),
    BackwardP1(usize),
    BackwardP2 { micro_batches: Vec<usize>, mode: B2Mode },
    BackwardFull(usize),
    OptimizerStep,
}

impl Instruction {
    pub fn op_name(&self) -> &'static str {
        match self {
            Instruction::LoadInput(_) => "LoadInput",
            Instruction::Forward(_) => "Forward",
            Instruction::SendAct(_) => "SendAct",
            Instruction::RecvAct(_) => "RecvAct",
            Instruction::ComputeLoss(_) => "ComputeLoss",
            Instruction::SendGrad(_) => "SendGrad",
            Instruction::RecvGrad(_) => "RecvGrad",
            Instruction::BackwardP1(_) => "BackwardP1",
            Instruction::BackwardP2 { .. } => "BackwardP2",
            Instruction::BackwardFull(_) => "BackwardFull",
            Instruction::OptimizerStep => "OptimizerStep",
        }
    }

    /// Micro-batches the instruction touches (empty for the optimizer step).
    pub fn micro_batches(&self) -> Vec<usize> {
        match self {
            Instruction::LoadInput(m)
            | Instruction::Forward(m)
            | Instruction::SendAct(m)
            | Instruction::RecvAct(m)
            | Instruction::ComputeLoss(m)
            | Instruction::SendGrad(m)
            | Instruction::RecvGrad(m)
            | Instruction::BackwardP1(m)
            | Instruction::BackwardFull(m) => vec![*m],
            Instruction::BackwardP2 { micro_batches, .. } => micro_batches.clone(),
            Instruction::OptimizerStep => Vec::new(),
        }
    }

    /// Forward, backward and optimizer work, as opposed to data movement.
    pub fn is_compute(&self) -> bool {
        matches!(
            self,
            Instruction::Forward(_)
                | Instruction::ComputeLoss(_)
                | Instruction::BackwardP1(_)
                | Instruction::BackwardP2 { .. }
                | Instruction::BackwardFull(_)
                | Instruction::OptimizerStep
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionStream {
    pub rank: usize,
    pub instructions: Vec<Instruction>,
}

impl InstructionStream {
    pub fn iter(&self) -> std::slice::Iter<'_, Instruction> {
        self.instructions.iter()
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub ranks: usize,
    pub micro_batches: usize,
    pub two_bp: bool,
    pub b2_mode: B2Mode,
}

impl ScheduleConfig {
    /// Config with the kind's standard micro-batch count and concat mode.
    pub fn new(kind: ScheduleKind, ranks: usize, two_bp: bool) -> Self {
        Self {
            kind,
            ranks,
            micro_batches: kind.default_micro_batches(ranks),
            two_bp,
            b2_mode: B2Mode::Concat,
        }
    }

    pub fn with_b2_mode(mut self, mode: B2Mode) -> Self {
        self.b2_mode = mode;
        self
    }

    pub fn with_micro_batches(mut self, m: usize) -> Self {
        self.micro_batches = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (p, m) = (self.ranks, self.micro_batches);
        let bad = |why: String| Err(Error::ScheduleConfig(why));
        if p == 0 {
            return bad("at least one pipeline rank is required".into());
        }
        match self.kind {
            ScheduleKind::Naive if m != 1 => bad(format!("naive uses one micro-batch, got {m}")),
            ScheduleKind::GPipe if m == 0 => bad("gpipe needs at least one micro-batch".into()),
            ScheduleKind::OneFOneB1 if m != p => bad(format!("1f1b-1 needs M = P = {p}, got {m}")),
            ScheduleKind::OneFOneB2 | ScheduleKind::OneFOneB2MemEff if m != 2 * p => {
                bad(format!("{} needs M = 2P = {}, got {m}", self.kind, 2 * p))
            }
            ScheduleKind::OneFOneB2MemEff if !self.two_bp => {
                bad("the memory-efficient 1f1b-2 variant only exists with 2BP".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Forward(usize),
    Backward(usize),
}

/// Order of forward and backward micro-batch work on one rank.
fn compute_order(kind: ScheduleKind, ranks: usize, micro_batches: usize, rank: usize) -> Vec<Step> {
    let m = micro_batches;
    if kind.is_one_f_one_b() {
        let warmup = (ranks - rank - 1).min(m);
        let mut order: Vec<Step> = (0..warmup).map(Step::Forward).collect();
        for i in 0..m - warmup {
            order.push(Step::Forward(warmup + i));
            order.push(Step::Backward(i));
        }
        order.extend((m - warmup..m).map(Step::Backward));
        order
    } else {
        (0..m).map(Step::Forward).chain((0..m).map(Step::Backward)).collect()
    }
}

/// Generates one instruction stream per rank.
///
/// Without 2BP every backward is a combined [`Instruction::BackwardFull`].
/// With 2BP the backward is split: GPipe and naive defer every backward-p2
/// to one trailing call; the 1F1B variants run one backward-p2 (oldest
/// pending micro-batch first) in each gap between consecutive backward-p1
/// calls and defer the rest to the trailing call.
pub fn generate_schedule(cfg: &ScheduleConfig) -> Result<Vec<InstructionStream>> {
    cfg.validate()?;
    Ok((0..cfg.ranks)
        .map(|rank| InstructionStream {
            rank,
            instructions: expand(cfg, rank),
        })
        .collect())
}

/// The memory-efficient 1F1B-2 variant: like 1F1B-2 with 2BP, but each rank
/// drains the backward-p2 of micro-batches `0..P` right after
/// backward-p1 of micro-batch `P-1`, halving the deferred state.
pub fn generate_memeff_1f1b2(cfg: &ScheduleConfig) -> Result<Vec<InstructionStream>> {
    if cfg.kind != ScheduleKind::OneFOneB2MemEff {
        return Err(Error::ScheduleConfig(format!(
            "generate_memeff_1f1b2 called with kind {}",
            cfg.kind
        )));
    }
    generate_schedule(cfg)
}

fn expand(cfg: &ScheduleConfig, rank: usize) -> Vec<Instruction> {
    use Instruction::*;
    let (p, m) = (cfg.ranks, cfg.micro_batches);
    let first = rank == 0;
    let last = rank + 1 == p;
    let fill_gaps = cfg.two_bp && cfg.kind.is_one_f_one_b();
    let b2 = |mbs: Vec<usize>| BackwardP2 {
        micro_batches: mbs,
        mode: cfg.b2_mode,
    };

    let mut out = Vec::new();
    let mut pending: VecDeque<usize> = VecDeque::new();
    let mut prev: Option<Step> = None;
    for step in compute_order(cfg.kind, p, m, rank) {
        match step {
            Step::Forward(mb) => {
                out.push(if first { LoadInput(mb) } else { RecvAct(mb) });
                out.push(Forward(mb));
                out.push(if last { ComputeLoss(mb) } else { SendAct(mb) });
            }
            Step::Backward(mb) => {
                if fill_gaps && matches!(prev, Some(Step::Backward(_))) {
                    if let Some(oldest) = pending.pop_front() {
                        out.push(b2(vec![oldest]));
                    }
                }
                if !last {
                    out.push(RecvGrad(mb));
                }
                if cfg.two_bp {
                    out.push(BackwardP1(mb));
                    pending.push_back(mb);
                } else {
                    out.push(BackwardFull(mb));
                }
                if !first {
                    out.push(SendGrad(mb));
                }
                if cfg.kind == ScheduleKind::OneFOneB2MemEff && mb + 1 == p {
                    let first_half: Vec<usize> = pending.iter().copied().filter(|&x| x < p).collect();
                    pending.retain(|&x| x >= p);
                    if !first_half.is_empty() {
                        out.push(b2(first_half));
                    }
                }
            }
        }
        prev = Some(step);
    }
    if !pending.is_empty() {
        out.push(b2(pending.into_iter().collect()));
    }
    out.push(OptimizerStep);
    out
}
