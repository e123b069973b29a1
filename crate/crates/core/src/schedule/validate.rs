//! Symbolic execution of instruction streams against the pipeline's
//! dependency rules, with blocking receives and unbounded FIFO sends.

use std::collections::VecDeque;
use std::fmt;

use super::{Instruction, InstructionStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Stream list is malformed (rank numbering, empty streams).
    Structure,
    /// A stream mixes combined and split backward, or ranks disagree.
    MixedBackward,
    MissingOptimizerStep,
    OptimizerNotLast,
    /// Optimizer step reached before all gradient work finished.
    IncompleteWork,
    /// Send/receive or loss placed on a rank where it cannot occur.
    WrongRank,
    ForwardWithoutInput,
    DuplicateWork,
    /// Received message belongs to a different micro-batch than expected.
    FifoOrder,
    /// Matching send happened before the value it carries was computed.
    SendBeforeCompute,
    BackwardWithoutGrad,
    BackwardBeforeForward,
    /// Backward-p2 for a micro-batch whose backward-p1 has not run.
    PrematureBackwardP2,
    DuplicateBackwardP2,
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rank: usize,
    pub index: usize,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rank {}, instruction {}: {:?}: {}",
            self.rank, self.index, self.rule, self.detail
        )
    }
}

impl std::error::Error for Violation {}

fn violation(rank: usize, index: usize, rule: Rule, detail: impl Into<String>) -> Violation {
    Violation {
        rank,
        index,
        rule,
        detail: detail.into(),
    }
}

#[derive(Default, Clone)]
struct RankState {
    pc: usize,
    has_input: Vec<bool>,
    forward: Vec<bool>,
    has_grad: Vec<bool>,
    backward: Vec<bool>,
    p2: Vec<bool>,
}

/// Message in flight: micro-batch id and whether its payload existed when sent.
type Msg = (usize, bool);

enum Outcome {
    Done,
    Advanced,
    Blocked,
}

/// Checks `streams` and returns the first violated rule.
pub fn validate_schedule(streams: &[InstructionStream]) -> std::result::Result<(), Violation> {
    let p = streams.len();
    if p == 0 {
        return Err(violation(0, 0, Rule::Structure, "no streams"));
    }
    let m = streams
        .iter()
        .flat_map(|s| s.iter().flat_map(Instruction::micro_batches))
        .max()
        .map_or(0, |x| x + 1);

    let mut split_backward = None;
    for (r, s) in streams.iter().enumerate() {
        if s.rank != r {
            return Err(violation(r, 0, Rule::Structure, format!("stream {r} is labelled rank {}", s.rank)));
        }
        let mut kind = None;
        for (i, ins) in s.iter().enumerate() {
            let split = match ins {
                Instruction::BackwardFull(_) => false,
                Instruction::BackwardP1(_) | Instruction::BackwardP2 { .. } => true,
                _ => continue,
            };
            if *kind.get_or_insert(split) != split {
                return Err(violation(r, i, Rule::MixedBackward, "combined and split backward in one stream"));
            }
            if *split_backward.get_or_insert(split) != split {
                return Err(violation(r, i, Rule::MixedBackward, "ranks disagree on split backward"));
            }
            if let Instruction::BackwardP2 { micro_batches, .. } = ins {
                if micro_batches.is_empty() {
                    return Err(violation(r, i, Rule::Structure, "empty backward-p2 set"));
                }
            }
        }
        match s.iter().position(|i| *i == Instruction::OptimizerStep) {
            None => return Err(violation(r, s.len(), Rule::MissingOptimizerStep, "no optimizer step")),
            Some(i) if i + 1 != s.len() => {
                return Err(violation(r, i, Rule::OptimizerNotLast, "optimizer step is not the final instruction"))
            }
            Some(_) => {}
        }
    }
    let split_backward = split_backward.unwrap_or(false);

    let mut ranks = vec![
        RankState {
            has_input: vec![false; m],
            forward: vec![false; m],
            has_grad: vec![false; m],
            backward: vec![false; m],
            p2: vec![false; m],
            ..RankState::default()
        };
        p
    ];
    // act[r]: r -> r+1, grad[r]: r+1 -> r
    let mut act: Vec<VecDeque<Msg>> = vec![VecDeque::new(); p];
    let mut grad: Vec<VecDeque<Msg>> = vec![VecDeque::new(); p];

    loop {
        let mut progressed = false;
        let mut all_done = true;
        for r in 0..p {
            loop {
                match step(r, p, m, split_backward, &streams[r], &mut ranks[r], &mut act, &mut grad)? {
                    Outcome::Advanced => progressed = true,
                    Outcome::Blocked => {
                        all_done = false;
                        break;
                    }
                    Outcome::Done => break,
                }
            }
        }
        if all_done {
            return Ok(());
        }
        if !progressed {
            let r = (0..p)
                .find(|&r| ranks[r].pc < streams[r].len())
                .expect("some rank is blocked");
            let pc = ranks[r].pc;
            return Err(violation(
                r,
                pc,
                Rule::Deadlock,
                format!("every unfinished rank is blocked; rank {r} waits at {}", streams[r].instructions[pc]),
            ));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step(
    r: usize,
    p: usize,
    m: usize,
    split_backward: bool,
    stream: &InstructionStream,
    st: &mut RankState,
    act: &mut [VecDeque<Msg>],
    grad: &mut [VecDeque<Msg>],
) -> std::result::Result<Outcome, Violation> {
    let Some(ins) = stream.instructions.get(st.pc) else {
        return Ok(Outcome::Done);
    };
    let i = st.pc;
    let v = |rule, detail: String| Err(violation(r, i, rule, detail));
    let first = r == 0;
    let last = r + 1 == p;

    match ins {
        Instruction::LoadInput(mb) => {
            if !first {
                return v(Rule::WrongRank, format!("{ins} on a non-first rank"));
            }
            st.has_input[*mb] = true;
        }
        Instruction::RecvAct(mb) => {
            if first {
                return v(Rule::WrongRank, format!("{ins} on the first rank"));
            }
            let Some((got, valid)) = act[r - 1].pop_front() else {
                return Ok(Outcome::Blocked);
            };
            if got != *mb {
                return v(Rule::FifoOrder, format!("{ins} received the activation of micro-batch {got}"));
            }
            if !valid {
                return v(Rule::SendBeforeCompute, format!("rank {} sent activation {mb} before its forward", r - 1));
            }
            st.has_input[*mb] = true;
        }
        Instruction::Forward(mb) => {
            if st.forward[*mb] {
                return v(Rule::DuplicateWork, format!("second {ins}"));
            }
            if !st.has_input[*mb] {
                return v(Rule::ForwardWithoutInput, format!("{ins} before its input arrived"));
            }
            st.forward[*mb] = true;
        }
        Instruction::SendAct(mb) => {
            if last {
                return v(Rule::WrongRank, format!("{ins} on the last rank"));
            }
            act[r].push_back((*mb, st.forward[*mb]));
        }
        Instruction::ComputeLoss(mb) => {
            if !last {
                return v(Rule::WrongRank, format!("{ins} on a rank other than the last"));
            }
            if !st.forward[*mb] {
                return v(Rule::BackwardBeforeForward, format!("{ins} before the forward"));
            }
            st.has_grad[*mb] = true;
        }
        Instruction::RecvGrad(mb) => {
            if last {
                return v(Rule::WrongRank, format!("{ins} on the last rank"));
            }
            let Some((got, valid)) = grad[r].pop_front() else {
                return Ok(Outcome::Blocked);
            };
            if got != *mb {
                return v(Rule::FifoOrder, format!("{ins} received the gradient of micro-batch {got}"));
            }
            if !valid {
                return v(Rule::SendBeforeCompute, format!("rank {} sent gradient {mb} before its backward", r + 1));
            }
            st.has_grad[*mb] = true;
        }
        Instruction::BackwardP1(mb) | Instruction::BackwardFull(mb) => {
            if st.backward[*mb] {
                return v(Rule::DuplicateWork, format!("second backward for micro-batch {mb}"));
            }
            if !st.forward[*mb] {
                return v(Rule::BackwardBeforeForward, format!("{ins} before the forward"));
            }
            if !st.has_grad[*mb] {
                return v(Rule::BackwardWithoutGrad, format!("{ins} before its output gradient arrived"));
            }
            st.backward[*mb] = true;
        }
        Instruction::SendGrad(mb) => {
            if first {
                return v(Rule::WrongRank, format!("{ins} on the first rank"));
            }
            grad[r - 1].push_back((*mb, st.backward[*mb]));
        }
        Instruction::BackwardP2 { micro_batches, .. } => {
            for mb in micro_batches {
                if st.p2[*mb] {
                    return v(Rule::DuplicateBackwardP2, format!("micro-batch {mb} already had backward-p2"));
                }
                if !st.backward[*mb] {
                    return v(Rule::PrematureBackwardP2, format!("{ins} before backward-p1 of micro-batch {mb}"));
                }
                st.p2[*mb] = true;
            }
        }
        Instruction::OptimizerStep => {
            for mb in 0..m {
                let missing = if !st.forward[mb] {
                    Some("forward")
                } else if !st.backward[mb] {
                    Some("backward")
                } else if split_backward && !st.p2[mb] {
                    Some("backward-p2")
                } else {
                    None
                };
                if let Some(what) = missing {
                    return v(Rule::IncompleteWork, format!("optimizer step before {what} of micro-batch {mb}"));
                }
            }
        }
    }
    st.pc += 1;
    Ok(Outcome::Advanced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{generate_schedule, ScheduleConfig, ScheduleKind};

    fn gpipe(p: usize, two_bp: bool) -> Vec<InstructionStream> {
        generate_schedule(&ScheduleConfig::new(ScheduleKind::GPipe, p, two_bp)).unwrap()
    }

    #[test]
    fn swapped_sends_are_a_fifo_violation() {
        let mut s = gpipe(4, false);
        let a = s[0].iter().position(|i| *i == Instruction::SendAct(0)).unwrap();
        let b = s[0].iter().position(|i| *i == Instruction::SendAct(1)).unwrap();
        s[0].instructions.swap(a, b);
        let err = validate_schedule(&s).unwrap_err();
        assert_eq!(err.rule, Rule::FifoOrder, "{err}");
        assert_eq!(err.rank, 1);
    }

    #[test]
    fn premature_p2_detected() {
        let mut s = gpipe(2, true);
        let b1 = s[0].iter().position(|i| *i == Instruction::BackwardP1(0)).unwrap();
        s[0].instructions.insert(
            b1,
            Instruction::BackwardP2 {
                micro_batches: vec![0],
                mode: crate::schedule::B2Mode::Concat,
            },
        );
        let err = validate_schedule(&s).unwrap_err();
        assert_eq!(err.rule, Rule::PrematureBackwardP2, "{err}");
        assert_eq!((err.rank, err.index), (0, b1));
    }

    #[test]
    fn missing_flush_detected() {
        let mut s = gpipe(2, false);
        s[1].instructions.pop();
        let err = validate_schedule(&s).unwrap_err();
        assert_eq!(err.rule, Rule::MissingOptimizerStep);
        assert_eq!(err.rank, 1);
    }

    #[test]
    fn deadlock_detected() {
        let mut s = gpipe(2, false);
        let sa = s[0].iter().position(|i| *i == Instruction::SendAct(1)).unwrap();
        s[0].instructions.remove(sa);
        let err = validate_schedule(&s).unwrap_err();
        assert_eq!(err.rule, Rule::Deadlock, "{err}");
    }

    #[test]
    fn mixed_backward_detected() {
        let mut s = gpipe(2, false);
        let bf = s[0].iter().position(|i| *i == Instruction::BackwardFull(0)).unwrap();
        s[0].instructions[bf] = Instruction::BackwardP1(0);
        let err = validate_schedule(&s).unwrap_err();
        assert_eq!(err.rule, Rule::MixedBackward);
    }

    #[test]
    fn wrong_rank_loss() {
        let mut s = gpipe(2, false);
        s[0].instructions.insert(2, Instruction::ComputeLoss(0));
        assert_eq!(validate_schedule(&s).unwrap_err().rule, Rule::WrongRank);
    }
}
