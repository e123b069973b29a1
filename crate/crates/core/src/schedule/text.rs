//! Line-oriented text form of instruction streams, e.g.
//! `rank 1: RA0 F0 LOSS0 B1:0 SG0 B2:{0}c OPT`.

use std::fmt;

use super::{B2Mode, Instruction, InstructionStream};
use crate::error::{Error, Result};

type Ctor = fn(usize) -> Instruction;

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::LoadInput(m) => write!(f, "L{m}"),
            Instruction::Forward(m) => write!(f, "F{m}"),
            Instruction::SendAct(m) => write!(f, "SA{m}"),
            Instruction::RecvAct(m) => write!(f, "RA{m}"),
            Instruction::ComputeLoss(m) => write!(f, "LOSS{m}"),
            Instruction::SendGrad(m) => write!(f, "SG{m}"),
            Instruction::RecvGrad(m) => write!(f, "RG{m}"),
            Instruction::BackwardP1(m) => write!(f, "B1:{m}"),
            Instruction::BackwardFull(m) => write!(f, "BF:{m}"),
            Instruction::BackwardP2 { micro_batches, mode } => {
                let ids: Vec<String> = micro_batches.iter().map(usize::to_string).collect();
                let suffix = match mode {
                    B2Mode::Concat => 'c',
                    B2Mode::Loop => 'l',
                };
                write!(f, "B2:{{{}}}{suffix}", ids.join(","))
            }
            Instruction::OptimizerStep => f.write_str("OPT"),
        }
    }
}

impl fmt::Display for InstructionStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {}:", self.rank)?;
        for ins in &self.instructions {
            write!(f, " {ins}")?;
        }
        Ok(())
    }
}

fn parse_err(token: &str) -> Error {
    Error::InvalidArgument(format!("cannot parse instruction '{token}'"))
}

fn parse_id(s: &str, token: &str) -> Result<usize> {
    s.parse().map_err(|_| parse_err(token))
}

impl std::str::FromStr for Instruction {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        if token == "OPT" {
            return Ok(Instruction::OptimizerStep);
        }
        if let Some(rest) = token.strip_prefix("B2:{") {
            let (ids, suffix) = rest.split_once('}').ok_or_else(|| parse_err(token))?;
            let mode = match suffix {
                "c" => B2Mode::Concat,
                "l" => B2Mode::Loop,
                _ => return Err(parse_err(token)),
            };
            let micro_batches = ids
                .split(',')
                .map(|s| parse_id(s, token))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Instruction::BackwardP2 { micro_batches, mode });
        }
        let table: [(&str, Ctor); 9] = [
            ("B1:", Instruction::BackwardP1),
            ("BF:", Instruction::BackwardFull),
            ("LOSS", Instruction::ComputeLoss),
            ("SA", Instruction::SendAct),
            ("RA", Instruction::RecvAct),
            ("SG", Instruction::SendGrad),
            ("RG", Instruction::RecvGrad),
            ("L", Instruction::LoadInput),
            ("F", Instruction::Forward),
        ];
        for (prefix, make) in table {
            if let Some(id) = token.strip_prefix(prefix) {
                return Ok(make(parse_id(id, token)?));
            }
        }
        Err(parse_err(token))
    }
}

/// Parses streams written one per line by the `Display` impl.
pub fn parse_streams(text: &str) -> Result<Vec<InstructionStream>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (head, body) = line
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("missing 'rank k:' in '{line}'")))?;
            let rank = head
                .trim()
                .strip_prefix("rank ")
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad stream header '{head}'")))?;
            let instructions = body
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<Vec<Instruction>>>()?;
            Ok(InstructionStream { rank, instructions })
        })
        .collect()
}
