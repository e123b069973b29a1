//! Unit-based memory accounting: one unit is one micro-batch's worth of a
//! stage's activations (or intermediate derivatives).

use num_rational::Ratio;
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::schedule::{Instruction, InstructionStream};

/// Fraction `ρ` of a micro-batch's activations released at backward-p1,
/// per rank; the remaining `1 - ρ` is held until backward-p2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryModel {
    pub release: Vec<Ratio<i64>>,
}

impl MemoryModel {
    pub fn uniform(ranks: usize, release: Ratio<i64>) -> Self {
        Self {
            release: vec![release; ranks],
        }
    }

    /// Nothing is released before backward-p2.
    pub fn hold_all(ranks: usize) -> Self {
        Self::uniform(ranks, Ratio::from_integer(0))
    }

    /// `ρ = 1` for stages without parameters (everything can go at
    /// backward-p1), `ρ = 0` otherwise.
    pub fn for_stages(stages: &[Vec<LayerSpec>]) -> Self {
        Self {
            release: stages
                .iter()
                .map(|layers| Ratio::from_integer(if layers.iter().any(LayerSpec::has_params) { 0 } else { 1 }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPeaks {
    pub activation: Vec<Ratio<i64>>,
    pub interm_deriv: Vec<Ratio<i64>>,
    /// Peak of the sum of both counters.
    pub combined: Vec<Ratio<i64>>,
}

/// Replays each stream symbolically and records per-rank counter peaks.
pub fn peak_memory(streams: &[InstructionStream], model: &MemoryModel) -> Result<MemoryPeaks> {
    let p = streams.len();
    if model.release.len() != p {
        return Err(Error::InvalidArgument(format!(
            "memory model covers {} ranks, schedule has {p}",
            model.release.len()
        )));
    }
    let zero = Ratio::from_integer(0);
    let one = Ratio::from_integer(1);
    let mut peaks = MemoryPeaks {
        activation: vec![zero; p],
        interm_deriv: vec![zero; p],
        combined: vec![zero; p],
    };
    for (rank, stream) in streams.iter().enumerate() {
        let rho = model.release[rank];
        if rho < zero || rho > one {
            return Err(Error::InvalidArgument(format!("release fraction {rho} outside [0, 1]")));
        }
        let (mut act, mut ideriv) = (zero, zero);
        for (index, ins) in stream.iter().enumerate() {
            match ins {
                Instruction::Forward(_) => act += one,
                Instruction::BackwardFull(_) => act -= one,
                Instruction::BackwardP1(_) => {
                    act -= rho;
                    ideriv += one;
                }
                Instruction::BackwardP2 { micro_batches, .. } => {
                    let k = Ratio::from_integer(micro_batches.len() as i64);
                    act -= (one - rho) * k;
                    ideriv -= k;
                }
                Instruction::OptimizerStep if act != zero || ideriv != zero => {
                    return Err(Error::MemoryNotDrained {
                        rank,
                        activation: act.to_string(),
                        interm_deriv: ideriv.to_string(),
                    })
                }
                _ => continue,
            }
            let underflow = |counter| Error::MemoryUnderflow { rank, index, counter };
            if act < zero {
                return Err(underflow("activation"));
            }
            if ideriv < zero {
                return Err(underflow("intermediate-derivative"));
            }
            peaks.activation[rank] = peaks.activation[rank].max(act);
            peaks.interm_deriv[rank] = peaks.interm_deriv[rank].max(ideriv);
            peaks.combined[rank] = peaks.combined[rank].max(act + ideriv);
        }
    }
    Ok(peaks)
}
