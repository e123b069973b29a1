//! Threaded execution of instruction streams with real tensor math.
//!
//! One worker thread per rank owns its stage; ranks exchange activations and
//! gradients through FIFO queues. The single-process reference
//! ([`run_reference`]) defines the gradients every pipeline run must match.

mod fabric;
mod optimizer;
mod trace;

use std::collections::HashMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::layers::loss_forward_backward;
use crate::model::{Model, Stage};
use crate::schedule::{validate_schedule, Instruction, InstructionStream};
use crate::tensor::{Element, Tensor};

use fabric::{Channel, Fabric};

pub use fabric::{BlockedRank, DeadlockReport};
pub use optimizer::{OptimizerConfig, OptimizerState};
pub use trace::{Trace, TraceEvent};

/// A mini-batch: inputs `[B x width]` and one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub targets: Vec<usize>,
}

impl<T: Element> Batch<T> {
    /// Splits into `m` equal micro-batches along the batch dimension.
    pub fn split(&self, m: usize) -> Result<Vec<Batch<T>>> {
        let b = self.inputs.rows();
        if self.targets.len() != b {
            return Err(Error::Batch(format!("{} targets for {b} rows", self.targets.len())));
        }
        if m == 0 || !b.is_multiple_of(m) {
            return Err(Error::Batch(format!(
                "mini-batch of {b} rows is not divisible into {m} micro-batches"
            )));
        }
        let size = b / m;
        (0..m)
            .map(|i| {
                Ok(Batch {
                    inputs: self.inputs.slice_rows(i * size, (i + 1) * size)?,
                    targets: self.targets[i * size..(i + 1) * size].to_vec(),
                })
            })
            .collect()
    }
}

/// Per-micro-batch loss and output gradient, scaled so that gradients
/// accumulated over `m` micro-batches equal the mini-batch mean gradient.
fn micro_batch_loss<T: Element>(logits: &Tensor<T>, targets: &[usize], m: usize) -> Result<(T, Tensor<T>)> {
    let (loss, grad) = loss_forward_backward(logits, targets)?;
    if m == 1 {
        return Ok((loss, grad));
    }
    let inv_m = T::one() / T::from_usize(m).expect("micro-batch count fits");
    Ok((loss, grad.scale(inv_m)))
}

fn mean_loss<T: Element>(losses: &[T]) -> T {
    let sum = losses.iter().fold(T::zero(), |a, &b| a + b);
    sum / T::from_usize(losses.len().max(1)).expect("count fits")
}

/// Result of one synchronous training step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    /// Mean loss over the mini-batch.
    pub loss: T,
    /// Accumulated gradients just before the optimizer step, per
    /// parameterized layer in global layer order.
    pub grads: Vec<Vec<Tensor<T>>>,
    pub trace: Trace,
}

/// Single-process ground truth: forward and combined backward per
/// micro-batch in order, accumulating gradients. Leaves the model's
/// parameters and gradient buffers unchanged.
pub fn run_reference<T: Element>(model: &mut Model<T>, batch: &Batch<T>, m: usize) -> Result<(Vec<Vec<Tensor<T>>>, T)> {
    model.zero_grad();
    let micro = batch.split(m)?;
    let mut losses = Vec::with_capacity(m);
    for (mb, part) in micro.iter().enumerate() {
        let mut h = part.inputs.clone();
        for stage in &mut model.stages {
            h = stage.forward(mb, &h)?;
        }
        let (loss, mut g) = micro_batch_loss(&h, &part.targets, m)?;
        losses.push(loss);
        for stage in model.stages.iter_mut().rev() {
            g = stage.backward_full(mb, &g)?;
        }
    }
    let grads = model.grads();
    model.zero_grad();
    Ok((grads, mean_loss(&losses)))
}

/// Executes one training step of `streams` on `model`, one thread per rank.
///
/// Streams are validated first. Each rank's optimizer state is in
/// `optimizers[rank]`.
pub fn run_pipeline<T: Element>(
    model: &mut Model<T>,
    optimizers: &mut [OptimizerState<T>],
    streams: &[InstructionStream],
    batch: &Batch<T>,
) -> Result<StepOutcome<T>> {
    validate_schedule(streams).map_err(Error::Schedule)?;
    run_pipeline_unchecked(model, optimizers, streams, batch)
}

struct WorkerOutput<T> {
    grads: Vec<Vec<Tensor<T>>>,
    events: Vec<TraceEvent>,
    losses: Vec<T>,
}

/// [`run_pipeline`] without the up-front validation; malformed streams
/// surface as worker errors or a deadlock report.
pub fn run_pipeline_unchecked<T: Element>(
    model: &mut Model<T>,
    optimizers: &mut [OptimizerState<T>],
    streams: &[InstructionStream],
    batch: &Batch<T>,
) -> Result<StepOutcome<T>> {
    let p = model.num_stages();
    if streams.len() != p || optimizers.len() != p {
        return Err(Error::InvalidArgument(format!(
            "{p} stages, {} streams, {} optimizers",
            streams.len(),
            optimizers.len()
        )));
    }
    let m = streams[0]
        .iter()
        .filter(|i| matches!(i, Instruction::Forward(_)))
        .count();
    let micro = batch.split(m)?;
    let fabric = Fabric::new(p, m);
    let fault = crate::layers::fault::rmsnorm_p2_sign_flipped();
    let origin = Instant::now();

    let results: Vec<Result<WorkerOutput<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = model
            .stages
            .iter_mut()
            .zip(optimizers.iter_mut())
            .zip(streams)
            .enumerate()
            .map(|(rank, ((stage, opt), stream))| {
                let fabric = &fabric;
                let micro = &micro;
                scope.spawn(move || {
                    crate::layers::fault::flip_rmsnorm_p2_sign(fault);
                    let worker = Worker {
                        rank,
                        micro_batches: m,
                        stage,
                        optimizer: opt,
                        fabric,
                        micro,
                        origin,
                    };
                    let out = worker.run(stream);
                    match &out {
                        Ok(_) => fabric.finish(rank),
                        Err(e) => fabric.fail(rank, e),
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("worker panicked".into()))))
            .collect()
    });

    if let Some(root) = fabric.failure() {
        model.stages.iter_mut().for_each(Stage::clear_state);
        return Err(root);
    }
    let mut grads = Vec::new();
    let mut events = Vec::new();
    let mut losses = Vec::new();
    for r in results {
        let out = r?;
        grads.extend(out.grads);
        events.extend(out.events);
        losses.extend(out.losses);
    }
    Ok(StepOutcome {
        loss: mean_loss(&losses),
        grads,
        trace: Trace { events },
    })
}

struct Worker<'a, T> {
    rank: usize,
    micro_batches: usize,
    stage: &'a mut Stage<T>,
    optimizer: &'a mut OptimizerState<T>,
    fabric: &'a Fabric<T>,
    micro: &'a [Batch<T>],
    origin: Instant,
}

impl<T: Element> Worker<'_, T> {
    fn run(self, stream: &InstructionStream) -> Result<WorkerOutput<T>> {
        let Worker {
            rank,
            micro_batches,
            stage,
            optimizer,
            fabric,
            micro,
            origin,
        } = self;
        let err = |reason: String| Error::Worker { rank, reason };
        let mut inputs: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut outputs: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut grads_in: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut grads_out: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut losses = Vec::new();
        let mut snapshot = None;
        let mut events = Vec::with_capacity(stream.len());
        let take = |map: &mut HashMap<usize, Tensor<T>>, mb: usize, what: &str| {
            map.remove(&mb)
                .ok_or_else(|| err(format!("no {what} for micro-batch {mb}")))
        };

        for (index, ins) in stream.iter().enumerate() {
            let label = ins.to_string();
            let at = (index, label.as_str());
            let start = origin.elapsed().as_secs_f64();
            match ins {
                Instruction::LoadInput(mb) => {
                    let part = micro.get(*mb).ok_or_else(|| err(format!("no input micro-batch {mb}")))?;
                    inputs.insert(*mb, part.inputs.clone());
                }
                Instruction::RecvAct(mb) => {
                    let t = fabric.recv(rank, Channel::Act(rank - 1), *mb, at)?;
                    inputs.insert(*mb, t);
                }
                Instruction::Forward(mb) => {
                    let x = take(&mut inputs, *mb, "input activation")?;
                    outputs.insert(*mb, stage.forward(*mb, &x)?);
                }
                Instruction::SendAct(mb) => {
                    let y = take(&mut outputs, *mb, "output activation")?;
                    fabric.send(rank, Channel::Act(rank), *mb, y, at)?;
                }
                Instruction::ComputeLoss(mb) => {
                    if stage.loss_classes().is_none() {
                        return Err(err("loss requested on a stage without a loss head".into()));
                    }
                    let logits = take(&mut outputs, *mb, "logits")?;
                    let (loss, g) = micro_batch_loss(&logits, &micro[*mb].targets, micro_batches)?;
                    losses.push(loss);
                    grads_in.insert(*mb, g);
                }
                Instruction::RecvGrad(mb) => {
                    let g = fabric.recv(rank, Channel::Grad(rank), *mb, at)?;
                    grads_in.insert(*mb, g);
                }
                Instruction::BackwardP1(mb) | Instruction::BackwardFull(mb) => {
                    let dy = take(&mut grads_in, *mb, "output gradient")?;
                    let dx = if matches!(ins, Instruction::BackwardP1(_)) {
                        stage.backward_p1(*mb, &dy)?
                    } else {
                        stage.backward_full(*mb, &dy)?
                    };
                    if rank > 0 {
                        grads_out.insert(*mb, dx);
                    }
                }
                Instruction::SendGrad(mb) => {
                    let g = take(&mut grads_out, *mb, "input gradient")?;
                    fabric.send(rank, Channel::Grad(rank - 1), *mb, g, at)?;
                }
                Instruction::BackwardP2 { micro_batches: mbs, mode } => stage.backward_p2(mbs, *mode)?,
                Instruction::OptimizerStep => {
                    if stage.live_caches() != 0 || stage.live_saved() != 0 {
                        return Err(err(format!(
                            "flush with {} forward caches and {} backward-p2 entries still live",
                            stage.live_caches(),
                            stage.live_saved()
                        )));
                    }
                    if let Some(c) = stage.params().map(|p| p.contributions()).find(|&c| c != micro_batches) {
                        return Err(err(format!(
                            "gradient buffer has {c} micro-batch contributions, expected {micro_batches}"
                        )));
                    }
                    snapshot = Some(stage.grads());
                    optimizer.apply(stage.params_mut().flat_map(|p| p.params_mut().iter_mut()));
                    stage.zero_grad();
                }
            }
            events.push(TraceEvent {
                rank,
                op: ins.op_name().to_string(),
                mb: ins.micro_batches(),
                start,
                end: origin.elapsed().as_secs_f64(),
            });
        }
        Ok(WorkerOutput {
            grads: snapshot.ok_or_else(|| err("stream ended without an optimizer step".into()))?,
            events,
            losses,
        })
    }
}
