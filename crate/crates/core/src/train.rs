//! Seeded synthetic training runs on top of the executor.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::bubble_ratio_from_trace;
use crate::error::{Error, Result};
use crate::executor::{run_pipeline, Batch, OptimizerConfig, OptimizerState, Trace};
use crate::model::{Model, ModelConfig};
use crate::schedule::{generate_schedule, ScheduleConfig};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Rows per mini-batch; must be divisible by the micro-batch count.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Inputs drawn from `U(-1, 1)`, targets uniform over the classes.
pub fn synthetic_batch<T: Element>(width: usize, classes: usize, rows: usize, seed: u64) -> Result<Batch<T>> {
    if classes == 0 {
        return Err(Error::InvalidArgument("model has no classifier head".into()));
    }
    // distinct stream from parameter initialization under the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let data = (0..rows * width)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    let inputs = Tensor::new(vec![rows, width], data)?;
    let targets = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    Ok(Batch { inputs, targets })
}

/// SHA-256 over the little-endian bytes of every tensor, in order.
pub fn checksum<T: Element>(tensors: &[Vec<Tensor<T>>]) -> String {
    let mut h = Sha256::new();
    for t in tensors.iter().flatten() {
        for v in t.data() {
            h.update(v.to_le_bytes_vec());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss of each step, before that step's update.
    pub losses: Vec<f64>,
    /// All steps laid end to end.
    pub trace: Trace,
    /// Wall-clock time spent inside pipeline steps.
    pub seconds: f64,
    pub samples_per_sec: f64,
    /// Mean of the per-step measured bubble ratios.
    pub bubble_ratio: f64,
    pub grad_checksum: String,
    pub param_checksum: String,
}

/// Runs `cfg.steps` synchronous steps on one fixed synthetic mini-batch.
pub fn train<T: Element>(cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("at least one step is required".into()));
    }
    if cfg.model.num_stages() != cfg.schedule.ranks {
        return Err(Error::InvalidArgument(format!(
            "model has {} stages, schedule has {} ranks",
            cfg.model.num_stages(),
            cfg.schedule.ranks
        )));
    }
    let streams = generate_schedule(&cfg.schedule)?;
    let mut model = Model::<T>::init(&cfg.model, cfg.seed)?;
    let mut optimizers: Vec<_> = (0..cfg.schedule.ranks)
        .map(|_| OptimizerState::new(cfg.optimizer))
        .collect();
    let batch = synthetic_batch::<T>(cfg.model.input_width(), cfg.model.classes(), cfg.batch_size, cfg.seed)?;
    batch.split(cfg.schedule.micro_batches)?;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut trace = Trace::default();
    let mut seconds = 0.0;
    let mut bubble = 0.0;
    let mut grads = Vec::new();
    for _ in 0..cfg.steps {
        let start = Instant::now();
        let out = run_pipeline(&mut model, &mut optimizers, &streams, &batch)?;
        let elapsed = start.elapsed().as_secs_f64();
        bubble += bubble_ratio_from_trace(&out.trace)?;
        trace.events.extend(out.trace.shifted(seconds).events);
        seconds += elapsed;
        losses.push(out.loss.to_f64().unwrap_or(f64::NAN));
        grads = out.grads;
    }
    Ok(TrainReport {
        losses,
        trace,
        seconds,
        samples_per_sec: (cfg.steps * cfg.batch_size) as f64 / seconds,
        bubble_ratio: bubble / cfg.steps as f64,
        grad_checksum: checksum(&grads),
        param_checksum: checksum(&model.param_values()),
    })
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub without: TrainReport,
    pub with: TrainReport,
    /// Best-of-`repeats` throughput with 2BP over best-of-`repeats` without.
    pub gain: f64,
}

/// Trains the same configuration without and with 2BP, `repeats` times
/// each (interleaved), and compares the best throughput of each.
pub fn compare_two_bp<T: Element>(cfg: &TrainConfig, repeats: usize) -> Result<Comparison> {
    let mut base = cfg.clone();
    base.schedule.two_bp = false;
    let mut split = cfg.clone();
    split.schedule.two_bp = true;
    let mut best: [Option<TrainReport>; 2] = [None, None];
    for _ in 0..repeats.max(1) {
        for (slot, c) in [&base, &split].into_iter().enumerate() {
            let r = train::<T>(c)?;
            if best[slot].as_ref().is_none_or(|b| r.samples_per_sec > b.samples_per_sec) {
                best[slot] = Some(r);
            }
        }
    }
    let [without, with] = best.map(|b| b.expect("at least one repeat"));
    Ok(Comparison {
        gain: with.samples_per_sec / without.samples_per_sec,
        without,
        with,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy_mlp;
    use crate::schedule::ScheduleKind;

    fn cfg(p: usize, two_bp: bool) -> TrainConfig {
        TrainConfig {
            schedule: ScheduleConfig::new(ScheduleKind::OneFOneB1, p, two_bp),
            model: toy_mlp(4, 8, 4, 3).with_uniform_stages(p).unwrap(),
            optimizer: OptimizerConfig::sgd(0.05),
            batch_size: 8,
            steps: 3,
            seed: 3,
        }
    }

    #[test]
    fn synthetic_data_is_seeded() {
        let a = synthetic_batch::<f64>(3, 4, 6, 1).unwrap();
        assert_eq!(a, synthetic_batch::<f64>(3, 4, 6, 1).unwrap());
        assert_ne!(a, synthetic_batch::<f64>(3, 4, 6, 2).unwrap());
        assert!(a.targets.iter().all(|&t| t < 4));
        assert!(a.inputs.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn repeated_runs_have_identical_checksums() {
        let a = train::<f64>(&cfg(2, true)).unwrap();
        let b = train::<f64>(&cfg(2, true)).unwrap();
        assert_eq!(a.grad_checksum, b.grad_checksum);
        assert_eq!(a.param_checksum, b.param_checksum);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.trace.events.len(), b.trace.events.len());
    }

    #[test]
    fn indivisible_batch_is_rejected() {
        let mut c = cfg(2, false);
        c.batch_size = 7;
        assert!(matches!(train::<f64>(&c), Err(Error::Batch(_))));
    }

    #[test]
    fn checksum_depends_on_bits() {
        let t = |v: f64| vec![vec![Tensor::<f64>::from_f64(vec![1], &[v]).unwrap()]];
        assert_eq!(checksum(&t(1.0)), checksum(&t(1.0)));
        assert_ne!(checksum(&t(1.0)), checksum(&t(-1.0)));
    }
}
