//! Gradient oracles packaged as runnable suites: pipeline against the
//! single-process reference, and analytic against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::executor::{run_pipeline, run_reference, Batch, OptimizerConfig, OptimizerState};
use crate::layers::gradcheck::{finite_diff_grad, probe_objective, relative_error};
use crate::layers::{
    layer_backward_p1, layer_backward_p2, layer_forward, loss_forward_backward, LayerSpec, ParamSet,
};
use crate::model::{toy_mixed, toy_mlp, Model, ModelConfig};
use crate::schedule::{generate_schedule, B2Mode, ScheduleConfig, ScheduleKind};
use crate::tensor::Tensor;
use crate::train::synthetic_batch;

/// Finite-difference step and tolerance.
pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Allowed relative error when backward-p2 concatenates micro-batches.
pub const CONCAT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn max_rel_err(a: &[Vec<Tensor<f64>>], b: &[Vec<Tensor<f64>>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| {
            if x.shape() != y.shape() {
                f64::INFINITY
            } else {
                relative_error(x.data(), y.data())
            }
        })
        .fold(0.0, f64::max)
}

/// The 8-block model the equivalence grid runs on; contains every layer kind.
pub fn grid_model() -> ModelConfig {
    toy_mixed(8, 4, 2, 4)
}

/// Schedule points of the equivalence grid.
pub fn default_grid(ranks: &[usize]) -> Vec<ScheduleConfig> {
    let mut out = Vec::new();
    for &p in ranks {
        for kind in ScheduleKind::BASE {
            out.push(ScheduleConfig::new(kind, p, false));
            for mode in [B2Mode::Loop, B2Mode::Concat] {
                out.push(ScheduleConfig::new(kind, p, true).with_b2_mode(mode));
            }
        }
        for mode in [B2Mode::Loop, B2Mode::Concat] {
            out.push(ScheduleConfig::new(ScheduleKind::OneFOneB2MemEff, p, true).with_b2_mode(mode));
        }
    }
    out
}

pub fn grid_label(cfg: &ScheduleConfig) -> String {
    let mode = if cfg.two_bp { cfg.b2_mode.as_str() } else { "full" };
    format!("{} P={} M={} {}", cfg.kind, cfg.ranks, cfg.micro_batches, mode)
}

/// One pipeline step against [`run_reference`] from the same initial
/// parameters. Concat-mode points are held to [`CONCAT_TOLERANCE`]; every
/// other point must be bit-exact.
pub fn check_equivalence(model: &ModelConfig, cfg: &ScheduleConfig, batch: &Batch<f64>, seed: u64) -> Result<Check> {
    let model = model.clone().with_uniform_stages(cfg.ranks)?;
    let streams = generate_schedule(cfg)?;
    let mut reference = Model::<f64>::init(&model, seed)?;
    let (want, _) = run_reference(&mut reference, batch, cfg.micro_batches)?;
    let mut pipeline = Model::<f64>::init(&model, seed)?;
    let mut opts: Vec<_> = (0..cfg.ranks)
        .map(|_| OptimizerState::new(OptimizerConfig::sgd(0.0)))
        .collect();
    let got = run_pipeline(&mut pipeline, &mut opts, &streams, batch)?.grads;
    let tolerance = if cfg.two_bp && cfg.b2_mode == B2Mode::Concat {
        CONCAT_TOLERANCE
    } else {
        0.0
    };
    Ok(Check {
        name: grid_label(cfg),
        max_rel_err: max_rel_err(&got, &want),
        tolerance,
    })
}

/// [`check_equivalence`] over every point of `grid` on [`grid_model`].
pub fn equivalence_suite(grid: &[ScheduleConfig], seed: u64) -> Result<Vec<Check>> {
    let model = grid_model();
    let rows = grid.iter().map(|c| c.micro_batches).max().unwrap_or(1).max(1) * 2;
    let batch = synthetic_batch::<f64>(model.input_width(), model.classes(), rows, seed)?;
    grid.iter().map(|cfg| check_equivalence(&model, cfg, &batch, seed)).collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("non-empty shape")
}

fn layer_checks(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let rows = 2;
    let x = random(rng, &[rows, spec.input_width()]);
    let probe = random(rng, &[rows, spec.output_width()]);
    let init = ParamSet::<f64>::init(spec, rng)?;
    // RMSNorm gains start at one; perturb them so the check is not degenerate.
    let names: Vec<&'static str> = init.iter().flat_map(|p| p.params().iter().map(|q| q.name)).collect();
    let values: Vec<Tensor<f64>> = init
        .iter()
        .flat_map(|p| p.values())
        .map(|v| {
            let noise = random(rng, v.shape()).scale(0.3);
            v.add(&noise).expect("same shape")
        })
        .collect();
    let with_values = |vals: &[Tensor<f64>]| -> Option<ParamSet<f64>> {
        (!vals.is_empty()).then(|| {
            ParamSet::from_values(names.iter().copied().zip(vals.iter().cloned()).collect()).expect("valid")
        })
    };
    let objective = |vals: &[Tensor<f64>], input: &Tensor<f64>| -> f64 {
        let ps = with_values(vals);
        let (y, _) = layer_forward(spec, ps.as_ref(), input, 0).expect("forward on checked shapes");
        probe_objective(&y, &probe)
    };

    let mut params = with_values(&values);
    let (_, cache) = layer_forward(spec, params.as_ref(), &x, 0)?;
    let (dx, saved) = layer_backward_p1(spec, params.as_ref(), &probe, cache)?;
    let num_dx = finite_diff_grad(|inp| objective(&values, &inp[0]), std::slice::from_ref(&x), FD_EPS);
    let mut checks = vec![Check {
        name: format!("{} backward-p1", spec.name()),
        max_rel_err: relative_error(dx.data(), num_dx[0].data()),
        tolerance: FD_TOLERANCE,
    }];

    if let (Some(ps), Some(saved)) = (params.as_mut(), saved) {
        layer_backward_p2(spec, ps, saved)?;
        let num = finite_diff_grad(|vals| objective(vals, &x), &values, FD_EPS);
        let err = ps
            .grads()
            .iter()
            .zip(&num)
            .map(|(g, n)| relative_error(g.data(), n.data()))
            .fold(0.0, f64::max);
        checks.push(Check {
            name: format!("{} backward-p2", spec.name()),
            max_rel_err: err,
            tolerance: FD_TOLERANCE,
        });
    }
    Ok(checks)
}

fn loss_check(rng: &mut ChaCha8Rng) -> Result<Check> {
    let logits = random(rng, &[3, 5]);
    let targets = vec![0, 4, 2];
    let (_, dlogits) = loss_forward_backward(&logits, &targets)?;
    let num = finite_diff_grad(
        |p| loss_forward_backward(&p[0], &targets).expect("valid targets").0,
        std::slice::from_ref(&logits),
        FD_EPS,
    );
    Ok(Check {
        name: "softmax-cross-entropy backward".into(),
        max_rel_err: relative_error(dlogits.data(), num[0].data()),
        tolerance: FD_TOLERANCE,
    })
}

fn set_params(model: &mut Model<f64>, values: &[Tensor<f64>]) {
    let slots = model
        .stages
        .iter_mut()
        .flat_map(|s| s.params_mut().flat_map(|p| p.params_mut().iter_mut()).collect::<Vec<_>>());
    for (p, v) in slots.zip(values) {
        p.value = v.clone();
    }
}

/// The reference gradient of a small model against finite differences of
/// its mean loss.
pub fn model_check(config: &ModelConfig, name: &str, seed: u64) -> Result<Check> {
    let m = 2;
    let batch = synthetic_batch::<f64>(config.input_width(), config.classes(), 4, seed)?;
    let mut model = Model::<f64>::init(config, seed)?;
    let (grads, _) = run_reference(&mut model, &batch, m)?;
    let values: Vec<Tensor<f64>> = model.param_values().into_iter().flatten().collect();
    let num = finite_diff_grad(
        |vals| {
            set_params(&mut model, vals);
            run_reference(&mut model, &batch, m).expect("reference on valid model").1
        },
        &values,
        FD_EPS,
    );
    let err = grads
        .iter()
        .flatten()
        .zip(&num)
        .map(|(g, n)| relative_error(g.data(), n.data()))
        .fold(0.0, f64::max);
    Ok(Check {
        name: name.into(),
        max_rel_err: err,
        tolerance: FD_TOLERANCE,
    })
}

/// Backward-p1 and backward-p2 of every layer kind, the loss head, and two
/// whole models, against central differences.
pub fn finite_difference_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = [
        LayerSpec::Linear {
            in_features: 5,
            out_features: 3,
            bias: true,
        },
        LayerSpec::Relu { width: 6 },
        LayerSpec::rmsnorm(4, 8),
        LayerSpec::Attention { seq_len: 3, head_dim: 2 },
    ];
    let mut out = Vec::new();
    for spec in &layers {
        out.extend(layer_checks(spec, &mut rng)?);
    }
    out.push(loss_check(&mut rng)?);
    out.push(model_check(&toy_mlp(3, 5, 1, 3), "3-layer probe model", seed)?);
    out.push(model_check(&toy_mixed(2, 2, 2, 3), "mixed toy model", seed)?);
    Ok(out)
}
