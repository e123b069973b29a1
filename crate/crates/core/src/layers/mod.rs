//! Layers with a split backward pass.
//!
//! Every layer has a forward and a backward-p1 (gradient with respect to the
//! layer input). Layers that own parameters additionally have a backward-p2
//! (gradient with respect to the parameters), which can run immediately after
//! backward-p1 ([`layer_backward_full`]) or be deferred and batched over
//! several micro-batches ([`P2Saved::concat`]).

mod attention;
pub mod gradcheck;
mod loss;
mod rmsnorm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_batch, Element, Tensor};

pub use loss::loss_forward_backward;

pub const DEFAULT_RMSNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    Relu,
    RmsNorm,
    Attention,
    SoftmaxCrossEntropyLoss,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::RmsNorm)
    }
}

/// Shape and hyperparameters of one layer. Widths are per batch row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = x Wᵀ + b`.
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu {
        width: usize,
    },
    /// Normalizes every contiguous `dim`-sized chunk of a row by its RMS and
    /// scales by a shared gain of length `dim`. `width` must be a multiple of
    /// `dim`.
    RmsNorm {
        dim: usize,
        width: usize,
        eps: f64,
    },
    /// Parameter-free single-head self-attention with `Q = K = V = x`, where
    /// each row holds `seq_len` tokens of size `head_dim`.
    Attention {
        seq_len: usize,
        head_dim: usize,
    },
    /// Terminal marker: the stage output is treated as logits over `classes`.
    SoftmaxCrossEntropy {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn rmsnorm(dim: usize, width: usize) -> Self {
        LayerSpec::RmsNorm {
            dim,
            width,
            eps: DEFAULT_RMSNORM_EPS,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::Relu { .. } => LayerKind::Relu,
            LayerSpec::RmsNorm { .. } => LayerKind::RmsNorm,
            LayerSpec::Attention { .. } => LayerKind::Attention,
            LayerSpec::SoftmaxCrossEntropy { .. } => LayerKind::SoftmaxCrossEntropyLoss,
        }
    }

    pub fn has_params(&self) -> bool {
        self.kind().has_params()
    }

    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_features, .. } => in_features,
            LayerSpec::Relu { width } | LayerSpec::RmsNorm { width, .. } => width,
            LayerSpec::Attention { seq_len, head_dim } => seq_len * head_dim,
            LayerSpec::SoftmaxCrossEntropy { classes } => classes,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Linear { out_features, .. } => out_features,
            _ => self.input_width(),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => format!("Linear({in_features}->{out_features})"),
            LayerSpec::Relu { width } => format!("ReLU({width})"),
            LayerSpec::RmsNorm { dim, width, .. } => format!("RMSNorm({dim}x{})", width / dim),
            LayerSpec::Attention { seq_len, head_dim } => format!("Attention({seq_len}x{head_dim})"),
            LayerSpec::SoftmaxCrossEntropy { classes } => format!("SoftmaxCE({classes})"),
        }
    }

    /// Checks internal consistency of the hyperparameters.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::layer(self.name(), reason));
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } if in_features == 0 || out_features == 0 => bad("zero-sized linear layer"),
            LayerSpec::RmsNorm { dim, width, eps } => {
                if dim == 0 || width == 0 || width % dim != 0 {
                    bad("width must be a positive multiple of dim")
                } else if eps.is_nan() || eps < 0.0 {
                    bad("eps must be non-negative")
                } else {
                    Ok(())
                }
            }
            LayerSpec::Attention { seq_len, head_dim } if seq_len == 0 || head_dim == 0 => {
                bad("zero-sized attention")
            }
            LayerSpec::Relu { width: 0 } => bad("zero-width relu"),
            LayerSpec::SoftmaxCrossEntropy { classes: 0 } => bad("zero classes"),
            _ => Ok(()),
        }
    }
}

/// One learnable tensor with its gradient accumulation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: &'static str,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameters of one layer plus the number of micro-batch contributions
/// accumulated into the gradient buffers since the last [`ParamSet::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    contributions: usize,
}

impl<T: Element> ParamSet<T> {
    pub fn from_values(values: Vec<(&'static str, Tensor<T>)>) -> Result<Self> {
        let params = values
            .into_iter()
            .map(|(name, value)| {
                let grad = Tensor::zeros(value.shape())?;
                Ok(Param { name, value, grad })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            contributions: 0,
        })
    }

    /// Initial parameters for `spec`, or `None` for parameter-free layers.
    ///
    /// Linear weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// RMSNorm gains start at one.
    pub fn init<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Result<Option<Self>> {
        match *spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let bound = 1.0 / (in_features as f64).sqrt();
                let mut draw = |n: usize| -> Vec<T> {
                    (0..n)
                        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
                        .collect()
                };
                let weight = Tensor::new(vec![out_features, in_features], draw(out_features * in_features))?;
                let mut values = vec![("weight", weight)];
                if bias {
                    values.push(("bias", Tensor::new(vec![out_features], draw(out_features))?));
                }
                Ok(Some(Self::from_values(values)?))
            }
            LayerSpec::RmsNorm { dim, .. } => Ok(Some(Self::from_values(vec![(
                "gain",
                Tensor::full(&[dim], T::one())?,
            )])?)),
            _ => Ok(None),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    fn value(&self, name: &str, layer: &LayerSpec) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::layer(layer.name(), format!("missing parameter '{name}'")))
    }

    fn accumulate(&mut self, name: &str, contribution: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::layer("param set", format!("missing parameter '{name}'")))?;
        p.grad.add_assign(contribution)
    }

    /// Micro-batches folded into the gradient buffers since the last reset.
    pub fn contributions(&self) -> usize {
        self.contributions
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill_zero();
        }
        self.contributions = 0;
    }

    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

/// Values retained by a forward pass for the matching backward-p1.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    micro_batch: usize,
    state: CacheState<T>,
}

#[derive(Debug, Clone)]
enum CacheState<T> {
    Linear { input: Tensor<T> },
    Relu { mask: Tensor<T> },
    RmsNorm { input: Tensor<T>, rms: Vec<T> },
    Attention { input: Tensor<T>, weights: Vec<Tensor<T>> },
    Passthrough,
}

impl<T: Element> ForwardCache<T> {
    pub fn micro_batch(&self) -> usize {
        self.micro_batch
    }

    /// Number of scalars retained.
    pub fn footprint(&self) -> usize {
        match &self.state {
            CacheState::Linear { input } => input.len(),
            CacheState::Relu { mask } => mask.len(),
            CacheState::RmsNorm { input, rms } => input.len() + rms.len(),
            CacheState::Attention { input, weights } => {
                input.len() + weights.iter().map(Tensor::len).sum::<usize>()
            }
            CacheState::Passthrough => 0,
        }
    }
}

/// Inputs a parameterized layer needs for a deferred backward-p2: the
/// (possibly normalized) input activation and the output gradient, for one
/// or more micro-batches concatenated along the batch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct P2Saved<T> {
    micro_batches: Vec<usize>,
    input: Tensor<T>,
    output_grad: Tensor<T>,
}

impl<T: Element> P2Saved<T> {
    pub fn micro_batches(&self) -> &[usize] {
        &self.micro_batches
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn output_grad(&self) -> &Tensor<T> {
        &self.output_grad
    }

    pub fn footprint(&self) -> usize {
        self.input.len() + self.output_grad.len()
    }

    /// Joins several saved entries into one covering all their micro-batches,
    /// rows in list order.
    pub fn concat(parts: Vec<P2Saved<T>>) -> Result<P2Saved<T>> {
        if parts.len() == 1 {
            return Ok(parts.into_iter().next().expect("one element"));
        }
        let inputs: Vec<_> = parts.iter().map(|p| p.input.clone()).collect();
        let grads: Vec<_> = parts.iter().map(|p| p.output_grad.clone()).collect();
        Ok(P2Saved {
            micro_batches: parts.iter().flat_map(|p| p.micro_batches.iter().copied()).collect(),
            input: concat_batch(&inputs)?,
            output_grad: concat_batch(&grads)?,
        })
    }
}

fn check_input<T: Element>(spec: &LayerSpec, x: &Tensor<T>) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != spec.input_width() {
        return Err(Error::layer(
            spec.name(),
            format!("expected input [b x {}], got {:?}", spec.input_width(), x.shape()),
        ));
    }
    Ok(())
}

fn require_params<'a, T>(spec: &LayerSpec, params: Option<&'a ParamSet<T>>) -> Result<&'a ParamSet<T>> {
    params.ok_or_else(|| Error::layer(spec.name(), "missing parameters"))
}

fn linear_weight_bias<'a, T: Element>(
    spec: &LayerSpec,
    params: &'a ParamSet<T>,
) -> Result<(&'a Tensor<T>, Option<&'a Tensor<T>>)> {
    let LayerSpec::Linear {
        in_features,
        out_features,
        bias,
    } = *spec
    else {
        unreachable!("linear_weight_bias on {}", spec.name());
    };
    let w = params.value("weight", spec)?;
    if w.shape() != [out_features, in_features] {
        return Err(Error::layer(spec.name(), format!("weight has shape {:?}", w.shape())));
    }
    let b = if bias {
        Some(params.value("bias", spec)?)
    } else {
        None
    };
    Ok((w, b))
}

/// Forward pass of one layer for one micro-batch.
pub fn layer_forward<T: Element>(
    spec: &LayerSpec,
    params: Option<&ParamSet<T>>,
    x: &Tensor<T>,
    micro_batch: usize,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_input(spec, x)?;
    let (y, state) = match spec {
        LayerSpec::Linear { .. } => {
            let (w, b) = linear_weight_bias(spec, require_params(spec, params)?)?;
            let mut y = x.matmul(&w.transpose2d()?)?;
            if let Some(b) = b {
                let n = b.len();
                for row in y.data_mut().chunks_mut(n) {
                    for (v, &bj) in row.iter_mut().zip(b.data()) {
                        *v = *v + bj;
                    }
                }
            }
            (y, CacheState::Linear { input: x.clone() })
        }
        LayerSpec::Relu { .. } => (x.relu(), CacheState::Relu { mask: x.relu_mask() }),
        LayerSpec::RmsNorm { dim, eps, .. } => {
            let gain = require_params(spec, params)?.value("gain", spec)?;
            if gain.len() != *dim {
                return Err(Error::layer(spec.name(), "gain length differs from dim"));
            }
            let (y, rms) = rmsnorm::forward(x, gain, *dim, T::from_f64_lossy(*eps));
            (
                y,
                CacheState::RmsNorm {
                    input: x.clone(),
                    rms,
                },
            )
        }
        LayerSpec::Attention { seq_len, head_dim } => {
            let (y, weights) = attention::forward(x, *seq_len, *head_dim)?;
            (
                y,
                CacheState::Attention {
                    input: x.clone(),
                    weights,
                },
            )
        }
        LayerSpec::SoftmaxCrossEntropy { .. } => (x.clone(), CacheState::Passthrough),
    };
    Ok((y, ForwardCache { micro_batch, state }))
}

/// Backward-p1: gradient with respect to the layer input.
///
/// Consumes the forward cache. For parameterized layers the returned
/// [`P2Saved`] holds what backward-p2 needs; parameter-free layers return
/// `None` and keep nothing.
pub fn layer_backward_p1<T: Element>(
    spec: &LayerSpec,
    params: Option<&ParamSet<T>>,
    dy: &Tensor<T>,
    cache: ForwardCache<T>,
) -> Result<(Tensor<T>, Option<P2Saved<T>>)> {
    let mb = cache.micro_batch;
    let mismatch = || Error::layer(spec.name(), "forward cache belongs to a different layer kind");
    if dy.rank() != 2 || dy.shape()[1] != spec.output_width() {
        return Err(Error::layer(
            spec.name(),
            format!("output gradient has shape {:?}", dy.shape()),
        ));
    }
    match (spec, cache.state) {
        (LayerSpec::Linear { .. }, CacheState::Linear { input }) => {
            let (w, _) = linear_weight_bias(spec, require_params(spec, params)?)?;
            if input.rows() != dy.rows() {
                return Err(Error::layer(spec.name(), "batch size of gradient differs from cache"));
            }
            let dx = dy.matmul(w)?;
            let saved = P2Saved {
                micro_batches: vec![mb],
                input,
                output_grad: dy.clone(),
            };
            Ok((dx, Some(saved)))
        }
        (LayerSpec::Relu { .. }, CacheState::Relu { mask }) => Ok((dy.mul(&mask)?, None)),
        (LayerSpec::RmsNorm { dim, .. }, CacheState::RmsNorm { input, rms }) => {
            let gain = require_params(spec, params)?.value("gain", spec)?;
            if input.shape() != dy.shape() {
                return Err(Error::layer(spec.name(), "gradient shape differs from cache"));
            }
            let (dx, normalized) = rmsnorm::backward_input(&input, &rms, gain, dy, *dim);
            let saved = P2Saved {
                micro_batches: vec![mb],
                input: normalized,
                output_grad: dy.clone(),
            };
            Ok((dx, Some(saved)))
        }
        (LayerSpec::Attention { seq_len, head_dim }, CacheState::Attention { input, weights }) => {
            if input.shape() != dy.shape() {
                return Err(Error::layer(spec.name(), "gradient shape differs from cache"));
            }
            Ok((attention::backward(&input, &weights, dy, *seq_len, *head_dim)?, None))
        }
        (LayerSpec::SoftmaxCrossEntropy { .. }, CacheState::Passthrough) => Ok((dy.clone(), None)),
        _ => Err(mismatch()),
    }
}

/// Backward-p2: accumulates the parameter gradient for every micro-batch
/// covered by `saved` into the gradient buffers.
pub fn layer_backward_p2<T: Element>(
    spec: &LayerSpec,
    params: &mut ParamSet<T>,
    saved: P2Saved<T>,
) -> Result<()> {
    let P2Saved {
        micro_batches,
        input,
        output_grad,
    } = saved;
    match *spec {
        LayerSpec::Linear { bias, .. } => {
            let dw = output_grad.transpose2d()?.matmul(&input)?;
            params.accumulate("weight", &dw)?;
            if bias {
                params.accumulate("bias", &output_grad.sum_rows()?)?;
            }
        }
        LayerSpec::RmsNorm { dim, .. } => {
            let mut dg = rmsnorm::gain_grad(&input, &output_grad, dim);
            if fault::rmsnorm_p2_sign_flipped() {
                dg = dg.scale(-T::one());
            }
            params.accumulate("gain", &dg)?;
        }
        _ => return Err(Error::layer(spec.name(), "layer has no parameters")),
    }
    params.contributions += micro_batches.len();
    Ok(())
}

/// Combined backward: backward-p1 followed immediately by backward-p2.
pub fn layer_backward_full<T: Element>(
    spec: &LayerSpec,
    params: Option<&mut ParamSet<T>>,
    dy: &Tensor<T>,
    cache: ForwardCache<T>,
) -> Result<Tensor<T>> {
    let (dx, saved) = layer_backward_p1(spec, params.as_deref(), dy, cache)?;
    if let Some(saved) = saved {
        let params = params.ok_or_else(|| Error::layer(spec.name(), "missing parameters"))?;
        layer_backward_p2(spec, params, saved)?;
    }
    Ok(dx)
}

/// Test hook for checking that gradient verification catches a broken
/// backward-p2. Thread-local so concurrent tests are unaffected.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static RMSNORM_P2_SIGN: Cell<bool> = const { Cell::new(false) };
    }

    pub fn flip_rmsnorm_p2_sign(enabled: bool) {
        RMSNORM_P2_SIGN.with(|c| c.set(enabled));
    }

    pub(crate) fn rmsnorm_p2_sign_flipped() -> bool {
        RMSNORM_P2_SIGN.with(Cell::get)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn identity_linear(n: usize) -> (LayerSpec, ParamSet<f64>) {
        let spec = LayerSpec::linear(n, n);
        let params = ParamSet::from_values(vec![
            ("weight", Tensor::identity(n).unwrap()),
            ("bias", Tensor::zeros(&[n]).unwrap()),
        ])
        .unwrap();
        (spec, params)
    }

    #[test]
    fn has_params_matches_kind() {
        assert!(LayerSpec::linear(2, 2).has_params());
        assert!(LayerSpec::rmsnorm(2, 2).has_params());
        assert!(!LayerSpec::Relu { width: 2 }.has_params());
        assert!(!LayerSpec::Attention { seq_len: 2, head_dim: 2 }.has_params());
        assert!(!LayerSpec::SoftmaxCrossEntropy { classes: 2 }.has_params());
    }

    #[test]
    fn linear_identity_forward_and_p1() {
        let (spec, params) = identity_linear(2);
        let x = t(&[&[1.0, 2.0]]);
        let (y, cache) = layer_forward(&spec, Some(&params), &x, 0).unwrap();
        assert_eq!(y, x);
        let dy = t(&[&[5.0, -1.0]]);
        let (dx, saved) = layer_backward_p1(&spec, Some(&params), &dy, cache).unwrap();
        assert_eq!(dx, dy);
        assert_eq!(saved.unwrap().micro_batches(), &[0]);
    }

    #[test]
    fn linear_p2_by_hand() {
        let (spec, mut params) = identity_linear(2);
        let x = t(&[&[1.0, 0.0]]);
        let (_, cache) = layer_forward(&spec, Some(&params), &x, 0).unwrap();
        let dy = t(&[&[2.0, 3.0]]);
        let (_, saved) = layer_backward_p1(&spec, Some(&params), &dy, cache).unwrap();
        layer_backward_p2(&spec, &mut params, saved.unwrap()).unwrap();
        assert_eq!(params.get("weight").unwrap().grad.data(), &[2.0, 0.0, 3.0, 0.0]);
        assert_eq!(params.get("bias").unwrap().grad.data(), &[2.0, 3.0]);
        assert_eq!(params.contributions(), 1);
    }

    #[test]
    fn zero_output_grad_leaves_buffers_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LayerSpec::linear(3, 2);
        let mut params = ParamSet::<f64>::init(&spec, &mut rng).unwrap().unwrap();
        let x = t(&[&[0.3, -0.2, 0.9]]);
        let (_, cache) = layer_forward(&spec, Some(&params), &x, 0).unwrap();
        let dy = Tensor::zeros(&[1, 2]).unwrap();
        layer_backward_full(&spec, Some(&mut params), &dy, cache).unwrap();
        assert!(params.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn relu_forward_and_p1() {
        let spec = LayerSpec::Relu { width: 2 };
        let (y, cache) = layer_forward::<f64>(&spec, None, &t(&[&[-1.0, 3.0]]), 0).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
        let (dx, saved) = layer_backward_p1(&spec, None, &t(&[&[5.0, 5.0]]), cache).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0]);
        assert!(saved.is_none());
    }

    #[test]
    fn rmsnorm_by_hand() {
        let spec = LayerSpec::RmsNorm {
            dim: 2,
            width: 2,
            eps: 0.0,
        };
        let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (y, _) = layer_forward::<f64>(&spec, params.as_ref(), &t(&[&[3.0, 4.0]]), 0).unwrap();
        let r = 12.5f64.sqrt();
        assert_eq!(y.data(), &[3.0 / r, 4.0 / r]);
    }

    #[test]
    fn p2_on_parameter_free_layer_fails() {
        let spec = LayerSpec::Relu { width: 1 };
        let mut params = ParamSet::<f64>::from_values(vec![]).unwrap();
        let saved = P2Saved {
            micro_batches: vec![0],
            input: Tensor::zeros(&[1, 1]).unwrap(),
            output_grad: Tensor::zeros(&[1, 1]).unwrap(),
        };
        assert!(layer_backward_p2(&spec, &mut params, saved).is_err());
    }

    #[test]
    fn missing_params_is_an_error() {
        let spec = LayerSpec::linear(2, 2);
        let x = t(&[&[1.0, 2.0]]);
        assert!(layer_forward::<f64>(&spec, None, &x, 0).is_err());
    }

    #[test]
    fn cache_kind_mismatch_is_an_error() {
        let relu = LayerSpec::Relu { width: 2 };
        let (_, cache) = layer_forward::<f64>(&relu, None, &t(&[&[1.0, 2.0]]), 0).unwrap();
        let (spec, params) = identity_linear(2);
        assert!(layer_backward_p1(&spec, Some(&params), &t(&[&[1.0, 1.0]]), cache).is_err());
    }

    #[test]
    fn wrong_input_width_is_an_error() {
        let spec = LayerSpec::Relu { width: 3 };
        assert!(layer_forward::<f64>(&spec, None, &t(&[&[1.0, 2.0]]), 0).is_err());
    }

    #[test]
    fn parameter_free_full_equals_p1() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = LayerSpec::Attention { seq_len: 3, head_dim: 2 };
        let x = Tensor::<f64>::new(vec![2, 6], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let dy = Tensor::<f64>::new(vec![2, 6], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, c1) = layer_forward(&spec, None, &x, 0).unwrap();
        let (_, c2) = layer_forward(&spec, None, &x, 0).unwrap();
        let (dx1, saved) = layer_backward_p1(&spec, None, &dy, c1).unwrap();
        let dx2 = layer_backward_full(&spec, None, &dy, c2).unwrap();
        assert!(saved.is_none());
        assert_eq!(dx1, dx2);
    }
}
