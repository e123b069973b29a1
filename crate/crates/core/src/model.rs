//! Model description, partitioning into pipeline stages, and the per-stage
//! runtime state (parameters, forward caches, deferred backward-p2 inputs).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    layer_backward_full, layer_backward_p1, layer_backward_p2, layer_forward, ForwardCache, LayerSpec, P2Saved,
    ParamSet,
};
use crate::schedule::B2Mode;
use crate::tensor::{Element, Tensor};

/// A group of consecutive layers that is never split across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub layers: Vec<LayerSpec>,
}

impl Block {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }
}

/// Blocks plus the cumulative end index of each stage: stage `i` owns blocks
/// `[stage_boundaries[i-1], stage_boundaries[i])`, with an implicit leading 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: Vec<Block>,
    pub stage_boundaries: Vec<usize>,
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_boundaries.len()
    }

    pub fn input_width(&self) -> usize {
        self.blocks
            .first()
            .and_then(|b| b.layers.first())
            .map_or(0, LayerSpec::input_width)
    }

    pub fn classes(&self) -> usize {
        match self.blocks.last().and_then(|b| b.layers.last()) {
            Some(LayerSpec::SoftmaxCrossEntropy { classes }) => *classes,
            _ => 0,
        }
    }

    /// Same blocks, re-partitioned evenly over `stages` ranks.
    pub fn with_uniform_stages(mut self, stages: usize) -> Result<Self> {
        self.stage_boundaries = uniform_boundaries(self.blocks.len(), stages)?;
        Ok(self)
    }
}

/// Even split of `blocks` over `stages`; leftover blocks go to the earliest stages.
pub fn uniform_boundaries(blocks: usize, stages: usize) -> Result<Vec<usize>> {
    if stages == 0 || stages > blocks {
        return Err(Error::Partition(format!("cannot split {blocks} blocks into {stages} stages")));
    }
    let (base, extra) = (blocks / stages, blocks % stages);
    let mut end = 0;
    Ok((0..stages)
        .map(|i| {
            end += base + usize::from(i < extra);
            end
        })
        .collect())
}

/// Validates the partition and returns each stage's layer sequence.
pub fn build_model(config: &ModelConfig) -> Result<Vec<Vec<LayerSpec>>> {
    let bounds = &config.stage_boundaries;
    if bounds.is_empty() {
        return Err(Error::Partition("no stages".into()));
    }
    let mut prev = 0;
    for &b in bounds {
        if b <= prev {
            return Err(Error::Partition(format!(
                "boundaries {bounds:?} are not strictly increasing from 0"
            )));
        }
        prev = b;
    }
    if prev != config.blocks.len() {
        return Err(Error::Partition(format!(
            "boundaries end at {prev} but the model has {} blocks",
            config.blocks.len()
        )));
    }

    let all: Vec<&LayerSpec> = config.blocks.iter().flat_map(|b| &b.layers).collect();
    if all.is_empty() {
        return Err(Error::Partition("model has no layers".into()));
    }
    for spec in &all {
        spec.validate()?;
    }
    for (i, pair) in all.windows(2).enumerate() {
        if pair[0].output_width() != pair[1].input_width() {
            return Err(Error::Partition(format!(
                "layer {i} {} outputs width {} but layer {} {} expects {}",
                pair[0].name(),
                pair[0].output_width(),
                i + 1,
                pair[1].name(),
                pair[1].input_width()
            )));
        }
    }
    let loss_positions: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, LayerSpec::SoftmaxCrossEntropy { .. }))
        .map(|(i, _)| i)
        .collect();
    if loss_positions != [all.len() - 1] {
        return Err(Error::Partition(
            "the loss head must appear exactly once, as the final layer".into(),
        ));
    }

    let mut start = 0;
    Ok(bounds
        .iter()
        .map(|&end| {
            let layers = config.blocks[start..end]
                .iter()
                .flat_map(|b| b.layers.iter().cloned())
                .collect();
            start = end;
            layers
        })
        .collect())
}

/// The layers, parameters and in-flight state owned by one pipeline rank.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    layers: Vec<LayerSpec>,
    params: Vec<Option<ParamSet<T>>>,
    loss_classes: Option<usize>,
    caches: BTreeMap<usize, Vec<ForwardCache<T>>>,
    saved: Vec<BTreeMap<usize, P2Saved<T>>>,
}

impl<T: Element> Stage<T> {
    pub fn new(mut layers: Vec<LayerSpec>, params: Vec<Option<ParamSet<T>>>) -> Result<Self> {
        let mut params = params;
        if layers.len() != params.len() {
            return Err(Error::Partition("one parameter slot per layer is required".into()));
        }
        let mut loss_classes = None;
        if let Some(LayerSpec::SoftmaxCrossEntropy { classes }) = layers.last() {
            loss_classes = Some(*classes);
            layers.pop();
            params.pop();
        }
        for (spec, p) in layers.iter().zip(&params) {
            if spec.has_params() != p.is_some() {
                return Err(Error::layer(spec.name(), "parameter slot does not match layer kind"));
            }
        }
        let saved = vec![BTreeMap::new(); layers.len()];
        Ok(Self {
            layers,
            params,
            loss_classes,
            caches: BTreeMap::new(),
            saved,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamSet<T>> {
        self.params.iter().flatten()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamSet<T>> {
        self.params.iter_mut().flatten()
    }

    pub fn param_slots_mut(&mut self) -> &mut [Option<ParamSet<T>>] {
        &mut self.params
    }

    /// Class count when this stage ends in the loss head.
    pub fn loss_classes(&self) -> Option<usize> {
        self.loss_classes
    }

    pub fn input_width(&self) -> usize {
        self.layers
            .first()
            .map_or_else(|| self.loss_classes.unwrap_or(0), LayerSpec::input_width)
    }

    pub fn forward(&mut self, micro_batch: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.caches.contains_key(&micro_batch) {
            return Err(Error::layer(
                "stage",
                format!("micro-batch {micro_batch} already has live forward caches"),
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (spec, params) in self.layers.iter().zip(&self.params) {
            let (y, cache) = layer_forward(spec, params.as_ref(), &h, micro_batch)?;
            caches.push(cache);
            h = y;
        }
        self.caches.insert(micro_batch, caches);
        Ok(h)
    }

    fn take_caches(&mut self, micro_batch: usize) -> Result<Vec<ForwardCache<T>>> {
        self.caches.remove(&micro_batch).ok_or(Error::CacheMissing {
            layer: 0,
            micro_batch,
        })
    }

    /// Backward-p1 through every layer, parking backward-p2 inputs.
    pub fn backward_p1(&mut self, micro_batch: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self.take_caches(micro_batch)?;
        let mut g = dy.clone();
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let (dx, saved) = layer_backward_p1(&self.layers[i], self.params[i].as_ref(), &g, cache)?;
            if let Some(saved) = saved {
                self.saved[i].insert(micro_batch, saved);
            }
            g = dx;
        }
        Ok(g)
    }

    /// Combined backward: each layer's backward-p2 runs right after its backward-p1.
    pub fn backward_full(&mut self, micro_batch: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self.take_caches(micro_batch)?;
        let mut g = dy.clone();
        for (i, cache) in caches.into_iter().enumerate().rev() {
            g = layer_backward_full(&self.layers[i], self.params[i].as_mut(), &g, cache)?;
        }
        Ok(g)
    }

    /// Deferred backward-p2 over `micro_batches`, either as one computation on
    /// the batch-concatenated inputs or one computation per micro-batch.
    pub fn backward_p2(&mut self, micro_batches: &[usize], mode: B2Mode) -> Result<()> {
        for i in (0..self.layers.len()).rev() {
            let Some(params) = self.params[i].as_mut() else {
                continue;
            };
            let mut parts = Vec::with_capacity(micro_batches.len());
            for &mb in micro_batches {
                let saved = self.saved[i]
                    .remove(&mb)
                    .ok_or(Error::SavedMissing { layer: i, micro_batch: mb })?;
                parts.push(saved);
            }
            match mode {
                B2Mode::Concat => layer_backward_p2(&self.layers[i], params, P2Saved::concat(parts)?)?,
                B2Mode::Loop => {
                    for saved in parts {
                        layer_backward_p2(&self.layers[i], params, saved)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of live forward caches (micro-batches awaiting backward-p1).
    pub fn live_caches(&self) -> usize {
        self.caches.len()
    }

    /// Number of live backward-p2 entries across all layers.
    pub fn live_saved(&self) -> usize {
        self.saved.iter().map(BTreeMap::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(ParamSet::zero_grad);
    }

    /// Gradient buffers of every parameterized layer, in layer order.
    pub fn grads(&self) -> Vec<Vec<Tensor<T>>> {
        self.params().map(ParamSet::grads).collect()
    }

    pub fn param_values(&self) -> Vec<Vec<Tensor<T>>> {
        self.params().map(ParamSet::values).collect()
    }

    /// Drops all in-flight state.
    pub fn clear_state(&mut self) {
        self.caches.clear();
        self.saved.iter_mut().for_each(BTreeMap::clear);
    }
}

/// A partitioned model: one [`Stage`] per pipeline rank.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub stages: Vec<Stage<T>>,
}

impl<T: Element> Model<T> {
    /// Builds and initializes the model. Parameters are drawn layer by layer
    /// in global order from one seeded stream, so the values do not depend on
    /// the partition.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let per_stage = build_model(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = per_stage
            .into_iter()
            .map(|layers| {
                let params = layers
                    .iter()
                    .map(|spec| ParamSet::init(spec, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                Stage::new(layers, params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Gradient buffers of all stages, flattened in global layer order.
    pub fn grads(&self) -> Vec<Vec<Tensor<T>>> {
        self.stages.iter().flat_map(Stage::grads).collect()
    }

    pub fn param_values(&self) -> Vec<Vec<Tensor<T>>> {
        self.stages.iter().flat_map(Stage::param_values).collect()
    }

    pub fn zero_grad(&mut self) {
        self.stages.iter_mut().for_each(Stage::zero_grad);
    }

    /// Minimum micro-batch contribution count over all parameter sets.
    pub fn contributions(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flat_map(|s| s.params().map(ParamSet::contributions))
            .collect()
    }
}

/// `blocks` MLP blocks (`Linear -> ReLU`) followed by a classifier head.
pub fn toy_mlp(input: usize, width: usize, blocks: usize, classes: usize) -> ModelConfig {
    let mut out: Vec<Block> = (0..blocks)
        .map(|i| {
            let fan_in = if i == 0 { input } else { width };
            Block::new(vec![LayerSpec::linear(fan_in, width), LayerSpec::Relu { width }])
        })
        .collect();
    if let Some(last) = out.last_mut() {
        last.layers.push(LayerSpec::linear(width, classes));
        last.layers.push(LayerSpec::SoftmaxCrossEntropy { classes });
    }
    ModelConfig {
        stage_boundaries: vec![out.len()],
        blocks: out,
    }
}

/// Alternating attention blocks (`RMSNorm -> Attention -> Linear -> ReLU`) and
/// MLP blocks (`Linear -> ReLU`) over rows of `seq_len * head_dim` values,
/// followed by a classifier head. Covers every layer kind.
pub fn toy_mixed(blocks: usize, seq_len: usize, head_dim: usize, classes: usize) -> ModelConfig {
    let width = seq_len * head_dim;
    let mut out: Vec<Block> = (0..blocks)
        .map(|i| {
            if i % 2 == 0 {
                Block::new(vec![
                    LayerSpec::rmsnorm(head_dim, width),
                    LayerSpec::Attention { seq_len, head_dim },
                    LayerSpec::linear(width, width),
                    LayerSpec::Relu { width },
                ])
            } else {
                Block::new(vec![LayerSpec::linear(width, width), LayerSpec::Relu { width }])
            }
        })
        .collect();
    if let Some(last) = out.last_mut() {
        last.layers.push(LayerSpec::linear(width, classes));
        last.layers.push(LayerSpec::SoftmaxCrossEntropy { classes });
    }
    ModelConfig {
        stage_boundaries: vec![out.len()],
        blocks: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_blocks(n: usize) -> ModelConfig {
        let mut blocks: Vec<Block> = (0..n).map(|_| Block::new(vec![LayerSpec::Relu { width: 4 }])).collect();
        blocks
            .last_mut()
            .unwrap()
            .layers
            .push(LayerSpec::SoftmaxCrossEntropy { classes: 4 });
        ModelConfig {
            blocks,
            stage_boundaries: vec![n],
        }
    }

    #[test]
    fn uniform_split_eight_over_four() {
        let cfg = relu_blocks(8).with_uniform_stages(4).unwrap();
        assert_eq!(cfg.stage_boundaries, vec![2, 4, 6, 8]);
        let stages = build_model(&cfg).unwrap();
        assert!(stages[..3].iter().all(|s| s.len() == 2));
        assert_eq!(stages[3].len(), 3);
    }

    #[test]
    fn non_uniform_split() {
        let mut cfg = relu_blocks(50);
        cfg.stage_boundaries = vec![10, 24, 38, 50];
        let sizes: Vec<usize> = build_model(&cfg).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 14, 14, 12 + 1]);
    }

    #[test]
    fn single_stage_is_whole_model() {
        let cfg = toy_mixed(8, 2, 4, 3);
        let stages = build_model(&cfg).unwrap();
        assert_eq!(stages.len(), 1);
        assert_eq!(stages[0].len(), cfg.blocks.iter().map(|b| b.layers.len()).sum::<usize>());
    }

    #[test]
    fn bad_partitions() {
        let mut cfg = relu_blocks(4);
        cfg.stage_boundaries = vec![2, 1, 4];
        assert!(build_model(&cfg).is_err());
        cfg.stage_boundaries = vec![2, 3];
        assert!(build_model(&cfg).is_err());
        cfg.stage_boundaries = vec![];
        assert!(build_model(&cfg).is_err());

        let mut cfg = toy_mlp(4, 8, 3, 2);
        cfg.blocks[1].layers[0] = LayerSpec::linear(5, 8);
        assert!(matches!(build_model(&cfg), Err(Error::Partition(_))));
    }

    #[test]
    fn params_do_not_depend_on_partition() {
        let one = Model::<f64>::init(&toy_mixed(8, 2, 4, 3), 5).unwrap();
        let four = Model::<f64>::init(&toy_mixed(8, 2, 4, 3).with_uniform_stages(4).unwrap(), 5).unwrap();
        assert_eq!(one.param_values(), four.param_values());
    }

    #[test]
    fn double_backward_on_same_micro_batch_fails() {
        let mut model = Model::<f64>::init(&toy_mlp(2, 3, 1, 2), 0).unwrap();
        let stage = &mut model.stages[0];
        let x = Tensor::from_rows(&[&[0.5, -0.5]]).unwrap();
        stage.forward(0, &x).unwrap();
        let dy = Tensor::from_rows(&[&[0.1, -0.1]]).unwrap();
        stage.backward_p1(0, &dy).unwrap();
        assert!(matches!(stage.backward_p1(0, &dy), Err(Error::CacheMissing { .. })));
        stage.backward_p2(&[0], B2Mode::Loop).unwrap();
        assert!(matches!(
            stage.backward_p2(&[0], B2Mode::Loop),
            Err(Error::SavedMissing { .. })
        ));
        assert_eq!(stage.live_saved(), 0);
    }

    #[test]
    fn parameter_free_layers_keep_nothing_after_p1() {
        let spec = vec![
            LayerSpec::Relu { width: 2 },
            LayerSpec::Attention { seq_len: 1, head_dim: 2 },
        ];
        let mut stage = Stage::<f64>::new(spec, vec![None, None]).unwrap();
        let x = Tensor::from_rows(&[&[0.5, -0.5]]).unwrap();
        stage.forward(3, &x).unwrap();
        stage.backward_p1(3, &x).unwrap();
        assert_eq!(stage.live_caches(), 0);
        assert_eq!(stage.live_saved(), 0);
    }
}
