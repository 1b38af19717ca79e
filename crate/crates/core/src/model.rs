//! Network assembly: the triplet-trained embedder, the MLP classifier on
//! top of frozen embeddings, and the single-phase residual baseline, plus
//! parameter accounting and checkpoint I/O.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedNetwork};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prelu, sigmoid, DenseLayer, PReluParams, ParamCollect, ResidualBlock};
use crate::tensor::{l2_normalize_rows, reshape, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "rtcnn-embedder")]
    RtcnnEmbedder,
    #[serde(rename = "rtcnn-classifier")]
    RtcnnClassifier,
    #[serde(rename = "rcnn-baseline")]
    RcnnBaseline,
}

/// Declarative description of a network. `input_dims` is `(D, H, W)` in
/// tensor order, i.e. `(dz, dy, dx)` of a volume stored x-fastest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_dims: [usize; 3],
    pub channel_widths: Vec<usize>,
    pub n_residual_blocks: usize,
    /// Downsampling stride of each residual block.
    pub strides: Vec<usize>,
    pub embedding_dim: usize,
    /// Width of the dense layer between flatten and the embedding output.
    pub embedder_hidden: usize,
    pub classifier_hidden: Vec<usize>,
}

impl ModelSpec {
    /// Four stride-2 residual blocks, flatten -> 1024 -> 512 embedding.
    pub fn rtcnn_embedder(input_dims: [usize; 3]) -> Self {
        ModelSpec {
            variant: Variant::RtcnnEmbedder,
            input_dims,
            channel_widths: vec![8, 16, 32, 64],
            n_residual_blocks: 4,
            strides: vec![2; 4],
            embedding_dim: 512,
            embedder_hidden: 1024,
            classifier_hidden: vec![256, 64, 32],
        }
    }

    /// Dense 512 -> 256 -> 64 -> 32 -> 1 with a sigmoid head.
    pub fn rtcnn_classifier() -> Self {
        ModelSpec {
            variant: Variant::RtcnnClassifier,
            input_dims: [0, 0, 0],
            channel_widths: vec![],
            n_residual_blocks: 0,
            strides: vec![],
            embedding_dim: 512,
            embedder_hidden: 0,
            classifier_hidden: vec![256, 64, 32],
        }
    }

    /// Six residual blocks and four dense layers capped by a sigmoid.
    /// Blocks downsample by stride 2 while the spatial field stays large
    /// enough for instance statistics, then continue at stride 1 (on
    /// 64x64x32 volumes that is five stride-2 blocks and one stride-1).
    pub fn rcnn_baseline(input_dims: [usize; 3]) -> Self {
        ModelSpec {
            variant: Variant::RcnnBaseline,
            input_dims,
            channel_widths: vec![8, 16, 32, 64, 128, 128],
            n_residual_blocks: 6,
            strides: downsampling_strides(input_dims, 6),
            embedding_dim: 0,
            embedder_hidden: 0,
            classifier_hidden: vec![256, 64, 32],
        }
    }

    /// From volume dims `(dx, dy, dz)` to tensor-order input dims.
    pub fn tensor_dims(volume_dims: (usize, usize, usize)) -> [usize; 3] {
        [volume_dims.2, volume_dims.1, volume_dims.0]
    }

    pub fn validate_conv_stack(&self) -> Result<()> {
        if self.n_residual_blocks != self.channel_widths.len()
            || self.n_residual_blocks != self.strides.len()
        {
            return Err(Error::config(format!(
                "model spec: {} blocks vs {} widths vs {} strides",
                self.n_residual_blocks,
                self.channel_widths.len(),
                self.strides.len()
            )));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::config("model spec: need at least one residual block"));
        }
        let mut dims = self.input_dims;
        for (i, s) in self.strides.iter().enumerate() {
            if *s == 0 {
                return Err(Error::config(format!("model spec: stride 0 in block {i}")));
            }
            for d in dims.iter_mut() {
                if *d == 0 {
                    return Err(Error::config(format!(
                        "model spec: spatial extent underflows to 0 before block {i}"
                    )));
                }
                // k = 3, pad = 1 per residual block contract
                *d = (*d + 2 - 3) / s + 1;
            }
            // every block normalizes instance statistics over its output
            if dims.iter().product::<usize>() < 2 {
                return Err(Error::config(format!(
                    "model spec: block {i} leaves a single voxel, instance statistics degenerate \
                     (input dims too small for {} stride-2 blocks)",
                    self.strides.iter().filter(|s| **s > 1).count()
                )));
            }
        }
        Ok(())
    }

    /// Spatial dims after all residual blocks.
    pub fn final_spatial(&self) -> [usize; 3] {
        let mut dims = self.input_dims;
        for s in &self.strides {
            for d in dims.iter_mut() {
                *d = (*d + 2 - 3) / s + 1;
            }
        }
        dims
    }

    /// Flattened feature width after the conv stack.
    pub fn flat_features(&self) -> usize {
        let s = self.final_spatial();
        self.channel_widths.last().copied().unwrap_or(0) * s[0] * s[1] * s[2]
    }
}

/// Stride-2 for as many leading blocks as the spatial field allows (the
/// next block must keep more than one voxel for instance statistics),
/// stride 1 afterwards.
pub fn downsampling_strides(input_dims: [usize; 3], n_blocks: usize) -> Vec<usize> {
    let mut dims = input_dims;
    let mut strides = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let halved = dims.map(|d| if d == 0 { 0 } else { (d + 2 - 3) / 2 + 1 });
        if halved.iter().product::<usize>() >= 2 {
            strides.push(2);
            dims = halved;
        } else {
            strides.push(1);
        }
    }
    strides
}

/// Residual embedder: conv stack -> flatten -> dense -> PReLU -> dense ->
/// L2-normalized embedding rows.
pub struct Embedder<T: Scalar> {
    pub spec: ModelSpec,
    blocks: Vec<ResidualBlock<T>>,
    hidden: DenseLayer<T>,
    hidden_act: PReluParams<T>,
    output: DenseLayer<T>,
}

pub fn build_embedder<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Embedder<T>> {
    if spec.variant != Variant::RtcnnEmbedder {
        return Err(Error::config(format!(
            "build_embedder: spec variant is {:?}",
            spec.variant
        )));
    }
    spec.validate_conv_stack()?;
    if spec.embedding_dim == 0 || spec.embedder_hidden == 0 {
        return Err(Error::config("embedder: embedding_dim and embedder_hidden must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = build_blocks(spec, &mut rng);
    let flat = spec.flat_features();
    let hidden = DenseLayer::new(&mut rng, flat, spec.embedder_hidden);
    let hidden_act = PReluParams::new(spec.embedder_hidden);
    let output = DenseLayer::new(&mut rng, spec.embedder_hidden, spec.embedding_dim);
    Ok(Embedder {
        spec: spec.clone(),
        blocks,
        hidden,
        hidden_act,
        output,
    })
}

fn build_blocks<T: Scalar>(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<ResidualBlock<T>> {
    let mut blocks = Vec::with_capacity(spec.n_residual_blocks);
    let mut in_ch = 1;
    for (out_ch, stride) in spec.channel_widths.iter().zip(&spec.strides) {
        blocks.push(ResidualBlock::new(rng, in_ch, *out_ch, *stride));
        in_ch = *out_ch;
    }
    blocks
}

impl<T: Scalar> Embedder<T> {
    /// `[b, 1, D, H, W]` -> unit-norm `[b, embedding_dim]` rows.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let b = x.shape()[0];
        let flat = reshape(&h, vec![b, h.len() / b])?;
        let hid = prelu(&self.hidden.forward(&flat)?, &self.hidden_act)?;
        let raw = self.output.forward(&hid)?;
        l2_normalize_rows(&raw)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let d = self.spec.input_dims;
        if s.len() != 5 || s[1] != 1 || s[2] != d[0] || s[3] != d[1] || s[4] != d[2] {
            return Err(Error::shape(format!(
                "embedder expects [b, 1, {}, {}, {}], got {s:?}",
                d[0], d[1], d[2]
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> ParamCollect<T> for Embedder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.res{i}"), out);
        }
        self.hidden.collect(&format!("{prefix}.hidden"), out);
        self.hidden_act.collect(&format!("{prefix}.hidden_act"), out);
        self.output.collect(&format!("{prefix}.output"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.res{i}"), out);
        }
        self.hidden.collect_mut(&format!("{prefix}.hidden"), out);
        self.hidden_act.collect_mut(&format!("{prefix}.hidden_act"), out);
        self.output.collect_mut(&format!("{prefix}.output"), out);
    }
}

/// MLP head over embeddings. Hidden activations are fixed-slope rectifiers
/// (slope 0.25) so the parameter count is exactly the dense weights and
/// biases.
pub struct Classifier<T: Scalar> {
    pub spec: ModelSpec,
    layers: Vec<DenseLayer<T>>,
    acts: Vec<PReluParams<T>>,
    output: DenseLayer<T>,
}

pub fn build_classifier<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Classifier<T>> {
    if spec.variant != Variant::RtcnnClassifier {
        return Err(Error::config(format!(
            "build_classifier: spec variant is {:?}",
            spec.variant
        )));
    }
    if spec.embedding_dim == 0 {
        return Err(Error::config("classifier: embedding_dim must be positive"));
    }
    if spec.classifier_hidden.is_empty() {
        return Err(Error::config("classifier: need at least one hidden layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut acts = Vec::new();
    let mut width = spec.embedding_dim;
    for h in &spec.classifier_hidden {
        layers.push(DenseLayer::new(&mut rng, width, *h));
        acts.push(PReluParams::fixed(*h, 0.25));
        width = *h;
    }
    let output = DenseLayer::new(&mut rng, width, 1);
    Ok(Classifier {
        spec: spec.clone(),
        layers,
        acts,
        output,
    })
}

impl<T: Scalar> Classifier<T> {
    /// `[b, embedding_dim]` -> probabilities `[b, 1]` in (0, 1).
    pub fn forward(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        let s = e.shape();
        if s.len() != 2 || s[1] != self.spec.embedding_dim {
            return Err(Error::shape(format!(
                "classifier expects [b, {}], got {s:?}",
                self.spec.embedding_dim
            )));
        }
        let mut h = e.clone();
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            h = prelu(&layer.forward(&h)?, act)?;
        }
        Ok(sigmoid(&self.output.forward(&h)?))
    }
}

impl<T: Scalar> ParamCollect<T> for Classifier<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.dense{i}"), out);
        }
        self.output.collect(&format!("{prefix}.out"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}.dense{i}"), out);
        }
        self.output.collect_mut(&format!("{prefix}.out"), out);
    }
}

/// Single-phase baseline: residual encoder into a dense classifier, trained
/// end to end with cross-entropy (no triplet phase).
pub struct RcnnBaseline<T: Scalar> {
    pub spec: ModelSpec,
    blocks: Vec<ResidualBlock<T>>,
    dense: Vec<DenseLayer<T>>,
    acts: Vec<PReluParams<T>>,
    output: DenseLayer<T>,
}

pub fn build_rcnn_baseline<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<RcnnBaseline<T>> {
    if spec.variant != Variant::RcnnBaseline {
        return Err(Error::config(format!(
            "build_rcnn_baseline: spec variant is {:?}",
            spec.variant
        )));
    }
    spec.validate_conv_stack()?;
    if spec.classifier_hidden.is_empty() {
        return Err(Error::config("baseline: need at least one hidden dense layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = build_blocks(spec, &mut rng);
    let mut dense = Vec::new();
    let mut acts = Vec::new();
    let mut width = spec.flat_features();
    for h in &spec.classifier_hidden {
        dense.push(DenseLayer::new(&mut rng, width, *h));
        acts.push(PReluParams::new(*h));
        width = *h;
    }
    let output = DenseLayer::new(&mut rng, width, 1);
    Ok(RcnnBaseline {
        spec: spec.clone(),
        blocks,
        dense,
        acts,
        output,
    })
}

impl<T: Scalar> RcnnBaseline<T> {
    /// `[b, 1, D, H, W]` -> probabilities `[b, 1]` in (0, 1).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let d = self.spec.input_dims;
        if s.len() != 5 || s[1] != 1 || s[2] != d[0] || s[3] != d[1] || s[4] != d[2] {
            return Err(Error::shape(format!(
                "baseline expects [b, 1, {}, {}, {}], got {s:?}",
                d[0], d[1], d[2]
            )));
        }
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let b = x.shape()[0];
        let mut flat = reshape(&h, vec![b, h.len() / b])?;
        for (layer, act) in self.dense.iter().zip(&self.acts) {
            flat = prelu(&layer.forward(&flat)?, act)?;
        }
        Ok(sigmoid(&self.output.forward(&flat)?))
    }
}

impl<T: Scalar> ParamCollect<T> for RcnnBaseline<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.res{i}"), out);
        }
        for (i, l) in self.dense.iter().enumerate() {
            l.collect(&format!("{prefix}.dense{i}"), out);
        }
        for (i, a) in self.acts.iter().enumerate() {
            a.collect(&format!("{prefix}.act{i}"), out);
        }
        self.output.collect(&format!("{prefix}.out"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.res{i}"), out);
        }
        for (i, l) in self.dense.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}.dense{i}"), out);
        }
        for (i, a) in self.acts.iter_mut().enumerate() {
            a.collect_mut(&format!("{prefix}.act{i}"), out);
        }
        self.output.collect_mut(&format!("{prefix}.out"), out);
    }
}

/// Named snapshot of a network's trainable tensors.
pub struct ParameterBundle<T: Scalar> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParameterBundle<T> {
    pub fn snapshot(net: &impl ParamCollect<T>, prefix: &str) -> Self {
        let mut out = Vec::new();
        net.collect(prefix, &mut out);
        ParameterBundle {
            entries: out
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }
}

/// Total element count over all trainable parameter tensors.
pub fn parameter_count<T: Scalar>(net: &impl ParamCollect<T>) -> usize {
    let mut out = Vec::new();
    net.collect("n", &mut out);
    out.iter().map(|(_, t)| t.len()).sum()
}
