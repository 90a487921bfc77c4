use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `h <- relu(W h + b)`
    Plain,
    /// `h <- relu(W h + b) + h`
    Skip,
    /// `h <- relu(W2 relu(W1 h + b1) + b2) + h`, inner width `hidden / 4`.
    Bottleneck,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Plain => "plain",
            BlockKind::Skip => "skip",
            BlockKind::Bottleneck => "bottleneck",
        }
    }

    fn layers_per_block(self) -> usize {
        match self {
            BlockKind::Plain | BlockKind::Skip => 1,
            BlockKind::Bottleneck => 2,
        }
    }

    fn has_skip(self) -> bool {
        !matches!(self, BlockKind::Plain)
    }
}

/// Architecture of one member of the block-structured model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockNetSpec {
    pub input_dim: usize,
    /// Width `d` of every hidden block.
    pub hidden_dim: usize,
    /// Depth `B`.
    pub num_blocks: usize,
    pub block_kind: BlockKind,
    pub num_classes: usize,
    /// Embedding width produced by the neck; never width-scaled.
    pub proto_dim: usize,
}

impl BlockNetSpec {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        num_blocks: usize,
        block_kind: BlockKind,
        num_classes: usize,
        proto_dim: usize,
    ) -> Result<Self> {
        let spec = BlockNetSpec {
            input_dim,
            hidden_dim,
            num_blocks,
            block_kind,
            num_classes,
            proto_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 || self.num_classes == 0 || self.proto_dim == 0 {
            return bad(format!("dimensions must be positive: {self:?}"));
        }
        if self.hidden_dim < 4 {
            return bad(format!("hidden_dim must be >= 4, got {}", self.hidden_dim));
        }
        if self.num_blocks < 1 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.block_kind == BlockKind::Bottleneck && self.hidden_dim % 4 != 0 {
            return bad(format!(
                "bottleneck blocks need hidden_dim divisible by 4, got {}",
                self.hidden_dim
            ));
        }
        Ok(())
    }

    pub fn with_hidden(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn with_blocks(mut self, num_blocks: usize) -> Self {
        self.num_blocks = num_blocks;
        self
    }

    /// Parameter count with a single classifier head.
    pub fn parameter_count(&self) -> u64 {
        ModelShape::single_head(*self).parameter_count()
    }

    fn block_layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.hidden_dim;
        match self.block_kind {
            BlockKind::Plain | BlockKind::Skip => vec![(d, d)],
            BlockKind::Bottleneck => vec![(d / 4, d), (d, d / 4)],
        }
    }
}

/// Exact parameter count (weights plus biases) of `spec` with one head.
pub fn parameter_count(spec: &BlockNetSpec) -> u64 {
    spec.parameter_count()
}

/// A spec together with the block depths after which classifier exits sit.
///
/// Each exit owns its own neck (`hidden -> proto`) and head
/// (`proto -> classes`). A plain model has one exit at depth `num_blocks`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    spec: BlockNetSpec,
    exits: Vec<usize>,
}

impl ModelShape {
    pub fn new(spec: BlockNetSpec, exits: Vec<usize>) -> Result<Self> {
        spec.validate()?;
        if exits.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one exit".into()));
        }
        if exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "exit depths must be strictly increasing: {exits:?}"
            )));
        }
        if exits.iter().any(|&e| e == 0 || e > spec.num_blocks) {
            return Err(Error::InvalidArgument(format!(
                "exit depths must lie in 1..={}: {exits:?}",
                spec.num_blocks
            )));
        }
        Ok(ModelShape { spec, exits })
    }

    pub fn single_head(spec: BlockNetSpec) -> Self {
        ModelShape {
            spec,
            exits: vec![spec.num_blocks],
        }
    }

    /// One exit after every block (auxiliary heads).
    pub fn per_block(spec: BlockNetSpec) -> Self {
        ModelShape {
            spec,
            exits: (1..=spec.num_blocks).collect(),
        }
    }

    pub fn spec(&self) -> &BlockNetSpec {
        &self.spec
    }

    pub fn exits(&self) -> &[usize] {
        &self.exits
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn num_layers(&self) -> usize {
        1 + self.spec.num_blocks * self.spec.block_kind.layers_per_block() + 2 * self.exits.len()
    }

    /// Layer indices belonging to block `b` (0-based).
    pub fn block_layers(&self, b: usize) -> Range<usize> {
        let per = self.spec.block_kind.layers_per_block();
        1 + b * per..1 + (b + 1) * per
    }

    /// `(neck, head)` layer indices of exit `e`.
    pub fn exit_layers(&self, e: usize) -> (usize, usize) {
        let base = 1 + self.spec.num_blocks * self.spec.block_kind.layers_per_block();
        (base + 2 * e, base + 2 * e + 1)
    }

    /// `(out, in)` dimensions of every layer in canonical order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let s = &self.spec;
        let mut dims = vec![(s.hidden_dim, s.input_dim)];
        for _ in 0..s.num_blocks {
            dims.extend(s.block_layer_dims());
        }
        for _ in &self.exits {
            dims.push((s.proto_dim, s.hidden_dim));
            dims.push((s.num_classes, s.proto_dim));
        }
        dims
    }

    pub fn parameter_count(&self) -> u64 {
        self.layer_dims()
            .iter()
            .map(|&(o, i)| (o * i + o) as u64)
            .sum()
    }

    pub fn bias_count(&self) -> u64 {
        self.layer_dims().iter().map(|&(o, _)| o as u64).sum()
    }

    /// Multiply-accumulate operations of one forward pass for one sample.
    pub fn mac_count(&self) -> u64 {
        self.layer_dims().iter().map(|&(o, i)| (o * i) as u64).sum()
    }

    /// Scalar activations produced per sample (every layer output).
    pub fn activation_count(&self) -> u64 {
        self.layer_dims().iter().map(|&(o, _)| o as u64).sum()
    }
}

/// Affine layer `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![out_dim, in_dim], data).expect("sized above"),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        let (n, inp, out) = (x.rows(), self.in_dim(), self.out_dim());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = Vec::with_capacity(n * out);
        for r in 0..n {
            let xr = x.row(r);
            for o in 0..out {
                let wr = &w[o * inp..(o + 1) * inp];
                let mut acc = b[o];
                for (wi, xi) in wr.iter().zip(xr) {
                    acc += wi * xi;
                }
                y.push(acc);
            }
        }
        Tensor::new(vec![n, out], y).expect("sized above")
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[n, num_classes]` logits per exit, shallowest first.
    pub logits: Vec<Tensor>,
    /// `[n, proto_dim]` neck output of the deepest exit.
    pub embedding: Tensor,
}

impl ForwardOutput {
    pub fn final_logits(&self) -> &Tensor {
        self.logits.last().expect("at least one exit")
    }
}

/// Intermediate values recorded for backpropagation.
pub(crate) struct Trace {
    /// Input fed to each layer.
    pub inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Tensor>,
    /// Post-ReLU neck output per exit.
    pub embeddings: Vec<Tensor>,
    pub logits: Vec<Tensor>,
}

/// Parameters of a block-structured network in canonical layer order:
/// stem, block layers, then `(neck, head)` per exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNetModel {
    shape: ModelShape,
    layers: Vec<Linear>,
}

impl BlockNetModel {
    pub fn zeros(shape: ModelShape) -> Self {
        let layers = shape
            .layer_dims()
            .iter()
            .map(|&(o, i)| Linear::zeros(o, i))
            .collect();
        BlockNetModel { shape, layers }
    }

    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let layers = shape
            .layer_dims()
            .iter()
            .map(|&(o, i)| Linear::he_uniform(o, i, rng))
            .collect();
        BlockNetModel { shape, layers }
    }

    pub fn from_layers(shape: ModelShape, layers: Vec<Linear>) -> Result<Self> {
        let dims = shape.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (k, (&(o, i), l)) in dims.iter().zip(&layers).enumerate() {
            if l.weight.shape() != [o, i] || l.bias.shape() != [o] {
                return Err(Error::Shape(format!(
                    "layer {k}: expected [{o}, {i}], got {:?}",
                    l.weight.shape()
                )));
            }
        }
        Ok(BlockNetModel { shape, layers })
    }

    pub fn spec(&self) -> &BlockNetSpec {
        &self.shape.spec
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn num_exits(&self) -> usize {
        self.shape.exits.len()
    }

    pub fn parameter_count(&self) -> u64 {
        self.layers.iter().map(|l| l.num_params() as u64).sum()
    }

    /// All parameters flattened in canonical order (weights then bias per layer).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count() as usize);
        for l in &self.layers {
            v.extend_from_slice(l.weight.data());
            v.extend_from_slice(l.bias.data());
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        let t = self.trace(batch)?;
        let embedding = t.embeddings.last().expect("at least one exit").clone();
        Ok(ForwardOutput {
            logits: t.logits,
            embedding,
        })
    }

    pub(crate) fn trace(&self, batch: &Tensor) -> Result<Trace> {
        let spec = &self.shape.spec;
        if batch.shape().len() != 2 || batch.shape()[1] != spec.input_dim {
            return Err(Error::Shape(format!(
                "batch must be [n, {}], got {:?}",
                spec.input_dim,
                batch.shape()
            )));
        }
        let nl = self.layers.len();
        let mut inputs = Vec::with_capacity(nl);
        let mut pre = Vec::with_capacity(nl);

        let z = self.layers[0].forward(batch);
        let mut h = relu(&z);
        inputs.push(batch.clone());
        pre.push(z);

        let mut hidden_at_depth = vec![h.clone()];
        for b in 0..spec.num_blocks {
            let block_in = h.clone();
            let mut x = h;
            for l in self.shape.block_layers(b) {
                let z = self.layers[l].forward(&x);
                inputs.push(x);
                x = relu(&z);
                pre.push(z);
            }
            if spec.block_kind.has_skip() {
                add_assign(&mut x, &block_in);
            }
            h = x;
            hidden_at_depth.push(h.clone());
        }

        let mut embeddings = Vec::with_capacity(self.shape.exits.len());
        let mut logits = Vec::with_capacity(self.shape.exits.len());
        for (e, &depth) in self.shape.exits.iter().enumerate() {
            let (neck, head) = self.shape.exit_layers(e);
            let hd = &hidden_at_depth[depth];
            let zn = self.layers[neck].forward(hd);
            let emb = relu(&zn);
            inputs.push(hd.clone());
            pre.push(zn);
            let zl = self.layers[head].forward(&emb);
            inputs.push(emb.clone());
            pre.push(zl.clone());
            embeddings.push(emb);
            logits.push(zl);
        }
        Ok(Trace {
            inputs,
            pre,
            embeddings,
            logits,
        })
    }
}

pub(crate) fn relu(z: &Tensor) -> Tensor {
    let data = z.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(z.shape().to_vec(), data).expect("same shape")
}

fn add_assign(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}
