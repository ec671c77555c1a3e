//! A small layered CNN with hand-written backward passes.
//!
//! Every forward pass records an [`ActivationTape`] holding the input of each
//! executed layer, which makes it possible to take gradients with respect to
//! any intermediate activation and to re-run the network suffix from an
//! injected activation.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::pooling::{
    devectorize_grad, gap_backward, gap_forward, gcp_backward, gcp_forward, sym_vec_len,
    FeatureMatrix, GcpContext, PooledVector,
};
use crate::rng::{derived, normal};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Relu,
    Maxpool2x2,
    GapHead,
    GcpHead,
    Dense,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2x2 => "maxpool2x2",
            LayerKind::GapHead => "gap-head",
            LayerKind::GcpHead => "gcp-head",
            LayerKind::Dense => "dense",
        }
    }

    fn code(self) -> u8 {
        match self {
            LayerKind::Conv3x3 => 0,
            LayerKind::Conv1x1 => 1,
            LayerKind::Relu => 2,
            LayerKind::Maxpool2x2 => 3,
            LayerKind::GapHead => 4,
            LayerKind::GcpHead => 5,
            LayerKind::Dense => 6,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv3x3,
            1 => LayerKind::Conv1x1,
            2 => LayerKind::Relu,
            3 => LayerKind::Maxpool2x2,
            4 => LayerKind::GapHead,
            5 => LayerKind::GcpHead,
            6 => LayerKind::Dense,
            _ => return None,
        })
    }

    fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }

    fn kernel(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn conv3x3(cin: usize, cout: usize) -> Self {
        Self { kind: LayerKind::Conv3x3, in_channels: cin, out_channels: cout, stride: 1 }
    }

    pub fn conv1x1(cin: usize, cout: usize) -> Self {
        Self { kind: LayerKind::Conv1x1, in_channels: cin, out_channels: cout, stride: 1 }
    }

    pub fn relu(c: usize) -> Self {
        Self { kind: LayerKind::Relu, in_channels: c, out_channels: c, stride: 1 }
    }

    pub fn maxpool(c: usize) -> Self {
        Self { kind: LayerKind::Maxpool2x2, in_channels: c, out_channels: c, stride: 2 }
    }

    pub fn head(kind: HeadKind, c: usize) -> Self {
        match kind {
            HeadKind::Gap => Self { kind: LayerKind::GapHead, in_channels: c, out_channels: c, stride: 1 },
            HeadKind::Gcp => Self {
                kind: LayerKind::GcpHead,
                in_channels: c,
                out_channels: sym_vec_len(c),
                stride: 1,
            },
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self { kind: LayerKind::Dense, in_channels: inputs, out_channels: outputs, stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gap,
    Gcp,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Gap => "gap",
            HeadKind::Gcp => "gcp",
        })
    }
}

/// Trunk families the experiments use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// conv3x3(C→8) → relu → maxpool → conv3x3(8→16) → relu →
    /// conv1x1(16→d) → head → dense.
    Toy { reduce_dim: usize },
    /// conv1x1(C→d) → head → dense.
    Linear { reduce_dim: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Toy { reduce_dim: 16 }
    }
}

impl Architecture {
    pub fn layers(&self, in_channels: usize, classes: usize, head: HeadKind) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let d = match *self {
            Architecture::Toy { reduce_dim } => {
                layers.extend([
                    LayerSpec::conv3x3(in_channels, 8),
                    LayerSpec::relu(8),
                    LayerSpec::maxpool(8),
                    LayerSpec::conv3x3(8, 16),
                    LayerSpec::relu(16),
                    LayerSpec::conv1x1(16, reduce_dim),
                ]);
                reduce_dim
            }
            Architecture::Linear { reduce_dim } => {
                layers.push(LayerSpec::conv1x1(in_channels, reduce_dim));
                reduce_dim
            }
        };
        let head_spec = LayerSpec::head(head, d);
        layers.push(head_spec);
        layers.push(LayerSpec::dense(head_spec.out_channels, classes));
        layers
    }
}

/// Per-sample shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(c: usize) -> Self {
        Self { c, h: 1, w: 1 }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Batched activations laid out as `B × C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(batch: usize, shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * shape.len() {
            return Err(Error::Shape(format!(
                "{} values cannot fill {batch} x {shape}",
                data.len()
            )));
        }
        Ok(Self { batch, shape, data })
    }

    pub fn zeros(batch: usize, shape: Shape) -> Self {
        Self { batch, shape, data: vec![0.0; batch * shape.len()] }
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[b * n..(b + 1) * n]
    }

    /// `self + step · dir`.
    pub fn axpy(&self, step: f64, dir: &Tensor) -> Result<Tensor> {
        if self.batch != dir.batch || self.shape != dir.shape {
            return Err(Error::Shape("axpy: tensors differ in shape".into()));
        }
        Ok(Tensor {
            batch: self.batch,
            shape: self.shape,
            data: self.data.iter().zip(&dir.data).map(|(a, d)| a + step * d).collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sample `b` as an `N × C` feature matrix (`N = H·W`).
    fn feature_matrix(&self, b: usize) -> Result<FeatureMatrix> {
        let n = self.shape.spatial();
        let s = self.sample(b);
        FeatureMatrix::new(Mat::from_fn(n, self.shape.c, |i, d| s[d * n + i]))
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.batch != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.batch,
                labels.len()
            )));
        }
        if images.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch images"));
        }
        Ok(Self { images, labels })
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    MaxPool(Vec<usize>),
    Gcp(Vec<GcpContext>),
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    start: usize,
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    logits: Tensor,
    probs: Vec<f64>,
    labels: Vec<usize>,
    loss: f64,
    net_id: u64,
    generation: u64,
}

impl ActivationTape {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Number of layers the tape covers.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// GCP contexts recorded by the head, one per sample.
    pub fn gcp_contexts(&self) -> Option<&[GcpContext]> {
        self.aux.iter().find_map(|a| match a {
            Aux::Gcp(c) => Some(c.as_slice()),
            _ => None,
        })
    }
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub loss: f64,
    pub tape: ActivationTape,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`Network::params`].
    pub params: Vec<Vec<f64>>,
    pub input: Tensor,
}

/// Parameter and multiply-accumulate counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

pub struct Network {
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    params: Vec<Vec<f64>>,
    /// Index of each layer's weight tensor in `params`; its bias follows.
    slots: Vec<Option<usize>>,
    seed: u64,
    id: u64,
    generation: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.clone(),
            slots: self.slots.clone(),
            seed: self.seed,
            id: next_id(),
            generation: 0,
        }
    }
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("layers", &self.layers)
            .field("input", &self.shapes[0])
            .field("seed", &self.seed)
            .finish()
    }
}

fn layer_err(index: usize, kind: LayerKind, message: impl Into<String>) -> Error {
    Error::Layer { index, kind: kind.name(), message: message.into() }
}

fn infer_shapes(layers: &[LayerSpec], input: Shape) -> Result<Vec<Shape>> {
    if layers.is_empty() {
        return Err(Error::Shape("network needs at least one layer".into()));
    }
    let mut shapes = vec![input];
    let mut cur = input;
    let mut head_seen = false;
    for (i, spec) in layers.iter().enumerate() {
        let kind = spec.kind;
        if spec.in_channels != cur.c {
            return Err(layer_err(
                i,
                kind,
                format!("expects {} input channels, got {}", spec.in_channels, cur.c),
            ));
        }
        cur = match kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                if head_seen {
                    return Err(layer_err(i, kind, "convolution after the pooling head"));
                }
                if spec.stride == 0 {
                    return Err(layer_err(i, kind, "stride must be >= 1"));
                }
                let k = kind.kernel();
                let pad = k / 2;
                let oh = (cur.h + 2 * pad).checked_sub(k).map(|v| v / spec.stride + 1);
                let ow = (cur.w + 2 * pad).checked_sub(k).map(|v| v / spec.stride + 1);
                match (oh, ow) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Shape::new(spec.out_channels, h, w),
                    _ => return Err(layer_err(i, kind, format!("input {cur} too small"))),
                }
            }
            LayerKind::Relu => {
                if spec.out_channels != spec.in_channels {
                    return Err(layer_err(i, kind, "relu cannot change the channel count"));
                }
                cur
            }
            LayerKind::Maxpool2x2 => {
                if head_seen || cur.h < 2 || cur.w < 2 {
                    return Err(layer_err(i, kind, format!("cannot pool input {cur}")));
                }
                Shape::new(cur.c, cur.h / 2, cur.w / 2)
            }
            LayerKind::GapHead | LayerKind::GcpHead => {
                if head_seen {
                    return Err(layer_err(i, kind, "network already has a pooling head"));
                }
                head_seen = true;
                let expected = if kind == LayerKind::GapHead { cur.c } else { sym_vec_len(cur.c) };
                if spec.out_channels != expected {
                    return Err(layer_err(
                        i,
                        kind,
                        format!("head over {} channels outputs {expected}, spec says {}", cur.c, spec.out_channels),
                    ));
                }
                Shape::flat(expected)
            }
            LayerKind::Dense => {
                if !head_seen {
                    return Err(layer_err(i, kind, "dense layer before the pooling head"));
                }
                Shape::flat(spec.out_channels)
            }
        };
        shapes.push(cur);
    }
    if !head_seen {
        return Err(Error::Shape("network has no pooling head".into()));
    }
    if layers.last().map(|l| l.kind) != Some(LayerKind::Dense) {
        return Err(Error::Shape("network must end in a dense classifier".into()));
    }
    Ok(shapes)
}

impl Network {
    /// Builds a network with He-style fan-in initialization drawn from `seed`.
    pub fn new(layers: Vec<LayerSpec>, input: Shape, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&layers, input)?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            let (fan_in, w_len, gain) = match spec.kind {
                k if k.is_conv() => {
                    let kk = k.kernel() * k.kernel();
                    (spec.in_channels * kk, spec.out_channels * spec.in_channels * kk, 2.0)
                }
                LayerKind::Dense => (spec.in_channels, spec.out_channels * spec.in_channels, 1.0),
                _ => {
                    slots.push(None);
                    continue;
                }
            };
            let mut rng = derived(seed, i as u64 + 1);
            let std = (gain / fan_in as f64).sqrt();
            slots.push(Some(params.len()));
            params.push((0..w_len).map(|_| std * normal(&mut rng)).collect());
            params.push(vec![0.0; spec.out_channels]);
        }
        Ok(Self { layers, shapes, params, slots, seed, id: next_id(), generation: 0 })
    }

    pub fn from_architecture(
        arch: Architecture,
        input: Shape,
        classes: usize,
        head: HeadKind,
        seed: u64,
    ) -> Result<Self> {
        Self::new(arch.layers(input.c, classes, head), input, seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    /// Output shape of layer `index`.
    pub fn output_shape(&self, index: usize) -> Option<Shape> {
        self.shapes.get(index + 1).copied()
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().expect("non-empty").c
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.layers.iter().any(|l| l.kind == LayerKind::GcpHead) {
            HeadKind::Gcp
        } else {
            HeadKind::Gap
        }
    }

    /// Index of the first convolution, the default probe point.
    pub fn first_conv(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind.is_conv())
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        self.generation += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        let expected = self.shapes[0];
        if batch.images.shape != expected {
            return Err(layer_err(
                0,
                self.layers[0].kind,
                format!("batch images are {}, network expects {expected}", batch.images.shape),
            ));
        }
        let tape = self.run(0, batch.images.clone(), &batch.labels)?;
        Ok(ForwardOutput { logits: tape.logits.clone(), loss: tape.loss, tape })
    }

    /// Logits for `images` without recording a tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut act = images.clone();
        for i in 0..self.layers.len() {
            act = self.layer_forward(i, &act)?.0;
        }
        Ok(act)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.batch).map(|b| argmax(logits.sample(b))).collect())
    }

    /// Loss of the network suffix after layer `layer` evaluated on
    /// `activation`, using the labels bound to `tape`.
    pub fn forward_from(&self, tape: &ActivationTape, layer: usize, activation: &Tensor) -> Result<f64> {
        Ok(self.forward_from_tape(tape, layer, activation)?.loss)
    }

    /// Like [`Network::forward_from`] but keeps the suffix tape so gradients
    /// at the injected activation can be taken.
    pub fn forward_from_tape(
        &self,
        tape: &ActivationTape,
        layer: usize,
        activation: &Tensor,
    ) -> Result<ActivationTape> {
        self.check_layer(layer)?;
        let expected = self.shapes[layer + 1];
        if activation.shape != expected || activation.batch != tape.batch_size() {
            return Err(layer_err(
                layer,
                self.layers[layer].kind,
                format!(
                    "injected activation is {} x {}, layer output is {} x {expected}",
                    activation.batch,
                    activation.shape,
                    tape.batch_size()
                ),
            ));
        }
        self.run(layer + 1, activation.clone(), &tape.labels)
    }

    /// Output of layer `layer` as recorded on the tape.
    pub fn activation<'t>(&self, tape: &'t ActivationTape, layer: usize) -> Result<&'t Tensor> {
        self.check_layer(layer)?;
        if layer + 1 < tape.start {
            return Err(Error::Shape(format!("tape starts after layer {layer}")));
        }
        Ok(tape.inputs.get(layer + 1 - tape.start).unwrap_or(&tape.logits))
    }

    /// Exact gradient of the loss with respect to the output of `layer`.
    pub fn grad_wrt_activation(&self, tape: &ActivationTape, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_fresh(tape)?;
        if layer + 1 < tape.start {
            return Err(Error::Shape(format!("tape starts after layer {layer}")));
        }
        self.backprop(tape, layer + 1, None)
    }

    pub fn backward(&self, tape: ActivationTape) -> Result<Gradients> {
        self.check_fresh(&tape)?;
        if tape.start != 0 {
            return Err(Error::StaleTape("suffix tapes carry no parameter gradients".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let input = self.backprop(&tape, 0, Some(&mut grads))?;
        Ok(Gradients { params: grads, input })
    }

    /// Per-layer parameter and multiply-accumulate counts for one sample.
    pub fn count_params_flops(&self) -> Vec<LayerCost> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let input = self.shapes[i];
                let out = self.shapes[i + 1];
                let (params, macs) = match spec.kind {
                    k if k.is_conv() => {
                        let kk = (k.kernel() * k.kernel()) as u64;
                        let p = kk * (spec.in_channels * spec.out_channels) as u64 + spec.out_channels as u64;
                        (p, kk * (spec.in_channels * spec.out_channels * out.spatial()) as u64)
                    }
                    LayerKind::Dense => {
                        let io = (spec.in_channels * spec.out_channels) as u64;
                        (io + spec.out_channels as u64, io)
                    }
                    LayerKind::GapHead => (0, input.len() as u64),
                    LayerKind::GcpHead => {
                        // covariance plus a nominal d³ for the eigendecomposition
                        let (n, d) = (input.spatial() as u64, input.c as u64);
                        (0, n * d * (d + 1) / 2 + d * d * d)
                    }
                    _ => (0, 0),
                };
                LayerCost { kind: spec.kind, params, macs }
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let input = self.shapes[0];
        for v in [input.c, input.h, input.w] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&[l.kind.code()])?;
            for v in [l.in_channels, l.out_channels, l.stride] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.len() as u64).to_le_bytes())?;
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = ByteReader::new(BufReader::new(File::open(path)?));
        let magic = r.bytes(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.err(format!("bad checkpoint magic {magic:?}")));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let code = r.bytes(1)?[0];
            let kind = LayerKind::from_code(code).ok_or_else(|| r.err(format!("unknown layer code {code}")))?;
            let in_channels = r.u32()? as usize;
            let out_channels = r.u32()? as usize;
            let stride = r.u32()? as usize;
            layers.push(LayerSpec { kind, in_channels, out_channels, stride });
        }
        let mut net = Network::new(layers, Shape::new(c, h, w), seed)?;
        let tensors = r.u32()? as usize;
        if tensors != net.params.len() {
            return Err(r.err(format!("expected {} parameter tensors, found {tensors}", net.params.len())));
        }
        for i in 0..tensors {
            let len = r.u64()? as usize;
            if len != net.params[i].len() {
                return Err(r.err(format!("parameter tensor {i} has {len} values, expected {}", net.params[i].len())));
            }
            for j in 0..len {
                net.params[i][j] = r.f64()?;
            }
        }
        Ok(net)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Shape(format!(
                "layer index {layer} out of range for {} layers",
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn check_fresh(&self, tape: &ActivationTape) -> Result<()> {
        if tape.net_id != self.id {
            return Err(Error::StaleTape("tape was recorded by a different network".into()));
        }
        if tape.generation != self.generation {
            return Err(Error::StaleTape(format!(
                "parameters changed since the tape was recorded (generation {} vs {})",
                tape.generation, self.generation
            )));
        }
        Ok(())
    }

    fn run(&self, start: usize, input: Tensor, labels: &[usize]) -> Result<ActivationTape> {
        if labels.len() != input.batch {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), input.batch)));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {bad} out of range for {classes} classes")));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() - start);
        let mut aux = Vec::with_capacity(self.layers.len() - start);
        let mut act = input;
        for i in start..self.layers.len() {
            let (out, a) = self.layer_forward(i, &act)?;
            inputs.push(act);
            aux.push(a);
            act = out;
        }
        let (loss, probs) = softmax_cross_entropy(&act, labels);
        Ok(ActivationTape {
            start,
            inputs,
            aux,
            logits: act,
            probs,
            labels: labels.to_vec(),
            loss,
            net_id: self.id,
            generation: self.generation,
        })
    }

    fn weights(&self, layer: usize) -> (&[f64], &[f64]) {
        let slot = self.slots[layer].expect("parametrized layer");
        (&self.params[slot], &self.params[slot + 1])
    }

    fn layer_forward(&self, i: usize, x: &Tensor) -> Result<(Tensor, Aux)> {
        let spec = self.layers[i];
        let out_shape = self.shapes[i + 1];
        if x.shape != self.shapes[i] {
            return Err(layer_err(
                i,
                spec.kind,
                format!("input is {}, expected {}", x.shape, self.shapes[i]),
            ));
        }
        let b = x.batch;
        let mut out = Tensor::zeros(b, out_shape);
        let aux = match spec.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let (w, bias) = self.weights(i);
                let k = spec.kind.kernel();
                let pad = (k / 2) as isize;
                let (cin, ih, iw) = (x.shape.c, x.shape.h as isize, x.shape.w as isize);
                for n in 0..b {
                    for o in 0..out_shape.c {
                        for oy in 0..out_shape.h {
                            for ox in 0..out_shape.w {
                                let mut acc = bias[o];
                                for c in 0..cin {
                                    for ky in 0..k {
                                        let iy = (oy * spec.stride + ky) as isize - pad;
                                        if iy < 0 || iy >= ih {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * spec.stride + kx) as isize - pad;
                                            if ix < 0 || ix >= iw {
                                                continue;
                                            }
                                            acc += w[((o * cin + c) * k + ky) * k + kx]
                                                * x.data[x.idx(n, c, iy as usize, ix as usize)];
                                        }
                                    }
                                }
                                let idx = out.idx(n, o, oy, ox);
                                out.data[idx] = acc;
                            }
                        }
                    }
                }
                Aux::None
            }
            LayerKind::Relu => {
                for (o, &v) in out.data.iter_mut().zip(&x.data) {
                    *o = v.max(0.0);
                }
                Aux::None
            }
            LayerKind::Maxpool2x2 => {
                let mut arg = Vec::with_capacity(out.data.len());
                for n in 0..b {
                    for c in 0..out_shape.c {
                        for oy in 0..out_shape.h {
                            for ox in 0..out_shape.w {
                                let mut best = x.idx(n, c, 2 * oy, 2 * ox);
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let cand = x.idx(n, c, 2 * oy + dy, 2 * ox + dx);
                                    if x.data[cand] > x.data[best] {
                                        best = cand;
                                    }
                                }
                                let idx = out.idx(n, c, oy, ox);
                                out.data[idx] = x.data[best];
                                arg.push(best);
                            }
                        }
                    }
                }
                Aux::MaxPool(arg)
            }
            LayerKind::GapHead => {
                let scale = 1.0 / x.shape.spatial() as f64;
                for n in 0..b {
                    let pooled = gap_forward(&x.feature_matrix(n)?, scale)?;
                    out.data[n * out_shape.c..(n + 1) * out_shape.c].copy_from_slice(pooled.as_slice());
                }
                Aux::None
            }
            LayerKind::GcpHead => {
                let mut ctxs = Vec::with_capacity(b);
                for n in 0..b {
                    let (pooled, ctx) = gcp_forward(&x.feature_matrix(n)?)
                        .map_err(|e| layer_err(i, spec.kind, e.to_string()))?;
                    out.data[n * out_shape.c..(n + 1) * out_shape.c].copy_from_slice(pooled.as_slice());
                    ctxs.push(ctx);
                }
                Aux::Gcp(ctxs)
            }
            LayerKind::Dense => {
                let (w, bias) = self.weights(i);
                let (fin, fout) = (spec.in_channels, spec.out_channels);
                for n in 0..b {
                    let xin = x.sample(n);
                    for o in 0..fout {
                        let row = &w[o * fin..(o + 1) * fin];
                        out.data[n * fout + o] =
                            bias[o] + row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Aux::None
            }
        };
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(layer_err(i, spec.kind, "produced non-finite activations"));
        }
        Ok((out, aux))
    }

    /// Back-propagates from the loss down to the input of layer `down_to`.
    fn backprop(
        &self,
        tape: &ActivationTape,
        down_to: usize,
        mut grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Tensor> {
        let b = tape.batch_size();
        let k = tape.logits.shape.c;
        let mut g = Tensor::zeros(b, tape.logits.shape);
        for n in 0..b {
            for c in 0..k {
                let onehot = if tape.labels[n] == c { 1.0 } else { 0.0 };
                g.data[n * k + c] = (tape.probs[n * k + c] - onehot) / b as f64;
            }
        }
        for i in (down_to.max(tape.start)..self.layers.len()).rev() {
            let local = i - tape.start;
            g = self.layer_backward(i, &tape.inputs[local], &tape.aux[local], &g, grads.as_deref_mut())?;
        }
        Ok(g)
    }

    fn layer_backward(
        &self,
        i: usize,
        x: &Tensor,
        aux: &Aux,
        gout: &Tensor,
        grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Tensor> {
        let spec = self.layers[i];
        let b = x.batch;
        let mut gin = Tensor::zeros(b, x.shape);
        match (spec.kind, aux) {
            (LayerKind::Conv3x3 | LayerKind::Conv1x1, _) => {
                let (w, _) = self.weights(i);
                let k = spec.kind.kernel();
                let pad = (k / 2) as isize;
                let (cin, ih, iw) = (x.shape.c, x.shape.h as isize, x.shape.w as isize);
                let os = gout.shape;
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; spec.out_channels];
                for n in 0..b {
                    for o in 0..os.c {
                        for oy in 0..os.h {
                            for ox in 0..os.w {
                                let go = gout.data[gout.idx(n, o, oy, ox)];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[o] += go;
                                for c in 0..cin {
                                    for ky in 0..k {
                                        let iy = (oy * spec.stride + ky) as isize - pad;
                                        if iy < 0 || iy >= ih {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * spec.stride + kx) as isize - pad;
                                            if ix < 0 || ix >= iw {
                                                continue;
                                            }
                                            let wi = ((o * cin + c) * k + ky) * k + kx;
                                            let xi = x.idx(n, c, iy as usize, ix as usize);
                                            gw[wi] += go * x.data[xi];
                                            gin.data[xi] += go * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(grads) = grads {
                    let slot = self.slots[i].expect("conv has parameters");
                    grads[slot] = gw;
                    grads[slot + 1] = gb;
                }
            }
            (LayerKind::Relu, _) => {
                for ((gi, &go), &xv) in gin.data.iter_mut().zip(&gout.data).zip(&x.data) {
                    *gi = if xv > 0.0 { go } else { 0.0 };
                }
            }
            (LayerKind::Maxpool2x2, Aux::MaxPool(arg)) => {
                for (&src, &go) in arg.iter().zip(&gout.data) {
                    gin.data[src] += go;
                }
            }
            (LayerKind::GapHead, _) => {
                let nsp = x.shape.spatial();
                let scale = 1.0 / nsp as f64;
                let d = x.shape.c;
                for n in 0..b {
                    let go = PooledVector(gout.sample(n).to_vec());
                    let dx = gap_backward(&go, nsp, scale)?;
                    scatter_features(&mut gin, n, dx.values(), d, nsp);
                }
            }
            (LayerKind::GcpHead, Aux::Gcp(ctxs)) => {
                let nsp = x.shape.spatial();
                let d = x.shape.c;
                for (n, ctx) in ctxs.iter().enumerate() {
                    let dz = devectorize_grad(&PooledVector(gout.sample(n).to_vec()), d)?;
                    let dx = gcp_backward(ctx, &dz)?;
                    scatter_features(&mut gin, n, dx.values(), d, nsp);
                }
            }
            (LayerKind::Dense, _) => {
                let (w, _) = self.weights(i);
                let (fin, fout) = (spec.in_channels, spec.out_channels);
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; fout];
                for n in 0..b {
                    let xin = x.sample(n);
                    for o in 0..fout {
                        let go = gout.data[n * fout + o];
                        gb[o] += go;
                        for j in 0..fin {
                            gw[o * fin + j] += go * xin[j];
                            gin.data[n * fin + j] += go * w[o * fin + j];
                        }
                    }
                }
                if let Some(grads) = grads {
                    let slot = self.slots[i].expect("dense has parameters");
                    grads[slot] = gw;
                    grads[slot + 1] = gb;
                }
            }
            (kind, _) => return Err(layer_err(i, kind, "tape is missing cached state")),
        }
        Ok(gin)
    }
}

fn scatter_features(dst: &mut Tensor, n: usize, dx: &Mat, d: usize, nsp: usize) {
    let base = n * d * nsp;
    for c in 0..d {
        for s in 0..nsp {
            dst.data[base + c * nsp + s] += dx[(s, c)];
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over the batch, plus the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let k = logits.shape.c;
    let mut probs = vec![0.0; logits.data.len()];
    let mut total = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let z = logits.sample(n);
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - z[label];
        for c in 0..k {
            probs[n * k + c] = (z[c] - lse).exp();
        }
    }
    (total / labels.len().max(1) as f64, probs)
}

const CHECKPOINT_MAGIC: &[u8] = b"GCPNET";
const CHECKPOINT_VERSION: u16 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(head: HeadKind) -> Network {
        Network::from_architecture(Architecture::Toy { reduce_dim: 4 }, Shape::new(2, 6, 6), 3, head, 5)
            .unwrap()
    }

    fn batch(seed: u64, shape: Shape, n: usize, classes: usize) -> Batch {
        let mut rng = derived(seed, 99);
        let data = (0..n * shape.len()).map(|_| normal(&mut rng)).collect();
        Batch::new(Tensor::new(n, shape, data).unwrap(), (0..n).map(|i| i % classes).collect()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::new(1, Shape::flat(2), vec![0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let logits = Tensor::new(1, Shape::flat(2), vec![1000.0, 0.0]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[0]);
        assert!(loss <= 1e-6);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = toy(HeadKind::Gcp);
        let b = batch(1, net.input_shape(), 3, 3);
        assert_eq!(net.forward(&b).unwrap().loss.to_bits(), net.forward(&b).unwrap().loss.to_bits());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let net = toy(HeadKind::Gap);
        let b = batch(1, Shape::new(3, 6, 6), 2, 3);
        match net.forward(&b) {
            Err(Error::Layer { index: 0, kind: "conv3x3", .. }) => {}
            other => panic!("unexpected {:?}", other.map(|o| o.loss)),
        }
        let err = Network::new(
            vec![LayerSpec::conv1x1(2, 4), LayerSpec::head(HeadKind::Gap, 5), LayerSpec::dense(5, 2)],
            Shape::new(2, 4, 4),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }));
    }

    #[test]
    fn architecture_rules() {
        let input = Shape::new(1, 4, 4);
        // two heads
        assert!(Network::new(
            vec![
                LayerSpec::head(HeadKind::Gap, 1),
                LayerSpec::head(HeadKind::Gap, 1),
                LayerSpec::dense(1, 2)
            ],
            input,
            0
        )
        .is_err());
        // conv after head
        assert!(Network::new(
            vec![LayerSpec::head(HeadKind::Gap, 1), LayerSpec::conv1x1(1, 1), LayerSpec::dense(1, 2)],
            input,
            0
        )
        .is_err());
        // no head
        assert!(Network::new(vec![LayerSpec::conv1x1(1, 2)], input, 0).is_err());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = toy(HeadKind::Gap);
        let b = batch(2, net.input_shape(), 2, 3);
        let out = net.forward(&b).unwrap();
        net.params_mut()[0][0] += 1.0;
        assert!(matches!(net.backward(out.tape), Err(Error::StaleTape(_))));
        let other = toy(HeadKind::Gap);
        let out = other.forward(&b).unwrap();
        assert!(matches!(net.grad_wrt_activation(&out.tape, 0), Err(Error::StaleTape(_))));
    }

    #[test]
    fn logits_gradient_closed_form() {
        let net = toy(HeadKind::Gcp);
        let b = batch(3, net.input_shape(), 4, 3);
        let out = net.forward(&b).unwrap();
        let last = net.layers().len() - 1;
        let g = net.grad_wrt_activation(&out.tape, last).unwrap();
        let (_, probs) = softmax_cross_entropy(&out.logits, &b.labels);
        for n in 0..4 {
            for c in 0..3 {
                let onehot = if b.labels[n] == c { 1.0 } else { 0.0 };
                assert_eq!(g.data[n * 3 + c], (probs[n * 3 + c] - onehot) / 4.0);
            }
        }
        assert!(net.grad_wrt_activation(&out.tape, last + 1).is_err());
    }

    #[test]
    fn saturated_loss_has_zero_gradients() {
        let layers = vec![LayerSpec::conv1x1(1, 1), LayerSpec::head(HeadKind::Gap, 1), LayerSpec::dense(1, 2)];
        let mut net = Network::new(layers, Shape::new(1, 2, 2), 0).unwrap();
        {
            let p = net.params_mut();
            p[0] = vec![1.0];
            p[1] = vec![0.0];
            p[2] = vec![1.0, 0.0];
            p[3] = vec![1000.0, 0.0];
        }
        let b = Batch::new(Tensor::new(1, Shape::new(1, 2, 2), vec![0.5, 0.1, 0.2, 0.3]).unwrap(), vec![0]).unwrap();
        let out = net.forward(&b).unwrap();
        assert!(out.loss <= 1e-6);
        let g0 = net.grad_wrt_activation(&out.tape, 0).unwrap();
        assert!(g0.data.iter().all(|&v| v.abs() <= 1e-8));
        let grads = net.backward(out.tape).unwrap();
        for p in &grads.params {
            assert!(p.iter().all(|v| v.abs() <= 1e-8));
        }
    }

    #[test]
    fn forward_from_reproduces_loss() {
        for head in [HeadKind::Gap, HeadKind::Gcp] {
            let net = toy(head);
            let b = batch(4, net.input_shape(), 3, 3);
            let out = net.forward(&b).unwrap();
            for layer in 0..net.layers().len() {
                let act = net.activation(&out.tape, layer).unwrap().clone();
                let loss = net.forward_from(&out.tape, layer, &act).unwrap();
                assert_eq!(loss.to_bits(), out.loss.to_bits());
                let g = net.grad_wrt_activation(&out.tape, layer).unwrap();
                let stepped = act.axpy(0.0, &g).unwrap();
                assert_eq!(net.forward_from(&out.tape, layer, &stepped).unwrap(), out.loss);
            }
            let bad = Tensor::zeros(3, Shape::new(1, 1, 1));
            assert!(net.forward_from(&out.tape, 0, &bad).is_err());
        }
    }

    #[test]
    fn head_swap_changes_only_classifier_width() {
        let gap = toy(HeadKind::Gap);
        let gcp = toy(HeadKind::Gcp);
        let b = batch(5, gap.input_shape(), 2, 3);
        let ga = gap.backward(gap.forward(&b).unwrap().tape).unwrap();
        let gc = gcp.backward(gcp.forward(&b).unwrap().tape).unwrap();
        let n = ga.params.len();
        assert_eq!(n, gc.params.len());
        for i in 0..n - 2 {
            assert_eq!(ga.params[i].len(), gc.params[i].len());
            assert_eq!(gap.params()[i], gcp.params()[i]);
        }
        assert_eq!(ga.params[n - 2].len(), 3 * 4);
        assert_eq!(gc.params[n - 2].len(), 3 * 10);
    }

    #[test]
    fn cost_counts() {
        let net = Network::new(
            vec![LayerSpec::conv3x3(1, 1), LayerSpec::head(HeadKind::Gcp, 1), LayerSpec::dense(1, 2)],
            Shape::new(1, 4, 4),
            0,
        )
        .unwrap();
        let costs = net.count_params_flops();
        assert_eq!(costs[0].macs, 9 * 16);
        assert_eq!(costs[0].params, 10);
        assert_eq!(costs[1].params, 0);
        assert_eq!(costs[2].params, 2 + 2);
        let dense = Network::new(
            vec![LayerSpec::conv1x1(1, 5), LayerSpec::head(HeadKind::Gap, 5), LayerSpec::dense(5, 7)],
            Shape::new(1, 2, 2),
            0,
        )
        .unwrap();
        assert_eq!(dense.count_params_flops()[2].params, 5 * 7 + 7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = toy(HeadKind::Gcp);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.layers(), net.layers());
        assert_eq!(back.params(), net.params());
        assert_eq!(back.input_shape(), net.input_shape());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Network::load(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, b"NOTNET\x01\x00").unwrap();
        assert!(matches!(Network::load(&path), Err(Error::Parse { offset: 6, .. })));
    }
}
