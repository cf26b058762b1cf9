//! Shallow U-net and nested U-net (U-net++) built from the primitives in
//! [`ops`](super::ops), with a recording tape for backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::ops::{self, ConvParams};
use super::{NnError, Tensor};
use crate::volume_io::{RawTensor, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Unet,
    Unetpp,
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Arch::Unet),
            "unetpp" | "unet++" => Ok(Arch::Unetpp),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Unet => "unet",
            Arch::Unetpp => "unetpp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub arch: Arch,
    /// Number of 2× downsampling steps.
    pub depth: usize,
    /// Channels at full resolution; doubles per level.
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { arch: Arch::Unet, depth: 2, base_channels: 32, seed: 0 }
    }
}

/// Graph construction shared by parameter allocation and execution, so the
/// layer order can never drift between the two.
trait Builder {
    type Node: Clone;
    fn conv(&mut self, x: &Self::Node, out_ch: usize, kernel: usize) -> Self::Node;
    fn relu(&mut self, x: &Self::Node) -> Self::Node;
    fn sigmoid(&mut self, x: &Self::Node) -> Self::Node;
    fn pool(&mut self, x: &Self::Node) -> Self::Node;
    fn upsample(&mut self, x: &Self::Node) -> Self::Node;
    fn concat(&mut self, xs: &[Self::Node]) -> Self::Node;
}

fn conv_relu<B: Builder>(b: &mut B, x: &B::Node, ch: usize) -> B::Node {
    let y = b.conv(x, ch, 3);
    b.relu(&y)
}

fn double_conv<B: Builder>(b: &mut B, x: &B::Node, ch: usize) -> B::Node {
    let y = conv_relu(b, x, ch);
    conv_relu(b, &y, ch)
}

fn up<B: Builder>(b: &mut B, x: &B::Node, ch: usize) -> B::Node {
    let y = b.upsample(x);
    conv_relu(b, &y, ch)
}

fn head<B: Builder>(b: &mut B, x: &B::Node) -> B::Node {
    let y = b.conv(x, 1, 1);
    b.sigmoid(&y)
}

fn unet<B: Builder>(b: &mut B, input: &B::Node, depth: usize, base: usize) -> B::Node {
    let mut skips = Vec::with_capacity(depth);
    let mut cur = input.clone();
    for level in 0..depth {
        cur = double_conv(b, &cur, base << level);
        skips.push(cur.clone());
        cur = b.pool(&cur);
    }
    cur = double_conv(b, &cur, base << depth);
    for level in (0..depth).rev() {
        let u = up(b, &cur, base << level);
        let cat = b.concat(&[skips[level].clone(), u]);
        cur = double_conv(b, &cat, base << level);
    }
    head(b, &cur)
}

/// Nodes `X[i][j]`: `i` is the resolution level, `j` the position along the
/// dense skip pathway. `X[i][j]` sees every `X[i][0..j]` plus the upsampled
/// `X[i + 1][j - 1]`.
fn unetpp<B: Builder>(b: &mut B, input: &B::Node, depth: usize, base: usize) -> B::Node {
    let mut x: Vec<Vec<B::Node>> = Vec::with_capacity(depth + 1);
    x.push(vec![double_conv(b, input, base)]);
    for level in 1..=depth {
        let pooled = b.pool(&x[level - 1][0]);
        x.push(vec![double_conv(b, &pooled, base << level)]);
    }
    for j in 1..=depth {
        for level in 0..=depth - j {
            let u = up(b, &x[level + 1][j - 1], base << level);
            let mut inputs: Vec<B::Node> = x[level][..j].to_vec();
            inputs.push(u);
            let cat = b.concat(&inputs);
            let node = double_conv(b, &cat, base << level);
            x[level].push(node);
        }
    }
    head(b, &x[0][depth])
}

fn build<B: Builder>(b: &mut B, input: &B::Node, cfg: &NetConfig) -> B::Node {
    match cfg.arch {
        Arch::Unet => unet(b, input, cfg.depth, cfg.base_channels),
        Arch::Unetpp => unetpp(b, input, cfg.depth, cfg.base_channels),
    }
}

/// Records `(in, out, kernel)` of every conv in construction order.
struct ShapeBuilder {
    layers: Vec<(usize, usize, usize)>,
}

impl Builder for ShapeBuilder {
    type Node = usize;

    fn conv(&mut self, x: &usize, out_ch: usize, kernel: usize) -> usize {
        self.layers.push((*x, out_ch, kernel));
        out_ch
    }
    fn relu(&mut self, x: &usize) -> usize {
        *x
    }
    fn sigmoid(&mut self, x: &usize) -> usize {
        *x
    }
    fn pool(&mut self, x: &usize) -> usize {
        *x
    }
    fn upsample(&mut self, x: &usize) -> usize {
        *x
    }
    fn concat(&mut self, xs: &[usize]) -> usize {
        xs.iter().sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { input: usize, layer: usize },
    Relu(usize),
    Sigmoid(usize),
    Pool { input: usize, argmax: Vec<usize> },
    Upsample(usize),
    Concat(Vec<usize>),
}

/// Forward activations of one pass, kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<(Op, Tensor)>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        &self.nodes.last().expect("empty tape").1
    }
}

struct TapeBuilder<'a> {
    layers: &'a [ConvParams],
    next_layer: usize,
    tape: Tape,
    error: Option<NnError>,
}

impl TapeBuilder<'_> {
    fn push(&mut self, op: Op, value: Tensor) -> usize {
        self.tape.nodes.push((op, value));
        self.tape.nodes.len() - 1
    }

    fn value(&self, id: usize) -> &Tensor {
        &self.tape.nodes[id].1
    }

    fn fail(&mut self, e: NnError) -> usize {
        if self.error.is_none() {
            self.error = Some(e);
        }
        // Keep the graph walk going with a placeholder; the error wins.
        let placeholder = self.value(0).clone();
        self.push(Op::Input, placeholder)
    }
}

impl Builder for TapeBuilder<'_> {
    type Node = usize;

    fn conv(&mut self, x: &usize, out_ch: usize, kernel: usize) -> usize {
        let layer = self.next_layer;
        self.next_layer += 1;
        if self.error.is_some() {
            return self.fail(NnError::ShapeMismatch(String::new()));
        }
        let params = &self.layers[layer];
        debug_assert_eq!((params.out_ch, params.kernel), (out_ch, kernel));
        match ops::conv2d(self.value(*x), params) {
            Ok(y) => self.push(Op::Conv { input: *x, layer }, y),
            Err(e) => self.fail(e),
        }
    }

    fn relu(&mut self, x: &usize) -> usize {
        let y = ops::relu(self.value(*x));
        self.push(Op::Relu(*x), y)
    }

    fn sigmoid(&mut self, x: &usize) -> usize {
        let y = ops::sigmoid(self.value(*x));
        self.push(Op::Sigmoid(*x), y)
    }

    fn pool(&mut self, x: &usize) -> usize {
        match ops::maxpool2(self.value(*x)) {
            Ok((y, argmax)) => self.push(Op::Pool { input: *x, argmax }, y),
            Err(e) => self.fail(e),
        }
    }

    fn upsample(&mut self, x: &usize) -> usize {
        let y = ops::upsample2(self.value(*x));
        self.push(Op::Upsample(*x), y)
    }

    fn concat(&mut self, xs: &[usize]) -> usize {
        let parts: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        match ops::concat(&parts) {
            Ok(y) => self.push(Op::Concat(xs.to_vec()), y),
            Err(e) => self.fail(e),
        }
    }
}

/// Weight and bias gradients for every conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    layers: Vec<ConvParams>,
    step: u64,
}

impl Network {
    /// Seeded He-uniform initialization.
    pub fn new(config: NetConfig) -> Result<Self, NnError> {
        if config.depth < 1 || config.base_channels < 1 {
            return Err(NnError::BadConfig(format!("{config:?}")));
        }
        let mut shapes = ShapeBuilder { layers: Vec::new() };
        build(&mut shapes, &1, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = shapes
            .layers
            .iter()
            .map(|&(i, o, k)| ConvParams::he_uniform(o, i, k, &mut rng))
            .collect();
        Ok(Network { config, layers, step: 0 })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        &mut self.layers
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Runs the network and keeps every activation.
    pub fn forward_tape(&self, input: &Tensor) -> Result<Tape, NnError> {
        if input.channels() != 1 {
            return Err(NnError::ShapeMismatch(format!("expected 1 input channel, got {}", input.channels())));
        }
        let div = 1usize << self.config.depth;
        if input.height() % div != 0 || input.width() % div != 0 || input.height() == 0 || input.width() == 0 {
            return Err(NnError::IndivisibleDims { h: input.height(), w: input.width(), divisor: div });
        }
        let mut b = TapeBuilder { layers: &self.layers, next_layer: 0, tape: Tape { nodes: Vec::new() }, error: None };
        b.push(Op::Input, input.clone());
        build(&mut b, &0, &self.config);
        match b.error {
            Some(e) => Err(e),
            None => Ok(b.tape),
        }
    }

    /// Probabilities in (0, 1), one channel, same spatial shape as the input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = self.forward_tape(input)?;
        Ok(tape.nodes.pop().unwrap().1)
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the network output).
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<ParamGrads, NnError> {
        let n = tape.nodes.len();
        if tape.output().shape() != grad_out.shape() {
            return Err(NnError::ShapeMismatch("output gradient shape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[n - 1] = Some(grad_out.clone());
        let mut out = ParamGrads {
            layers: self.layers.iter().map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()])).collect(),
        };
        let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, value) = &tape.nodes[id];
            match op {
                Op::Input => {}
                Op::Conv { input, layer } => {
                    let cg = ops::conv2d_backward(&tape.nodes[*input].1, &self.layers[*layer], &g)?;
                    let (gw, gb) = &mut out.layers[*layer];
                    for (a, b) in gw.iter_mut().zip(&cg.weight) {
                        *a += b;
                    }
                    for (a, b) in gb.iter_mut().zip(&cg.bias) {
                        *a += b;
                    }
                    if *input != 0 {
                        accumulate(&mut grads, *input, cg.input);
                    }
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(&tape.nodes[*input].1, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sigmoid(input) => {
                    let gi = ops::sigmoid_backward(value, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Pool { input, argmax } => {
                    let gi = ops::maxpool2_backward(tape.nodes[*input].1.shape(), argmax, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Upsample(input) => {
                    accumulate(&mut grads, *input, ops::upsample2_backward(&g));
                }
                Op::Concat(inputs) => {
                    let channels: Vec<usize> = inputs.iter().map(|&i| tape.nodes[i].1.channels()).collect();
                    for (&i, gi) in inputs.iter().zip(ops::concat_backward(&channels, &g)) {
                        accumulate(&mut grads, i, gi);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Applies one Adam update to every layer.
    pub fn adam_step(&mut self, grads: &ParamGrads, adam: &Adam) {
        assert_eq!(grads.layers.len(), self.layers.len(), "gradient layer count");
        self.step += 1;
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            let m = &mut layer.moments;
            adam.update(&mut layer.weight, gw, &mut m.weight_m, &mut m.weight_v, self.step);
            adam.update(&mut layer.bias, gb, &mut m.bias_m, &mut m.bias_v, self.step);
        }
    }

    /// Checkpoint records: per layer weight, bias and their Adam moments,
    /// the step counter, and the config as JSON bytes.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::with_capacity(self.layers.len() * 6 + 2);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        out.push(Record::new("config", RawTensor::from_u8(&[config.len()], &config)));
        out.push(Record::new("adam.step", RawTensor::scalar_u64(self.step)));
        for (i, l) in self.layers.iter().enumerate() {
            let wdims = [l.out_ch, l.in_ch, l.kernel, l.kernel];
            out.push(Record::new(format!("layer{i}.weight"), RawTensor::from_f64(&wdims, &l.weight)));
            out.push(Record::new(format!("layer{i}.bias"), RawTensor::from_f64(&[l.out_ch], &l.bias)));
            let m = &l.moments;
            out.push(Record::new(format!("layer{i}.weight.adam_m"), RawTensor::from_f64(&wdims, &m.weight_m)));
            out.push(Record::new(format!("layer{i}.weight.adam_v"), RawTensor::from_f64(&wdims, &m.weight_v)));
            out.push(Record::new(format!("layer{i}.bias.adam_m"), RawTensor::from_f64(&[l.out_ch], &m.bias_m)));
            out.push(Record::new(format!("layer{i}.bias.adam_v"), RawTensor::from_f64(&[l.out_ch], &m.bias_v)));
        }
        out
    }

    pub fn from_records(records: &[Record]) -> Result<Self, NnError> {
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .map(|r| &r.tensor)
                .ok_or_else(|| NnError::BadCheckpoint(format!("missing record {name}")))
        };
        let config_bytes =
            find("config")?.to_u8().ok_or_else(|| NnError::BadCheckpoint("config must be u8".into()))?;
        let config: NetConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| NnError::BadCheckpoint(format!("config json: {e}")))?;
        let mut net = Network::new(config)?;
        net.step = find("adam.step")?
            .to_scalar_u64()
            .ok_or_else(|| NnError::BadCheckpoint("adam.step must be a u64 scalar".into()))?;
        for (i, l) in net.layers.iter_mut().enumerate() {
            let load = |name: String, len: usize| -> Result<Vec<f64>, NnError> {
                let v = find(&name)?.to_f64().ok_or_else(|| NnError::BadCheckpoint(format!("{name} must be f64")))?;
                if v.len() != len {
                    return Err(NnError::BadCheckpoint(format!("{name}: {} values, expected {len}", v.len())));
                }
                Ok(v)
            };
            let (nw, nb) = (l.weight.len(), l.bias.len());
            l.weight = load(format!("layer{i}.weight"), nw)?;
            l.bias = load(format!("layer{i}.bias"), nb)?;
            l.moments.weight_m = load(format!("layer{i}.weight.adam_m"), nw)?;
            l.moments.weight_v = load(format!("layer{i}.weight.adam_v"), nw)?;
            l.moments.bias_m = load(format!("layer{i}.bias.adam_m"), nb)?;
            l.moments.bias_v = load(format!("layer{i}.bias.adam_v"), nb)?;
        }
        Ok(net)
    }
}
