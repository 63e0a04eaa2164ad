//! Trainable layer stacks built from a [`NetworkSpec`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netspec::{self, LayerSpec, NetworkSpec, PoolType};
use crate::tensor::{
    self, avgpool_backward, avgpool_forward, conv2d_forward, maxpool_backward, maxpool_forward,
    relu, relu_backward, sigmoid, sigmoid_backward, ArgmaxMap, ConvGrads, ConvParams, Shape,
    Tensor,
};

/// One instantiated layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Relu,
    Sigmoid,
}

impl Layer {
    pub fn conv(&self) -> Option<&ConvParams> {
        match self {
            Layer::Conv(p) => Some(p),
            _ => None,
        }
    }

    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(p) => LayerSpec::Conv { out_channels: p.out_channels, kernel: p.kernel, stride: p.stride },
            Layer::MaxPool { kernel, stride } => {
                LayerSpec::Pool { pool_type: PoolType::Max, kernel: *kernel, stride: *stride }
            }
            Layer::AvgPool { kernel, stride } => {
                LayerSpec::Pool { pool_type: PoolType::Ave, kernel: *kernel, stride: *stride }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::Sigmoid => LayerSpec::Sig,
        }
    }
}

/// Uniform `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
pub fn init_conv(out_channels: usize, in_channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<ConvParams> {
    let mut p = ConvParams::same(out_channels, in_channels, kernel)?;
    let fan_in = in_channels * kernel * kernel;
    let fan_out = out_channels * kernel * kernel;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in &mut p.weights {
        *w = rng.gen_range(-a..=a);
    }
    Ok(p)
}

/// Instantiate every layer of `spec`, drawing fresh weights from `rng`.
pub fn build_layers(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Vec<Layer>> {
    instantiate(spec, |out, inp, k| init_conv(out, inp, k, rng))
}

/// Instantiate every layer of `spec` with all-zero parameters.
pub fn zero_layers(spec: &NetworkSpec) -> Result<Vec<Layer>> {
    instantiate(spec, ConvParams::same)
}

fn instantiate(
    spec: &NetworkSpec,
    mut make_conv: impl FnMut(usize, usize, usize) -> Result<ConvParams>,
) -> Result<Vec<Layer>> {
    spec.check_geometry()?;
    let mut channels = spec.input_channels;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        layers.push(match *l {
            LayerSpec::Conv { out_channels, kernel, .. } => {
                let p = make_conv(out_channels, channels, kernel)?;
                channels = out_channels;
                Layer::Conv(p)
            }
            LayerSpec::Pool { pool_type: PoolType::Max, kernel, stride } => Layer::MaxPool { kernel, stride },
            LayerSpec::Pool { pool_type: PoolType::Ave, kernel, stride } => Layer::AvgPool { kernel, stride },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Sig => Layer::Sigmoid,
        });
    }
    Ok(layers)
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    start: usize,
    /// Input to each layer in the traced range.
    inputs: Vec<Tensor>,
    argmax: Vec<Option<ArgmaxMap>>,
    output: Tensor,
}

impl Activations {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    /// Input of absolute layer `index`.
    pub fn layer_input(&self, index: usize) -> Option<&Tensor> {
        index.checked_sub(self.start).and_then(|i| self.inputs.get(i))
    }
}

/// Parameter gradients, one slot per layer. Frozen and parameter-free layers hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ConvGrads>>,
    /// Gradient with respect to the traced range's input, when requested.
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn empty(layer_count: usize) -> Self {
        Gradients { layers: vec![None; layer_count], input: None }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(ConvGrads::is_zero)
    }

    /// Elementwise sum; missing slots on either side are filled from the other.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers.iter_mut().flatten().for_each(|g| g.scale(factor));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    frozen: Vec<bool>,
    seed: u64,
}

/// Build a network with deterministic uniform fan-based initialisation.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = build_layers(spec, &mut rng)?;
    Network::from_layers(spec.clone(), layers, seed)
}

impl Network {
    /// Assemble from already-instantiated layers; validates them against `spec`.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} layers supplied for a {}-layer spec",
                layers.len(),
                spec.layers.len()
            )));
        }
        let mut channels = spec.input_channels;
        for (i, (layer, ls)) in layers.iter().zip(&spec.layers).enumerate() {
            if layer.spec() != *ls {
                return Err(Error::shape(format!("layer {i} is `{}`, spec says `{ls}`", layer.spec())));
            }
            if let Layer::Conv(p) = layer {
                if p.in_channels != channels || p.padding != ls.padding() {
                    return Err(Error::shape(format!(
                        "layer {i} takes {} channels with padding {}, expected {channels} and {}",
                        p.in_channels,
                        p.padding,
                        ls.padding()
                    )));
                }
                channels = p.out_channels;
            }
        }
        let n = layers.len();
        Ok(Network { spec, layers, frozen: vec![false; n], seed })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.spec.input_channels
    }

    /// Indices of convolution layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].conv().is_some()).collect()
    }

    pub fn conv_params(&self, layer: usize) -> Option<&ConvParams> {
        self.layers.get(layer).and_then(Layer::conv)
    }

    pub fn conv_params_mut(&mut self, layer: usize) -> Option<&mut ConvParams> {
        match self.layers.get_mut(layer) {
            Some(Layer::Conv(p)) => Some(p),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::conv).map(ConvParams::param_count).sum()
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.frozen[layer]
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.frozen[layer] = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.fill(true);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.fill(false);
    }

    pub fn all_frozen(&self) -> bool {
        self.conv_indices().iter().all(|&i| self.frozen[i])
    }

    /// Output shape for a given input, per the divisibility rule.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (c, h, w) = netspec::output_shape(&self.spec, (input.channels, input.height, input.width))?;
        Ok(Shape::new(c, h, w))
    }

    /// Full forward pass. Activations are retained only when `keep_activations` is set.
    pub fn forward(&self, input: &Tensor, keep_activations: bool) -> Result<(Tensor, Option<Activations>)> {
        self.output_shape(input.shape())?;
        self.forward_range(input, 0, self.layers.len(), keep_activations)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input, false).map(|(out, _)| out)
    }

    /// Forward through layers `start..end` only.
    pub fn forward_range(
        &self,
        input: &Tensor,
        start: usize,
        end: usize,
        keep_activations: bool,
    ) -> Result<(Tensor, Option<Activations>)> {
        if start > end || end > self.layers.len() {
            return Err(Error::invalid(format!("layer range {start}..{end} out of bounds")));
        }
        let mut inputs = Vec::new();
        let mut argmax = Vec::new();
        let mut x = input.clone();
        for layer in &self.layers[start..end] {
            let mut winners = None;
            let y = match layer {
                Layer::Conv(p) => conv2d_forward(&x, p)?,
                Layer::MaxPool { kernel, stride } => {
                    let (y, map) = maxpool_forward(&x, *kernel, *stride)?;
                    winners = Some(map);
                    y
                }
                Layer::AvgPool { kernel, stride } => avgpool_forward(&x, *kernel, *stride)?,
                Layer::Relu => relu(&x),
                Layer::Sigmoid => sigmoid(&x),
            };
            if keep_activations {
                inputs.push(std::mem::replace(&mut x, y));
                argmax.push(winners);
            } else {
                x = y;
            }
        }
        let acts = keep_activations.then(|| Activations { start, inputs, argmax, output: x.clone() });
        Ok((x, acts))
    }

    /// Reverse pass over the whole traced range.
    pub fn backward(&self, acts: Option<&Activations>, grad_output: &Tensor) -> Result<Gradients> {
        self.backward_range(acts, grad_output, false)
    }

    /// Reverse pass over the range recorded in `acts`. Frozen layers receive no
    /// gradient and propagation stops at the earliest trainable layer unless
    /// `need_input_grad` is set.
    pub fn backward_range(
        &self,
        acts: Option<&Activations>,
        grad_output: &Tensor,
        need_input_grad: bool,
    ) -> Result<Gradients> {
        let acts = acts.ok_or_else(|| Error::invalid("backward needs activations from forward(.., true)"))?;
        if grad_output.shape() != acts.output.shape() {
            return Err(Error::shape(format!(
                "grad_output is {}, network output is {}",
                grad_output.shape(),
                acts.output.shape()
            )));
        }
        let start = acts.start;
        let end = start + acts.inputs.len();
        let mut grads = Gradients::empty(self.layers.len());
        let stop = if need_input_grad {
            start
        } else {
            match (start..end).find(|&i| self.layers[i].conv().is_some() && !self.frozen[i]) {
                Some(i) => i,
                None => return Ok(grads),
            }
        };
        let mut g = grad_output.clone();
        for i in (stop..end).rev() {
            let x = &acts.inputs[i - start];
            let propagate = i > stop || need_input_grad;
            g = match &self.layers[i] {
                Layer::Conv(p) => {
                    let train = !self.frozen[i];
                    if !train && !propagate {
                        break;
                    }
                    let (gi, gp) = tensor::conv::conv2d_backward_impl(x, p, &g, propagate, train)?;
                    if train {
                        grads.layers[i] = Some(gp);
                    }
                    match gi {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                Layer::MaxPool { .. } => {
                    let map = acts.argmax[i - start].as_ref().expect("maxpool records winners");
                    maxpool_backward(map, &g)?
                }
                Layer::AvgPool { kernel, stride } => avgpool_backward(x.shape(), *kernel, *stride, &g)?,
                Layer::Relu => relu_backward(x, &g)?,
                Layer::Sigmoid => {
                    let out = acts.inputs.get(i - start + 1).unwrap_or(&acts.output);
                    sigmoid_backward(out, &g)?
                }
            };
        }
        if need_input_grad {
            grads.input = Some(g);
        }
        Ok(grads)
    }
}

/// Dense layer `y = W·x + b` rewritten as a valid convolution whose kernel
/// covers the whole `input` extent; for a 1×1 input this is a pointwise
/// fusion layer. `weights` is row-major `rows × (C·H·W)`.
pub fn fc_as_conv(weights: &[f64], bias: &[f64], input: Shape) -> Result<ConvParams> {
    let cols = input.len();
    if input.height != input.width {
        return Err(Error::shape(format!("fc_as_conv needs a square input extent, got {input}")));
    }
    if bias.is_empty() || weights.len() != bias.len() * cols {
        return Err(Error::shape(format!(
            "weight matrix has {} entries, expected {} rows x {cols} columns",
            weights.len(),
            bias.len()
        )));
    }
    // Row-major (c, y, x) flattening matches the filter layout exactly.
    ConvParams::from_parts(weights.to_vec(), bias.to_vec(), input.channels, input.height, 1, 0)
}
