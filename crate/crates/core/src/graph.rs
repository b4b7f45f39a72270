//! Layer graphs: construction, parameter registry and execution.
//!
//! Nodes are stored in topological order, so forward runs front to back and
//! backward runs back to front. Training-mode forward stores one cache per
//! node; backward consumes them and returns one gradient per registered
//! parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNorm3dParams, Conv3dParams, LinearParams, NormMode, PoolParams};
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

/// Which part of a network a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Input,
    Stem,
    /// Residual branch of a block (everything that is not the shortcut).
    Branch,
    Shortcut,
    /// Addition / concatenation joining branch and shortcut.
    Merge,
    Transition,
    Head,
}

#[derive(Clone, Debug)]
pub enum Layer<T = f32> {
    Input,
    Conv(Conv3dParams<T>),
    BatchNorm(BatchNorm3dParams<T>),
    Relu,
    MaxPool(PoolParams),
    AvgPool { kernel: [usize; 3], stride: [usize; 3] },
    GlobalAvgPool,
    Linear(LinearParams<T>),
    Add,
    Concat,
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input => "input",
            Layer::Conv(_) => "conv3d",
            Layer::BatchNorm(_) => "batchnorm3d",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool3d",
            Layer::AvgPool { .. } => "avgpool3d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Linear(_) => "linear",
            Layer::Add => "add",
            Layer::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T = f32> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<NodeId>,
    pub role: Role,
    /// Output shape for a batch of one.
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferKind {
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub node: NodeId,
    pub kind: ParamKind,
}

impl ParamInfo {
    /// Batch-norm affine terms and biases, as opposed to weights.
    pub fn is_bn_or_bias(&self) -> bool {
        self.kind != ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferInfo {
    pub name: String,
    pub node: NodeId,
    pub kind: BufferKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Nothing,
    Conv(ops::Conv3dCache<T>),
    BatchNorm(ops::BatchNormCache<T>),
    Relu(Tensor<T>),
    MaxPool(ops::MaxPoolCache),
    InputShape(Vec<usize>),
    Linear(Tensor<T>),
    Concat(Vec<usize>),
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    /// Aligned with [`Graph::params`].
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    output: NodeId,
    params: Vec<ParamInfo>,
    buffers: Vec<BufferInfo>,
    caches: Option<Vec<Cache<T>>>,
}

impl<T: Element> Graph<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    /// Expected input shape for a batch of one, `(1, C, T, H, W)`.
    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferInfo] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        (0..self.params.len()).map(|i| self.param(i).len()).sum()
    }

    pub fn param(&self, i: usize) -> &Tensor<T> {
        let info = &self.params[i];
        match (&self.nodes[info.node].layer, info.kind) {
            (Layer::Conv(p), ParamKind::Weight) => &p.weight,
            (Layer::Conv(p), ParamKind::Bias) => p.bias.as_ref().expect("registered conv bias"),
            (Layer::BatchNorm(p), ParamKind::Gamma) => &p.gamma,
            (Layer::BatchNorm(p), ParamKind::Beta) => &p.beta,
            (Layer::Linear(p), ParamKind::Weight) => &p.weight,
            (Layer::Linear(p), ParamKind::Bias) => &p.bias,
            _ => unreachable!("parameter registry out of sync with node {}", info.name),
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor<T> {
        let info = &self.params[i];
        match (&mut self.nodes[info.node].layer, info.kind) {
            (Layer::Conv(p), ParamKind::Weight) => &mut p.weight,
            (Layer::Conv(p), ParamKind::Bias) => p.bias.as_mut().expect("registered conv bias"),
            (Layer::BatchNorm(p), ParamKind::Gamma) => &mut p.gamma,
            (Layer::BatchNorm(p), ParamKind::Beta) => &mut p.beta,
            (Layer::Linear(p), ParamKind::Weight) => &mut p.weight,
            (Layer::Linear(p), ParamKind::Bias) => &mut p.bias,
            _ => unreachable!("parameter registry out of sync"),
        }
    }

    pub fn buffer(&self, i: usize) -> &Tensor<T> {
        let info = &self.buffers[i];
        match (&self.nodes[info.node].layer, info.kind) {
            (Layer::BatchNorm(p), BufferKind::RunningMean) => &p.running_mean,
            (Layer::BatchNorm(p), BufferKind::RunningVar) => &p.running_var,
            _ => unreachable!("buffer registry out of sync"),
        }
    }

    pub fn buffer_mut(&mut self, i: usize) -> &mut Tensor<T> {
        let info = &self.buffers[i];
        match (&mut self.nodes[info.node].layer, info.kind) {
            (Layer::BatchNorm(p), BufferKind::RunningMean) => &mut p.running_mean,
            (Layer::BatchNorm(p), BufferKind::RunningVar) => &mut p.running_var,
            _ => unreachable!("buffer registry out of sync"),
        }
    }

    /// Sets every convolution weight carrying `role` to zero.
    pub fn zero_conv_weights(&mut self, role: Role) {
        for node in &mut self.nodes {
            if let (Layer::Conv(p), true) = (&mut node.layer, node.role == role) {
                p.weight.fill(T::zero());
            }
        }
    }

    /// Copies parameters and buffers from `other` wherever the names match.
    /// Returns how many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &Graph<T>) -> Result<usize> {
        let mut copied = 0;
        for j in 0..other.params.len() {
            if let Some(i) = self.params.iter().position(|p| p.name == other.params[j].name) {
                let src = other.param(j).clone();
                let dst = self.param_mut(i);
                dst.same_shape(&src)?;
                *dst = src;
                copied += 1;
            }
        }
        for j in 0..other.buffers.len() {
            if let Some(i) = self.buffers.iter().position(|b| b.name == other.buffers[j].name) {
                let src = other.buffer(j).clone();
                let dst = self.buffer_mut(i);
                dst.same_shape(&src)?;
                *dst = src;
                copied += 1;
            }
        }
        Ok(copied)
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let want = &self.nodes[0].shape[1..];
        if input.rank() != 5 || &input.shape()[1..] != want {
            return Err(Error::dim(format!(
                "network expects input (B, {}), got {:?}",
                want.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
                input.shape()
            )));
        }
        Ok(())
    }

    /// Remaining consumer counts, used to free activations early.
    fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                counts[i] += 1;
            }
        }
        counts[self.output] += 1;
        counts
    }

    /// Runs the graph. `Mode::Train` uses batch statistics, updates running
    /// statistics and keeps what backward needs; `Mode::Eval` keeps nothing.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.caches = None;
                self.infer(input)
            }
            Mode::Train => self.forward_train(input),
        }
    }

    /// Inference-mode forward that leaves the graph untouched.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut remaining = self.consumer_counts();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        outputs[0] = Some(input.clone());
        for id in 1..self.nodes.len() {
            let node = &self.nodes[id];
            let x = |k: usize| outputs[node.inputs[k]].as_ref().expect("input computed before use");
            let y = match &node.layer {
                Layer::Input => unreachable!("input node is always first"),
                Layer::Conv(p) => ops::conv3d(x(0), p)?,
                Layer::BatchNorm(p) => ops::batchnorm3d_inference(x(0), p)?,
                Layer::Relu => ops::relu(x(0)),
                Layer::MaxPool(p) => ops::maxpool3d_forward(x(0), p)?.0,
                Layer::AvgPool { kernel, stride } => ops::avgpool3d(x(0), *kernel, *stride)?,
                Layer::GlobalAvgPool => ops::global_avg_pool(x(0))?,
                Layer::Linear(p) => ops::linear(x(0), p)?,
                Layer::Add => add(x(0), x(1))?,
                Layer::Concat => {
                    let xs: Vec<&Tensor<T>> = (0..node.inputs.len()).map(x).collect();
                    ops::concat_channels(&xs)?
                }
            };
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    outputs[i] = None;
                }
            }
            outputs[id] = Some(y);
        }
        Ok(outputs[self.output].take().expect("output computed"))
    }

    fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        self.caches = None;
        let mut remaining = self.consumer_counts();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut caches = Vec::with_capacity(self.nodes.len());
        outputs[0] = Some(input.clone());
        caches.push(Cache::Nothing);
        for id in 1..self.nodes.len() {
            let node = &mut self.nodes[id];
            let inputs = &node.inputs;
            let x = |k: usize| outputs[inputs[k]].as_ref().expect("input computed before use");
            let (y, cache) = match &mut node.layer {
                Layer::Input => unreachable!("input node is always first"),
                Layer::Conv(p) => {
                    let (y, c) = ops::conv3d_forward(x(0), p)?;
                    (y, Cache::Conv(c))
                }
                Layer::BatchNorm(p) => {
                    let (y, c) = ops::batchnorm3d_forward(x(0), p, NormMode::Training)?;
                    (y, Cache::BatchNorm(c))
                }
                Layer::Relu => {
                    let y = ops::relu(x(0));
                    (y.clone(), Cache::Relu(y))
                }
                Layer::MaxPool(p) => {
                    let (y, c) = ops::maxpool3d_forward(x(0), p)?;
                    (y, Cache::MaxPool(c))
                }
                Layer::AvgPool { kernel, stride } => {
                    (ops::avgpool3d(x(0), *kernel, *stride)?, Cache::InputShape(x(0).shape().to_vec()))
                }
                Layer::GlobalAvgPool => (ops::global_avg_pool(x(0))?, Cache::InputShape(x(0).shape().to_vec())),
                Layer::Linear(p) => (ops::linear(x(0), p)?, Cache::Linear(x(0).clone())),
                Layer::Add => (add(x(0), x(1))?, Cache::Nothing),
                Layer::Concat => {
                    let xs: Vec<&Tensor<T>> = (0..inputs.len()).map(x).collect();
                    let channels = xs.iter().map(|t| t.shape()[1]).collect();
                    (ops::concat_channels(&xs)?, Cache::Concat(channels))
                }
            };
            for &i in inputs.iter() {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    outputs[i] = None;
                }
            }
            outputs[id] = Some(y);
            caches.push(cache);
        }
        self.caches = Some(caches);
        Ok(outputs[self.output].take().expect("output computed"))
    }

    /// Backpropagates `grad_output` through the last training-mode forward.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        let mut caches = self.caches.take().ok_or(Error::NoForwardCache)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_output.clone());
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        // node -> registry slots, in ParamKind order
        let mut slots: Vec<Vec<(ParamKind, usize)>> = vec![Vec::new(); self.nodes.len()];
        for (i, p) in self.params.iter().enumerate() {
            slots[p.node].push((p.kind, i));
        }
        let slot = |node: NodeId, kind: ParamKind| slots[node].iter().find(|(k, _)| *k == kind).map(|&(_, i)| i);

        for id in (1..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let cache = std::mem::replace(&mut caches[id], Cache::Nothing);
            let input_grads: Vec<Tensor<T>> = match (&node.layer, cache) {
                (Layer::Conv(p), Cache::Conv(c)) => {
                    let g = ops::conv3d_backward(&dy, &c, p)?;
                    param_grads[slot(id, ParamKind::Weight).unwrap()] = Some(g.weight);
                    if let (Some(gb), Some(i)) = (g.bias, slot(id, ParamKind::Bias)) {
                        param_grads[i] = Some(gb);
                    }
                    vec![g.input]
                }
                (Layer::BatchNorm(p), Cache::BatchNorm(c)) => {
                    let g = ops::batchnorm3d_backward(&dy, &c, p)?;
                    param_grads[slot(id, ParamKind::Gamma).unwrap()] = Some(g.gamma);
                    param_grads[slot(id, ParamKind::Beta).unwrap()] = Some(g.beta);
                    vec![g.input]
                }
                (Layer::Relu, Cache::Relu(y)) => vec![ops::relu_backward(&dy, &y)?],
                (Layer::MaxPool(_), Cache::MaxPool(c)) => vec![ops::maxpool3d_backward(&dy, &c)?],
                (Layer::AvgPool { kernel, stride }, Cache::InputShape(s)) => {
                    vec![ops::avgpool3d_backward(&dy, &s, *kernel, *stride)?]
                }
                (Layer::GlobalAvgPool, Cache::InputShape(s)) => vec![ops::global_avg_pool_backward(&dy, &s)?],
                (Layer::Linear(p), Cache::Linear(x)) => {
                    let g = ops::linear_backward(&dy, &x, p)?;
                    param_grads[slot(id, ParamKind::Weight).unwrap()] = Some(g.weight);
                    param_grads[slot(id, ParamKind::Bias).unwrap()] = Some(g.bias);
                    vec![g.input]
                }
                (Layer::Add, _) => vec![dy.clone(), dy],
                (Layer::Concat, Cache::Concat(channels)) => ops::concat_channels_backward(&dy, &channels)?,
                _ => return Err(Error::NoForwardCache),
            };
            for (&src, g) in node.inputs.iter().zip(input_grads) {
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = param_grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.param(i).shape())))
            .collect();
        let input = grads[0].take().ok_or(Error::NoForwardCache)?;
        Ok(Gradients { params, input })
    }

    /// Output shape of every node for a batch of one.
    pub fn summary(&self) -> Vec<LayerSummary> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, n)| LayerSummary {
                name: n.name.clone(),
                kind: n.layer.kind(),
                output_shape: n.shape.clone(),
                params: self.params.iter().enumerate().filter(|(_, p)| p.node == id).map(|(i, _)| self.param(i).len()).sum(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Incremental graph construction with shape checking and seeded He init.
pub struct GraphBuilder<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<ParamInfo>,
    buffers: Vec<BufferInfo>,
    rng: ChaCha8Rng,
}

impl<T: Element> GraphBuilder<T> {
    /// Starts a graph whose input is `(B, C, T, H, W)` with `clip = [C, T, H, W]`.
    pub fn new(clip: [usize; 4], seed: u64) -> (Self, NodeId) {
        let input = Node {
            name: "input".into(),
            layer: Layer::Input,
            inputs: Vec::new(),
            role: Role::Input,
            shape: vec![1, clip[0], clip[1], clip[2], clip[3]],
        };
        let builder = GraphBuilder {
            nodes: vec![input],
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        (builder, 0)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].shape[1]
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    fn push(&mut self, name: String, layer: Layer<T>, inputs: Vec<NodeId>, role: Role, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        let mut register = |kind| self.params.push(ParamInfo { name: format!("{name}.{}", param_suffix(kind)), node: id, kind });
        match &layer {
            Layer::Conv(p) => {
                register(ParamKind::Weight);
                if p.bias.is_some() {
                    register(ParamKind::Bias);
                }
            }
            Layer::BatchNorm(_) => {
                register(ParamKind::Gamma);
                register(ParamKind::Beta);
                self.buffers.push(BufferInfo { name: format!("{name}.running_mean"), node: id, kind: BufferKind::RunningMean });
                self.buffers.push(BufferInfo { name: format!("{name}.running_var"), node: id, kind: BufferKind::RunningVar });
            }
            Layer::Linear(_) => {
                register(ParamKind::Weight);
                register(ParamKind::Bias);
            }
            _ => {}
        }
        self.nodes.push(Node { name, layer, inputs, role, shape });
        id
    }

    /// Bias-free convolution with He (fan-out) normal initialisation.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
        role: Role,
    ) -> Result<NodeId> {
        let name = name.into();
        let in_ch = self.channels(input);
        let mut p = Conv3dParams::<T>::zeros(in_ch, out_ch, kernel, stride, padding, groups, false)
            .map_err(|e| Error::config(format!("{name}: {e}")))?;
        let shape = p.output_shape(self.shape(input)).map_err(|e| Error::config(format!("{name}: {e}")))?;
        let fan_out = out_ch * kernel.iter().product::<usize>();
        p.weight = Tensor::randn(p.weight.shape(), (2.0 / fan_out as f64).sqrt(), &mut self.rng);
        Ok(self.push(name, Layer::Conv(p), vec![input], role, shape.to_vec()))
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, input: NodeId, role: Role) -> NodeId {
        let p = BatchNorm3dParams::new(self.channels(input));
        let shape = self.shape(input).to_vec();
        self.push(name.into(), Layer::BatchNorm(p), vec![input], role, shape)
    }

    pub fn relu(&mut self, name: impl Into<String>, input: NodeId, role: Role) -> NodeId {
        let shape = self.shape(input).to_vec();
        self.push(name.into(), Layer::Relu, vec![input], role, shape)
    }

    pub fn max_pool(&mut self, name: impl Into<String>, input: NodeId, params: PoolParams, role: Role) -> Result<NodeId> {
        let shape = params.output_shape(self.shape(input))?;
        Ok(self.push(name.into(), Layer::MaxPool(params), vec![input], role, shape.to_vec()))
    }

    pub fn avg_pool(&mut self, name: impl Into<String>, input: NodeId, kernel: [usize; 3], stride: [usize; 3], role: Role) -> Result<NodeId> {
        let shape = PoolParams { kernel, stride, padding: [0; 3] }.output_shape(self.shape(input))?;
        Ok(self.push(name.into(), Layer::AvgPool { kernel, stride }, vec![input], role, shape.to_vec()))
    }

    pub fn global_avg_pool(&mut self, name: impl Into<String>, input: NodeId, role: Role) -> NodeId {
        let shape = vec![1, self.channels(input)];
        self.push(name.into(), Layer::GlobalAvgPool, vec![input], role, shape)
    }

    /// Fully connected layer with zero-initialised weights and bias.
    pub fn linear(&mut self, name: impl Into<String>, input: NodeId, out_features: usize, role: Role) -> Result<NodeId> {
        let name = name.into();
        let &[_, features] = self.shape(input) else {
            return Err(Error::config(format!("{name}: linear needs a (B, F) input, got {:?}", self.shape(input))));
        };
        let p = LinearParams::zeros(features, out_features);
        Ok(self.push(name, Layer::Linear(p), vec![input], role, vec![1, out_features]))
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId, role: Role) -> Result<NodeId> {
        let name = name.into();
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{name}: cannot add shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(name, Layer::Add, vec![a, b], role, shape))
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: &[NodeId], role: Role) -> Result<NodeId> {
        let name = name.into();
        let first = *inputs.first().ok_or_else(|| Error::config(format!("{name}: concat needs inputs")))?;
        let mut shape = self.shape(first).to_vec();
        shape[1] = 0;
        for &i in inputs {
            let s = self.shape(i);
            if s.len() != 5 || s[2..] != shape[2..] {
                return Err(Error::config(format!("{name}: concat extents {:?} vs {:?}", s, self.shape(first))));
            }
            shape[1] += s[1];
        }
        Ok(self.push(name, Layer::Concat, inputs.to_vec(), role, shape))
    }

    pub fn finish(self, output: NodeId) -> Graph<T> {
        Graph { nodes: self.nodes, output, params: self.params, buffers: self.buffers, caches: None }
    }
}

fn param_suffix(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Gamma => "gamma",
        ParamKind::Beta => "beta",
    }
}
