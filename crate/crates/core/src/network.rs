//! Layer graphs with plain, residual-add and dense-concat topologies.
//!
//! Every layer is a convolution with folded normalization (or the final
//! fully-connected head). A layer's output is
//!
//! ```text
//! out = post(act(conv_bn(concat(feeds)) + sum(residual producers)))
//! ```
//!
//! where `feeds` are the producers of its [`Combine::Sequential`] /
//! [`Combine::DenseConcat`] edges in edge order (the network input when there
//! are none), `act` is ReLU for the `*Relu*` kinds and `post` is 2x2 average
//! pooling for [`OpKind::ConvReluPool`]. The [`OpKind::Fc`] head global-pools its
//! input and applies a linear map to the class logits.
//!
//! Layers are stored in topological order: every edge points from a lower to a
//! higher layer id.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cluster::ConstraintGroup;
use crate::error::{Error, Result};
use crate::ops::{self, LayerGrads, LayerParams, SIGMA_FLOOR};
use crate::tensor::{Scalar, Tensor4};

/// Momentum of the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance epsilon used when folding batch statistics into `sigma`.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    /// Convolution + normalization, no activation (projection shortcuts).
    Conv = 0,
    ConvRelu = 1,
    /// ConvRelu followed by 2x2 average pooling (dense transitions).
    ConvReluPool = 2,
    /// Global average pool + fully-connected classifier. `gamma` is unused and
    /// `beta` is the bias.
    Fc = 3,
}

impl OpKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => OpKind::Conv,
            1 => OpKind::ConvRelu,
            2 => OpKind::ConvReluPool,
            3 => OpKind::Fc,
            _ => return None,
        })
    }

    pub fn is_conv(self) -> bool {
        self != OpKind::Fc
    }

    fn relu(self) -> bool {
        matches!(self, OpKind::ConvRelu | OpKind::ConvReluPool)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Combine {
    Sequential = 0,
    ResidualAdd = 1,
    DenseConcat = 2,
}

impl Combine {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Combine::Sequential,
            1 => Combine::ResidualAdd,
            2 => Combine::DenseConcat,
            _ => return None,
        })
    }

    fn feeds_input(self) -> bool {
        self != Combine::ResidualAdd
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub kind: OpKind,
    pub params: LayerParams<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub producer: usize,
    pub consumer: usize,
    pub kind: Combine,
}

impl Edge {
    pub fn new(producer: usize, consumer: usize, kind: Combine) -> Self {
        Edge {
            producer,
            consumer,
            kind,
        }
    }
}

/// Where a producer's output channels land in one consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConsumerEntry {
    pub consumer: usize,
    /// First input channel of the consumer fed by this producer. Zero for residual entries.
    pub offset: usize,
    pub kind: Combine,
}

/// Producer -> consumer channel locations for every layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsumerMap {
    entries: Vec<Vec<ConsumerEntry>>,
}

impl ConsumerMap {
    pub fn consumers(&self, producer: usize) -> &[ConsumerEntry] {
        &self.entries[producer]
    }

    /// Consumers whose kernels read this producer's channels (residual aliases excluded).
    pub fn input_consumers(&self, producer: usize) -> impl Iterator<Item = &ConsumerEntry> {
        self.entries[producer]
            .iter()
            .filter(|e| e.kind.feeds_input())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// How many producer channels map onto each input channel of `consumer`.
    /// A valid map yields all ones.
    pub fn coverage<T: Scalar>(&self, net: &Network<T>, consumer: usize) -> Vec<usize> {
        let mut count = vec![0; net.layers[consumer].params.in_channels()];
        for (p, entries) in self.entries.iter().enumerate() {
            let width = net.layers[p].params.out_channels();
            for e in entries.iter().filter(|e| e.consumer == consumer && e.kind.feeds_input()) {
                for c in &mut count[e.offset..e.offset + width] {
                    *c += 1;
                }
            }
        }
        if net.feeds[consumer].is_empty() {
            count.iter_mut().for_each(|c| *c += 1);
        }
        count
    }
}

/// Per-layer parameter gradients, indexed by layer id.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| LayerGrads::zeros_like(&l.params)).collect(),
        }
    }
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    /// Assembled (concatenated) input of each layer.
    inputs: Vec<Tensor4<T>>,
    /// Raw convolution before normalization (pooled features for the head).
    pre_norm: Vec<Tensor4<T>>,
    /// Post-add, post-activation map before pooling.
    act: Vec<Tensor4<T>>,
    outputs: Vec<Tensor4<T>>,
    /// Batch `(mu, sigma)` each conv layer was normalized with, in [`Norm::Batch`] mode.
    norm: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn logits(&self) -> &Tensor4<T> {
        self.outputs.last().expect("network has a head")
    }

    pub fn output(&self, layer: usize) -> &Tensor4<T> {
        &self.outputs[layer]
    }

    /// Sign pattern of every ReLU input; used to detect kinks during gradient checks.
    pub fn relu_signature(&self, net: &Network<T>) -> Vec<bool> {
        let mut sig = Vec::new();
        for (l, layer) in net.layers.iter().enumerate() {
            if layer.kind.relu() {
                sig.extend(self.act[l].data().iter().map(|&v| v > T::zero()));
            }
        }
        sig
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backprop<T = f32> {
    pub loss: T,
    pub logits: Tensor4<T>,
    pub grads: Gradients<T>,
    /// Per-channel mean and std of each conv layer's raw convolution; `None` for the head.
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    layers: Vec<Layer<T>>,
    edges: Vec<Edge>,
    input_channels: usize,
    feeds: Vec<Vec<usize>>,
    residuals: Vec<Vec<usize>>,
}

impl<T: Scalar> Network<T> {
    /// Assemble and validate a network from layers (topologically ordered) and edges.
    pub fn new(layers: Vec<Layer<T>>, edges: Vec<Edge>) -> Result<Self> {
        let n = layers.len();
        if n < 2 {
            return Err(Error::Structural(
                "network needs at least one conv layer and a head".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        let mut feeds = vec![Vec::new(); n];
        let mut residuals = vec![Vec::new(); n];
        let mut has_out = vec![false; n];
        for e in &edges {
            if e.producer >= e.consumer || e.consumer >= n {
                return Err(Error::Structural(format!(
                    "edge {}->{} is not forward within {n} layers",
                    e.producer, e.consumer
                )));
            }
            if !seen.insert((e.producer, e.consumer)) {
                return Err(Error::Structural(format!(
                    "duplicate edge {}->{}",
                    e.producer, e.consumer
                )));
            }
            has_out[e.producer] = true;
            match e.kind {
                Combine::ResidualAdd => residuals[e.consumer].push(e.producer),
                _ => feeds[e.consumer].push(e.producer),
            }
        }

        for (l, layer) in layers.iter().enumerate() {
            let ctx = format!("layer {l}");
            layer.params.validate(&ctx)?;
            let head = l == n - 1;
            if (layer.kind == OpKind::Fc) != head {
                return Err(Error::Structural(format!(
                    "{ctx}: the fully-connected head must be exactly the last layer"
                )));
            }
            if !head && !has_out[l] {
                return Err(Error::Structural(format!("{ctx}: output is never consumed")));
            }
            let has_sequential = edges
                .iter()
                .any(|e| e.consumer == l && e.kind == Combine::Sequential);
            if feeds[l].len() > 1 && has_sequential {
                return Err(Error::Structural(format!(
                    "{ctx}: multiple input producers must all be dense-concat edges"
                )));
            }
            if head && !residuals[l].is_empty() {
                return Err(Error::Structural(format!("{ctx}: head cannot take residual inputs")));
            }
            if layer.kind == OpKind::Fc {
                let [kh, kw, _, _] = layer.params.kernel.shape();
                if kh != 1 || kw != 1 {
                    return Err(Error::Structural(format!("{ctx}: head kernel must be 1x1")));
                }
            }
            if !feeds[l].is_empty() {
                let total: usize = feeds[l]
                    .iter()
                    .map(|&p| layers[p].params.out_channels())
                    .sum();
                if total != layer.params.in_channels() {
                    return Err(Error::dim(
                        format!("{ctx}: input channels from producers {:?}", feeds[l]),
                        layer.params.in_channels(),
                        total,
                    ));
                }
            }
            for &p in &residuals[l] {
                let (a, b) = (layers[p].params.out_channels(), layer.params.out_channels());
                if a != b {
                    return Err(Error::dim(format!("residual edge {p}->{l}: channels"), b, a));
                }
            }
        }

        let roots: Vec<usize> = (0..n).filter(|&l| feeds[l].is_empty()).collect();
        let input_channels = match roots.first() {
            Some(&r) => layers[r].params.in_channels(),
            None => {
                return Err(Error::Structural("no layer reads the network input".into()));
            }
        };
        for &r in &roots {
            if layers[r].params.in_channels() != input_channels {
                return Err(Error::dim(
                    format!("layer {r}: network input channels"),
                    input_channels,
                    layers[r].params.in_channels(),
                ));
            }
        }

        Ok(Network {
            layers,
            edges,
            input_channels,
            feeds,
            residuals,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> &Layer<T> {
        &self.layers[id]
    }

    /// Mutable access to layer parameters. Shapes must not be changed through
    /// this; use the trimming module for structural edits.
    pub fn params_mut(&mut self, id: usize) -> &mut LayerParams<T> {
        &mut self.layers[id].params
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("head").params.out_channels()
    }

    pub fn head(&self) -> usize {
        self.layers.len() - 1
    }

    /// Producers feeding the input of `layer`, in concat order.
    pub fn feeds(&self, layer: usize) -> &[usize] {
        &self.feeds[layer]
    }

    pub fn residual_producers(&self, layer: usize) -> &[usize] {
        &self.residuals[layer]
    }

    /// Ids of the convolutional (prunable) layers.
    pub fn conv_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layers.len()).filter(|&l| self.layers[l].kind.is_conv())
    }

    /// Replace every layer's parameters at once, re-validating the structure.
    pub fn with_params(&self, params: Vec<LayerParams<T>>) -> Result<Self> {
        if params.len() != self.layers.len() {
            return Err(Error::dim("layer parameter count", self.layers.len(), params.len()));
        }
        let layers = self
            .layers
            .iter()
            .zip(params)
            .map(|(l, params)| Layer {
                kind: l.kind,
                params,
            })
            .collect();
        Network::new(layers, self.edges.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    params: l.params.cast(),
                })
                .collect(),
            edges: self.edges.clone(),
            input_channels: self.input_channels,
            feeds: self.feeds.clone(),
            residuals: self.residuals.clone(),
        }
    }

    pub fn consumer_map(&self) -> ConsumerMap {
        let mut entries = vec![Vec::new(); self.layers.len()];
        for c in 0..self.layers.len() {
            let mut offset = 0;
            for &p in &self.feeds[c] {
                let kind = self
                    .edges
                    .iter()
                    .find(|e| e.producer == p && e.consumer == c)
                    .map(|e| e.kind)
                    .expect("feed edge exists");
                entries[p].push(ConsumerEntry {
                    consumer: c,
                    offset,
                    kind,
                });
                offset += self.layers[p].params.out_channels();
            }
            for &p in &self.residuals[c] {
                entries[p].push(ConsumerEntry {
                    consumer: c,
                    offset: 0,
                    kind: Combine::ResidualAdd,
                });
            }
        }
        ConsumerMap { entries }
    }

    /// Layers tied together by residual additions. The lowest id in each group is
    /// its pacesetter.
    pub fn constraint_groups(&self) -> Vec<ConstraintGroup> {
        let n = self.layers.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in self.edges.iter().filter(|e| e.kind == Combine::ResidualAdd) {
            let (a, b) = (find(&mut parent, e.producer), find(&mut parent, e.consumer));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: Vec<ConstraintGroup> = Vec::new();
        for l in 0..n {
            let root = find(&mut parent, l);
            if root == l {
                continue;
            }
            match groups.iter_mut().find(|g| g.pacesetter == root) {
                Some(g) => g.followers.push(l),
                None => groups.push(ConstraintGroup {
                    pacesetter: root,
                    followers: vec![l],
                    width: self.layers[root].params.out_channels(),
                }),
            }
        }
        groups
    }

    /// Output `(h, w, c)` of every layer for an `h x w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (ih, iw) = match self.feeds[l].first() {
                None => (h, w),
                Some(&p0) => {
                    let [ph, pw, _] = shapes[p0];
                    for &p in &self.feeds[l][1..] {
                        let [qh, qw, _] = shapes[p];
                        if (qh, qw) != (ph, pw) {
                            return Err(Error::Shape(format!(
                                "concat edge {p}->{l}: {qh}x{qw} vs {ph}x{pw}"
                            )));
                        }
                    }
                    (ph, pw)
                }
            };
            let out = if layer.kind == OpKind::Fc {
                [1, 1, layer.params.out_channels()]
            } else {
                let (oh, ow) = layer
                    .params
                    .output_hw(ih, iw)
                    .map_err(|e| Error::Shape(format!("layer {l}: {e}")))?;
                for &p in &self.residuals[l] {
                    let [rh, rw, _] = shapes[p];
                    if (rh, rw) != (oh, ow) {
                        return Err(Error::Shape(format!(
                            "residual edge {p}->{l}: {rh}x{rw} vs {oh}x{ow}"
                        )));
                    }
                }
                if layer.kind == OpKind::ConvReluPool {
                    if oh < 2 || ow < 2 {
                        return Err(Error::Shape(format!("layer {l}: {oh}x{ow} too small to pool")));
                    }
                    [oh / 2, ow / 2, layer.params.out_channels()]
                } else {
                    [oh, ow, layer.params.out_channels()]
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Trainable parameter count: kernels plus scale and shift (bias for the head).
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                OpKind::Fc => l.params.kernel.len() + l.params.out_channels(),
                _ => l.params.num_params(),
            })
            .sum()
    }

    /// Multiply-accumulates of convolutions and the head for one `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        let shapes = self.infer_shapes(h, w)?;
        let mut total = 0u64;
        for (l, layer) in self.layers.iter().enumerate() {
            let per_pixel = layer.params.kernel.len() as u64;
            total += match layer.kind {
                OpKind::Fc => per_pixel,
                OpKind::ConvReluPool => {
                    let [ph, pw, _] = match self.feeds[l].first() {
                        Some(&p) => shapes[p],
                        None => [h, w, 0],
                    };
                    let (oh, ow) = layer.params.output_hw(ph, pw)?;
                    (oh * ow) as u64 * per_pixel
                }
                _ => {
                    let [oh, ow, _] = shapes[l];
                    (oh * ow) as u64 * per_pixel
                }
            };
        }
        Ok(total)
    }

    fn assemble_input<'a>(
        &self,
        l: usize,
        input: &'a Tensor4<T>,
        outputs: &'a [Tensor4<T>],
    ) -> Result<std::borrow::Cow<'a, Tensor4<T>>> {
        use std::borrow::Cow;
        match self.feeds[l].as_slice() {
            [] => Ok(Cow::Borrowed(input)),
            [p] => Ok(Cow::Borrowed(&outputs[*p])),
            ps => {
                let parts: Vec<&Tensor4<T>> = ps.iter().map(|&p| &outputs[p]).collect();
                Tensor4::concat_channels(&parts)
                    .map(Cow::Owned)
                    .map_err(|e| Error::Shape(format!("concat into layer {l}: {e}")))
            }
        }
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let [_, h, w, c] = input.shape();
        if c != self.input_channels {
            return Err(Error::dim("network input channels", self.input_channels, c));
        }
        self.infer_shapes(h, w)?;
        Ok(())
    }

    /// Forward pass keeping every intermediate needed by [`backward_cached`](Self::backward_cached).
    /// Normalizes with the running statistics.
    pub fn forward_cached(&self, input: &Tensor4<T>) -> Result<ForwardCache<T>> {
        self.forward_cached_with(input, Norm::Running)
    }

    pub fn forward_cached_with(&self, input: &Tensor4<T>, mode: Norm) -> Result<ForwardCache<T>> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre_norm: Vec::with_capacity(n),
            act: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            norm: Vec::with_capacity(n),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let x = self.assemble_input(l, input, &cache.outputs)?.into_owned();
            let ctx = format!("layer {l}");
            if layer.kind == OpKind::Fc {
                let pooled = ops::global_avgpool(&x);
                let logits = ops::fc_forward(&pooled, &layer.params.kernel, &layer.params.beta)?;
                cache.inputs.push(x);
                cache.pre_norm.push(pooled);
                cache.act.push(Tensor4::zeros([0, 0, 0, 0]));
                cache.outputs.push(logits);
                cache.norm.push(None);
                continue;
            }
            let z = ops::conv_forward_ctx(&x, &layer.params, &ctx)?;
            let p = &layer.params;
            let norm = match mode {
                Norm::Running => None,
                Norm::Batch => {
                    let (mean, std) = ops::channel_stats(&z);
                    Some((
                        mean.into_iter().map(T::of).collect::<Vec<T>>(),
                        std.into_iter().map(|s| T::of(batch_sigma(s))).collect::<Vec<T>>(),
                    ))
                }
            };
            let mut y = match &norm {
                None => ops::batch_norm_apply(&z, p),
                Some((mu, sigma)) => ops::normalize(&z, mu, sigma, &p.gamma, &p.beta),
            };
            for &p in &self.residuals[l] {
                y.add_assign(&cache.outputs[p])
                    .map_err(|e| Error::Shape(format!("residual edge {p}->{l}: {e}")))?;
            }
            if layer.kind.relu() {
                y = ops::relu_forward(&y);
            }
            let out = if layer.kind == OpKind::ConvReluPool {
                ops::avgpool_forward(&y, 2)?
            } else {
                y.clone()
            };
            cache.inputs.push(x);
            cache.pre_norm.push(z);
            cache.act.push(y);
            cache.outputs.push(out);
            cache.norm.push(norm);
        }
        Ok(cache)
    }

    /// Logits `(n, 1, 1, classes)` for an NHWC batch.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor4<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = self.assemble_input(l, input, &outputs)?;
            let out = if layer.kind == OpKind::Fc {
                let pooled = ops::global_avgpool(&x);
                ops::fc_forward(&pooled, &layer.params.kernel, &layer.params.beta)?
            } else {
                let z = ops::conv_forward_ctx(&x, &layer.params, &format!("layer {l}"))?;
                let mut y = ops::batch_norm_apply(&z, &layer.params);
                for &p in &self.residuals[l] {
                    y.add_assign(&outputs[p])
                        .map_err(|e| Error::Shape(format!("residual edge {p}->{l}: {e}")))?;
                }
                if layer.kind.relu() {
                    y = ops::relu_forward(&y);
                }
                if layer.kind == OpKind::ConvReluPool {
                    ops::avgpool_forward(&y, 2)?
                } else {
                    y
                }
            };
            outputs.push(out);
        }
        Ok(outputs.pop().expect("head output"))
    }

    /// Mean cross-entropy loss and its gradients for one labelled batch, with
    /// the network normalized by its running statistics.
    pub fn backward(&self, input: &Tensor4<T>, labels: &[usize]) -> Result<Backprop<T>> {
        self.backward_with(input, labels, Norm::Running)
    }

    /// Training-time loss and gradients: each conv layer normalizes with the
    /// statistics of this batch, and backprop differentiates through them.
    pub fn backward_train(&self, input: &Tensor4<T>, labels: &[usize]) -> Result<Backprop<T>> {
        self.backward_with(input, labels, Norm::Batch)
    }

    pub fn backward_with(&self, input: &Tensor4<T>, labels: &[usize], mode: Norm) -> Result<Backprop<T>> {
        let cache = self.forward_cached_with(input, mode)?;
        self.backward_cached(&cache, labels)
    }

    pub fn backward_cached(&self, cache: &ForwardCache<T>, labels: &[usize]) -> Result<Backprop<T>> {
        let n = self.layers.len();
        let (loss, grad_logits) = ops::softmax_cross_entropy(cache.logits(), labels)?;
        let mut grad_out: Vec<Option<Tensor4<T>>> = vec![None; n];
        grad_out[n - 1] = Some(grad_logits);
        let mut grads: Vec<Option<LayerGrads<T>>> = vec![None; n];
        let mut stats = vec![None; n];

        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let g = match grad_out[l].take() {
                Some(g) => g,
                None => Tensor4::zeros(cache.outputs[l].shape()),
            };
            let grad_input = if layer.kind == OpKind::Fc {
                let (gp, gw, gb) = ops::fc_backward(&cache.pre_norm[l], &layer.params.kernel, &g)?;
                grads[l] = Some(LayerGrads {
                    kernel: gw,
                    gamma: vec![T::zero(); layer.params.out_channels()],
                    beta: gb,
                });
                ops::global_avgpool_backward(&gp, cache.inputs[l].shape())?
            } else {
                let mut g = g;
                if layer.kind == OpKind::ConvReluPool {
                    g = ops::avgpool_backward(&g, cache.act[l].shape(), 2)?;
                }
                if layer.kind.relu() {
                    g = ops::relu_backward(&cache.act[l], &g)?;
                }
                for &p in &self.residuals[l] {
                    accumulate(&mut grad_out[p], &g)?;
                }
                let stats_used = match &cache.norm[l] {
                    Some((mu, sigma)) => (mu.as_slice(), sigma.as_slice(), true),
                    None => (layer.params.mu.as_slice(), layer.params.sigma.as_slice(), false),
                };
                let (gi, lg) = ops::conv_bn_backward_with_z(
                    &cache.inputs[l],
                    &cache.pre_norm[l],
                    &layer.params,
                    stats_used,
                    &g,
                    &format!("layer {l}"),
                )?;
                grads[l] = Some(lg);
                stats[l] = Some(ops::channel_stats(&cache.pre_norm[l]));
                gi
            };
            let mut offset = 0;
            for &p in &self.feeds[l] {
                let width = self.layers[p].params.out_channels();
                let part = if self.feeds[l].len() == 1 {
                    grad_input.clone()
                } else {
                    grad_input.channel_slice(offset, width)?
                };
                accumulate(&mut grad_out[p], &part)?;
                offset += width;
            }
        }

        Ok(Backprop {
            loss,
            logits: cache.logits().clone(),
            grads: Gradients {
                layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
            },
            batch_stats: stats,
        })
    }

    /// Fold batch statistics into the running `mu`/`sigma` of every conv layer.
    pub fn update_running_stats(&mut self, stats: &[Option<(Vec<f64>, Vec<f64>)>], momentum: f64) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            let Some((mean, std)) = s else { continue };
            let p = &mut layer.params;
            for j in 0..p.out_channels() {
                let mu = momentum * p.mu[j].as_f64() + (1.0 - momentum) * mean[j];
                let sigma = momentum * p.sigma[j].as_f64() + (1.0 - momentum) * batch_sigma(std[j]);
                p.mu[j] = T::of(mu);
                p.sigma[j] = T::of(sigma.max(SIGMA_FLOOR));
            }
        }
    }

    /// First layer (in topological order) whose output contains a non-finite value.
    pub fn first_non_finite_layer(&self, input: &Tensor4<T>) -> Option<usize> {
        let cache = self.forward_cached(input).ok()?;
        (0..self.layers.len()).find(|&l| !cache.outputs[l].is_finite())
    }

    /// Channel widths of the conv layers in id order, plus the shape-defining
    /// fields of every layer; two networks with equal signatures have identical
    /// architecture.
    pub fn architecture(&self) -> Vec<(OpKind, [usize; 4], usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.kind, l.params.kernel.shape(), l.params.stride, l.params.padding))
            .collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: &Tensor4<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

/// Which statistics the conv layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// The stored running `mu`/`sigma` (evaluation, trimming, gradient checks).
    Running,
    /// The current batch's per-channel mean and deviation, differentiated
    /// through by backprop (training).
    Batch,
}

fn batch_sigma(std: f64) -> f64 {
    (std * std + BN_EPS).sqrt().max(SIGMA_FLOOR)
}

/// Declarative network description.
#[derive(Clone, Debug, PartialEq)]
pub enum NetworkSpec {
    Plain(PlainSpec),
    Residual(ResidualSpec),
    Dense(DenseSpec),
}

/// Chain of conv-relu layers followed by the head.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainSpec {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    /// One per layer; empty means all 1.
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
}

/// Stages of residual blocks. Each stage opens with a pacesetter conv (stride 2
/// after the first stage) whose output is the stem; every block is an inner
/// conv followed by a follower conv that adds the stem back in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSpec {
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks: usize,
    pub kernel: usize,
    pub classes: usize,
}

/// A stem conv, then dense stages of incremental layers each consuming the
/// concatenation of the stage input and all previous incremental outputs,
/// separated by 1x1 conv + 2x2 pool transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSpec {
    pub input_channels: usize,
    pub stem_width: usize,
    pub growth: usize,
    pub stage_layers: Vec<usize>,
    /// One per stage boundary (`stage_layers.len() - 1` entries).
    pub transition_widths: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
}

impl NetworkSpec {
    /// The toy residual network: 3 stages x 2 blocks, widths 8-16-32.
    pub fn toy_resnet(input_channels: usize, classes: usize) -> Self {
        NetworkSpec::Residual(ResidualSpec {
            input_channels,
            stage_widths: vec![8, 16, 32],
            blocks: 2,
            kernel: 3,
            classes,
        })
    }

    /// The toy dense network: 2 stages of 3 layers, growth 4.
    pub fn toy_densenet(input_channels: usize, classes: usize) -> Self {
        NetworkSpec::Dense(DenseSpec {
            input_channels,
            stem_width: 8,
            growth: 4,
            stage_layers: vec![3, 3],
            transition_widths: vec![10],
            kernel: 3,
            classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(path: &str, v: usize) -> Result<()> {
            if v == 0 {
                Err(Error::config(path, "must be positive"))
            } else {
                Ok(())
            }
        }
        fn list(path: &str, v: &[usize]) -> Result<()> {
            if v.is_empty() {
                return Err(Error::config(path, "must not be empty"));
            }
            for (i, &x) in v.iter().enumerate() {
                positive(&format!("{path}[{i}]"), x)?;
            }
            Ok(())
        }
        fn kernel(v: usize) -> Result<()> {
            if v == 0 || v % 2 == 0 {
                Err(Error::config("network.kernel", "must be odd and positive"))
            } else {
                Ok(())
            }
        }
        fn classes(v: usize) -> Result<()> {
            if v < 2 {
                Err(Error::config("network.classes", "must be at least 2"))
            } else {
                Ok(())
            }
        }
        match self {
            NetworkSpec::Plain(s) => {
                positive("network.input_channels", s.input_channels)?;
                list("network.widths", &s.widths)?;
                if !s.strides.is_empty() {
                    if s.strides.len() != s.widths.len() {
                        return Err(Error::config(
                            "network.strides",
                            format!("expected {} entries, got {}", s.widths.len(), s.strides.len()),
                        ));
                    }
                    list("network.strides", &s.strides)?;
                }
                kernel(s.kernel)?;
                classes(s.classes)
            }
            NetworkSpec::Residual(s) => {
                positive("network.input_channels", s.input_channels)?;
                list("network.widths", &s.stage_widths)?;
                positive("network.blocks", s.blocks)?;
                kernel(s.kernel)?;
                classes(s.classes)
            }
            NetworkSpec::Dense(s) => {
                positive("network.input_channels", s.input_channels)?;
                positive("network.stem_width", s.stem_width)?;
                positive("network.growth", s.growth)?;
                list("network.stage_layers", &s.stage_layers)?;
                if s.transition_widths.len() + 1 != s.stage_layers.len() {
                    return Err(Error::config(
                        "network.transition_widths",
                        format!(
                            "expected {} entries, got {}",
                            s.stage_layers.len() - 1,
                            s.transition_widths.len()
                        ),
                    ));
                }
                for (i, &x) in s.transition_widths.iter().enumerate() {
                    positive(&format!("network.transition_widths[{i}]"), x)?;
                }
                kernel(s.kernel)?;
                classes(s.classes)
            }
        }
    }
}

struct Builder<T> {
    rng: ChaCha8Rng,
    layers: Vec<Layer<T>>,
    edges: Vec<Edge>,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, kind: OpKind, k: usize, cin: usize, cout: usize, stride: usize) -> usize {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let kernel = Tensor4::from_fn([k, k, cin, cout], |_| T::of(normal.sample(rng)));
        self.layers.push(Layer {
            kind,
            params: LayerParams::with_kernel(kernel, stride, k / 2),
        });
        self.layers.len() - 1
    }

    fn head(&mut self, features: usize, classes: usize) -> usize {
        let std = (1.0 / features as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let kernel = Tensor4::from_fn([1, 1, features, classes], |_| T::of(normal.sample(rng)));
        self.layers.push(Layer {
            kind: OpKind::Fc,
            params: LayerParams::with_kernel(kernel, 1, 0),
        });
        self.layers.len() - 1
    }

    fn edge(&mut self, p: usize, c: usize, kind: Combine) {
        self.edges.push(Edge::new(p, c, kind));
    }
}

/// Instantiate a network from its spec with He-normal kernels drawn from `seed`.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut b = Builder::<T> {
        rng: ChaCha8Rng::seed_from_u64(seed),
        layers: Vec::new(),
        edges: Vec::new(),
    };
    match spec {
        NetworkSpec::Plain(s) => {
            let mut prev: Option<usize> = None;
            let mut cin = s.input_channels;
            for (i, &w) in s.widths.iter().enumerate() {
                let stride = s.strides.get(i).copied().unwrap_or(1);
                let l = b.conv(OpKind::ConvRelu, s.kernel, cin, w, stride);
                if let Some(p) = prev {
                    b.edge(p, l, Combine::Sequential);
                }
                prev = Some(l);
                cin = w;
            }
            let h = b.head(cin, s.classes);
            b.edge(prev.expect("non-empty widths"), h, Combine::Sequential);
        }
        NetworkSpec::Residual(s) => {
            let mut stem: Option<usize> = None;
            let mut cin = s.input_channels;
            for (si, &w) in s.stage_widths.iter().enumerate() {
                let stride = if si == 0 { 1 } else { 2 };
                let pace = b.conv(OpKind::ConvRelu, s.kernel, cin, w, stride);
                if let Some(p) = stem {
                    b.edge(p, pace, Combine::Sequential);
                }
                let mut cur = pace;
                for _ in 0..s.blocks {
                    let inner = b.conv(OpKind::ConvRelu, s.kernel, w, w, 1);
                    b.edge(cur, inner, Combine::Sequential);
                    let follower = b.conv(OpKind::ConvRelu, s.kernel, w, w, 1);
                    b.edge(inner, follower, Combine::Sequential);
                    b.edge(cur, follower, Combine::ResidualAdd);
                    cur = follower;
                }
                stem = Some(cur);
                cin = w;
            }
            let h = b.head(cin, s.classes);
            b.edge(stem.expect("non-empty stages"), h, Combine::Sequential);
        }
        NetworkSpec::Dense(s) => {
            let stem = b.conv(OpKind::ConvRelu, s.kernel, s.input_channels, s.stem_width, 1);
            let mut stage_input = stem;
            let mut stage_width = s.stem_width;
            for (si, &count) in s.stage_layers.iter().enumerate() {
                let mut members = vec![stage_input];
                let mut width = stage_width;
                for _ in 0..count {
                    let l = b.conv(OpKind::ConvRelu, s.kernel, width, s.growth, 1);
                    for &m in &members {
                        b.edge(m, l, Combine::DenseConcat);
                    }
                    members.push(l);
                    width += s.growth;
                }
                if si + 1 < s.stage_layers.len() {
                    let tw = s.transition_widths[si];
                    let t = b.conv(OpKind::ConvReluPool, 1, width, tw, 1);
                    for &m in &members {
                        b.edge(m, t, Combine::DenseConcat);
                    }
                    stage_input = t;
                    stage_width = tw;
                } else {
                    let h = b.head(width, s.classes);
                    for &m in &members {
                        b.edge(m, h, Combine::DenseConcat);
                    }
                }
            }
        }
    }
    Network::new(b.layers, b.edges)
}
