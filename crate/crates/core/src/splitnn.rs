//! Dense ReLU network split at a cut layer.
//!
//! The client half runs the first `cut` layers and ships the cut-layer
//! activations ("smashed" batch) to the server half, which finishes the
//! forward pass, computes softmax cross-entropy, updates its own parameters
//! and hands back the gradient with respect to the smashed activations. The
//! client then back-propagates that gradient through its cached forward pass.
//!
//! Every hidden layer is followed by ReLU; the last layer emits logits.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::Dataset;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// An ordered run of dense layers. `relu_last` says whether the final layer
/// of this stack is a hidden layer (client half) or the logit layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

impl LayerStack {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
            relu_last: self.relu_last,
        }
    }

    fn relu_at(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    /// Largest absolute difference between corresponding parameters,
    /// relative to `max(1, |other|)`.
    pub fn max_rel_diff(&self, other: &LayerStack) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            let pairs = a.weight.iter().zip(&b.weight).chain(a.bias.iter().zip(&b.bias));
            for (x, y) in pairs {
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
        worst
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Trace)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match layer fan-in {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if self.relu_at(i) {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = z;
        }
        let out_shape = h.dim();
        Ok((h.clone(), Trace { inputs, output: h, out_shape }))
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(|(out, _)| out)
    }

    /// Back-propagates `grad_out` (gradient w.r.t. this stack's output)
    /// through a recorded forward pass. Returns parameter gradients and the
    /// gradient w.r.t. the stack's input.
    pub fn backward(&self, trace: &Trace, grad_out: &Array2<f64>) -> Result<(LayerStack, Array2<f64>)> {
        if trace.inputs.len() != self.layers.len() || grad_out.dim() != trace.out_shape {
            return Err(Error::Split("backward called with a mismatched forward trace".into()));
        }
        let mut grads = self.zeros_like();
        let mut g = grad_out.clone();
        let mut post = trace.output.clone();
        for i in (0..self.layers.len()).rev() {
            if self.relu_at(i) {
                // ReLU output > 0 exactly where the pre-activation was > 0.
                Zip::from(&mut g).and(&post).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let input = &trace.inputs[i];
            grads.layers[i].weight = input.t().dot(&g);
            grads.layers[i].bias = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[i].weight.t());
            post = input.clone();
        }
        Ok((grads, g))
    }
}

/// Cached forward pass of one stack.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
    out_shape: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9 }
    }
}

/// Velocity buffers shaped like the stack they drive.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: LayerStack,
}

impl MomentumState {
    pub fn for_stack(stack: &LayerStack) -> Self {
        Self { velocity: stack.zeros_like() }
    }

    /// `v = momentum * v + g; w -= lr * v`.
    pub fn step(&mut self, stack: &mut LayerStack, grads: &LayerStack, opt: &Sgd) {
        let layers = stack.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grads.layers);
        for ((p, v), g) in layers {
            Zip::from(&mut p.weight).and(&mut v.weight).and(&g.weight).for_each(|w, v, &g| {
                *v = opt.momentum * *v + g;
                *w -= opt.lr * *v;
            });
            Zip::from(&mut p.bias).and(&mut v.bias).and(&g.bias).for_each(|w, v, &g| {
                *v = opt.momentum * *v + g;
                *w -= opt.lr * *v;
            });
        }
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(labels, logits.nrows(), logits.ncols())?;
    let n = logits.nrows() as f64;
    let mut loss = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let mut grad = softmax(logits);
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    grad /= n;
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    /// Input width, hidden widths, output classes.
    pub layer_dims: Vec<usize>,
    /// Number of layers on the client side.
    pub cut: usize,
    pub client: LayerStack,
    pub server: LayerStack,
}

impl SplitModel {
    /// He-uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(layer_dims: &[usize], cut: usize, seed: u64) -> Result<Self> {
        let n_layers = layer_dims.len().saturating_sub(1);
        if n_layers < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("model: need >= 2 non-empty layers, got dims {layer_dims:?}")));
        }
        if cut == 0 || cut >= n_layers {
            return Err(Error::Config(format!("model: cut {cut} must lie in 1..{n_layers}")));
        }
        let layers: Vec<Dense> = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (layer_dims[i], layer_dims[i + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &[tag::INIT, i as u64]);
                Dense {
                    weight: Array2::from_shape_fn((fan_in, fan_out), |_| r.random_range(-bound..bound)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self::from_layers(layer_dims.to_vec(), cut, layers))
    }

    fn from_layers(layer_dims: Vec<usize>, cut: usize, mut layers: Vec<Dense>) -> Self {
        let server = layers.split_off(cut);
        Self {
            layer_dims,
            cut,
            client: LayerStack { layers, relu_last: true },
            server: LayerStack { layers: server, relu_last: false },
        }
    }

    pub fn classes(&self) -> usize {
        self.server.output_width()
    }

    pub fn cut_width(&self) -> usize {
        self.client.output_width()
    }

    pub fn client_params(&self) -> usize {
        self.client.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.client.param_count() + self.server.param_count()
    }

    /// The whole network as one stack.
    pub fn monolithic(&self) -> LayerStack {
        LayerStack {
            layers: self.client.layers.iter().chain(&self.server.layers).cloned().collect(),
            relu_last: false,
        }
    }

    /// Re-splits a monolithic stack at `cut`.
    pub fn from_monolithic(stack: &LayerStack, cut: usize) -> Self {
        let mut dims = vec![stack.input_width()];
        dims.extend(stack.layers.iter().map(Dense::fan_out));
        Self::from_layers(dims, cut, stack.layers.clone())
    }

    pub fn with_halves(&self, client: LayerStack, server: LayerStack) -> Self {
        Self { layer_dims: self.layer_dims.clone(), cut: self.cut, client, server }
    }
}

/// Cut-layer activations in flight, plus the gradient the server writes back.
#[derive(Debug, Clone)]
pub struct SmashedBatch {
    pub activations: Array2<f64>,
    pub grad: Option<Array2<f64>>,
}

/// Client-side forward state kept until the server's gradient arrives.
#[derive(Debug, Clone)]
pub struct ClientCache {
    trace: Trace,
}

pub fn forward_client(client: &LayerStack, batch: &Array2<f64>) -> Result<(SmashedBatch, ClientCache)> {
    let (activations, trace) = client.forward(batch)?;
    Ok((SmashedBatch { activations, grad: None }, ClientCache { trace }))
}

/// Server forward, loss, server backward and server update. Fills
/// `smashed.grad` with the gradient for the client and returns the loss.
pub fn forward_server_and_backward(
    server: &mut LayerStack,
    momentum: &mut MomentumState,
    smashed: &mut SmashedBatch,
    labels: &[usize],
    opt: &Sgd,
) -> Result<f64> {
    if smashed.activations.ncols() != server.input_width() {
        return Err(Error::Shape(format!(
            "smashed width {} does not match server fan-in {}",
            smashed.activations.ncols(),
            server.input_width()
        )));
    }
    check_labels(labels, smashed.activations.nrows(), server.output_width())?;
    let (logits, trace) = server.forward(&smashed.activations)?;
    let (loss, grad_logits) = cross_entropy(&logits, labels)?;
    let (grads, grad_in) = server.backward(&trace, &grad_logits)?;
    momentum.step(server, &grads, opt);
    smashed.grad = Some(grad_in);
    Ok(loss)
}

pub fn backward_client(
    client: &mut LayerStack,
    momentum: &mut MomentumState,
    cache: ClientCache,
    smashed: &SmashedBatch,
    opt: &Sgd,
) -> Result<()> {
    let grad = smashed
        .grad
        .as_ref()
        .ok_or_else(|| Error::Split("smashed batch carries no gradient yet".into()))?;
    if grad.dim() != smashed.activations.dim() {
        return Err(Error::Shape("smashed gradient and activations differ in shape".into()));
    }
    let (grads, _) = client.backward(&cache.trace, grad)?;
    momentum.step(client, &grads, opt);
    Ok(())
}

/// One split-learning step over a mini-batch. Returns the batch loss.
pub fn split_step(
    client: &mut LayerStack,
    server: &mut LayerStack,
    client_momentum: &mut MomentumState,
    server_momentum: &mut MomentumState,
    x: &Array2<f64>,
    labels: &[usize],
    opt: &Sgd,
) -> Result<f64> {
    let (mut smashed, cache) = forward_client(client, x)?;
    let loss = forward_server_and_backward(server, server_momentum, &mut smashed, labels, opt)?;
    backward_client(client, client_momentum, cache, &smashed, opt)?;
    Ok(loss)
}

/// One step of ordinary training on an unsplit stack.
pub fn monolithic_step(
    stack: &mut LayerStack,
    momentum: &mut MomentumState,
    x: &Array2<f64>,
    labels: &[usize],
    opt: &Sgd,
) -> Result<f64> {
    let (logits, trace) = stack.forward(x)?;
    let (loss, grad) = cross_entropy(&logits, labels)?;
    let (grads, _) = stack.backward(&trace, &grad)?;
    momentum.step(stack, &grads, opt);
    Ok(loss)
}

/// Mini-batch order for one pass: a keyed shuffle of `0..n` cut into chunks.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, keys: &[u64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut full_keys = vec![tag::SHUFFLE];
    full_keys.extend_from_slice(keys);
    idx.shuffle(&mut rng::stream(seed, &full_keys));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub batch_size: usize,
    pub epochs: usize,
    pub opt: Sgd,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self { batch_size: 32, epochs: 1, opt: Sgd::default() }
    }
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub client: LayerStack,
    pub server: LayerStack,
    pub batches: Vec<usize>,
    pub mean_loss: f64,
}

/// Split-trains fresh copies of the incoming halves on one client's data.
/// Momentum starts at zero. `keys` keys the per-epoch shuffle.
pub fn train_client(
    client: &LayerStack,
    server: &LayerStack,
    data: &Dataset,
    training: &LocalTraining,
    seed: u64,
    keys: &[u64],
) -> Result<LocalResult> {
    if data.is_empty() {
        return Err(Error::Empty("client has no training samples"));
    }
    let mut client = client.clone();
    let mut server = server.clone();
    let mut cm = MomentumState::for_stack(&client);
    let mut sm = MomentumState::for_stack(&server);
    let mut batches = Vec::new();
    let mut loss_sum = 0.0;
    for epoch in 0..training.epochs {
        let mut k = keys.to_vec();
        k.push(epoch as u64);
        for rows in batch_order(data.len(), training.batch_size, seed, &k) {
            let x = data.features.select(Axis(0), &rows);
            let y: Vec<usize> = rows.iter().map(|&i| data.labels[i]).collect();
            loss_sum += split_step(&mut client, &mut server, &mut cm, &mut sm, &x, &y, &training.opt)?;
            batches.push(rows.len());
        }
    }
    let mean_loss = loss_sum / batches.len().max(1) as f64;
    Ok(LocalResult { client, server, batches, mean_loss })
}

/// Unweighted parameter-wise mean over `(device_id, weights)` pairs, summed
/// in ascending device-id order. `None` when there is nothing to average.
pub fn fedavg(sets: &[(usize, &LayerStack)]) -> Option<LayerStack> {
    let mut sorted: Vec<&(usize, &LayerStack)> = sets.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let (_, first) = sorted.first()?;
    let mut acc = (*first).clone();
    for (_, s) in &sorted[1..] {
        for (a, l) in acc.layers.iter_mut().zip(&s.layers) {
            a.weight += &l.weight;
            a.bias += &l.bias;
        }
    }
    let n = sorted.len() as f64;
    for a in &mut acc.layers {
        a.weight /= n;
        a.bias /= n;
    }
    Some(acc)
}

/// Accuracy and mean cross-entropy of the composed halves on `test`.
pub fn evaluate(client: &LayerStack, server: &LayerStack, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set is empty"));
    }
    let logits = server.predict(&client.predict(&test.features)?)?;
    let (loss, _) = cross_entropy(&logits, &test.labels)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&test.labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    Ok((correct as f64 / test.len() as f64, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// JSON checkpoint: layer shapes plus row-major weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    layer_dims: Vec<usize>,
    cut: usize,
    layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &SplitModel) -> Self {
        let layers = model
            .client
            .layers
            .iter()
            .chain(&model.server.layers)
            .map(|l| LayerRecord {
                rows: l.fan_in(),
                cols: l.fan_out(),
                weight: l.weight.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        Self { layer_dims: model.layer_dims.clone(), cut: model.cut, layers }
    }

    pub fn into_model(self) -> Result<SplitModel> {
        if self.layers.len() + 1 != self.layer_dims.len() {
            return Err(Error::Shape("checkpoint layer count does not match its dims".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, rec) in self.layers.into_iter().enumerate() {
            if (rec.rows, rec.cols) != (self.layer_dims[i], self.layer_dims[i + 1]) || rec.bias.len() != rec.cols {
                return Err(Error::Shape(format!("checkpoint layer {i} has inconsistent shape")));
            }
            let weight = Array2::from_shape_vec((rec.rows, rec.cols), rec.weight)
                .map_err(|e| Error::Shape(format!("checkpoint layer {i}: {e}")))?;
            layers.push(Dense { weight, bias: Array1::from(rec.bias) });
        }
        if self.cut == 0 || self.cut >= layers.len() {
            return Err(Error::Shape(format!("checkpoint cut {} out of range", self.cut)));
        }
        Ok(SplitModel::from_layers(self.layer_dims, self.cut, layers))
    }
}
