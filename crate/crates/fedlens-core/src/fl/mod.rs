//! From-scratch multilayer perceptron training with FedAvg aggregation.
//!
//! Hidden layers are ReLU, the output is linear, and the training loss is L1
//! by default (L2 selectable). Local training is plain seeded mini-batch SGD;
//! the server combines client updates as the K_n/K weighted mean of every
//! parameter tensor. All arithmetic is f64 and deterministic for a fixed
//! seed.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::chunk_fold;
use crate::rng::{mix, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum FlError {
    #[error("invalid layer layout: {0}")]
    InvalidLayout(String),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("client dataset is empty")]
    EmptyDataset,
    #[error("update layouts differ")]
    LayoutMismatch,
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    L1,
    L2,
}

/// One dense layer: row-major (out x in) weights plus biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Full parameter set of the regression network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: Vec<usize>,
    pub layers: Vec<Layer>,
}

fn check_layout(layout: &[usize]) -> Result<(), FlError> {
    if layout.len() < 2 {
        return Err(FlError::InvalidLayout("need input and output sizes".into()));
    }
    if layout.contains(&0) {
        return Err(FlError::InvalidLayout("zero-width layer".into()));
    }
    if *layout.last().unwrap() != 1 {
        return Err(FlError::InvalidLayout("output layer must have width 1".into()));
    }
    Ok(())
}

impl ModelParams {
    /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases,
    /// drawn row-major from a per-layer SplitMix64 stream.
    pub fn init(seed: u64, layout: &[usize]) -> Result<Self, FlError> {
        check_layout(layout)?;
        let layers = layout
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = SplitMix64::new(mix(seed, &[l as u64]));
                Layer {
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.uniform(-bound, bound))
                        .collect(),
                    biases: vec![0.0; fan_out],
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Ok(ModelParams { layout: layout.to_vec(), layers })
    }

    pub fn zeros(layout: &[usize]) -> Result<Self, FlError> {
        check_layout(layout)?;
        let layers = layout
            .windows(2)
            .map(|pair| Layer {
                weights: vec![0.0; pair[0] * pair[1]],
                biases: vec![0.0; pair[1]],
                fan_in: pair[0],
                fan_out: pair[1],
            })
            .collect();
        Ok(ModelParams { layout: layout.to_vec(), layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.biases.iter().all(|b| b.is_finite())
        })
    }

    /// Forward pass: ReLU hidden activations, linear output.
    pub fn forward(&self, input: &[f64]) -> Result<f64, FlError> {
        if input.len() != self.layout[0] || input.iter().any(|x| !x.is_finite()) {
            return Err(FlError::NonFiniteInput);
        }
        let mut activation = input.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = layer.biases.clone();
            for (o, out) in next.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                *out += row.iter().zip(&activation).map(|(w, a)| w * a).sum::<f64>();
            }
            if l != last {
                for v in &mut next {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activation = next;
        }
        Ok(activation[0])
    }

    /// Flat little-endian checkpoint: layout header then row-major weight and
    /// bias tensors per layer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.layout.len() as u32).to_le_bytes());
        for &d in &self.layout {
            out.extend((d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for w in &layer.weights {
                out.extend(w.to_le_bytes());
            }
            for b in &layer.biases {
                out.extend(b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FlError> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8], FlError> {
            let end = cursor
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| FlError::BadCheckpoint("truncated".into()))?;
            let slice = &bytes[cursor..end];
            cursor = end;
            Ok(slice)
        };
        let entries = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if !(2..=64).contains(&entries) {
            return Err(FlError::BadCheckpoint(format!("layout entries {entries}")));
        }
        let mut layout = Vec::with_capacity(entries);
        for _ in 0..entries {
            layout.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        check_layout(&layout).map_err(|e| FlError::BadCheckpoint(e.to_string()))?;
        let mut params = ModelParams::zeros(&layout)?;
        for layer in &mut params.layers {
            for w in &mut layer.weights {
                *w = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
            for b in &mut layer.biases {
                *b = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
        }
        if cursor != bytes.len() {
            return Err(FlError::BadCheckpoint("trailing bytes".into()));
        }
        Ok(params)
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.to_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Self, FlError> {
        let bytes = BASE64
            .decode(text)
            .map_err(|e| FlError::BadCheckpoint(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Hyperparameters of one federated training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 50,
            local_epochs: 2,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            loss: Loss::L1,
        }
    }
}

/// Standardized training rows for one client.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub params: ModelParams,
    pub k_n: u64,
    pub local_train_loss: f64,
}

fn loss_value(loss: Loss, residual: f64) -> f64 {
    match loss {
        Loss::L1 => residual.abs(),
        Loss::L2 => residual * residual,
    }
}

fn loss_grad(loss: Loss, residual: f64) -> f64 {
    match loss {
        Loss::L1 => {
            if residual > 0.0 {
                1.0
            } else if residual < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Loss::L2 => 2.0 * residual,
    }
}

/// Mean loss of the model over a set; the objective that backprop
/// differentiates.
pub fn batch_loss(params: &ModelParams, set: &TrainSet, loss: Loss) -> Result<f64, FlError> {
    if set.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, &y) in set.inputs.iter().zip(&set.targets) {
        total += loss_value(loss, params.forward(x)? - y);
    }
    Ok(total / set.len() as f64)
}

/// Accumulates dL/dparam for one sample into `grads`; returns the sample
/// loss.
fn backprop_sample(
    params: &ModelParams,
    grads: &mut ModelParams,
    x: &[f64],
    y: f64,
    loss: Loss,
) -> f64 {
    let depth = params.layers.len();
    // Forward pass keeping pre-activations and activations.
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    activations.push(x.to_vec());
    let mut pre_activations: Vec<Vec<f64>> = Vec::with_capacity(depth);
    for (l, layer) in params.layers.iter().enumerate() {
        let prev = &activations[l];
        let mut z = layer.biases.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            *zo += row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>();
        }
        let a = if l == depth - 1 {
            z.clone()
        } else {
            z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        };
        pre_activations.push(z);
        activations.push(a);
    }

    let prediction = activations[depth][0];
    let residual = prediction - y;
    let sample_loss = loss_value(loss, residual);

    // Backward pass.
    let mut delta = vec![loss_grad(loss, residual)];
    for l in (0..depth).rev() {
        let layer = &params.layers[l];
        let prev = &activations[l];
        {
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (w, a) in row.iter_mut().zip(prev) {
                    *w += d * a;
                }
            }
        }
        if l > 0 {
            let mut next_delta = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (i, nd) in next_delta.iter_mut().enumerate() {
                    *nd += row[i] * d;
                }
            }
            for (nd, &z) in next_delta.iter_mut().zip(&pre_activations[l - 1]) {
                if z <= 0.0 {
                    *nd = 0.0;
                }
            }
            delta = next_delta;
        }
    }
    sample_loss
}

/// Mean gradient of the loss over a set; exposed for gradient checking.
pub fn batch_gradient(
    params: &ModelParams,
    set: &TrainSet,
    loss: Loss,
) -> Result<ModelParams, FlError> {
    if set.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let mut grads = ModelParams::zeros(&params.layout)?;
    for (x, &y) in set.inputs.iter().zip(&set.targets) {
        backprop_sample(params, &mut grads, x, y, loss);
    }
    let scale = 1.0 / set.len() as f64;
    for layer in &mut grads.layers {
        for w in &mut layer.weights {
            *w *= scale;
        }
        for b in &mut layer.biases {
            *b *= scale;
        }
    }
    Ok(grads)
}

/// Local epochs of seeded mini-batch SGD; returns the trained parameters,
/// the client's sample count, and the final epoch's mean train loss.
pub fn local_train(
    params: &ModelParams,
    set: &TrainSet,
    cfg: &TrainConfig,
    client_id: u64,
) -> Result<ClientUpdate, FlError> {
    if set.is_empty() {
        return Err(FlError::EmptyDataset);
    }
    let mut current = params.clone();
    let mut final_epoch_loss = 0.0;
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        SplitMix64::new(mix(cfg.seed, &[client_id, epoch as u64])).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = ModelParams::zeros(&current.layout)?;
            let mut batch_total = 0.0;
            for &i in batch {
                batch_total += backprop_sample(&current, &mut grads, &set.inputs[i], set.targets[i], cfg.loss);
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (layer, g) in current.layers.iter_mut().zip(&grads.layers) {
                for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                    *w -= scale * gw;
                }
                for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                    *b -= scale * gb;
                }
            }
            epoch_loss += batch_total / batch.len() as f64;
            batches += 1;
        }
        final_epoch_loss = epoch_loss / batches as f64;
    }
    if !current.is_finite() {
        return Err(FlError::NonFiniteInput);
    }
    Ok(ClientUpdate {
        client_id,
        params: current,
        k_n: set.len() as u64,
        local_train_loss: final_epoch_loss,
    })
}

/// K_n/K weighted mean of every parameter tensor.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelParams, FlError> {
    let first = updates.first().ok_or(FlError::EmptyUpdateSet)?;
    if updates.iter().any(|u| u.params.layout != first.params.layout) {
        return Err(FlError::LayoutMismatch);
    }
    let total: u64 = updates.iter().map(|u| u.k_n).sum();
    if total == 0 {
        return Err(FlError::EmptyUpdateSet);
    }
    let mut out = ModelParams::zeros(&first.params.layout)?;
    for update in updates {
        let w = update.k_n as f64 / total as f64;
        for (o, layer) in out.layers.iter_mut().zip(&update.params.layers) {
            for (ow, lw) in o.weights.iter_mut().zip(&layer.weights) {
                *ow += w * lw;
            }
            for (ob, lb) in o.biases.iter_mut().zip(&layer.biases) {
                *ob += w * lb;
            }
        }
    }
    Ok(out)
}

/// Mean absolute error over an evaluation set; chunked so the reduction is
/// identical under parallel and sequential builds.
pub fn evaluate_mae(params: &ModelParams, set: &TrainSet) -> Result<f64, FlError> {
    if set.is_empty() {
        return Err(FlError::EmptyEvalSet);
    }
    let pairs: Vec<(usize, f64)> = set.targets.iter().copied().enumerate().collect();
    let total = chunk_fold(
        &pairs,
        |chunk| {
            chunk
                .iter()
                .map(|&(i, y)| (params.forward(&set.inputs[i]).unwrap_or(f64::NAN) - y).abs())
                .sum::<f64>()
        },
        |acc, p| acc + p,
        0.0,
    );
    Ok(total / set.len() as f64)
}
