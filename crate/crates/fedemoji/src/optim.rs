//! Client-side local training and server-side update rules.
//!
//! Each sampled client runs minibatch SGD from the current global model and
//! transmits the resulting weight delta. The server averages deltas
//! weighted by effective example count and applies them with plain SGD or
//! Nesterov momentum.

use rand::seq::SliceRandom;

use crate::corpus::{ClientDataset, Example};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, Parameters};
use crate::seeding::stream;

/// Hyperparameters of a client's local pass.
#[derive(Debug, Clone, Copy)]
pub struct ClientOptConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global L2 gradient clip applied per batch.
    pub clip_norm: f64,
}

impl ClientOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning_rate must be positive".to_owned()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".to_owned()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be positive".to_owned()));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::InvalidInput("clip_norm must be positive".to_owned()));
        }
        Ok(())
    }
}

/// What a client sends back: its weight delta and bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u32,
    /// `local - global` in canonical flat order.
    pub delta: Vec<f64>,
    /// Number of examples with positive weight.
    pub num_examples: u64,
    /// Weighted mean training loss over all batches the client ran.
    pub train_loss: f64,
}

/// Scales `grads` so its global L2 norm is at most `clip_norm`; returns the
/// pre-clip norm.
pub fn clip_gradients(grads: &mut Parameters, clip_norm: f64) -> Result<f64> {
    let norm = grads.l2_norm();
    if !norm.is_finite() {
        return Err(Error::NumericOverflow {
            context: "gradient norm",
        });
    }
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// One epoch of minibatch SGD over `examples` in shuffled order. Batches
/// whose weights are all zero are skipped. Returns the weighted loss sum
/// and weight sum seen this epoch.
pub(crate) fn sgd_epoch(
    params: &mut Parameters,
    examples: &[Example],
    cfg: &ClientOptConfig,
    shuffle_seed: u64,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream(shuffle_seed, "shuffle", &[]));

    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
        let batch_weight: f64 = batch.iter().map(|e| e.weight).sum();
        if batch_weight == 0.0 {
            continue;
        }
        let (loss, mut grads) = loss_and_grads(params, &batch)?;
        clip_gradients(&mut grads, cfg.clip_norm)?;
        params.add_scaled(&grads, -cfg.learning_rate);
        loss_sum += loss * batch_weight;
        weight_sum += batch_weight;
    }
    Ok((loss_sum, weight_sum))
}

/// Runs a client's local epochs from the global model and returns its
/// update, or `None` when the client has no effective (positive-weight)
/// examples. Shuffle randomness is derived from `client_seed` and the epoch
/// index only, so results do not depend on scheduling.
pub fn client_update(
    global: &Parameters,
    dataset: &ClientDataset,
    cfg: &ClientOptConfig,
    client_seed: u64,
) -> Result<Option<ClientUpdate>> {
    cfg.validate()?;
    let num_effective = dataset.examples.iter().filter(|e| e.weight > 0.0).count();
    if num_effective == 0 {
        return Ok(None);
    }
    let mut local = global.clone();
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    for epoch in 0..cfg.epochs {
        let seed = crate::seeding::derive(client_seed, "epoch", &[epoch as u64]);
        let (ls, ws) = sgd_epoch(&mut local, &dataset.examples, cfg, seed)?;
        loss_sum += ls;
        weight_sum += ws;
    }
    let mut delta = local.flatten();
    for (d, g) in delta.iter_mut().zip(global.flatten()) {
        *d -= g;
    }
    Ok(Some(ClientUpdate {
        client_id: dataset.client_id,
        delta,
        num_examples: num_effective as u64,
        train_loss: loss_sum / weight_sum,
    }))
}

/// Example-count-weighted mean of client deltas:
/// `sum_k n_k delta_k / sum_k n_k`. Updates are summed in ascending
/// client id order regardless of input order, so aggregation is
/// reproducible under parallel collection. Also returns `sum_k n_k`.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<(Vec<f64>, u64)> {
    if updates.is_empty() {
        return Err(Error::NoUpdates);
    }
    let dim = updates[0].delta.len();
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);

    let mut acc = vec![0.0; dim];
    let mut total: u64 = 0;
    for &i in &order {
        let u = &updates[i];
        if u.delta.len() != dim {
            return Err(Error::InvalidInput(format!(
                "client {} sent a delta of length {}, expected {dim}",
                u.client_id,
                u.delta.len()
            )));
        }
        let n = u.num_examples as f64;
        for (a, &d) in acc.iter_mut().zip(&u.delta) {
            *a += n * d;
        }
        total += u.num_examples;
    }
    if total == 0 {
        return Err(Error::NoUpdates);
    }
    let inv = 1.0 / total as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    if !acc.iter().all(|a| a.is_finite()) {
        return Err(Error::NumericOverflow {
            context: "aggregated delta",
        });
    }
    Ok((acc, total))
}

/// Server update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerRule {
    Sgd,
    Nesterov { momentum: f64 },
}

/// Applies averaged deltas to the global model, treating the mean delta as
/// a pseudo-gradient.
#[derive(Debug, Clone)]
pub struct ServerOptimizer {
    rule: ServerRule,
    learning_rate: f64,
    velocity: Vec<f64>,
}

impl ServerOptimizer {
    pub fn new(rule: ServerRule, learning_rate: f64, dim: usize) -> Self {
        ServerOptimizer {
            rule,
            learning_rate,
            velocity: vec![0.0; dim],
        }
    }

    /// Restores an optimizer mid-run, e.g. when resuming from checkpoint.
    pub fn with_velocity(rule: ServerRule, learning_rate: f64, velocity: Vec<f64>) -> Self {
        ServerOptimizer {
            rule,
            learning_rate,
            velocity,
        }
    }

    pub fn rule(&self) -> ServerRule {
        self.rule
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// SGD: `w += lr * mean_delta`. Nesterov:
    /// `v = mu v + mean_delta; w += lr * (mu v + mean_delta)`.
    pub fn apply(&mut self, params: &mut Parameters, mean_delta: &[f64]) -> Result<()> {
        if mean_delta.len() != self.velocity.len() {
            return Err(Error::InvalidInput(format!(
                "delta length {} does not match optimizer dimension {}",
                mean_delta.len(),
                self.velocity.len()
            )));
        }
        match self.rule {
            ServerRule::Sgd => params.add_scaled_flat(mean_delta, self.learning_rate),
            ServerRule::Nesterov { momentum } => {
                for (v, &d) in self.velocity.iter_mut().zip(mean_delta) {
                    *v = momentum * *v + d;
                }
                let lookahead: Vec<f64> = self
                    .velocity
                    .iter()
                    .zip(mean_delta)
                    .map(|(&v, &d)| momentum * v + d)
                    .collect();
                params.add_scaled_flat(&lookahead, self.learning_rate);
            }
        }
        Ok(())
    }
}
