//! Sequence forward pass, weighted cross-entropy loss, and
//! backpropagation through time over the layer stack.

use super::cifg::{cifg_step, StepOut};
use super::{CifgLayer, Parameters};
use crate::corpus::Example;
use crate::error::{Error, Result};

/// Forward-pass record: the per-step, per-layer cell outputs needed by the
/// backward pass. Layer inputs are not stored; they are the embedding row
/// of `tokens[t]` for layer 0 and the hidden state below otherwise.
#[derive(Debug, Clone)]
pub struct Tape {
    pub tokens: Vec<u32>,
    /// `steps[t][l]` is layer `l` at position `t`.
    pub steps: Vec<Vec<StepOut>>,
}

impl Tape {
    /// Top-layer hidden state at position `t`.
    pub fn top_hidden(&self, t: usize) -> &[f64] {
        &self.steps[t].last().expect("at least one layer").hid
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the recurrent stack over a token sequence from zero state.
pub(crate) fn run_stack(
    embedding: &[f64],
    embed_dim: usize,
    layers: &[CifgLayer],
    tokens: &[u32],
) -> Result<Tape> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".to_owned()));
    }
    let vocab_size = embedding.len() / embed_dim;
    let hidden = layers[0].hidden_dim;
    let zeros = vec![0.0; hidden];
    let mut steps: Vec<Vec<StepOut>> = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        if tok as usize >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id: tok,
                vocab_size,
            });
        }
        let mut x = embedding[tok as usize * embed_dim..(tok as usize + 1) * embed_dim].to_vec();
        let mut layer_steps = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let (c_prev, h_prev) = match steps.last() {
                Some(prev) => (&prev[l].c, &prev[l].hid),
                None => (&zeros, &zeros),
            };
            let out = cifg_step(layer, &x, c_prev, h_prev);
            x = out.hid.clone();
            layer_steps.push(out);
        }
        steps.push(layer_steps);
    }
    Ok(Tape {
        tokens: tokens.to_vec(),
        steps,
    })
}

/// Class logits from a top-layer hidden state.
pub(crate) fn output_logits(params: &Parameters, hid: &[f64]) -> Vec<f64> {
    let c = params.cfg.num_classes;
    let mut logits = params.out_b.clone();
    for (j, &hj) in hid.iter().enumerate() {
        let row = &params.out_w[j * c..(j + 1) * c];
        for (lg, &w) in logits.iter_mut().zip(row) {
            *lg += hj * w;
        }
    }
    logits
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Runs the stack and projects the final hidden state to class logits.
pub fn forward(params: &Parameters, tokens: &[u32]) -> Result<(Vec<f64>, Tape)> {
    let tape = run_stack(
        &params.embedding,
        params.cfg.embed_dim,
        &params.layers,
        tokens,
    )?;
    let logits = output_logits(params, tape.top_hidden(tape.len() - 1));
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::NumericOverflow {
            context: "forward logits",
        });
    }
    Ok((logits, tape))
}

/// Backpropagates `d_top[t]` (gradients on the top-layer hidden states)
/// through the stack, accumulating into `grad_embedding` and `grad_layers`.
pub(crate) fn bptt(
    embedding: &[f64],
    embed_dim: usize,
    layers: &[CifgLayer],
    tape: &Tape,
    d_top: Vec<Vec<f64>>,
    grad_embedding: &mut [f64],
    grad_layers: &mut [CifgLayer],
) {
    let steps_total = tape.len();
    let hidden = layers[0].hidden_dim;
    let zeros = vec![0.0; hidden];
    let mut d_above = d_top;

    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let gl = &mut grad_layers[l];
        let in_dim = layer.input_dim;
        let mut d_below: Vec<Vec<f64>> = if l > 0 {
            Vec::with_capacity(steps_total)
        } else {
            Vec::new()
        };
        if l > 0 {
            d_below.resize(steps_total, vec![0.0; in_dim]);
        }
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];

        for t in (0..steps_total).rev() {
            let s = &tape.steps[t][l];
            let (c_prev, h_prev): (&[f64], &[f64]) = if t > 0 {
                (&tape.steps[t - 1][l].c, &tape.steps[t - 1][l].hid)
            } else {
                (&zeros, &zeros)
            };
            let x: &[f64] = if l > 0 {
                &tape.steps[t][l - 1].hid
            } else {
                let tok = tape.tokens[t] as usize;
                &embedding[tok * embed_dim..(tok + 1) * embed_dim]
            };

            // Gate pre-activation gradients. With f = 1 - i the cell update
            // c' = (1 - i) c + i g gives di = dc' (g - c), dc = dc' (1 - i).
            let mut da_i = vec![0.0; hidden];
            let mut da_o = vec![0.0; hidden];
            let mut da_g = vec![0.0; hidden];
            for j in 0..hidden {
                let dh = d_above[t][j] + dh_next[j];
                let dc = dc_next[j] + dh * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
                da_o[j] = dh * s.tanh_c[j] * s.o[j] * (1.0 - s.o[j]);
                let di = dc * (s.g[j] - c_prev[j]);
                da_i[j] = di * s.i[j] * (1.0 - s.i[j]);
                da_g[j] = dc * s.i[j] * (1.0 - s.g[j] * s.g[j]);
                dc_next[j] = dc * (1.0 - s.i[j]);
            }

            // dW[r, j] += xh[r] da[j]; d_xh[r] = sum_j W[r, j] da[j].
            let mut dx = vec![0.0; in_dim];
            for (r, &xr) in x.iter().enumerate() {
                let row = r * hidden;
                let mut acc = 0.0;
                for j in 0..hidden {
                    gl.w_i[row + j] += xr * da_i[j];
                    gl.w_o[row + j] += xr * da_o[j];
                    gl.w_g[row + j] += xr * da_g[j];
                    acc += layer.w_i[row + j] * da_i[j]
                        + layer.w_o[row + j] * da_o[j]
                        + layer.w_g[row + j] * da_g[j];
                }
                dx[r] = acc;
            }
            let mut new_dh = vec![0.0; hidden];
            for (r, &hr) in h_prev.iter().enumerate() {
                let row = (in_dim + r) * hidden;
                let mut acc = 0.0;
                for j in 0..hidden {
                    gl.w_i[row + j] += hr * da_i[j];
                    gl.w_o[row + j] += hr * da_o[j];
                    gl.w_g[row + j] += hr * da_g[j];
                    acc += layer.w_i[row + j] * da_i[j]
                        + layer.w_o[row + j] * da_o[j]
                        + layer.w_g[row + j] * da_g[j];
                }
                new_dh[r] = acc;
            }
            for j in 0..hidden {
                gl.b_i[j] += da_i[j];
                gl.b_o[j] += da_o[j];
                gl.b_g[j] += da_g[j];
            }
            dh_next = new_dh;

            if l > 0 {
                d_below[t] = dx;
            } else {
                let tok = tape.tokens[t] as usize;
                let ge = &mut grad_embedding[tok * embed_dim..(tok + 1) * embed_dim];
                for (g, d) in ge.iter_mut().zip(&dx) {
                    *g += d;
                }
            }
        }
        if l > 0 {
            d_above = d_below;
        }
    }
}

/// Weight-normalized mean cross-entropy over a batch and its gradient.
///
/// `loss = sum_e w_e * CE_e / sum_e w_e`; zero-weight examples contribute
/// nothing and are skipped outright. Errors with "empty effective batch"
/// when every weight is zero.
pub fn loss_and_grads(params: &Parameters, batch: &[Example]) -> Result<(f64, Parameters)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".to_owned()));
    }
    let mut total_weight = 0.0;
    for e in batch {
        if !e.weight.is_finite() || e.weight < 0.0 {
            return Err(Error::InvalidInput(format!(
                "example weight {} must be finite and non-negative",
                e.weight
            )));
        }
        total_weight += e.weight;
    }
    if total_weight == 0.0 {
        return Err(Error::EmptyEffectiveBatch);
    }

    let num_classes = params.cfg.num_classes;
    let mut grads = Parameters::zeros(params.cfg);
    let mut loss_sum = 0.0;

    for e in batch {
        if e.weight == 0.0 {
            continue;
        }
        if e.label >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {} out of range for {num_classes} classes",
                e.label
            )));
        }
        let (logits, tape) = forward(params, &e.tokens)?;
        loss_sum += e.weight * (log_sum_exp(&logits) - logits[e.label]);

        let scale = e.weight / total_weight;
        let probs = softmax(&logits);
        let mut dlogits = vec![0.0; num_classes];
        for c in 0..num_classes {
            dlogits[c] = (probs[c] - f64::from(c == e.label)) * scale;
        }

        let last = tape.len() - 1;
        let hid = tape.top_hidden(last).to_vec();
        for (j, &hj) in hid.iter().enumerate() {
            let row = &mut grads.out_w[j * num_classes..(j + 1) * num_classes];
            for (g, &dl) in row.iter_mut().zip(&dlogits) {
                *g += hj * dl;
            }
        }
        for (g, &dl) in grads.out_b.iter_mut().zip(&dlogits) {
            *g += dl;
        }

        let mut d_top = vec![vec![0.0; params.cfg.hidden_dim]; tape.len()];
        for j in 0..params.cfg.hidden_dim {
            let row = &params.out_w[j * num_classes..(j + 1) * num_classes];
            d_top[last][j] = row.iter().zip(&dlogits).map(|(&w, &dl)| w * dl).sum();
        }
        bptt(
            &params.embedding,
            params.cfg.embed_dim,
            &params.layers,
            &tape,
            d_top,
            &mut grads.embedding,
            &mut grads.layers,
        );
    }

    let loss = loss_sum / total_weight;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow {
            context: "batch loss",
        });
    }
    Ok((loss, grads))
}
