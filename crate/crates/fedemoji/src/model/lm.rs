//! Next-word language model sharing the recurrent stack, used to pretrain
//! the emoji model's embedding and recurrent layers.
//!
//! The output softmax ties to the input embedding: a learned
//! `hidden x embed` projection maps the hidden state into embedding space,
//! and logits are dot products with the embedding rows. Gradients flow into
//! the embedding through both uses.

use rand::seq::SliceRandom;

use super::net::{bptt, log_sum_exp, run_stack, softmax, Tape};
use super::{CifgLayer, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::seeding::stream;

/// Architecture of the language model; no class count, the output range is
/// the vocabulary itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn layer_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Embedding, gates, and the `hidden x embed` projection.
    pub fn param_count(&self) -> usize {
        let mut n = self.vocab_size * self.embed_dim;
        for l in 0..self.num_layers {
            let in_dim = self.layer_input_dim(l);
            n += 3 * ((in_dim + self.hidden_dim) * self.hidden_dim + self.hidden_dim);
        }
        n + self.hidden_dim * self.embed_dim
    }
}

/// Language model parameters. Canonical flat order: embedding, layers (as
/// in [`Parameters`]), projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParameters {
    pub cfg: LmConfig,
    pub embedding: Vec<f64>,
    pub layers: Vec<CifgLayer>,
    /// `hidden_dim x embed_dim`, row-major.
    pub projection: Vec<f64>,
}

impl LmParameters {
    pub fn zeros(cfg: LmConfig) -> Self {
        let model_cfg = ModelConfig {
            vocab_size: cfg.vocab_size,
            embed_dim: cfg.embed_dim,
            num_layers: cfg.num_layers,
            hidden_dim: cfg.hidden_dim,
            num_classes: 1,
        };
        let p = Parameters::zeros(model_cfg);
        LmParameters {
            cfg,
            embedding: p.embedding,
            layers: p.layers,
            projection: vec![0.0; cfg.hidden_dim * cfg.embed_dim],
        }
    }

    /// Same recipe as [`Parameters::init`]: Uniform(-1/sqrt(fan_in), ..).
    pub fn init(cfg: LmConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "lm-init", &[]);
        let mut p = LmParameters::zeros(cfg);
        super::fill_uniform(&mut p.embedding, cfg.embed_dim, &mut rng);
        for layer in &mut p.layers {
            let fan_in = layer.input_dim + layer.hidden_dim;
            super::fill_uniform(&mut layer.w_i, fan_in, &mut rng);
            super::fill_uniform(&mut layer.w_o, fan_in, &mut rng);
            super::fill_uniform(&mut layer.w_g, fan_in, &mut rng);
        }
        super::fill_uniform(&mut p.projection, cfg.hidden_dim, &mut rng);
        p
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut s: Vec<&[f64]> = vec![&self.embedding];
        for l in &self.layers {
            s.extend([&l.w_i, &l.b_i, &l.w_o, &l.b_o, &l.w_g, &l.b_g].map(Vec::as_slice));
        }
        s.push(&self.projection);
        s
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s: Vec<&mut [f64]> = vec![&mut self.embedding];
        for l in &mut self.layers {
            s.push(&mut l.w_i);
            s.push(&mut l.b_i);
            s.push(&mut l.w_o);
            s.push(&mut l.b_o);
            s.push(&mut l.w_g);
            s.push(&mut l.b_g);
        }
        s.push(&mut self.projection);
        s
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for s in self.slices() {
            flat.extend_from_slice(s);
        }
        flat
    }

    pub fn from_flat(cfg: LmConfig, flat: &[f64]) -> Result<Self> {
        cfg.validate()?;
        if flat.len() != cfg.param_count() {
            return Err(Error::InvalidInput(format!(
                "flat parameter vector has length {}, architecture needs {}",
                flat.len(),
                cfg.param_count()
            )));
        }
        let mut p = LmParameters::zeros(cfg);
        let mut offset = 0;
        for s in p.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(p)
    }

    pub fn add_scaled(&mut self, other: &LmParameters, scale: f64) {
        assert_eq!(self.cfg, other.cfg, "parameter shapes must match");
        let theirs = other.slices();
        for (mine, other_slice) in self.slices_mut().into_iter().zip(theirs) {
            for (w, &g) in mine.iter_mut().zip(other_slice) {
                *w += scale * g;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, scale: f64) {
        for s in self.slices_mut() {
            for w in s.iter_mut() {
                *w *= scale;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|w| w.is_finite()))
    }
}

/// Embedding-space output then tied logits for one hidden state.
fn tied_logits(p: &LmParameters, hid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = p.cfg.embed_dim;
    let mut proj_out = vec![0.0; d];
    for (j, &hj) in hid.iter().enumerate() {
        let row = &p.projection[j * d..(j + 1) * d];
        for (po, &w) in proj_out.iter_mut().zip(row) {
            *po += hj * w;
        }
    }
    let mut logits = vec![0.0; p.cfg.vocab_size];
    for (v, lg) in logits.iter_mut().enumerate() {
        let row = &p.embedding[v * d..(v + 1) * d];
        *lg = row.iter().zip(&proj_out).map(|(&e, &po)| e * po).sum();
    }
    (logits, proj_out)
}

/// Per-position next-word logits (`len` rows over the vocabulary) plus the
/// forward tape.
pub fn lm_logits(params: &LmParameters, tokens: &[u32]) -> Result<(Vec<Vec<f64>>, Tape)> {
    let tape = run_stack(
        &params.embedding,
        params.cfg.embed_dim,
        &params.layers,
        tokens,
    )?;
    let mut logits = Vec::with_capacity(tape.len());
    for t in 0..tape.len() {
        let (lg, _) = tied_logits(params, tape.top_hidden(t));
        if !lg.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericOverflow {
                context: "language model logits",
            });
        }
        logits.push(lg);
    }
    Ok((logits, tape))
}

/// Mean next-word cross-entropy over all predicted positions of `seqs` and
/// its gradient. Every sequence must have at least two tokens.
pub fn lm_loss_and_grads(
    params: &LmParameters,
    seqs: &[Vec<u32>],
) -> Result<(f64, LmParameters)> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("empty batch".to_owned()));
    }
    let mut total_positions = 0usize;
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::InvalidInput(
                "language model sequences need at least two tokens".to_owned(),
            ));
        }
        total_positions += s.len() - 1;
    }

    let d = params.cfg.embed_dim;
    let h = params.cfg.hidden_dim;
    let mut grads = LmParameters::zeros(params.cfg);
    let mut loss_sum = 0.0;

    for tokens in seqs {
        let tape = run_stack(&params.embedding, d, &params.layers, tokens)?;
        let mut d_top = vec![vec![0.0; h]; tape.len()];
        for t in 0..tokens.len() - 1 {
            let hid = tape.top_hidden(t).to_vec();
            let (logits, proj_out) = tied_logits(params, &hid);
            let target = tokens[t + 1] as usize;
            loss_sum += log_sum_exp(&logits) - logits[target];

            let probs = softmax(&logits);
            let scale = 1.0 / total_positions as f64;
            // Output side of the tie: d_emb[v] += dlogit_v * proj_out, and
            // dproj_out = sum_v dlogit_v * emb[v].
            let mut dproj_out = vec![0.0; d];
            for v in 0..params.cfg.vocab_size {
                let dlogit = (probs[v] - f64::from(v == target)) * scale;
                let emb_row = &params.embedding[v * d..(v + 1) * d];
                let gemb_row = &mut grads.embedding[v * d..(v + 1) * d];
                for m in 0..d {
                    gemb_row[m] += dlogit * proj_out[m];
                    dproj_out[m] += dlogit * emb_row[m];
                }
            }
            for (j, &hj) in hid.iter().enumerate() {
                let row = &params.projection[j * d..(j + 1) * d];
                let grow = &mut grads.projection[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for m in 0..d {
                    grow[m] += hj * dproj_out[m];
                    acc += row[m] * dproj_out[m];
                }
                d_top[t][j] += acc;
            }
        }
        bptt(
            &params.embedding,
            d,
            &params.layers,
            &tape,
            d_top,
            &mut grads.embedding,
            &mut grads.layers,
        );
    }

    let loss = loss_sum / total_positions as f64;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow {
            context: "language model loss",
        });
    }
    Ok((loss, grads))
}

/// Fraction of positions whose top-1 next-word prediction is correct.
pub fn lm_accuracy(params: &LmParameters, seqs: &[Vec<u32>]) -> Result<Option<f64>> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for tokens in seqs {
        if tokens.len() < 2 {
            continue;
        }
        let (logits, _) = lm_logits(params, tokens)?;
        for t in 0..tokens.len() - 1 {
            let pred = argmax(&logits[t]);
            if pred == tokens[t + 1] as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct LmTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

/// Minibatch SGD with gradient clipping over whole sequences. Returns the
/// trained model and the mean training loss of each epoch.
pub fn train_lm(
    init: LmParameters,
    seqs: &[Vec<u32>],
    cfg: &LmTrainConfig,
) -> Result<(LmParameters, Vec<f64>)> {
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    assert!(cfg.batch_size >= 1, "batch_size must be at least 1");
    assert!(cfg.epochs >= 1, "epochs must be at least 1");
    let mut params = init;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "lm-epoch", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut positions = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let batch_positions: usize = batch.iter().map(|s| s.len() - 1).sum();
            let (loss, mut grads) = lm_loss_and_grads(&params, &batch)?;
            let norm = grads.l2_norm();
            if !norm.is_finite() {
                return Err(Error::NumericOverflow {
                    context: "language model gradient norm",
                });
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            params.add_scaled(&grads, -cfg.learning_rate);
            loss_sum += loss * batch_positions as f64;
            positions += batch_positions;
        }
        epoch_losses.push(loss_sum / positions as f64);
    }
    Ok((params, epoch_losses))
}

/// Builds an emoji model from a pretrained language model: the embedding
/// and every recurrent layer are copied verbatim, the class projection is
/// freshly initialized, and the language model projection is discarded.
pub fn transfer_from_lm(
    lm: &LmParameters,
    cfg: ModelConfig,
    seed: u64,
) -> Result<Parameters> {
    cfg.validate()?;
    let same = lm.cfg.vocab_size == cfg.vocab_size
        && lm.cfg.embed_dim == cfg.embed_dim
        && lm.cfg.num_layers == cfg.num_layers
        && lm.cfg.hidden_dim == cfg.hidden_dim;
    if !same {
        return Err(Error::IncompatibleArchitectures(format!(
            "language model (V={} d={} layers={} h={}) vs emoji model (V={} d={} layers={} h={})",
            lm.cfg.vocab_size,
            lm.cfg.embed_dim,
            lm.cfg.num_layers,
            lm.cfg.hidden_dim,
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.num_layers,
            cfg.hidden_dim,
        )));
    }
    let mut p = Parameters::init(cfg, seed);
    p.embedding = lm.embedding.clone();
    p.layers = lm.layers.clone();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 9,
            embed_dim: 4,
            num_layers: 2,
            hidden_dim: 5,
        }
    }

    fn seqs() -> Vec<Vec<u32>> {
        vec![vec![0, 3, 7, 2, 5], vec![8, 1], vec![4, 4, 6]]
    }

    #[test]
    fn lm_gradients_match_finite_differences() {
        let params = LmParameters::init(cfg(), 13);
        let batch = seqs();
        let (_, grads) = lm_loss_and_grads(&params, &batch).unwrap();
        let analytic = grads.flatten();
        let flat = params.flatten();
        let eps = 1e-4;

        let mut worst = 0.0f64;
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += eps;
            let mut minus = flat.clone();
            minus[k] -= eps;
            let lp = lm_loss_and_grads(&LmParameters::from_flat(cfg(), &plus).unwrap(), &batch)
                .unwrap()
                .0;
            let lm_ = lm_loss_and_grads(&LmParameters::from_flat(cfg(), &minus).unwrap(), &batch)
                .unwrap()
                .0;
            let fd = (lp - lm_) / (2.0 * eps);
            let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn lm_loss_starts_near_uniform() {
        // Zero parameters: uniform next-word distribution, CE = ln(V).
        let params = LmParameters::zeros(cfg());
        let (loss, _) = lm_loss_and_grads(&params, &seqs()).unwrap();
        assert!((loss - 9.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_rejects_single_token_sequences() {
        let params = LmParameters::init(cfg(), 1);
        assert!(lm_loss_and_grads(&params, &[vec![3]]).is_err());
    }

    #[test]
    fn training_learns_deterministic_bigrams() {
        // Cyclic corpus: token k is always followed by (k + 1) mod 6.
        let seqs: Vec<Vec<u32>> = (0..30)
            .map(|start| (0..8).map(|t| ((start + t) % 6) as u32).collect())
            .collect();
        let cfg = LmConfig {
            vocab_size: 6,
            embed_dim: 6,
            num_layers: 1,
            hidden_dim: 12,
        };
        let init = LmParameters::init(cfg, 3);
        let train_cfg = LmTrainConfig {
            learning_rate: 0.5,
            batch_size: 8,
            epochs: 30,
            clip_norm: 5.0,
            seed: 3,
        };
        let (trained, losses) = train_lm(init, &seqs, &train_cfg).unwrap();
        assert!(losses[losses.len() - 1] < losses[0] * 0.5, "losses {losses:?}");
        let acc = lm_accuracy(&trained, &seqs).unwrap().unwrap();
        assert!(acc > 0.9, "next-word accuracy {acc}");
    }

    #[test]
    fn transfer_copies_stack_and_refreshes_head() {
        let lm = LmParameters::init(cfg(), 21);
        let model_cfg = ModelConfig {
            vocab_size: 9,
            embed_dim: 4,
            num_layers: 2,
            hidden_dim: 5,
            num_classes: 3,
        };
        let p = transfer_from_lm(&lm, model_cfg, 99).unwrap();
        assert_eq!(p.embedding, lm.embedding);
        assert_eq!(p.layers, lm.layers);
        // Fresh head: not zero, differs per seed.
        let q = transfer_from_lm(&lm, model_cfg, 100).unwrap();
        assert_ne!(p.out_w, q.out_w);
        assert!(p.out_b.iter().all(|&b| b == 0.0));

        // Same inputs produce bit-identical hidden states in both models.
        let tokens = [1u32, 5, 2, 8];
        let (_, lm_tape) = lm_logits(&lm, &tokens).unwrap();
        let (_, tape) = forward(&p, &tokens).unwrap();
        for t in 0..tokens.len() {
            assert_eq!(lm_tape.top_hidden(t), tape.top_hidden(t));
        }
    }

    #[test]
    fn transfer_rejects_architecture_mismatch() {
        let lm = LmParameters::init(cfg(), 21);
        let bad = ModelConfig {
            vocab_size: 9,
            embed_dim: 4,
            num_layers: 2,
            hidden_dim: 6,
            num_classes: 3,
        };
        match transfer_from_lm(&lm, bad, 0) {
            Err(Error::IncompatibleArchitectures(_)) => {}
            other => panic!("expected incompatible architectures, got {other:?}"),
        }
    }

    #[test]
    fn lm_flatten_roundtrips() {
        let p = LmParameters::init(cfg(), 44);
        let q = LmParameters::from_flat(cfg(), &p.flatten()).unwrap();
        assert_eq!(p, q);
    }
}
