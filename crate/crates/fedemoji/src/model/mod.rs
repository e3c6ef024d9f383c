//! Recurrent emoji prediction model.
//!
//! The network embeds word ids, runs them through a stack of coupled
//! input-forget gate recurrent layers, and maps the final hidden state to
//! one logit per emoji class plus UNK. All parameters live in flat `f64`
//! buffers with a fixed canonical order, so whole models can be cloned,
//! diffed, and averaged as vectors.

mod checkpoint;
mod cifg;
mod lm;
mod net;

pub use checkpoint::{
    read_any_checkpoint, read_checkpoint, read_lm_checkpoint, read_velocity, write_checkpoint,
    write_lm_checkpoint, write_velocity, AnyCheckpoint,
};
pub use cifg::{cifg_step, StepOut};
pub use lm::{
    lm_accuracy, lm_loss_and_grads, lm_logits, train_lm, transfer_from_lm, LmConfig, LmParameters,
    LmTrainConfig,
};
pub use net::{forward, loss_and_grads, softmax, Tape};
pub(crate) use net::output_logits;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::stream;

/// Architecture of the emoji model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Emoji classes plus one UNK class.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Input width of layer `l`: the embedding for layer 0, the hidden state
    /// of the layer below otherwise.
    pub fn layer_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Gate parameters of one layer: three input-and-recurrent matrices and
    /// three biases. A four-gate cell would need four of each; coupling the
    /// forget gate to the input gate removes exactly one quarter.
    pub fn gate_param_count(&self, l: usize) -> usize {
        let in_dim = self.layer_input_dim(l);
        3 * ((in_dim + self.hidden_dim) * self.hidden_dim + self.hidden_dim)
    }

    /// Total scalar parameters: embedding, every gate, output projection.
    pub fn param_count(&self) -> usize {
        let mut n = self.vocab_size * self.embed_dim;
        for l in 0..self.num_layers {
            n += self.gate_param_count(l);
        }
        n + self.hidden_dim * self.num_classes + self.num_classes
    }
}

/// One recurrent layer. Weight matrices are row-major
/// `(input_dim + hidden_dim) x hidden_dim`; the input rows come first.
#[derive(Debug, Clone, PartialEq)]
pub struct CifgLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: Vec<f64>,
    pub b_i: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
}

impl CifgLayer {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = vec![0.0; (input_dim + hidden_dim) * hidden_dim];
        let b = vec![0.0; hidden_dim];
        CifgLayer {
            input_dim,
            hidden_dim,
            w_i: w.clone(),
            b_i: b.clone(),
            w_o: w.clone(),
            b_o: b.clone(),
            w_g: w,
            b_g: b,
        }
    }
}

/// Full parameter set of the emoji model. The canonical flat order is:
/// embedding, then per layer `w_i, b_i, w_o, b_o, w_g, b_g`, then the output
/// matrix and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub cfg: ModelConfig,
    /// `vocab_size x embed_dim`, row-major.
    pub embedding: Vec<f64>,
    pub layers: Vec<CifgLayer>,
    /// `hidden_dim x num_classes`, row-major.
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl Parameters {
    /// All-zero parameters; also the gradient container.
    pub fn zeros(cfg: ModelConfig) -> Self {
        Parameters {
            cfg,
            embedding: vec![0.0; cfg.vocab_size * cfg.embed_dim],
            layers: (0..cfg.num_layers)
                .map(|l| CifgLayer::zeros(cfg.layer_input_dim(l), cfg.hidden_dim))
                .collect(),
            out_w: vec![0.0; cfg.hidden_dim * cfg.num_classes],
            out_b: vec![0.0; cfg.num_classes],
        }
    }

    /// Random initialization: each weight matrix is Uniform(-s, s) with
    /// `s = 1 / sqrt(fan_in)`; biases start at zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "init", &[]);
        let mut p = Parameters::zeros(cfg);
        fill_uniform(&mut p.embedding, cfg.embed_dim, &mut rng);
        for layer in &mut p.layers {
            let fan_in = layer.input_dim + layer.hidden_dim;
            fill_uniform(&mut layer.w_i, fan_in, &mut rng);
            fill_uniform(&mut layer.w_o, fan_in, &mut rng);
            fill_uniform(&mut layer.w_g, fan_in, &mut rng);
        }
        fill_uniform(&mut p.out_w, cfg.hidden_dim, &mut rng);
        p
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Parameter slices in canonical order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut s: Vec<&[f64]> = vec![&self.embedding];
        for l in &self.layers {
            s.extend([&l.w_i, &l.b_i, &l.w_o, &l.b_o, &l.w_g, &l.b_g].map(Vec::as_slice));
        }
        s.push(&self.out_w);
        s.push(&self.out_b);
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
        s.push(&mut self.out_w);
        s.push(&mut self.out_b);
        s
    }

    /// Canonical flat vector; length equals [`ModelConfig::param_count`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for s in self.slices() {
            flat.extend_from_slice(s);
        }
        flat
    }

    /// Inverse of [`Parameters::flatten`].
    pub fn from_flat(cfg: ModelConfig, flat: &[f64]) -> Result<Self> {
        cfg.validate()?;
        if flat.len() != cfg.param_count() {
            return Err(Error::InvalidInput(format!(
                "flat parameter vector has length {}, architecture needs {}",
                flat.len(),
                cfg.param_count()
            )));
        }
        let mut p = Parameters::zeros(cfg);
        let mut offset = 0;
        for s in p.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(p)
    }

    /// `self += scale * other`, shape-checked.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        assert_eq!(self.cfg, other.cfg, "parameter shapes must match");
        let theirs = other.slices();
        for (mine, other_slice) in self.slices_mut().into_iter().zip(theirs) {
            for (w, &g) in mine.iter_mut().zip(other_slice) {
                *w += scale * g;
            }
        }
    }

    /// Adds `scale * flat` where `flat` is a canonical flat vector.
    pub fn add_scaled_flat(&mut self, flat: &[f64], scale: f64) {
        assert_eq!(flat.len(), self.cfg.param_count());
        let mut offset = 0;
        for s in self.slices_mut() {
            let len = s.len();
            for (w, &d) in s.iter_mut().zip(&flat[offset..offset + len]) {
                *w += scale * d;
            }
            offset += len;
        }
    }

    /// Multiplies every parameter by `scale`.
    pub fn scale(&mut self, scale: f64) {
        for s in self.slices_mut() {
            for w in s.iter_mut() {
                *w *= scale;
            }
        }
    }

    /// Euclidean norm over all parameters.
    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|w| w.is_finite()))
    }
}

fn fill_uniform<R: Rng>(w: &mut [f64], fan_in: usize, rng: &mut R) {
    let s = 1.0 / (fan_in as f64).sqrt();
    for v in w.iter_mut() {
        *v = rng.random_range(-s..s);
    }
}

/// Per-layer recurrent state for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub c: Vec<Vec<f64>>,
    pub hid: Vec<Vec<f64>>,
}

impl CellState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        CellState {
            c: vec![vec![0.0; cfg.hidden_dim]; cfg.num_layers],
            hid: vec![vec![0.0; cfg.hidden_dim]; cfg.num_layers],
        }
    }
}
