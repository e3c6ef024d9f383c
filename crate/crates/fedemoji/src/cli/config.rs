//! Run configuration: a flat `key = value` file with optional `[section]`
//! headers for grouping. Unknown keys are errors, so typos fail fast, and
//! every run writes back its resolved configuration for exact replay.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which update rule the server applies to aggregated deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerOpt {
    Sgd,
    Momentum,
}

impl ServerOpt {
    fn as_str(self) -> &'static str {
        match self {
            ServerOpt::Sgd => "sgd",
            ServerOpt::Momentum => "momentum",
        }
    }
}

/// Every knob of the pipeline, with defaults sized for the full-scale run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Model.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    // Synthetic corpus.
    pub num_emoji: usize,
    pub emoji_fraction: f64,
    pub top_share: f64,
    pub filler_vocab: usize,
    pub zipf_exponent: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub second_emoji_prob: f64,
    // Population.
    pub num_clients: usize,
    pub sentences_per_client: f64,
    pub dispersion: f64,
    pub skew: f64,
    pub holdout_fraction: f64,
    pub max_context: usize,
    pub unk_keep_fraction: f64,
    // Client optimizer.
    pub client_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    // Server optimizer.
    pub server_opt: ServerOpt,
    pub server_lr: f64,
    pub momentum: f64,
    // Federation.
    pub devices_per_round: usize,
    pub total_rounds: usize,
    pub eval_every: usize,
    pub eval_clients: usize,
    pub availability: f64,
    pub parallel: bool,
    // Language model pretraining.
    pub lm_lr: f64,
    pub lm_batch_size: usize,
    pub lm_epochs: usize,
    // Inference.
    pub alpha: f64,
    pub smoothing: f64,
    /// `None` means "auto": calibrate where data allows, else 0.5.
    pub threshold: Option<f64>,
    pub top_k: usize,
    // Centralized baseline.
    pub central_epochs: usize,
    // Run.
    pub seed: u64,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_size: 10_000,
            embed_dim: 96,
            num_layers: 2,
            hidden_dim: 256,
            num_emoji: 16,
            emoji_fraction: 0.03,
            top_share: 0.3,
            filler_vocab: 120,
            zipf_exponent: 1.05,
            min_words: 3,
            max_words: 12,
            second_emoji_prob: 0.08,
            num_clients: 600,
            sentences_per_client: 100.0,
            dispersion: 0.3,
            skew: 0.5,
            holdout_fraction: 0.166667,
            max_context: 20,
            unk_keep_fraction: 0.01,
            client_lr: 0.5,
            batch_size: 50,
            epochs: 1,
            clip_norm: 5.0,
            server_opt: ServerOpt::Momentum,
            server_lr: 1.0,
            momentum: 0.9,
            devices_per_round: 20,
            total_rounds: 300,
            eval_every: 10,
            eval_clients: 50,
            availability: 1.0,
            parallel: true,
            lm_lr: 0.5,
            lm_batch_size: 16,
            lm_epochs: 2,
            alpha: 0.7,
            smoothing: 1.0,
            threshold: None,
            top_k: 5,
            central_epochs: 20,
            seed: 42,
            out: "out".to_owned(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::ConfigParse {
        line,
        message: format!("key `{key}`: {e}"),
    })
}

impl RunConfig {
    /// Parses a config file on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if s.starts_with('[') {
                if s.ends_with(']') && s.len() > 2 {
                    continue;
                }
                return Err(Error::ConfigParse {
                    line,
                    message: format!("malformed section header `{s}`"),
                });
            }
            let Some((key, value)) = s.split_once('=') else {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("expected `key = value`, got `{s}`"),
                });
            };
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value, line)?,
            "embed_dim" => self.embed_dim = parse_value(key, value, line)?,
            "num_layers" => self.num_layers = parse_value(key, value, line)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value, line)?,
            "num_emoji" => self.num_emoji = parse_value(key, value, line)?,
            "emoji_fraction" => self.emoji_fraction = parse_value(key, value, line)?,
            "top_share" => self.top_share = parse_value(key, value, line)?,
            "filler_vocab" => self.filler_vocab = parse_value(key, value, line)?,
            "zipf_exponent" => self.zipf_exponent = parse_value(key, value, line)?,
            "min_words" => self.min_words = parse_value(key, value, line)?,
            "max_words" => self.max_words = parse_value(key, value, line)?,
            "second_emoji_prob" => self.second_emoji_prob = parse_value(key, value, line)?,
            "num_clients" => self.num_clients = parse_value(key, value, line)?,
            "sentences_per_client" => self.sentences_per_client = parse_value(key, value, line)?,
            "dispersion" => self.dispersion = parse_value(key, value, line)?,
            "skew" => self.skew = parse_value(key, value, line)?,
            "holdout_fraction" => self.holdout_fraction = parse_value(key, value, line)?,
            "max_context" => self.max_context = parse_value(key, value, line)?,
            "unk_keep_fraction" => self.unk_keep_fraction = parse_value(key, value, line)?,
            "client_lr" => self.client_lr = parse_value(key, value, line)?,
            "batch_size" => self.batch_size = parse_value(key, value, line)?,
            "epochs" => self.epochs = parse_value(key, value, line)?,
            "clip_norm" => self.clip_norm = parse_value(key, value, line)?,
            "server_opt" => {
                self.server_opt = match value {
                    "sgd" => ServerOpt::Sgd,
                    "momentum" => ServerOpt::Momentum,
                    other => {
                        return Err(Error::ConfigParse {
                            line,
                            message: format!(
                                "key `server_opt`: expected `sgd` or `momentum`, got `{other}`"
                            ),
                        })
                    }
                }
            }
            "server_lr" => self.server_lr = parse_value(key, value, line)?,
            "momentum" => self.momentum = parse_value(key, value, line)?,
            "devices_per_round" => self.devices_per_round = parse_value(key, value, line)?,
            "total_rounds" => self.total_rounds = parse_value(key, value, line)?,
            "eval_every" => self.eval_every = parse_value(key, value, line)?,
            "eval_clients" => self.eval_clients = parse_value(key, value, line)?,
            "availability" => self.availability = parse_value(key, value, line)?,
            "parallel" => self.parallel = parse_value(key, value, line)?,
            "lm_lr" => self.lm_lr = parse_value(key, value, line)?,
            "lm_batch_size" => self.lm_batch_size = parse_value(key, value, line)?,
            "lm_epochs" => self.lm_epochs = parse_value(key, value, line)?,
            "alpha" => self.alpha = parse_value(key, value, line)?,
            "smoothing" => self.smoothing = parse_value(key, value, line)?,
            "threshold" => {
                self.threshold = if value == "auto" {
                    None
                } else {
                    Some(parse_value(key, value, line)?)
                }
            }
            "top_k" => self.top_k = parse_value(key, value, line)?,
            "central_epochs" => self.central_epochs = parse_value(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "out" => self.out = value.to_owned(),
            other => {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    /// Range checks, applied to defaults and parsed files alike.
    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, message: impl Into<String>) -> Error {
            Error::ConfigValue {
                key: key.to_owned(),
                message: message.into(),
            }
        }
        let positive = |key: &str, v: usize| -> Result<()> {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
            Ok(())
        };
        let positive_f = |key: &str, v: f64| -> Result<()> {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, "must be positive and finite"));
            }
            Ok(())
        };
        let fraction = |key: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(key, "must lie in [0, 1]"));
            }
            Ok(())
        };

        if self.vocab_size < 3 {
            return Err(bad("vocab_size", "needs at least 3 ids"));
        }
        positive("embed_dim", self.embed_dim)?;
        positive("num_layers", self.num_layers)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("num_emoji", self.num_emoji)?;
        fraction("emoji_fraction", self.emoji_fraction)?;
        if !(self.top_share > 0.0 && self.top_share < 1.0) {
            return Err(bad("top_share", "must lie in (0, 1)"));
        }
        positive("filler_vocab", self.filler_vocab)?;
        positive_f("zipf_exponent", self.zipf_exponent)?;
        positive("min_words", self.min_words)?;
        if self.max_words < self.min_words {
            return Err(bad("max_words", "must be at least min_words"));
        }
        fraction("second_emoji_prob", self.second_emoji_prob)?;
        positive("num_clients", self.num_clients)?;
        positive_f("sentences_per_client", self.sentences_per_client)?;
        if !(self.dispersion >= 0.0 && self.dispersion.is_finite()) {
            return Err(bad("dispersion", "must be non-negative and finite"));
        }
        fraction("skew", self.skew)?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(bad("holdout_fraction", "must lie in [0, 1)"));
        }
        positive("max_context", self.max_context)?;
        fraction("unk_keep_fraction", self.unk_keep_fraction)?;
        positive_f("client_lr", self.client_lr)?;
        positive("batch_size", self.batch_size)?;
        positive("epochs", self.epochs)?;
        positive_f("clip_norm", self.clip_norm)?;
        positive_f("server_lr", self.server_lr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        positive("devices_per_round", self.devices_per_round)?;
        positive("total_rounds", self.total_rounds)?;
        positive("eval_every", self.eval_every)?;
        positive("eval_clients", self.eval_clients)?;
        if !(self.availability > 0.0 && self.availability <= 1.0) {
            return Err(bad("availability", "must lie in (0, 1]"));
        }
        positive_f("lm_lr", self.lm_lr)?;
        positive("lm_batch_size", self.lm_batch_size)?;
        positive("lm_epochs", self.lm_epochs)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(bad("alpha", "must be non-negative and finite"));
        }
        positive_f("smoothing", self.smoothing)?;
        if let Some(t) = self.threshold {
            fraction("threshold", t)?;
        }
        positive("top_k", self.top_k)?;
        positive("central_epochs", self.central_epochs)?;
        if self.out.is_empty() {
            return Err(bad("out", "must not be empty"));
        }
        Ok(())
    }

    /// Renders the full configuration; parsing the result reproduces
    /// `self` exactly.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[model]");
        let _ = writeln!(w, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(w, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(w, "num_layers = {}", self.num_layers);
        let _ = writeln!(w, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(w, "\n[corpus]");
        let _ = writeln!(w, "num_emoji = {}", self.num_emoji);
        let _ = writeln!(w, "emoji_fraction = {}", self.emoji_fraction);
        let _ = writeln!(w, "top_share = {}", self.top_share);
        let _ = writeln!(w, "filler_vocab = {}", self.filler_vocab);
        let _ = writeln!(w, "zipf_exponent = {}", self.zipf_exponent);
        let _ = writeln!(w, "min_words = {}", self.min_words);
        let _ = writeln!(w, "max_words = {}", self.max_words);
        let _ = writeln!(w, "second_emoji_prob = {}", self.second_emoji_prob);
        let _ = writeln!(w, "\n[population]");
        let _ = writeln!(w, "num_clients = {}", self.num_clients);
        let _ = writeln!(w, "sentences_per_client = {}", self.sentences_per_client);
        let _ = writeln!(w, "dispersion = {}", self.dispersion);
        let _ = writeln!(w, "skew = {}", self.skew);
        let _ = writeln!(w, "holdout_fraction = {}", self.holdout_fraction);
        let _ = writeln!(w, "max_context = {}", self.max_context);
        let _ = writeln!(w, "unk_keep_fraction = {}", self.unk_keep_fraction);
        let _ = writeln!(w, "\n[client]");
        let _ = writeln!(w, "client_lr = {}", self.client_lr);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "epochs = {}", self.epochs);
        let _ = writeln!(w, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(w, "\n[server]");
        let _ = writeln!(w, "server_opt = {}", self.server_opt.as_str());
        let _ = writeln!(w, "server_lr = {}", self.server_lr);
        let _ = writeln!(w, "momentum = {}", self.momentum);
        let _ = writeln!(w, "\n[federation]");
        let _ = writeln!(w, "devices_per_round = {}", self.devices_per_round);
        let _ = writeln!(w, "total_rounds = {}", self.total_rounds);
        let _ = writeln!(w, "eval_every = {}", self.eval_every);
        let _ = writeln!(w, "eval_clients = {}", self.eval_clients);
        let _ = writeln!(w, "availability = {}", self.availability);
        let _ = writeln!(w, "parallel = {}", self.parallel);
        let _ = writeln!(w, "\n[pretrain]");
        let _ = writeln!(w, "lm_lr = {}", self.lm_lr);
        let _ = writeln!(w, "lm_batch_size = {}", self.lm_batch_size);
        let _ = writeln!(w, "lm_epochs = {}", self.lm_epochs);
        let _ = writeln!(w, "\n[inference]");
        let _ = writeln!(w, "alpha = {}", self.alpha);
        let _ = writeln!(w, "smoothing = {}", self.smoothing);
        match self.threshold {
            Some(t) => {
                let _ = writeln!(w, "threshold = {t}");
            }
            None => {
                let _ = writeln!(w, "threshold = auto");
            }
        }
        let _ = writeln!(w, "top_k = {}", self.top_k);
        let _ = writeln!(w, "\n[central]");
        let _ = writeln!(w, "central_epochs = {}", self.central_epochs);
        let _ = writeln!(w, "\n[run]");
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "out = {}", self.out);
        s
    }
}
