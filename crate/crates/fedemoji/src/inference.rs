//! On-device inference: incremental decoding, UNK-probability triggering,
//! and frequency-diversified ranking of emoji suggestions.

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::model::{cifg_step, softmax, CellState, Parameters};

/// Streaming decoder state; feed one token at a time.
#[derive(Debug, Clone)]
pub struct Session {
    state: CellState,
}

impl Session {
    pub fn new(params: &Parameters) -> Self {
        Session {
            state: CellState::zeros(&params.cfg),
        }
    }

    pub fn reset(&mut self, params: &Parameters) {
        self.state = CellState::zeros(&params.cfg);
    }
}

/// Advances the session by one token and returns the class probabilities
/// after it. Matches the whole-sequence forward pass exactly: feeding
/// `t_1..t_n` yields the same distribution as `forward(&[t_1..t_n])`.
pub fn predict_incremental(
    params: &Parameters,
    session: &mut Session,
    token: u32,
) -> Result<Vec<f64>> {
    let cfg = &params.cfg;
    if token as usize >= cfg.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab_size: cfg.vocab_size,
        });
    }
    let mut x =
        params.embedding[token as usize * cfg.embed_dim..(token as usize + 1) * cfg.embed_dim]
            .to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let out = cifg_step(layer, &x, &session.state.c[l], &session.state.hid[l]);
        session.state.c[l] = out.c;
        session.state.hid[l] = out.hid;
        x = session.state.hid[l].clone();
    }
    let logits = crate::model::output_logits(params, &x);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow {
            context: "incremental logits",
        });
    }
    Ok(softmax(&logits))
}

/// Trigger policy: suggestions are shown only when the model is confident
/// the text will carry an emoji at all.
#[derive(Debug, Clone, Copy)]
pub struct TriggerConfig {
    /// Show predictions iff `p(UNK) < threshold`.
    pub threshold: f64,
}

/// The decision uses only the UNK probability (the last class).
pub fn should_trigger(probs: &[f64], cfg: &TriggerConfig) -> bool {
    let p_unk = *probs.last().expect("non-empty probabilities");
    p_unk < cfg.threshold
}

/// One ranked suggestion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredClass {
    pub class: usize,
    pub score: f64,
}

/// Frequency-based score adjustment. Each emoji class `i` with conditional
/// probability `p_i` is rescored as `p_i / prior_i^alpha`; `alpha = 0`
/// leaves the ranking untouched, larger values bias toward rare emoji.
/// Scores are not renormalized.
#[derive(Debug, Clone)]
pub struct Diversifier {
    prior: Vec<f64>,
    alpha: f64,
}

impl Diversifier {
    pub fn new(prior: Vec<f64>, alpha: f64) -> Result<Self> {
        if prior.is_empty() {
            return Err(Error::InvalidInput("empty class prior".to_owned()));
        }
        if prior.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::InvalidInput(
                "class prior entries must be positive and finite".to_owned(),
            ));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidInput(
                "alpha must be finite and non-negative".to_owned(),
            ));
        }
        let total: f64 = prior.iter().sum();
        Ok(Diversifier {
            prior: prior.into_iter().map(|p| p / total).collect(),
            alpha,
        })
    }

    /// Uniform prior: diversification that changes nothing but the scale.
    pub fn uniform(num_classes: usize, alpha: f64) -> Result<Self> {
        Diversifier::new(vec![1.0; num_classes], alpha)
    }

    pub fn num_classes(&self) -> usize {
        self.prior.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// `score = p / prior^alpha` for one class.
    pub fn score(&self, class: usize, p: f64) -> f64 {
        p / self.prior[class].powf(self.alpha)
    }
}

/// Rescores the emoji probabilities (UNK excluded) and returns all classes
/// sorted by descending score, ties broken by ascending class id.
pub fn diversify(emoji_probs: &[f64], diversifier: &Diversifier) -> Vec<ScoredClass> {
    assert_eq!(
        emoji_probs.len(),
        diversifier.num_classes(),
        "probability vector and prior must cover the same classes"
    );
    let scored: Vec<ScoredClass> = emoji_probs
        .iter()
        .enumerate()
        .map(|(class, &p)| ScoredClass {
            class,
            score: diversifier.score(class, p),
        })
        .collect();
    top_k(scored, emoji_probs.len())
}

/// Sorts by descending score (ascending class id on ties) and keeps `k`.
pub fn top_k(mut scored: Vec<ScoredClass>, k: usize) -> Vec<ScoredClass> {
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.class.cmp(&b.class))
    });
    scored.truncate(k);
    scored
}

/// Estimates the emoji class prior from labeled examples with add-`smoothing`
/// counts, so unseen classes keep a positive prior.
pub fn fit_diversifier(
    examples: &[Example],
    num_emoji: usize,
    alpha: f64,
    smoothing: f64,
) -> Result<Diversifier> {
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidInput("smoothing must be positive".to_owned()));
    }
    let mut counts = vec![0u64; num_emoji];
    for e in examples {
        if e.label < num_emoji {
            counts[e.label] += 1;
        }
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum::<f64>() + smoothing * num_emoji as f64;
    Diversifier::new(
        counts
            .iter()
            .map(|&c| (c as f64 + smoothing) / total)
            .collect(),
        alpha,
    )
}

/// A full prediction for one context.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub triggered: bool,
    pub p_unk: f64,
    /// Raw conditional probabilities, best first.
    pub raw: Vec<ScoredClass>,
    /// Diversified scores, best first.
    pub ranked: Vec<ScoredClass>,
}

/// Composes the pipeline for one token context: class probabilities, the
/// trigger decision on p(UNK), and both raw and diversified top-`k` lists.
pub fn predict(
    params: &Parameters,
    tokens: &[u32],
    trigger: &TriggerConfig,
    diversifier: &Diversifier,
    k: usize,
) -> Result<Prediction> {
    let mut session = Session::new(params);
    let mut probs = Vec::new();
    for &t in tokens {
        probs = predict_incremental(params, &mut session, t)?;
    }
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".to_owned()));
    }
    let emoji_probs = &probs[..probs.len() - 1];
    let raw: Vec<ScoredClass> = emoji_probs
        .iter()
        .enumerate()
        .map(|(class, &score)| ScoredClass { class, score })
        .collect();
    Ok(Prediction {
        triggered: should_trigger(&probs, trigger),
        p_unk: *probs.last().expect("non-empty"),
        raw: top_k(raw, k),
        ranked: top_k(diversify(emoji_probs, diversifier), k),
    })
}

/// Threshold that maximizes F1 of the trigger decision ("show" is the
/// positive prediction) over `(p_unk, has_emoji)` pairs. Candidates are
/// midpoints between adjacent distinct p(UNK) values plus both extremes;
/// ties prefer the smaller threshold.
pub fn calibrate_threshold(scored: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<f64> = scored.iter().map(|&(p, _)| p).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite probabilities"));
    sorted.dedup();

    let mut candidates = vec![0.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(1.0);

    let mut best = (0.0, -1.0);
    for &tau in &candidates {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for &(p_unk, has_emoji) in scored {
            let fired = p_unk < tau;
            match (fired, has_emoji) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
        };
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    best.0
}
