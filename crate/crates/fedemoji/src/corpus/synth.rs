//! Synthetic chat-style corpus generator.
//!
//! Sentences are built from pronounceable pseudowords. Every sentence has a
//! latent topic and draws half its words from that topic's slice of the
//! filler vocabulary, so word co-occurrence carries topical structure a
//! language model can pick up. Each emoji class owns two trigger words that
//! usually appear directly before it (a quarter of emoji positions rely on
//! topical evidence alone), and emoji sentences use their class as the
//! topic, so the mapping from text to emoji is learnable but not fully
//! deterministic; the remaining words are drawn from a Zipf distribution,
//! so a vocabulary cap produces genuine OOV traffic. The emoji/no-emoji
//! split is an exact quota, not a per-sentence coin flip.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::seeding::stream;

/// 100 common emoji, most frequent first; the default inventory.
pub const DEFAULT_EMOJI: [&str; 100] = [
    "😂", "❤️", "😍", "🤣", "😊", "🙏", "💕", "😭", "😘", "👍", "😅", "👏", "😁", "🔥", "💔",
    "💖", "💙", "😢", "🤔", "😆", "🙄", "💪", "😉", "☺️", "👌", "🤗", "💜", "😔", "😎", "😇",
    "🌹", "🤦", "🎉", "💞", "✌️", "✨", "🤷", "😱", "😌", "🌸", "🙌", "😋", "💗", "💚", "😏",
    "💛", "🙂", "💓", "🤩", "😄", "😀", "🖤", "😃", "💯", "🙈", "👇", "🎶", "😒", "🤭", "❣️",
    "😜", "💋", "👀", "😪", "😑", "💥", "🙋", "😞", "😩", "😡", "🤪", "👊", "☀️", "😥", "🤤",
    "👉", "💃", "😳", "✋", "😚", "😝", "😴", "🌟", "😬", "🙃", "🍀", "🌷", "😻", "😓", "⭐",
    "✅", "🌈", "😈", "🤘", "💦", "✔️", "😣", "🏃", "💐", "🎊",
];

/// Shape of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_sentences: usize,
    /// Emoji strings; class id equals position.
    pub emoji: Vec<String>,
    /// Relative emoji class frequencies; same length as `emoji`.
    pub emoji_freqs: Vec<f64>,
    /// Exact fraction of sentences that carry at least one emoji.
    pub emoji_sentence_fraction: f64,
    /// Number of distinct filler words.
    pub filler_vocab: usize,
    /// Zipf exponent for filler word frequencies.
    pub zipf_exponent: f64,
    /// Word-count range for sentences without emoji.
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that an emoji sentence carries a second emoji segment.
    pub second_emoji_prob: f64,
}

const CONSONANTS: [char; 16] = [
    'b', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const NUM_SYLLABLES: usize = CONSONANTS.len() * VOWELS.len();
const MAX_FILLER_VOCAB: usize = NUM_SYLLABLES * NUM_SYLLABLES;

fn syllable(i: usize) -> String {
    let mut s = String::with_capacity(2);
    s.push(CONSONANTS[(i / VOWELS.len()) % CONSONANTS.len()]);
    s.push(VOWELS[i % VOWELS.len()]);
    s
}

/// Two-syllable filler word; injective for `i < MAX_FILLER_VOCAB`.
pub(crate) fn filler_word(i: usize) -> String {
    format!("{}{}", syllable(i / NUM_SYLLABLES), syllable(i))
}

/// Three-syllable trigger word for `(class, variant)`; disjoint from fillers
/// by length and injective because the first two syllables encode the index.
pub(crate) fn trigger_word(class: usize, variant: usize) -> String {
    let base = class * 2 + variant;
    format!(
        "{}{}{}",
        syllable(base / NUM_SYLLABLES),
        syllable(base),
        syllable(base.wrapping_mul(31).wrapping_add(11))
    )
}

/// Geometric class-frequency profile over `n` classes whose largest entry is
/// `top_share`; entries sum to 1 and decrease monotonically.
pub fn light_tailed_freqs(n: usize, top_share: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("no emoji classes".to_owned()));
    }
    let uniform = 1.0 / n as f64;
    if !(top_share < 1.0 && top_share >= uniform - 1e-12) || n == 1 {
        if n == 1 {
            return Ok(vec![1.0]);
        }
        return Err(Error::InvalidInput(format!(
            "top_share {top_share} must lie in [1/{n}, 1)"
        )));
    }
    if (top_share - uniform).abs() < 1e-12 {
        return Ok(vec![uniform; n]);
    }
    // p_i proportional to r^i gives p_0 = (1 - r) / (1 - r^n), which
    // decreases from 1 to 1/n as r goes from 0 to 1; bisect for r.
    let head = |r: f64| (1.0 - r) / (1.0 - r.powi(n as i32));
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if head(mid) > top_share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    let p0 = head(r);
    Ok((0..n).map(|i| p0 * r.powi(i as i32)).collect())
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.num_sentences == 0 {
        return Err(Error::InvalidInput("num_sentences must be positive".to_owned()));
    }
    if spec.emoji.is_empty() {
        return Err(Error::InvalidInput("no emoji classes".to_owned()));
    }
    if spec.emoji_freqs.len() != spec.emoji.len() {
        return Err(Error::InvalidInput(format!(
            "{} emoji but {} frequencies",
            spec.emoji.len(),
            spec.emoji_freqs.len()
        )));
    }
    if spec.emoji_freqs.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::InvalidInput(
            "emoji frequencies must be positive and finite".to_owned(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.emoji_sentence_fraction) {
        return Err(Error::InvalidInput(
            "emoji_sentence_fraction must lie in [0, 1]".to_owned(),
        ));
    }
    if spec.filler_vocab == 0 || spec.filler_vocab > MAX_FILLER_VOCAB {
        return Err(Error::InvalidInput(format!(
            "filler_vocab must lie in [1, {MAX_FILLER_VOCAB}]"
        )));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(Error::InvalidInput(
            "need 1 <= min_words <= max_words".to_owned(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.second_emoji_prob) {
        return Err(Error::InvalidInput(
            "second_emoji_prob must lie in [0, 1]".to_owned(),
        ));
    }
    Ok(())
}

struct Sampler<'a> {
    spec: &'a SynthSpec,
    zipf: Zipf<f64>,
    class_cdf: Vec<f64>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        let zipf = Zipf::new(spec.filler_vocab as f64, spec.zipf_exponent)
            .map_err(|e| Error::InvalidInput(format!("zipf exponent: {e}")))?;
        let total: f64 = spec.emoji_freqs.iter().sum();
        let mut acc = 0.0;
        let class_cdf = spec
            .emoji_freqs
            .iter()
            .map(|f| {
                acc += f / total;
                acc
            })
            .collect();
        Ok(Sampler {
            spec,
            zipf,
            class_cdf,
        })
    }

    fn filler<R: Rng>(&self, rng: &mut R) -> String {
        let rank = self.zipf.sample(rng) as usize;
        filler_word((rank - 1).min(self.spec.filler_vocab - 1))
    }

    /// Half the words come from the topic's contiguous slice of the filler
    /// vocabulary, the rest from the global Zipf distribution.
    fn topical<R: Rng>(&self, rng: &mut R, topic: usize) -> String {
        if rng.random_bool(0.5) {
            let block = (self.spec.filler_vocab / self.spec.emoji.len()).max(1);
            let start = (topic * block) % self.spec.filler_vocab;
            let offset = rng.random_range(0..block);
            filler_word((start + offset) % self.spec.filler_vocab)
        } else {
            self.filler(rng)
        }
    }

    fn class<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.class_cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.class_cdf.len() - 1)
    }

    /// Lead-in words on the class topic, usually the class trigger, then
    /// the emoji. A quarter of segments carry no trigger, so some contexts
    /// support the class only through topical evidence.
    fn emoji_segment<R: Rng>(&self, rng: &mut R, class: usize, words: &mut Vec<String>) {
        for _ in 0..rng.random_range(1..=3) {
            words.push(self.topical(rng, class));
        }
        let with_trigger = rng.random_bool(0.75);
        let with_variant = rng.random_bool(0.4);
        if with_trigger {
            if with_variant {
                words.push(trigger_word(class, 1));
            }
            words.push(trigger_word(class, 0));
        }
        words.push(self.spec.emoji[class].clone());
    }

    fn emoji_sentence<R: Rng>(&self, rng: &mut R) -> String {
        let mut words = Vec::new();
        let class = self.class(rng);
        self.emoji_segment(rng, class, &mut words);
        if rng.random_bool(self.spec.second_emoji_prob) {
            let class = self.class(rng);
            self.emoji_segment(rng, class, &mut words);
        } else if rng.random_bool(0.3) {
            for _ in 0..rng.random_range(1..=2) {
                words.push(self.topical(rng, class));
            }
        }
        words.join(" ")
    }

    /// Topic words without an emoji; the no-emoji counterpart of sentences
    /// about the same subject.
    fn plain_sentence<R: Rng>(&self, rng: &mut R) -> String {
        let topic = self.class(rng);
        let n = rng.random_range(self.spec.min_words..=self.spec.max_words);
        let words: Vec<String> = (0..n).map(|_| self.topical(rng, topic)).collect();
        words.join(" ")
    }
}

/// Generates `spec.num_sentences` sentences; exactly
/// `round(fraction * num_sentences)` of them carry emoji. Output is a pure
/// function of `(spec, seed)`.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<String>> {
    validate(spec)?;
    let sampler = Sampler::new(spec)?;
    let mut rng = stream(seed, "synth", &[]);

    let emoji_count =
        (spec.emoji_sentence_fraction * spec.num_sentences as f64).round() as usize;
    let mut with_emoji = vec![false; spec.num_sentences];
    for flag in with_emoji.iter_mut().take(emoji_count) {
        *flag = true;
    }
    with_emoji.shuffle(&mut rng);

    Ok(with_emoji
        .into_iter()
        .map(|has_emoji| {
            if has_emoji {
                sampler.emoji_sentence(&mut rng)
            } else {
                sampler.plain_sentence(&mut rng)
            }
        })
        .collect())
}

/// Picks `n` emoji from the default table, most frequent first.
pub fn default_inventory(n: usize) -> Result<Vec<String>> {
    if n == 0 || n > DEFAULT_EMOJI.len() {
        return Err(Error::InvalidInput(format!(
            "inventory size {n} must lie in [1, {}]",
            DEFAULT_EMOJI.len()
        )));
    }
    Ok(DEFAULT_EMOJI[..n].iter().map(|s| s.to_string()).collect())
}
