//! Corpus handling: tokenization, vocabulary, emoji inventory, and the
//! conversion of raw sentences into weighted training examples.

mod partition;
mod synth;

pub use partition::{partition_clients, partition_sentences, PartitionSpec};
pub use synth::{default_inventory, light_tailed_freqs, synth_corpus, SynthSpec, DEFAULT_EMOJI};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Reserved vocabulary id for out-of-vocabulary words.
pub const OOV_ID: u32 = 0;
/// Reserved vocabulary id for padding.
pub const PAD_ID: u32 = 1;

const OOV_MARKER: &str = "<OOV>";
const PAD_MARKER: &str = "<PAD>";

/// Word-id vocabulary. Ids 0 and 1 are the OOV and PAD markers; real words
/// follow in descending frequency order, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, ids }
    }

    /// Number of ids, markers included.
    pub fn size(&self) -> usize {
        self.words.len()
    }

    /// Id for `word`, or [`OOV_ID`] if it is not in the vocabulary.
    pub fn id_of(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(OOV_ID)
    }

    /// Word for `id`; markers render as `<OOV>` / `<PAD>`.
    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for w in &self.words {
            text.push_str(w);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_owned).collect();
        if words.len() < 2 || words[0] != OOV_MARKER || words[1] != PAD_MARKER {
            return Err(Error::InvalidInput(format!(
                "vocabulary file {} must start with {OOV_MARKER} and {PAD_MARKER}",
                path.display()
            )));
        }
        let mut seen = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "vocabulary file {}: empty word at line {}",
                    path.display(),
                    i + 1
                )));
            }
            if let Some(prev) = seen.insert(w.clone(), i) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary file {}: duplicate word at lines {} and {}",
                    path.display(),
                    prev + 1,
                    i + 1
                )));
            }
        }
        Ok(Vocabulary::from_words(words))
    }
}

/// Counts words over tokenized sentences and keeps the `target_size - 2`
/// most frequent, after the two marker ids. Ordering is by descending count,
/// then ascending word, so the result is independent of input order.
pub fn build_vocab<I, S>(sentences: I, target_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if target_size < 3 {
        return Err(Error::InvalidInput(format!(
            "vocabulary target size {target_size} leaves no room for words"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sentence in sentences {
        for word in sentence {
            *counts.entry(word.as_ref().to_owned()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(target_size - 2);

    let mut words = Vec::with_capacity(ranked.len() + 2);
    words.push(OOV_MARKER.to_owned());
    words.push(PAD_MARKER.to_owned());
    words.extend(ranked.into_iter().map(|(w, _)| w));
    Ok(Vocabulary::from_words(words))
}

/// The set of emoji the model predicts. Class ids follow file order; the
/// extra class `num_emoji()` stands for "no emoji" (UNK).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmojiInventory {
    emoji: Vec<String>,
    index: HashMap<String, usize>,
}

impl EmojiInventory {
    pub fn new(emoji: Vec<String>) -> Result<Self> {
        if emoji.is_empty() {
            return Err(Error::InvalidInput("empty emoji inventory".to_owned()));
        }
        let mut index = HashMap::new();
        for (i, e) in emoji.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "emoji inventory: empty entry at position {i}"
                )));
            }
            if index.insert(e.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "emoji inventory: duplicate entry `{e}`"
                )));
            }
        }
        Ok(EmojiInventory { emoji, index })
    }

    /// Number of real emoji classes.
    pub fn num_emoji(&self) -> usize {
        self.emoji.len()
    }

    /// Class id of the "no emoji" class.
    pub fn unk_class(&self) -> usize {
        self.emoji.len()
    }

    /// Total softmax classes: emoji plus UNK.
    pub fn num_classes(&self) -> usize {
        self.emoji.len() + 1
    }

    /// Class id for an emoji string, if it is in the inventory.
    pub fn class_of(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    /// Emoji string for a class id; `None` for the UNK class.
    pub fn emoji_of(&self, class: usize) -> Option<&str> {
        self.emoji.get(class).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.emoji {
            text.push_str(e);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmojiInventory::new(text.lines().map(str::to_owned).collect())
    }
}

/// One unit of a tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    /// Normalized word (lowercased, trailing punctuation stripped).
    Word(String),
    /// Inventory emoji, by class id.
    Emoji(usize),
}

/// Splits on whitespace, strips trailing ASCII punctuation, then classifies
/// each piece: inventory members become [`Token::Emoji`], everything else is
/// lowercased into [`Token::Word`]. Pieces empty after stripping are dropped.
pub fn tokenize(line: &str, inventory: &EmojiInventory) -> Vec<Token> {
    let mut out = Vec::new();
    for piece in line.split_whitespace() {
        let stripped = piece.trim_end_matches(|c: char| c.is_ascii_punctuation());
        if stripped.is_empty() {
            continue;
        }
        match inventory.class_of(stripped) {
            Some(class) => out.push(Token::Emoji(class)),
            None => out.push(Token::Word(stripped.to_lowercase())),
        }
    }
    out
}

/// A single training example: a word-id context and the class that follows.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Word ids, oldest first; never empty, at most the extraction cap.
    pub tokens: Vec<u32>,
    /// Emoji class, or the inventory UNK class.
    pub label: usize,
    /// Non-negative sampling weight; zero removes the example from losses.
    pub weight: f64,
}

/// All examples held by one simulated device.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub examples: Vec<Example>,
}

/// Converts one tokenized sentence into examples.
///
/// Each emoji occurrence with at least one preceding word yields an example
/// labeled with that emoji; the context is the word ids seen so far (emoji
/// are never part of the context), truncated to the most recent
/// `max_context`. A sentence with no inventory emoji yields one UNK example
/// over a uniformly random prefix of 1..=word-count words.
pub fn extract_examples<R: Rng>(
    sentence: &[Token],
    vocab: &Vocabulary,
    inventory: &EmojiInventory,
    max_context: usize,
    rng: &mut R,
) -> Vec<Example> {
    assert!(max_context >= 1, "max_context must be at least 1");
    let mut word_ids: Vec<u32> = Vec::new();
    let mut examples = Vec::new();
    let mut saw_emoji = false;

    for token in sentence {
        match token {
            Token::Word(w) => word_ids.push(vocab.id_of(w)),
            Token::Emoji(class) => {
                saw_emoji = true;
                if !word_ids.is_empty() {
                    examples.push(Example {
                        tokens: tail(&word_ids, max_context),
                        label: *class,
                        weight: 1.0,
                    });
                }
            }
        }
    }

    if !saw_emoji && !word_ids.is_empty() {
        let len = rng.random_range(1..=word_ids.len());
        examples.push(Example {
            tokens: tail(&word_ids[..len], max_context),
            label: inventory.unk_class(),
            weight: 1.0,
        });
    }
    examples
}

fn tail(ids: &[u32], max_len: usize) -> Vec<u32> {
    let start = ids.len().saturating_sub(max_len);
    ids[start..].to_vec()
}

/// Sets the weight of UNK-labeled examples to zero with probability
/// `1 - keep_fraction` each; emoji examples and the example list itself are
/// untouched.
pub fn downweight_unk<R: Rng>(
    examples: &mut [Example],
    unk_class: usize,
    keep_fraction: f64,
    rng: &mut R,
) {
    assert!(
        (0.0..=1.0).contains(&keep_fraction),
        "keep_fraction must lie in [0, 1]"
    );
    for e in examples.iter_mut() {
        if e.label == unk_class && !rng.random_bool(keep_fraction) {
            e.weight = 0.0;
        }
    }
}

/// Reads a corpus file: UTF-8 text, one sentence per line. Blank lines are
/// skipped. Errors with "empty corpus" when no sentences remain.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(sentences)
}

/// Writes a corpus file, one sentence per line.
pub fn write_corpus(path: &Path, sentences: &[String]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(s);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;
    use std::collections::HashSet;

    fn inv(emoji: &[&str]) -> EmojiInventory {
        EmojiInventory::new(emoji.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn vocab_orders_by_count_then_word() {
        // Oracle: count words by hand. b:3, a:2, c:1.
        let sentences = vec![vec!["b", "a"], vec!["b", "c", "a"], vec!["b"]];
        let v = build_vocab(sentences, 10).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.word_of(0), Some("<OOV>"));
        assert_eq!(v.word_of(1), Some("<PAD>"));
        assert_eq!(v.word_of(2), Some("b"));
        assert_eq!(v.word_of(3), Some("a"));
        assert_eq!(v.word_of(4), Some("c"));
        assert_eq!(v.id_of("b"), 2);
        assert_eq!(v.id_of("zz"), OOV_ID);
    }

    #[test]
    fn vocab_truncates_to_target() {
        let sentences = vec![vec!["a", "a", "b", "b", "c"]];
        let v = build_vocab(sentences, 4).unwrap();
        // Two slots for words: a and b (count 2), c dropped.
        assert_eq!(v.size(), 4);
        assert_eq!(v.id_of("c"), OOV_ID);
        assert_ne!(v.id_of("a"), OOV_ID);
    }

    #[test]
    fn vocab_is_input_order_independent() {
        let a = build_vocab(vec![vec!["x", "y"], vec!["y"]], 8).unwrap();
        let b = build_vocab(vec![vec!["y"], vec!["y", "x"]], 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        let empty: Vec<Vec<&str>> = vec![];
        match build_vocab(empty, 10) {
            Err(Error::EmptyCorpus) => {}
            other => panic!("expected empty corpus error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(vec![vec!["hey", "there", "hey"]], 10).unwrap();
        v.write(&path).unwrap();
        let back = Vocabulary::read(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn vocab_read_rejects_missing_markers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "hello\nworld\n").unwrap();
        assert!(Vocabulary::read(&path).is_err());
    }

    #[test]
    fn inventory_classes_and_unk() {
        let i = inv(&["😂", "🔥", "💯"]);
        assert_eq!(i.num_emoji(), 3);
        assert_eq!(i.unk_class(), 3);
        assert_eq!(i.num_classes(), 4);
        assert_eq!(i.class_of("🔥"), Some(1));
        assert_eq!(i.class_of("🙃"), None);
        assert_eq!(i.emoji_of(0), Some("😂"));
        assert_eq!(i.emoji_of(3), None);
    }

    #[test]
    fn inventory_rejects_duplicates() {
        assert!(EmojiInventory::new(vec!["😂".into(), "😂".into()]).is_err());
        assert!(EmojiInventory::new(vec![]).is_err());
    }

    #[test]
    fn inventory_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inventory.txt");
        let i = inv(&["😂", "🔥"]);
        i.write(&path).unwrap();
        assert_eq!(EmojiInventory::read(&path).unwrap(), i);
    }

    #[test]
    fn tokenize_normalizes_words() {
        let i = inv(&["😂"]);
        let toks = tokenize("Hey THERE!! you're 😂, ok...", &i);
        assert_eq!(
            toks,
            vec![
                Token::Word("hey".into()),
                Token::Word("there".into()),
                Token::Word("you're".into()),
                Token::Emoji(0),
                Token::Word("ok".into()),
            ]
        );
    }

    #[test]
    fn tokenize_strips_trailing_punct_before_emoji_lookup() {
        let i = inv(&["😂"]);
        assert_eq!(tokenize("😂!", &i), vec![Token::Emoji(0)]);
    }

    #[test]
    fn tokenize_drops_pure_punctuation() {
        let i = inv(&["😂"]);
        assert_eq!(tokenize("-- !!! ..", &i), vec![]);
    }

    #[test]
    fn tokenize_non_inventory_emoji_is_a_word() {
        let i = inv(&["😂"]);
        assert_eq!(tokenize("🙃", &i), vec![Token::Word("🙃".into())]);
    }

    /// Oracle: scan positions by hand for "hi 😂 ok 😂".
    /// Emoji never enter the context, so the two examples have contexts
    /// ["hi"] and ["hi", "ok"].
    #[test]
    fn extract_examples_per_emoji_occurrence() {
        let i = inv(&["😂"]);
        let v = build_vocab(vec![vec!["hi", "ok"]], 10).unwrap();
        let sentence = tokenize("hi 😂 ok 😂", &i);
        let mut rng = stream(0, "test", &[]);
        let ex = extract_examples(&sentence, &v, &i, 20, &mut rng);
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].tokens, vec![v.id_of("hi")]);
        assert_eq!(ex[0].label, 0);
        assert_eq!(ex[1].tokens, vec![v.id_of("hi"), v.id_of("ok")]);
        assert_eq!(ex[1].label, 0);
        assert!(ex.iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn extract_leading_emoji_has_no_example() {
        let i = inv(&["😂"]);
        let v = build_vocab(vec![vec!["hi"]], 10).unwrap();
        let sentence = tokenize("😂 hi", &i);
        let mut rng = stream(0, "test", &[]);
        // The emoji has no preceding words and the sentence contains an
        // emoji, so no UNK example either.
        assert!(extract_examples(&sentence, &v, &i, 20, &mut rng).is_empty());
    }

    #[test]
    fn extract_emoji_only_sentence_is_empty() {
        let i = inv(&["😂"]);
        let v = build_vocab(vec![vec!["hi"]], 10).unwrap();
        let sentence = tokenize("😂 😂", &i);
        let mut rng = stream(0, "test", &[]);
        assert!(extract_examples(&sentence, &v, &i, 20, &mut rng).is_empty());
    }

    #[test]
    fn extract_unk_prefix_lengths_cover_full_range() {
        let i = inv(&["😂"]);
        let v = build_vocab(vec![vec!["a", "b", "c"]], 10).unwrap();
        let sentence = tokenize("a b c", &i);
        let mut lens = HashSet::new();
        for k in 0..200 {
            let mut rng = stream(9, "test", &[k]);
            let ex = extract_examples(&sentence, &v, &i, 20, &mut rng);
            assert_eq!(ex.len(), 1);
            assert_eq!(ex[0].label, i.unk_class());
            // Prefix: tokens must be the first `len` word ids.
            let want: Vec<u32> = ["a", "b", "c"][..ex[0].tokens.len()]
                .iter()
                .map(|w| v.id_of(w))
                .collect();
            assert_eq!(ex[0].tokens, want);
            lens.insert(ex[0].tokens.len());
        }
        assert_eq!(lens, HashSet::from([1, 2, 3]));
    }

    #[test]
    fn extract_caps_context_to_most_recent() {
        let i = inv(&["😂"]);
        let words: Vec<String> = (0..30).map(|k| format!("w{k}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let v = build_vocab(vec![refs.clone()], 64).unwrap();
        let line = format!("{} 😂", words.join(" "));
        let sentence = tokenize(&line, &i);
        let mut rng = stream(0, "test", &[]);
        let ex = extract_examples(&sentence, &v, &i, 20, &mut rng);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].tokens.len(), 20);
        // Most recent 20 words: w10..w29.
        assert_eq!(ex[0].tokens[0], v.id_of("w10"));
        assert_eq!(ex[0].tokens[19], v.id_of("w29"));
    }

    #[test]
    fn extract_oov_words_map_to_oov_id() {
        let i = inv(&["😂"]);
        let v = build_vocab(vec![vec!["hi"]], 10).unwrap();
        let sentence = tokenize("hi zzz 😂", &i);
        let mut rng = stream(0, "test", &[]);
        let ex = extract_examples(&sentence, &v, &i, 20, &mut rng);
        assert_eq!(ex[0].tokens, vec![v.id_of("hi"), OOV_ID]);
    }

    #[test]
    fn downweight_touches_only_unk_weights() {
        let unk = 2;
        let mut examples: Vec<Example> = (0..2000)
            .map(|k| Example {
                tokens: vec![0],
                label: if k % 2 == 0 { unk } else { 0 },
                weight: 1.0,
            })
            .collect();
        let before = examples.clone();
        let mut rng = stream(3, "downweight", &[]);
        downweight_unk(&mut examples, unk, 0.1, &mut rng);

        let mut kept = 0;
        for (b, a) in before.iter().zip(&examples) {
            assert_eq!(b.tokens, a.tokens);
            assert_eq!(b.label, a.label);
            if a.label != unk {
                assert_eq!(a.weight, 1.0);
            } else if a.weight == 1.0 {
                kept += 1;
            } else {
                assert_eq!(a.weight, 0.0);
            }
        }
        // 1000 UNK examples, keep_fraction 0.1: binomial(1000, 0.1) stays
        // within [60, 160] with overwhelming probability.
        assert!((60..=160).contains(&kept), "kept {kept} of 1000");
    }

    #[test]
    fn downweight_keep_fraction_one_is_identity() {
        let mut examples = vec![Example {
            tokens: vec![1],
            label: 5,
            weight: 1.0,
        }];
        let before = examples.clone();
        let mut rng = stream(0, "downweight", &[]);
        downweight_unk(&mut examples, 5, 1.0, &mut rng);
        assert_eq!(examples, before);
    }

    #[test]
    fn corpus_roundtrip_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "hello there\n\n  \nbye 😂\n").unwrap();
        let got = read_corpus(&path).unwrap();
        assert_eq!(got, vec!["hello there".to_owned(), "bye 😂".to_owned()]);
    }

    #[test]
    fn corpus_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "\n  \n").unwrap();
        match read_corpus(&path) {
            Err(Error::EmptyCorpus) => {}
            other => panic!("expected empty corpus error, got {other:?}"),
        }
    }
}
