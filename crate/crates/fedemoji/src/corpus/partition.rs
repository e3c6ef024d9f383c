//! Assignment of sentences to simulated clients.
//!
//! Client sizes follow a log-normal profile controlled by `dispersion`, and
//! each client leans toward one preferred emoji class with strength `skew`,
//! so the population is non-IID in both size and label distribution while
//! still covering every sentence exactly once.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{extract_examples, ClientDataset, EmojiInventory, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::seeding::stream;

/// Shape of a client population.
#[derive(Debug, Clone)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Declared mean sentences per client; the realized mean is
    /// `sentences / num_clients`, this field documents intent and sizes
    /// synthetic corpora.
    pub sentences_per_client: f64,
    /// Log-normal sigma of relative client sizes; 0 gives equal sizes.
    pub dispersion: f64,
    /// Declared fraction of emoji-bearing sentences; quotas use the actual
    /// per-corpus counts.
    pub emoji_sentence_fraction: f64,
    /// Probability that an emoji slot is filled from the client's preferred
    /// class; 0 mixes classes uniformly, 1 concentrates them.
    pub skew: f64,
    pub seed: u64,
}

impl PartitionSpec {
    fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidInput("num_clients must be positive".to_owned()));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::InvalidInput("skew must lie in [0, 1]".to_owned()));
        }
        if !self.dispersion.is_finite() || self.dispersion < 0.0 {
            return Err(Error::InvalidInput(
                "dispersion must be finite and non-negative".to_owned(),
            ));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` units over `weights`.
/// Quotas sum to `total` exactly; ties go to lower indices.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    assert!(wsum > 0.0, "weights must have positive sum");
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| total as f64 * w / wsum)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Moves units from the largest buckets until every bucket has at least one.
fn ensure_min_one(counts: &mut [usize]) {
    loop {
        let Some(zero) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..counts.len())
            .max_by_key(|&i| counts[i])
            .expect("non-empty counts");
        assert!(counts[donor] > 1, "not enough sentences to cover clients");
        counts[donor] -= 1;
        counts[zero] += 1;
    }
}

/// First emoji class of a sentence, or `None` for a plain sentence.
fn primary_class(sentence: &[Token]) -> Option<usize> {
    sentence.iter().find_map(|t| match t {
        Token::Emoji(c) => Some(*c),
        Token::Word(_) => None,
    })
}

/// Splits sentence indices into one list per client. Every index appears
/// exactly once; every client receives at least one sentence.
pub fn partition_sentences(
    sentences: &[Vec<Token>],
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = sentences.len();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if n < spec.num_clients {
        return Err(Error::PopulationUnderfilled {
            sentences: n,
            clients: spec.num_clients,
        });
    }
    let mut rng = stream(spec.seed, "partition", &[]);

    // Client sizes.
    let weights: Vec<f64> = (0..spec.num_clients)
        .map(|_| {
            if spec.dispersion == 0.0 {
                1.0
            } else {
                let z: f64 = StandardNormal.sample(&mut rng);
                (spec.dispersion * z).exp()
            }
        })
        .collect();
    let mut counts = apportion(n, &weights);
    ensure_min_one(&mut counts);

    // Pools by class, shuffled so pops are random draws.
    let num_classes = sentences
        .iter()
        .filter_map(|s| primary_class(s))
        .max()
        .map_or(0, |c| c + 1);
    let mut class_pool: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut plain_pool: Vec<usize> = Vec::new();
    for (idx, s) in sentences.iter().enumerate() {
        match primary_class(s) {
            Some(c) => class_pool[c].push(idx),
            None => plain_pool.push(idx),
        }
    }
    for pool in class_pool.iter_mut() {
        pool.shuffle(&mut rng);
    }
    plain_pool.shuffle(&mut rng);

    let total_emoji: usize = class_pool.iter().map(Vec::len).sum();
    let class_freqs: Vec<f64> = class_pool
        .iter()
        .map(|p| p.len() as f64)
        .collect();

    // Per-client emoji quotas, proportional to client size and capped by it.
    let size_weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mut emoji_quota = apportion(total_emoji, &size_weights);
    redistribute_excess(&mut emoji_quota, &counts);

    // Preferred class per client. Preference slots are apportioned to the
    // global class profile (rather than sampled) so demand for each class
    // tracks its supply and high skew can actually concentrate clients.
    let preferred: Vec<usize> = if total_emoji == 0 {
        vec![0; spec.num_clients]
    } else {
        let slots = apportion(spec.num_clients, &class_freqs);
        let mut list: Vec<usize> = slots
            .iter()
            .enumerate()
            .flat_map(|(c, &m)| std::iter::repeat(c).take(m))
            .collect();
        list.shuffle(&mut rng);
        list
    };

    let mut remaining: Vec<usize> = class_pool.iter().map(Vec::len).collect();
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
    for k in 0..spec.num_clients {
        for _ in 0..emoji_quota[k] {
            let want_preferred =
                spec.skew > 0.0 && remaining[preferred[k]] > 0 && rng.random_bool(spec.skew);
            let class = if want_preferred {
                preferred[k]
            } else {
                sample_index(&remaining.iter().map(|&r| r as f64).collect::<Vec<_>>(), &mut rng)
            };
            assignment[k].push(class_pool[class].pop().expect("pool tracked by remaining"));
            remaining[class] -= 1;
        }
    }
    for (k, quota) in counts.iter().enumerate() {
        for _ in 0..quota - emoji_quota[k] {
            assignment[k].push(plain_pool.pop().expect("plain pool sized by counts"));
        }
        assignment[k].shuffle(&mut rng);
    }
    debug_assert_eq!(assignment.iter().map(Vec::len).sum::<usize>(), n);
    Ok(assignment)
}

/// Clamps quotas at `cap` and hands the excess to clients with slack.
fn redistribute_excess(quota: &mut [usize], cap: &[usize]) {
    let mut excess = 0;
    for (q, &c) in quota.iter_mut().zip(cap) {
        if *q > c {
            excess += *q - c;
            *q = c;
        }
    }
    let mut k = 0;
    while excess > 0 {
        if quota[k] < cap[k] {
            quota[k] += 1;
            excess -= 1;
        }
        k = (k + 1) % quota.len();
    }
}

/// Index sampled proportionally to non-negative weights.
fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "cannot sample from empty weights");
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 && w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).expect("positive weight")
}

/// Partitions sentences and extracts each client's examples. Truncation
/// randomness is drawn per client from `(seed, "extract", client_id)`, so
/// the result is independent of scheduling. Clients whose sentences yield
/// no examples are dropped.
pub fn partition_clients(
    sentences: &[Vec<Token>],
    spec: &PartitionSpec,
    vocab: &Vocabulary,
    inventory: &EmojiInventory,
    max_context: usize,
) -> Result<Vec<ClientDataset>> {
    let assignment = partition_sentences(sentences, spec)?;
    let mut clients = Vec::with_capacity(assignment.len());
    for (k, idxs) in assignment.iter().enumerate() {
        let mut rng = stream(spec.seed, "extract", &[k as u64]);
        let mut examples = Vec::new();
        for &idx in idxs {
            examples.extend(extract_examples(
                &sentences[idx],
                vocab,
                inventory,
                max_context,
                &mut rng,
            ));
        }
        if !examples.is_empty() {
            clients.push(ClientDataset {
                client_id: k as u32,
                examples,
            });
        }
    }
    Ok(clients)
}
