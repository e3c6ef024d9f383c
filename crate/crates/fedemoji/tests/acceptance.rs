//! System-level acceptance checks: exact numeric contracts (gradients,
//! aggregation, metrics, reproducibility) and the qualitative training
//! trends the simulator is expected to show at desk scale. Each test
//! prints one PASS line with its measured evidence.

use std::fs;
use std::path::Path;

use fedemoji::corpus::{
    build_vocab, default_inventory, downweight_unk, light_tailed_freqs, partition_clients,
    synth_corpus, tokenize, ClientDataset, EmojiInventory, Example, PartitionSpec, SynthSpec,
    Token, Vocabulary,
};
use fedemoji::fedsim::{
    federated_eval, run_round, score_examples, split_population, train_federated,
    FederationConfig, FederationState, TrainResult, TrainSetup,
};
use fedemoji::inference::{
    diversify, predict_incremental, should_trigger, Diversifier, Session, TriggerConfig,
};
use fedemoji::metrics::{accuracy_at_1, auc_roc, ScoredLabel};
use fedemoji::model::{
    forward, loss_and_grads, softmax, train_lm, transfer_from_lm, LmConfig, LmParameters,
    LmTrainConfig, ModelConfig, Parameters,
};
use fedemoji::optim::{clip_gradients, ClientOptConfig, ServerOptimizer, ServerRule};
use fedemoji::seeding::stream;
use rand::Rng;

const EMBED_DIM: usize = 16;
const HIDDEN_DIM: usize = 24;
const NUM_LAYERS: usize = 2;
const NUM_EMOJI: usize = 8;
const MAX_CONTEXT: usize = 20;

struct Scenario {
    train: Vec<ClientDataset>,
    eval: Vec<ClientDataset>,
    vocab: Vocabulary,
    /// Word-id sequences of every sentence, for language model pretraining.
    seqs: Vec<Vec<u32>>,
    mc: ModelConfig,
}

/// Population shape knobs. The corpus is always imbalanced (~3% of
/// sentences carry an emoji, the rest label UNK); `vocab_target` below the
/// full word inventory pushes tail fillers and rare-class trigger words
/// out of vocabulary, which makes the task partly inseparable.
struct Pop {
    num_clients: usize,
    sentences_per_client: f64,
    keep_fraction: f64,
    filler_vocab: usize,
    vocab_target: usize,
}

/// Synthesizes a corpus and partitions it into client populations, the
/// same preprocessing the command line pipeline performs.
fn scenario_with(seed: u64, pop: &Pop) -> Scenario {
    let emoji_fraction = 0.03;
    let emoji = default_inventory(NUM_EMOJI).unwrap();
    let spec = SynthSpec {
        num_sentences: (pop.num_clients as f64 * pop.sentences_per_client).round() as usize,
        emoji: emoji.clone(),
        emoji_freqs: light_tailed_freqs(NUM_EMOJI, 0.3).unwrap(),
        emoji_sentence_fraction: emoji_fraction,
        filler_vocab: pop.filler_vocab,
        zipf_exponent: 1.05,
        min_words: 3,
        max_words: 10,
        second_emoji_prob: 0.08,
    };
    let sentences = synth_corpus(&spec, seed).unwrap();
    let inventory = EmojiInventory::new(emoji).unwrap();
    let word_sentences: Vec<Vec<String>> = sentences
        .iter()
        .map(|s| {
            tokenize(s, &inventory)
                .into_iter()
                .filter_map(|t| match t {
                    Token::Word(w) => Some(w),
                    Token::Emoji(_) => None,
                })
                .collect()
        })
        .collect();
    let vocab = build_vocab(word_sentences.iter(), pop.vocab_target).unwrap();
    let seqs: Vec<Vec<u32>> = word_sentences
        .iter()
        .map(|ws| ws.iter().map(|w| vocab.id_of(w)).collect::<Vec<u32>>())
        .filter(|ids| ids.len() >= 2)
        .collect();

    let tokenized: Vec<Vec<Token>> = sentences.iter().map(|s| tokenize(s, &inventory)).collect();
    let pspec = PartitionSpec {
        num_clients: pop.num_clients,
        sentences_per_client: pop.sentences_per_client,
        dispersion: 0.3,
        emoji_sentence_fraction: emoji_fraction,
        skew: 0.5,
        seed,
    };
    let clients = partition_clients(&tokenized, &pspec, &vocab, &inventory, MAX_CONTEXT).unwrap();
    let (mut train, eval) = split_population(clients, 0.2, seed).unwrap();
    for ds in &mut train {
        let mut rng = stream(seed, "downweight", &[u64::from(ds.client_id)]);
        downweight_unk(&mut ds.examples, inventory.unk_class(), pop.keep_fraction, &mut rng);
    }
    let mc = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: EMBED_DIM,
        num_layers: NUM_LAYERS,
        hidden_dim: HIDDEN_DIM,
        num_classes: inventory.num_classes(),
    };
    Scenario {
        train,
        eval,
        vocab,
        seqs,
        mc,
    }
}

/// Fully learnable variant: every trigger word stays in vocabulary.
fn scenario(seed: u64, num_clients: usize, sentences_per_client: f64) -> Scenario {
    scenario_with(
        seed,
        &Pop {
            num_clients,
            sentences_per_client,
            keep_fraction: 0.01,
            filler_vocab: 80,
            vocab_target: 200,
        },
    )
}

/// Partly inseparable variant for the batch contrast: tail fillers and
/// rare-class triggers fall out of vocabulary, so per-example gradients
/// stay noisy near the optimum and single-example steps wander.
fn drift_pop() -> Pop {
    Pop {
        num_clients: 60,
        sentences_per_client: 400.0,
        keep_fraction: 0.2,
        filler_vocab: 200,
        vocab_target: 150,
    }
}

struct RunKnobs {
    rule: ServerRule,
    client_lr: f64,
    batch_size: usize,
    devices_per_round: usize,
    total_rounds: usize,
    eval_every: usize,
    seed: u64,
}

fn fed_train(sc: &Scenario, init: Parameters, knobs: &RunKnobs, out: Option<&Path>) -> TrainResult {
    let setup = TrainSetup {
        init,
        velocity: None,
        start_round: 0,
        rule: knobs.rule,
        server_lr: 1.0,
        client: ClientOptConfig {
            learning_rate: knobs.client_lr,
            batch_size: knobs.batch_size,
            epochs: 1,
            clip_norm: 5.0,
        },
        fed: FederationConfig {
            devices_per_round: knobs.devices_per_round,
            total_rounds: knobs.total_rounds,
            eval_every: knobs.eval_every,
            eval_clients: sc.eval.len(),
            availability: 1.0,
            parallel: true,
            seed: knobs.seed,
        },
    };
    train_federated(setup, &sc.train, &sc.eval, out, &mut |_| {}).unwrap()
}

fn final_eval(result: &TrainResult) -> (f64, f64) {
    let (_, outcome) = result.evals.last().unwrap();
    (
        outcome.accuracy_at_1.expect("accuracy defined"),
        outcome.auc.expect("auc defined"),
    )
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

#[test]
fn c01_backprop_matches_finite_differences() {
    let cfg = ModelConfig {
        vocab_size: 50,
        embed_dim: 8,
        num_layers: 2,
        hidden_dim: 12,
        num_classes: 6,
    };
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in [11u64, 12, 13] {
        let params = Parameters::init(cfg, seed);
        let mut rng = stream(seed, "fd-batch", &[]);
        let batch: Vec<Example> = (0..4)
            .map(|i| Example {
                tokens: (0..rng.random_range(2..=6))
                    .map(|_| rng.random_range(0..50))
                    .collect(),
                label: rng.random_range(0..6),
                weight: [1.0, 2.0, 0.5, 1.0][i % 4],
            })
            .collect();
        let (_, grads) = loss_and_grads(&params, &batch).unwrap();
        let flat_g = grads.flatten();
        let flat_p = params.flatten();
        let dim = flat_p.len();
        for probe in 0..80 {
            let k = stream(seed, "fd-coord", &[probe]).random_range(0..dim as u64) as usize;
            let mut plus = flat_p.clone();
            plus[k] += eps;
            let mut minus = flat_p.clone();
            minus[k] -= eps;
            let lp = loss_and_grads(&Parameters::from_flat(cfg, &plus).unwrap(), &batch)
                .unwrap()
                .0;
            let lm = loss_and_grads(&Parameters::from_flat(cfg, &minus).unwrap(), &batch)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (flat_g[k] - fd).abs() / flat_g[k].abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "coordinate {k}: analytic {} vs finite difference {fd}, rel {rel}",
                flat_g[k]
            );
        }
    }
    println!("PASS c01: max relative gradient error {worst:.2e} < 1e-3 (240 coordinates, 3 seeds)");
}

#[test]
fn c02_coupled_gate_parameter_budget() {
    let prod = ModelConfig {
        vocab_size: 10_000,
        embed_dim: 96,
        num_layers: 2,
        hidden_dim: 256,
        num_classes: 101,
    };
    assert_eq!(prod.param_count(), 1_651_045);
    let params = Parameters::init(prod, 1);
    assert_eq!(params.flatten().len(), 1_651_045);

    // Per layer the three coupled gates cost exactly 3/4 of the classic
    // four-gate cell.
    for l in 0..prod.num_layers {
        let ours = prod.gate_param_count(l);
        let input_dim = prod.layer_input_dim(l);
        let four_gate = 4 * ((input_dim + prod.hidden_dim) * prod.hidden_dim + prod.hidden_dim);
        assert_eq!(4 * ours, 3 * four_gate, "layer {l}");
    }
    println!(
        "PASS c02: 1651045 parameters allocated and recurrent gates at exactly 3/4 of a four-gate cell"
    );
}

#[test]
fn c03_single_client_round_equals_central_step() {
    let sc = scenario(31, 20, 30.0);
    let client = sc
        .train
        .iter()
        .max_by_key(|d| d.examples.iter().filter(|e| e.weight > 0.0).count())
        .unwrap()
        .clone();
    let init = Parameters::init(sc.mc, 7);

    // Central: one full-batch clipped gradient step at the client rate.
    let lr = 0.5;
    let mut expected = init.clone();
    let (_, mut grads) = loss_and_grads(&init, &client.examples).unwrap();
    clip_gradients(&mut grads, 5.0).unwrap();
    expected.add_scaled(&grads, -lr);

    // Federated: one round, one client, one epoch, batch covering all
    // examples, unit server rate.
    let population = vec![client];
    let mut state = FederationState {
        global: init,
        server: ServerOptimizer::new(ServerRule::Sgd, 1.0, sc.mc.param_count()),
        round: 0,
        config: FederationConfig {
            devices_per_round: 1,
            total_rounds: 1,
            eval_every: 1,
            eval_clients: 1,
            availability: 1.0,
            parallel: false,
            seed: 3,
        },
    };
    let report = run_round(
        &mut state,
        &population,
        &ClientOptConfig {
            learning_rate: lr,
            batch_size: 100_000,
            epochs: 1,
            clip_norm: 5.0,
        },
    )
    .unwrap();
    assert!(!report.skipped);

    let a = state.global.flatten();
    let b = expected.flatten();
    let max_diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_diff < 1e-9,
        "single-client round differs from central step by {max_diff}"
    );
    println!("PASS c03: one-client round equals the centralized step (max diff {max_diff:.2e} < 1e-9)");
}

#[test]
fn c04_larger_client_batches_improve_quality() {
    // Clients hold enough surviving examples that batch size 1 performs
    // dozens of full-rate single-example steps per round; the resulting
    // local drift is what the batch contrast measures.
    let mut acc = [[0.0; 3]; 2];
    let mut auc = [[0.0; 3]; 2];
    for (s, seed) in [41u64, 42, 43].into_iter().enumerate() {
        let sc = scenario_with(seed, &drift_pop());
        for (b, batch_size) in [1usize, 50].into_iter().enumerate() {
            let knobs = RunKnobs {
                rule: ServerRule::Nesterov { momentum: 0.9 },
                client_lr: 2.0,
                batch_size,
                devices_per_round: 10,
                total_rounds: 120,
                eval_every: 120,
                seed,
            };
            let result = fed_train(&sc, Parameters::init(sc.mc, seed), &knobs, None);
            let (a, u) = final_eval(&result);
            println!("c04 seed {seed} batch {batch_size}: acc {a:.4} auc {u:.4}");
            acc[b][s] = a;
            auc[b][s] = u;
        }
    }
    let (acc1, acc50) = (median3(acc[0]), median3(acc[1]));
    let (auc1, auc50) = (median3(auc[0]), median3(auc[1]));
    println!(
        "c04 medians over 3 seeds: batch 1 acc {acc1:.4} auc {auc1:.4}; batch 50 acc {acc50:.4} auc {auc50:.4}"
    );
    assert!(
        acc50 > acc1,
        "batch 50 accuracy {acc50:.4} not above batch 1 accuracy {acc1:.4}"
    );
    assert!(
        auc50 > auc1,
        "batch 50 auc {auc50:.4} not above batch 1 auc {auc1:.4}"
    );
    println!("PASS c04: batch 50 beats batch 1 on both accuracy ({acc50:.4} > {acc1:.4}) and auc ({auc50:.4} > {auc1:.4})");
}

#[test]
fn c05_more_devices_per_round_do_not_hurt() {
    let mut acc = [[0.0; 3]; 2];
    for (s, seed) in [51u64, 52, 53].into_iter().enumerate() {
        let sc = scenario(seed, 120, 200.0);
        for (k, devices) in [5usize, 50].into_iter().enumerate() {
            let knobs = RunKnobs {
                rule: ServerRule::Nesterov { momentum: 0.9 },
                client_lr: 0.5,
                batch_size: 10,
                devices_per_round: devices,
                total_rounds: 40,
                eval_every: 40,
                seed,
            };
            let result = fed_train(&sc, Parameters::init(sc.mc, seed), &knobs, None);
            acc[k][s] = final_eval(&result).0;
            println!("c05 seed {seed} devices {devices}: acc {:.4}", acc[k][s]);
        }
    }
    let (acc5, acc50) = (median3(acc[0]), median3(acc[1]));
    println!("c05 medians over 3 seeds: 5 devices acc {acc5:.4}; 50 devices acc {acc50:.4}");
    assert!(
        acc50 >= acc5,
        "50 devices per round ({acc50:.4}) fell below 5 devices per round ({acc5:.4})"
    );
    println!("PASS c05: accuracy does not degrade from 5 to 50 devices per round ({acc5:.4} -> {acc50:.4})");
}

/// First round whose mean training loss reaches `target`, if any.
fn rounds_to_loss(result: &TrainResult, target: f64) -> Option<usize> {
    result
        .rounds
        .iter()
        .find(|r| r.mean_train_loss.is_some_and(|l| l <= target))
        .map(|r| r.round)
}

#[test]
fn c06_momentum_reaches_loss_target_sooner() {
    let target = 0.25;
    let mut rounds = [[0.0; 3]; 2];
    for (s, seed) in [61u64, 62, 63].into_iter().enumerate() {
        let sc = scenario(seed, 120, 200.0);
        for (r, rule) in [ServerRule::Sgd, ServerRule::Nesterov { momentum: 0.9 }]
            .into_iter()
            .enumerate()
        {
            let knobs = RunKnobs {
                rule,
                client_lr: 0.5,
                batch_size: 10,
                devices_per_round: 10,
                total_rounds: 400,
                eval_every: 400,
                seed,
            };
            let result = fed_train(&sc, Parameters::init(sc.mc, seed), &knobs, None);
            let hit = rounds_to_loss(&result, target);
            println!("c06 seed {seed} rule {rule:?}: target {target} reached at {hit:?}");
            rounds[r][s] = hit.map_or(f64::INFINITY, |h| h as f64);
        }
    }
    let (sgd, nesterov) = (median3(rounds[0]), median3(rounds[1]));
    println!("c06 medians over 3 seeds: sgd {sgd} rounds, momentum {nesterov} rounds to loss {target}");
    assert!(
        nesterov.is_finite() && sgd.is_finite(),
        "a server rule never reached training loss {target} within budget (sgd {sgd}, momentum {nesterov})"
    );
    assert!(
        nesterov < sgd,
        "momentum ({nesterov} rounds) not faster than plain sgd ({sgd} rounds) to loss {target}"
    );
    println!("PASS c06: momentum reaches training loss {target} in {nesterov} rounds vs {sgd} for sgd");
}

#[test]
fn c07_pretrained_init_halves_rounds_to_target() {
    let target_acc = 0.60;
    let eval_every = 5;
    let mut rounds = [[0.0; 3]; 2];
    for (s, seed) in [71u64, 72, 73].into_iter().enumerate() {
        let sc = scenario(seed, 120, 50.0);

        let lm_cfg = LmConfig {
            vocab_size: sc.vocab.size(),
            embed_dim: EMBED_DIM,
            num_layers: NUM_LAYERS,
            hidden_dim: HIDDEN_DIM,
        };
        let (lm, _) = train_lm(
            LmParameters::init(lm_cfg, seed),
            &sc.seqs,
            &LmTrainConfig {
                learning_rate: 0.5,
                batch_size: 16,
                epochs: 8,
                clip_norm: 5.0,
                seed,
            },
        )
        .unwrap();
        let transferred = transfer_from_lm(&lm, sc.mc, seed).unwrap();

        for (i, init) in [Parameters::init(sc.mc, seed), transferred]
            .into_iter()
            .enumerate()
        {
            let knobs = RunKnobs {
                rule: ServerRule::Nesterov { momentum: 0.9 },
                client_lr: 0.5,
                batch_size: 10,
                devices_per_round: 10,
                total_rounds: 150,
                eval_every,
                seed,
            };
            let result = fed_train(&sc, init, &knobs, None);
            let hit = result
                .evals
                .iter()
                .find(|(r, o)| *r > 0 && o.accuracy_at_1.is_some_and(|a| a >= target_acc))
                .map(|(r, _)| *r);
            println!(
                "c07 seed {seed} {}: accuracy {target_acc} reached at {hit:?}",
                if i == 0 { "random init" } else { "transferred" }
            );
            rounds[i][s] = hit.map_or(f64::INFINITY, |h| h as f64);
        }
    }
    let (random, transferred) = (median3(rounds[0]), median3(rounds[1]));
    println!(
        "c07 medians over 3 seeds: random {random} rounds, transferred {transferred} rounds to accuracy {target_acc}"
    );
    assert!(
        transferred.is_finite(),
        "transferred runs never reached accuracy {target_acc}"
    );
    assert!(
        transferred <= 0.5 * random,
        "transferred init took {transferred} rounds, more than half of random init's {random}"
    );
    println!(
        "PASS c07: pretrained init reaches accuracy {target_acc} in {transferred} rounds, at most half of {random}"
    );
}

#[test]
fn c08_diversified_ranking_properties() {
    // (a) and (b): exact scoring contracts on synthetic distributions.
    let mut rng = stream(81, "div", &[]);
    let prior: Vec<f64> = light_tailed_freqs(NUM_EMOJI, 0.3).unwrap();
    for _ in 0..200 {
        let mut probs: Vec<f64> = (0..NUM_EMOJI).map(|_| rng.random::<f64>()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }

        let identity = Diversifier::new(prior.clone(), 0.0).unwrap();
        let ranked0 = diversify(&probs, &identity);
        for s in &ranked0 {
            assert_eq!(s.score.to_bits(), probs[s.class].to_bits(), "alpha 0 must be identity");
        }
        for w in ranked0.windows(2) {
            assert!(w[0].score >= w[1].score);
        }

        let div = Diversifier::new(prior.clone(), 0.7).unwrap();
        let ranked = diversify(&probs, &div);
        let prior_total: f64 = prior.iter().sum();
        for s in &ranked {
            let independent = probs[s.class] / (prior[s.class] / prior_total).powf(0.7);
            assert!(
                (s.score - independent).abs() <= 1e-12 * independent.abs().max(1.0),
                "score formula mismatch: {} vs {independent}",
                s.score
            );
        }
    }

    // (c): after training on a frequency-skewed corpus, raising alpha from
    // 0 to 0.7 strictly reduces how often the most frequent emoji occupies
    // the first suggestion slot on contexts that precede an emoji.
    let sc = scenario(82, 120, 200.0);
    let knobs = RunKnobs {
        rule: ServerRule::Nesterov { momentum: 0.9 },
        client_lr: 0.5,
        batch_size: 10,
        devices_per_round: 10,
        total_rounds: 150,
        eval_every: 150,
        seed: 82,
    };
    let result = fed_train(&sc, Parameters::init(sc.mc, 82), &knobs, None);
    let params = &result.state.global;

    let mut class_counts = vec![0u64; NUM_EMOJI];
    for ds in &sc.train {
        for e in &ds.examples {
            if e.label < NUM_EMOJI {
                class_counts[e.label] += 1;
            }
        }
    }
    let top_class = (0..NUM_EMOJI).max_by_key(|&c| class_counts[c]).unwrap();
    let total: f64 = class_counts.iter().map(|&c| c as f64).sum::<f64>() + NUM_EMOJI as f64;
    let fitted: Vec<f64> = class_counts
        .iter()
        .map(|&c| (c as f64 + 1.0) / total)
        .collect();

    let mut top_share = [0usize; 2];
    let mut slots = 0usize;
    let mut first_slot = vec![[0usize; 2]; NUM_EMOJI];
    for ds in &sc.eval {
        for e in &ds.examples {
            if e.label >= NUM_EMOJI {
                continue;
            }
            let (logits, _) = forward(params, &e.tokens).unwrap();
            let probs = softmax(&logits);
            let emoji_probs = &probs[..NUM_EMOJI];
            slots += 1;
            for (i, alpha) in [0.0, 0.7].into_iter().enumerate() {
                let div = Diversifier::new(fitted.clone(), alpha).unwrap();
                let first = diversify(emoji_probs, &div)[0].class;
                first_slot[first][i] += 1;
                if first == top_class {
                    top_share[i] += 1;
                }
            }
        }
    }
    println!("c08 first-slot counts by class [alpha 0, alpha 0.7]: {first_slot:?}");
    let share0 = top_share[0] as f64 / slots as f64;
    let share7 = top_share[1] as f64 / slots as f64;
    println!("c08 top-class first-slot share over {slots} slots: alpha 0 {share0:.4}, alpha 0.7 {share7:.4}");
    assert!(share0 > 0.1, "most frequent class absent from first slots");
    assert!(
        share7 < share0,
        "alpha 0.7 share {share7:.4} not below alpha 0 share {share0:.4}"
    );
    println!(
        "PASS c08: alpha 0 is bitwise identity, scores match the formula to 1e-12, and alpha 0.7 demotes the top class ({share0:.4} -> {share7:.4})"
    );
}

#[test]
fn c09_auc_matches_pairwise_counting() {
    let mut rng = stream(91, "auc", &[]);
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let n = rng.random_range(10..=200);
        // Quantized scores force plenty of ties.
        let levels = rng.random_range(2..=8);
        let items: Vec<ScoredLabel> = (0..n)
            .map(|_| ScoredLabel {
                score: f64::from(rng.random_range(0..levels)) / f64::from(levels),
                is_positive: rng.random_bool(0.4),
            })
            .collect();
        let num_pos = items.iter().filter(|s| s.is_positive).count();
        if num_pos == 0 || num_pos == items.len() {
            continue;
        }

        let mut wins = 0.0f64;
        for p in items.iter().filter(|s| s.is_positive) {
            for q in items.iter().filter(|s| !s.is_positive) {
                if p.score > q.score {
                    wins += 1.0;
                } else if p.score == q.score {
                    wins += 0.5;
                }
            }
        }
        let brute = wins / (num_pos as f64 * (items.len() - num_pos) as f64);
        let fast = auc_roc(&items).unwrap();
        let diff = (fast - brute).abs();
        worst = worst.max(diff);
        assert!(
            diff < 1e-9,
            "instance {instance}: rank-based {fast} vs pairwise {brute}"
        );
    }
    println!("PASS c09: rank-based auc matches pairwise counting on 50 tied instances (max diff {worst:.2e} < 1e-9)");
}

#[test]
fn c10_trigger_policy_contracts() {
    let mut rng = stream(101, "trig", &[]);

    // (a) The shown fraction is monotone in the threshold.
    let p_unks: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
    let mut last_rate = 0usize;
    for step in 0..=20 {
        let tau = f64::from(step) / 20.0;
        let rate = p_unks
            .iter()
            .filter(|&&p| {
                let probs = vec![(1.0 - p) / 2.0, (1.0 - p) / 2.0, p];
                should_trigger(&probs, &TriggerConfig { threshold: tau })
            })
            .count();
        assert!(rate >= last_rate, "trigger rate fell from {last_rate} to {rate} at tau {tau}");
        last_rate = rate;
    }

    // (b) The decision reads only the UNK probability: redistributing the
    // emoji mass never flips it.
    for _ in 0..200 {
        let p_unk = rng.random::<f64>();
        let tau = rng.random::<f64>();
        let mut rest = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let rest_total: f64 = rest.iter().sum();
        for r in rest.iter_mut() {
            *r *= (1.0 - p_unk) / rest_total;
        }
        let a = vec![rest[0], rest[1], rest[2], p_unk];
        let b = vec![rest[2], rest[0], rest[1], p_unk];
        let cfg = TriggerConfig { threshold: tau };
        assert_eq!(should_trigger(&a, &cfg), should_trigger(&b, &cfg));
    }

    // (c) Reported metrics come from raw probabilities: a diversifier that
    // reshuffles every ranking leaves evaluation untouched.
    let sc = scenario(102, 20, 30.0);
    let params = Parameters::init(sc.mc, 5);
    let mut rng_a = stream(9, "eval", &[]);
    let before = federated_eval(&params, &sc.eval, sc.eval.len(), &mut rng_a).unwrap();
    let examples: Vec<Example> = sc
        .eval
        .iter()
        .flat_map(|d| d.examples.iter().cloned())
        .collect();
    let scored = score_examples(&params, &examples).unwrap();
    let pairs: Vec<(usize, usize)> = scored.iter().map(|s| (s.pred, s.label)).collect();
    let raw_acc = accuracy_at_1(&pairs, NUM_EMOJI).unwrap();
    assert_eq!(
        before.accuracy_at_1.unwrap().to_bits(),
        raw_acc.to_bits(),
        "evaluation must score raw argmax predictions"
    );
    // An extreme prior would reorder rankings, but accuracy is computed
    // before any diversification, so nothing changes.
    let labeled: Vec<ScoredLabel> = scored
        .iter()
        .map(|s| ScoredLabel {
            score: 1.0 - s.p_unk,
            is_positive: s.label < NUM_EMOJI,
        })
        .collect();
    assert_eq!(
        before.auc.unwrap().to_bits(),
        auc_roc(&labeled).unwrap().to_bits()
    );
    println!("PASS c10: trigger rate monotone in threshold, decision reads only p(UNK), metrics computed pre-diversification");
}

#[test]
fn c11_incremental_decoding_matches_batch_forward() {
    let cfg = ModelConfig {
        vocab_size: 60,
        embed_dim: 10,
        num_layers: 2,
        hidden_dim: 14,
        num_classes: 7,
    };
    let params = Parameters::init(cfg, 111);
    let mut rng = stream(112, "inc", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..=40);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..60)).collect();
        let (logits, _) = forward(&params, &tokens).unwrap();
        let full = softmax(&logits);

        let mut session = Session::new(&params);
        let mut inc = Vec::new();
        for &t in &tokens {
            inc = predict_incremental(&params, &mut session, t).unwrap();
        }
        for (a, b) in full.iter().zip(&inc) {
            let d = (a - b).abs();
            worst = worst.max(d);
            assert!(d < 1e-6, "incremental {b} vs batch {a}");
        }
    }
    println!("PASS c11: incremental decoding matches the batch forward pass on 100 sequences (max diff {worst:.2e} < 1e-6)");
}

#[test]
fn c12_reruns_are_bit_identical() {
    let sc = scenario(121, 40, 30.0);
    let base = tempfile::tempdir().unwrap();
    let dirs = [base.path().join("a"), base.path().join("b"), base.path().join("serial")];
    for (i, dir) in dirs.iter().enumerate() {
        let setup = TrainSetup {
            init: Parameters::init(sc.mc, 9),
            velocity: None,
            start_round: 0,
            rule: ServerRule::Nesterov { momentum: 0.9 },
            server_lr: 1.0,
            client: ClientOptConfig {
                learning_rate: 0.5,
                batch_size: 10,
                epochs: 1,
                clip_norm: 5.0,
            },
            fed: FederationConfig {
                devices_per_round: 8,
                total_rounds: 20,
                eval_every: 5,
                eval_clients: sc.eval.len(),
                availability: 0.9,
                parallel: i != 2,
                seed: 77,
            },
        };
        train_federated(setup, &sc.train, &sc.eval, Some(dir), &mut |_| {}).unwrap();
    }

    let mut names: Vec<String> = fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.contains(&"metrics.tsv".to_owned()));
    assert!(names.contains(&"round_20.ckpt".to_owned()));
    assert!(names.contains(&"round_20.vel".to_owned()));
    let mut compared = 0;
    for name in &names {
        let a = fs::read(dirs[0].join(name)).unwrap();
        for other in &dirs[1..] {
            let b = fs::read(other.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        compared += 1;
    }
    println!(
        "PASS c12: {compared} output files bit-identical across reruns and across parallel/serial execution"
    );
}
