//! Command line driver: corpus synthesis, vocabulary building, language
//! model pretraining, federated and centralized training, evaluation,
//! interactive prediction, and parameter sweeps.

pub mod config;

use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{
    build_vocab, default_inventory, downweight_unk, light_tailed_freqs, partition_clients,
    read_corpus, synth_corpus, tokenize, write_corpus, ClientDataset, EmojiInventory, Example,
    PartitionSpec, SynthSpec, Token, Vocabulary,
};
use crate::error::{Error, Result};
use crate::fedsim::{
    score_examples, split_population, train_central, train_federated, CentralSetup,
    FederationConfig, Progress, TrainSetup,
};
use crate::inference::{
    calibrate_threshold, predict, Diversifier, TriggerConfig,
};
use crate::metrics::{accuracy_at_1, auc_roc, ScoredLabel};
use crate::model::{
    read_checkpoint, read_lm_checkpoint, read_velocity, transfer_from_lm, write_lm_checkpoint,
    LmConfig, LmParameters, LmTrainConfig, ModelConfig, Parameters,
};
use crate::model::train_lm;
use crate::optim::{ClientOptConfig, ServerRule};
use crate::seeding::{derive, stream};
use config::{RunConfig, ServerOpt};

#[derive(Debug, Parser)]
#[command(
    name = "fedemoji",
    version,
    about = "Simulates on-device federated training of an emoji prediction model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic chat corpus and its emoji inventory.
    SynthCorpus(SynthCorpusArgs),
    /// Build a word vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Pretrain a next-word language model on the corpus.
    PretrainLm(PretrainLmArgs),
    /// Run federated training over simulated clients.
    TrainFed(TrainFedArgs),
    /// Train a centralized baseline on the pooled client examples.
    TrainCentral(TrainCentralArgs),
    /// Evaluate a checkpoint on the holdout population.
    Eval(EvalArgs),
    /// Predict emoji for text lines read from stdin.
    Predict(PredictArgs),
    /// Rerun federated training along one axis and tabulate results.
    Sweep(SweepArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Config file (`key = value` lines; missing keys use defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus file; defaults to `<out>/corpus.txt`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Emoji inventory file; defaults to `<out>/emoji.txt`.
    #[arg(long)]
    pub emoji: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainLmArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub emoji: Option<PathBuf>,
    /// Vocabulary file; defaults to `<out>/vocab.txt`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub emoji: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Start from this model checkpoint instead of a fresh init.
    #[arg(long, conflicts_with_all = ["lm", "resume"])]
    pub init: Option<PathBuf>,
    /// Transfer embeddings and recurrent layers from this pretrained
    /// language model checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub lm: Option<PathBuf>,
    /// Continue from the newest `round_<t>.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrainCentralArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub emoji: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Start from this model checkpoint instead of a fresh init.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub emoji: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub emoji: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Model checkpoint to predict with.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus used to fit the emoji frequency prior; defaults to
    /// `<out>/corpus.txt` when present, else a uniform prior.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// Client minibatch size.
    BatchSize,
    /// Clients sampled per round.
    Devices,
    /// Server update rule.
    Server,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch-size",
            SweepAxis::Devices => "devices",
            SweepAxis::Server => "server",
        }
    }

    fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::BatchSize => &["1", "10", "50"],
            SweepAxis::Devices => &["5", "20", "50"],
            SweepAxis::Server => &["sgd", "momentum"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub emoji: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Which knob to vary.
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values for the axis; each gets its own run.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
}

/// Parses arguments, runs the command, and maps failures to exit codes:
/// 0 success (and help/version), 1 configuration errors, 2 runtime errors.
pub fn run() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus(a) => cmd_synth_corpus(&a),
        Command::BuildVocab(a) => cmd_build_vocab(&a),
        Command::PretrainLm(a) => cmd_pretrain_lm(&a),
        Command::TrainFed(a) => cmd_train_fed(&a),
        Command::TrainCentral(a) => cmd_train_central(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and records the exact configuration the
/// command ran with.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(format!("resolved-{command}.cfg"));
    fs::write(&path, cfg.resolved_text()).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

fn default_path(explicit: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join(name))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.4}"))
}

struct Inputs {
    vocab: Vocabulary,
    inventory: EmojiInventory,
    sentences: Vec<String>,
}

fn load_inputs(corpus: &Path, emoji: &Path, vocab: &Path) -> Result<Inputs> {
    Ok(Inputs {
        vocab: Vocabulary::read(vocab)?,
        inventory: EmojiInventory::read(emoji)?,
        sentences: read_corpus(corpus)?,
    })
}

struct Population {
    vocab: Vocabulary,
    inventory: EmojiInventory,
    train: Vec<ClientDataset>,
    eval: Vec<ClientDataset>,
}

/// Tokenizes, partitions into clients, splits off the holdout population,
/// and downweights no-emoji examples on the training side only, so
/// evaluation sees the natural distribution.
fn build_population(cfg: &RunConfig, inputs: Inputs) -> Result<Population> {
    let tokenized: Vec<Vec<Token>> = inputs
        .sentences
        .iter()
        .map(|s| tokenize(s, &inputs.inventory))
        .collect();
    let spec = PartitionSpec {
        num_clients: cfg.num_clients,
        sentences_per_client: cfg.sentences_per_client,
        dispersion: cfg.dispersion,
        emoji_sentence_fraction: cfg.emoji_fraction,
        skew: cfg.skew,
        seed: cfg.seed,
    };
    let clients = partition_clients(
        &tokenized,
        &spec,
        &inputs.vocab,
        &inputs.inventory,
        cfg.max_context,
    )?;
    let (mut train, eval) = split_population(clients, cfg.holdout_fraction, cfg.seed)?;
    let unk = inputs.inventory.unk_class();
    for ds in &mut train {
        let mut rng = stream(cfg.seed, "downweight", &[u64::from(ds.client_id)]);
        downweight_unk(&mut ds.examples, unk, cfg.unk_keep_fraction, &mut rng);
    }
    Ok(Population {
        vocab: inputs.vocab,
        inventory: inputs.inventory,
        train,
        eval,
    })
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary, inventory: &EmojiInventory) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: cfg.embed_dim,
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        num_classes: inventory.num_classes(),
    }
}

fn describe(cfg: &ModelConfig) -> String {
    format!(
        "V={} d={} layers={} h={} C={}",
        cfg.vocab_size, cfg.embed_dim, cfg.num_layers, cfg.hidden_dim, cfg.num_classes
    )
}

fn check_arch(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if found != expected {
        return Err(Error::IncompatibleArchitectures(format!(
            "checkpoint ({}) vs run ({})",
            describe(found),
            describe(expected)
        )));
    }
    Ok(())
}

fn server_rule(cfg: &RunConfig) -> ServerRule {
    match cfg.server_opt {
        ServerOpt::Sgd => ServerRule::Sgd,
        ServerOpt::Momentum => ServerRule::Nesterov {
            momentum: cfg.momentum,
        },
    }
}

fn client_opt(cfg: &RunConfig) -> ClientOptConfig {
    ClientOptConfig {
        learning_rate: cfg.client_lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        clip_norm: cfg.clip_norm,
    }
}

fn federation(cfg: &RunConfig) -> FederationConfig {
    FederationConfig {
        devices_per_round: cfg.devices_per_round,
        total_rounds: cfg.total_rounds,
        eval_every: cfg.eval_every,
        eval_clients: cfg.eval_clients,
        availability: cfg.availability,
        parallel: cfg.parallel,
        seed: cfg.seed,
    }
}

/// Finds the highest-numbered `round_<t>.ckpt` in a directory.
fn latest_round_checkpoint(out: &Path) -> Result<Option<(usize, PathBuf)>> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name();
        let Some(t) = name
            .to_str()
            .and_then(|n| n.strip_prefix("round_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| t > *b) {
            best = Some((t, entry.path()));
        }
    }
    Ok(best)
}

fn cmd_synth_corpus(args: &SynthCorpusArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "synth-corpus")?;

    let num_sentences = (cfg.num_clients as f64 * cfg.sentences_per_client).round() as usize;
    let emoji = default_inventory(cfg.num_emoji)?;
    let spec = SynthSpec {
        num_sentences,
        emoji: emoji.clone(),
        emoji_freqs: light_tailed_freqs(cfg.num_emoji, cfg.top_share)?,
        emoji_sentence_fraction: cfg.emoji_fraction,
        filler_vocab: cfg.filler_vocab,
        zipf_exponent: cfg.zipf_exponent,
        min_words: cfg.min_words,
        max_words: cfg.max_words,
        second_emoji_prob: cfg.second_emoji_prob,
    };
    let sentences = synth_corpus(&spec, cfg.seed)?;

    let corpus_path = out.join("corpus.txt");
    write_corpus(&corpus_path, &sentences)?;
    let inventory = EmojiInventory::new(emoji)?;
    let emoji_path = out.join("emoji.txt");
    inventory.write(&emoji_path)?;

    let with_emoji = sentences
        .iter()
        .filter(|s| !tokenize(s, &inventory).iter().all(|t| matches!(t, Token::Word(_))))
        .count();
    println!(
        "wrote {} sentences ({} with emoji) to {}",
        sentences.len(),
        with_emoji,
        corpus_path.display()
    );
    println!(
        "wrote {} emoji classes to {}",
        inventory.num_emoji(),
        emoji_path.display()
    );
    Ok(())
}

fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "build-vocab")?;
    let corpus_path = default_path(&args.corpus, &out, "corpus.txt");
    let emoji_path = default_path(&args.emoji, &out, "emoji.txt");

    let sentences = read_corpus(&corpus_path)?;
    let inventory = EmojiInventory::read(&emoji_path)?;
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
    let vocab = build_vocab(word_sentences, cfg.vocab_size)?;
    let vocab_path = out.join("vocab.txt");
    vocab.write(&vocab_path)?;
    println!(
        "wrote vocabulary of {} ids (target {}) to {}",
        vocab.size(),
        cfg.vocab_size,
        vocab_path.display()
    );
    Ok(())
}

fn cmd_pretrain_lm(args: &PretrainLmArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "pretrain-lm")?;
    let inputs = load_inputs(
        &default_path(&args.corpus, &out, "corpus.txt"),
        &default_path(&args.emoji, &out, "emoji.txt"),
        &default_path(&args.vocab, &out, "vocab.txt"),
    )?;

    let seqs: Vec<Vec<u32>> = inputs
        .sentences
        .iter()
        .map(|s| {
            tokenize(s, &inputs.inventory)
                .into_iter()
                .filter_map(|t| match t {
                    Token::Word(w) => Some(inputs.vocab.id_of(&w)),
                    Token::Emoji(_) => None,
                })
                .collect::<Vec<u32>>()
        })
        .filter(|ids| ids.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let lm_cfg = LmConfig {
        vocab_size: inputs.vocab.size(),
        embed_dim: cfg.embed_dim,
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
    };
    lm_cfg.validate()?;
    let init = LmParameters::init(lm_cfg, cfg.seed);
    let train_cfg = LmTrainConfig {
        learning_rate: cfg.lm_lr,
        batch_size: cfg.lm_batch_size,
        epochs: cfg.lm_epochs,
        clip_norm: cfg.clip_norm,
        seed: derive(cfg.seed, "lm", &[]),
    };
    println!(
        "pretraining on {} sequences ({} parameters)",
        seqs.len(),
        init.param_count()
    );
    let (params, losses) = train_lm(init, &seqs, &train_cfg)?;
    for (e, loss) in losses.iter().enumerate() {
        println!("epoch {:>3} loss {loss:.4}", e + 1);
    }
    let path = out.join("lm.ckpt");
    write_lm_checkpoint(&path, &params)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Initial model and starting round for `train-fed`, honoring the
/// precedence resume > checkpoint > language model transfer > fresh.
fn initial_model(
    args: &TrainFedArgs,
    cfg: &RunConfig,
    out: &Path,
    mc: ModelConfig,
) -> Result<(Parameters, Option<Vec<f64>>, usize)> {
    if args.resume {
        let Some((round, path)) = latest_round_checkpoint(out)? else {
            return Err(Error::InvalidInput(format!(
                "nothing to resume: no round checkpoint in {}",
                out.display()
            )));
        };
        let params = read_checkpoint(&path)?;
        check_arch(&params.cfg, &mc)?;
        let velocity = if cfg.server_opt == ServerOpt::Momentum {
            let vel_path = out.join(format!("round_{round}.vel"));
            if !vel_path.exists() {
                return Err(Error::InvalidInput(format!(
                    "resume with momentum needs {}",
                    vel_path.display()
                )));
            }
            Some(read_velocity(&vel_path)?)
        } else {
            None
        };
        println!("resuming from {} (round {round})", path.display());
        return Ok((params, velocity, round));
    }
    if let Some(path) = &args.init {
        let params = read_checkpoint(path)?;
        check_arch(&params.cfg, &mc)?;
        println!("starting from {}", path.display());
        return Ok((params, None, 0));
    }
    if let Some(path) = &args.lm {
        let lm = read_lm_checkpoint(path)?;
        let params = transfer_from_lm(&lm, mc, cfg.seed)?;
        println!("transferred embeddings and layers from {}", path.display());
        return Ok((params, None, 0));
    }
    Ok((Parameters::init(mc, cfg.seed), None, 0))
}

fn print_progress(kind: &str, p: &Progress) {
    if let Some(eval) = &p.eval {
        println!(
            "{kind} {:>4} loss {} accuracy_at_1 {} auc {}",
            p.step,
            fmt_metric(p.loss),
            fmt_metric(eval.accuracy_at_1),
            fmt_metric(eval.auc)
        );
    }
}

fn cmd_train_fed(args: &TrainFedArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "train-fed")?;
    let inputs = load_inputs(
        &default_path(&args.corpus, &out, "corpus.txt"),
        &default_path(&args.emoji, &out, "emoji.txt"),
        &default_path(&args.vocab, &out, "vocab.txt"),
    )?;
    let pop = build_population(&cfg, inputs)?;
    let mc = model_config(&cfg, &pop.vocab, &pop.inventory);
    mc.validate()?;

    let (init, velocity, start_round) = initial_model(args, &cfg, &out, mc)?;
    println!(
        "model {} ({} parameters); {} train clients, {} holdout clients",
        describe(&mc),
        init.param_count(),
        pop.train.len(),
        pop.eval.len()
    );
    let setup = TrainSetup {
        init,
        velocity,
        start_round,
        rule: server_rule(&cfg),
        server_lr: cfg.server_lr,
        client: client_opt(&cfg),
        fed: federation(&cfg),
    };
    let result = train_federated(setup, &pop.train, &pop.eval, Some(&out), &mut |p| {
        print_progress("round", &p)
    })?;
    if let Some((round, outcome)) = result.evals.last() {
        println!(
            "final round {round}: accuracy_at_1 {} auc {} over {} examples",
            fmt_metric(outcome.accuracy_at_1),
            fmt_metric(outcome.auc),
            outcome.num_examples
        );
    }
    println!("metrics and checkpoints in {}", out.display());
    Ok(())
}

fn cmd_train_central(args: &TrainCentralArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "train-central")?;
    let inputs = load_inputs(
        &default_path(&args.corpus, &out, "corpus.txt"),
        &default_path(&args.emoji, &out, "emoji.txt"),
        &default_path(&args.vocab, &out, "vocab.txt"),
    )?;
    let pop = build_population(&cfg, inputs)?;
    let mc = model_config(&cfg, &pop.vocab, &pop.inventory);
    mc.validate()?;

    let init = match &args.init {
        Some(path) => {
            let params = read_checkpoint(path)?;
            check_arch(&params.cfg, &mc)?;
            params
        }
        None => Parameters::init(mc, cfg.seed),
    };
    let pool: Vec<Example> = pop
        .train
        .iter()
        .flat_map(|d| d.examples.iter().cloned())
        .collect();
    println!(
        "central pool: {} examples from {} clients",
        pool.len(),
        pop.train.len()
    );
    let setup = CentralSetup {
        init,
        opt: ClientOptConfig {
            epochs: 1,
            ..client_opt(&cfg)
        },
        epochs: cfg.central_epochs,
        eval_every: cfg.eval_every,
        eval_clients: cfg.eval_clients.min(pop.eval.len()),
        seed: cfg.seed,
    };
    let result = train_central(setup, &pool, &pop.eval, Some(&out), &mut |p| {
        print_progress("epoch", &p)
    })?;
    if let Some((epoch, outcome)) = result.evals.last() {
        println!(
            "final epoch {epoch}: accuracy_at_1 {} auc {}",
            fmt_metric(outcome.accuracy_at_1),
            fmt_metric(outcome.auc)
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "eval")?;
    let inputs = load_inputs(
        &default_path(&args.corpus, &out, "corpus.txt"),
        &default_path(&args.emoji, &out, "emoji.txt"),
        &default_path(&args.vocab, &out, "vocab.txt"),
    )?;
    let pop = build_population(&cfg, inputs)?;
    let mc = model_config(&cfg, &pop.vocab, &pop.inventory);
    let params = read_checkpoint(&args.checkpoint)?;
    check_arch(&params.cfg, &mc)?;

    let examples: Vec<Example> = pop
        .eval
        .iter()
        .flat_map(|d| d.examples.iter().cloned())
        .collect();
    if examples.is_empty() {
        return Err(Error::InvalidInput(
            "holdout population has no examples".to_owned(),
        ));
    }
    let scored = score_examples(&params, &examples)?;
    let unk = params.cfg.num_classes - 1;
    let pairs: Vec<(usize, usize)> = scored.iter().map(|s| (s.pred, s.label)).collect();
    let labeled: Vec<ScoredLabel> = scored
        .iter()
        .map(|s| ScoredLabel {
            score: 1.0 - s.p_unk,
            is_positive: s.label < unk,
        })
        .collect();
    let trigger_data: Vec<(f64, bool)> =
        scored.iter().map(|s| (s.p_unk, s.label < unk)).collect();
    let tau = calibrate_threshold(&trigger_data);
    let fired: Vec<bool> = trigger_data.iter().map(|&(p, _)| p < tau).collect();
    let tp = trigger_data
        .iter()
        .zip(&fired)
        .filter(|((_, pos), f)| **f && *pos)
        .count();
    let fp = trigger_data
        .iter()
        .zip(&fired)
        .filter(|((_, pos), f)| **f && !*pos)
        .count();
    let fn_ = trigger_data
        .iter()
        .zip(&fired)
        .filter(|((_, pos), f)| !**f && *pos)
        .count();
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
    };

    let num_emoji_examples = labeled.iter().filter(|s| s.is_positive).count();
    let mut rows = String::new();
    for (k, v) in [
        ("num_examples", examples.len().to_string()),
        ("num_emoji_examples", num_emoji_examples.to_string()),
        (
            "accuracy_at_1",
            fmt_metric(accuracy_at_1(&pairs, unk)),
        ),
        ("auc", fmt_metric(auc_roc(&labeled))),
        ("calibrated_threshold", format!("{tau:.6}")),
        ("trigger_f1", format!("{f1:.4}")),
    ] {
        rows.push_str(&format!("{k}\t{v}\n"));
    }
    print!("{rows}");
    let path = out.join("eval.tsv");
    fs::write(&path, rows).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Emoji frequency prior over corpus occurrences, with add-`smoothing`
/// counts so unseen classes stay rankable.
fn corpus_prior(
    corpus: &Path,
    inventory: &EmojiInventory,
    alpha: f64,
    smoothing: f64,
) -> Result<Diversifier> {
    let sentences = read_corpus(corpus)?;
    let n = inventory.num_emoji();
    let mut counts = vec![0u64; n];
    for s in &sentences {
        for t in tokenize(s, inventory) {
            if let Token::Emoji(c) = t {
                counts[c] += 1;
            }
        }
    }
    let total = counts.iter().map(|&c| c as f64).sum::<f64>() + smoothing * n as f64;
    Diversifier::new(
        counts
            .iter()
            .map(|&c| (c as f64 + smoothing) / total)
            .collect(),
        alpha,
    )
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "predict")?;
    let vocab = Vocabulary::read(&default_path(&args.vocab, &out, "vocab.txt"))?;
    let inventory = EmojiInventory::read(&default_path(&args.emoji, &out, "emoji.txt"))?;
    let params = read_checkpoint(&args.checkpoint)?;
    if params.cfg.num_classes != inventory.num_classes()
        || params.cfg.vocab_size != vocab.size()
    {
        return Err(Error::IncompatibleArchitectures(format!(
            "checkpoint ({}) vs vocabulary {} and {} emoji classes",
            describe(&params.cfg),
            vocab.size(),
            inventory.num_emoji()
        )));
    }

    let corpus_path = default_path(&args.corpus, &out, "corpus.txt");
    let diversifier = if corpus_path.exists() {
        corpus_prior(&corpus_path, &inventory, cfg.alpha, cfg.smoothing)?
    } else {
        eprintln!(
            "note: {} not found, using a uniform emoji prior",
            corpus_path.display()
        );
        Diversifier::uniform(inventory.num_emoji(), cfg.alpha)?
    };
    let trigger = TriggerConfig {
        threshold: cfg.threshold.unwrap_or(0.5),
    };

    let stdin = io::stdin();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::io("stdin", e))?;
        let ids: Vec<u32> = tokenize(&line, &inventory)
            .into_iter()
            .filter_map(|t| match t {
                Token::Word(w) => Some(vocab.id_of(&w)),
                Token::Emoji(_) => None,
            })
            .collect();
        if ids.is_empty() {
            println!("NA");
            continue;
        }
        let pred = predict(&params, &ids, &trigger, &diversifier, cfg.top_k)?;
        let render = |scores: &[crate::inference::ScoredClass]| {
            scores
                .iter()
                .map(|s| {
                    format!(
                        "{}:{:.4}",
                        inventory.emoji_of(s.class).unwrap_or("?"),
                        s.score
                    )
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!(
            "{}\t{:.6}\t{}\t{}",
            pred.triggered,
            pred.p_unk,
            render(&pred.raw),
            render(&pred.ranked)
        );
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = prepare_out(&cfg, "sweep")?;
    let inputs = load_inputs(
        &default_path(&args.corpus, &out, "corpus.txt"),
        &default_path(&args.emoji, &out, "emoji.txt"),
        &default_path(&args.vocab, &out, "vocab.txt"),
    )?;
    let pop = build_population(&cfg, inputs)?;
    let mc = model_config(&cfg, &pop.vocab, &pop.inventory);
    mc.validate()?;

    let values = if args.values.is_empty() {
        args.axis.default_values()
    } else {
        args.values.clone()
    };

    let mut table = String::from("value\tfinal_loss\taccuracy_at_1\tauc\n");
    for value in &values {
        let mut run_cfg = cfg.clone();
        match args.axis {
            SweepAxis::BatchSize => {
                run_cfg.batch_size = value.parse().map_err(|_| Error::ConfigValue {
                    key: "batch_size".to_owned(),
                    message: format!("sweep value `{value}` is not a batch size"),
                })?;
            }
            SweepAxis::Devices => {
                run_cfg.devices_per_round = value.parse().map_err(|_| Error::ConfigValue {
                    key: "devices_per_round".to_owned(),
                    message: format!("sweep value `{value}` is not a client count"),
                })?;
            }
            SweepAxis::Server => {
                run_cfg.server_opt = match value.as_str() {
                    "sgd" => ServerOpt::Sgd,
                    "momentum" => ServerOpt::Momentum,
                    other => {
                        return Err(Error::ConfigValue {
                            key: "server_opt".to_owned(),
                            message: format!("sweep value `{other}` is not a server rule"),
                        })
                    }
                };
            }
        }
        run_cfg.validate()?;
        let subdir = out.join(format!("{}-{value}", args.axis.name()));
        fs::create_dir_all(&subdir).map_err(|e| Error::io(&subdir, e))?;
        println!("== {} = {value} ==", args.axis.name());

        let setup = TrainSetup {
            init: Parameters::init(mc, run_cfg.seed),
            velocity: None,
            start_round: 0,
            rule: server_rule(&run_cfg),
            server_lr: run_cfg.server_lr,
            client: client_opt(&run_cfg),
            fed: federation(&run_cfg),
        };
        let result = train_federated(setup, &pop.train, &pop.eval, Some(&subdir), &mut |p| {
            print_progress("round", &p)
        })?;
        let final_loss = result
            .rounds
            .iter()
            .rev()
            .find_map(|r| r.mean_train_loss);
        let (acc, auc) = result
            .evals
            .last()
            .map_or((None, None), |(_, o)| (o.accuracy_at_1, o.auc));
        table.push_str(&format!(
            "{value}\t{}\t{}\t{}\n",
            fmt_metric(final_loss),
            fmt_metric(acc),
            fmt_metric(auc)
        ));
    }
    let path = out.join("sweep.tsv");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    println!("wrote {}", path.display());
    Ok(())
}
