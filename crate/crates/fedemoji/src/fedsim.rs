//! Federated training loop: client sampling, parallel local updates,
//! weighted aggregation, server steps, evaluation, and a centralized
//! baseline trainer for comparison runs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{ClientDataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_at_1, auc_roc, ScoredLabel};
use crate::model::{
    forward, softmax, write_checkpoint, write_velocity, Parameters,
};
use crate::optim::{aggregate, client_update, ClientOptConfig, ServerOptimizer, ServerRule};
use crate::seeding::{derive, stream};

/// Settings for the federated loop itself (client opt settings live in
/// [`ClientOptConfig`]).
#[derive(Debug, Clone)]
pub struct FederationConfig {
    /// Clients sampled per round, capped by availability.
    pub devices_per_round: usize,
    pub total_rounds: usize,
    /// Evaluate (and checkpoint) every this many rounds.
    pub eval_every: usize,
    /// Clients sampled from the holdout population per evaluation.
    pub eval_clients: usize,
    /// Probability that a client is reachable in a given round.
    pub availability: f64,
    /// Run local updates on a thread pool. Results are aggregated in
    /// client id order either way, so this never changes the outcome.
    pub parallel: bool,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices_per_round == 0 {
            return Err(Error::InvalidInput(
                "devices_per_round must be positive".to_owned(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidInput("eval_every must be positive".to_owned()));
        }
        if !(self.availability > 0.0 && self.availability <= 1.0) {
            return Err(Error::InvalidInput(
                "availability must be in (0, 1]".to_owned(),
            ));
        }
        Ok(())
    }
}

/// Mutable state carried across rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub global: Parameters,
    pub server: ServerOptimizer,
    /// Rounds completed so far; the next round is `round + 1`.
    pub round: usize,
    pub config: FederationConfig,
}

/// What one round did.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Ids of clients whose updates were aggregated, ascending.
    pub participants: Vec<u32>,
    /// Total positive-weight examples across participants.
    pub num_examples: u64,
    /// Example-weighted mean of participant training losses.
    pub mean_train_loss: Option<f64>,
    /// True when no client was available or none had usable examples;
    /// the model is unchanged but the round still counts.
    pub skipped: bool,
}

/// Evaluation metrics over a sampled slice of the holdout population.
#[derive(Debug, Clone, Copy)]
pub struct EvalOutcome {
    /// Top-1 accuracy over emoji-labeled examples, argmax excluding UNK.
    pub accuracy_at_1: Option<f64>,
    /// AUC of the trigger score `1 - p(UNK)` against "label is an emoji".
    pub auc: Option<f64>,
    pub num_examples: usize,
    pub num_emoji_examples: usize,
}

/// Draws `k` distinct indices from `0..population` without replacement.
/// Sampling the whole population returns it in ascending order.
pub fn sample_clients(population: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k > population {
        return Err(Error::PopulationTooSmall {
            population,
            requested: k,
        });
    }
    let mut pool: Vec<usize> = (0..population).collect();
    if k == population {
        return Ok(pool);
    }
    for i in 0..k {
        let j = rng.random_range(i..population);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

/// Runs one round: availability coin per client, sample up to
/// `devices_per_round` of the eligible ones, local training in parallel,
/// then one server step on the example-weighted mean delta.
pub fn run_round(
    state: &mut FederationState,
    population: &[ClientDataset],
    client_cfg: &ClientOptConfig,
) -> Result<RoundReport> {
    let round = state.round + 1;
    let cfg = &state.config;
    let mut rng = stream(cfg.seed, "round", &[round as u64]);

    let eligible: Vec<usize> = (0..population.len())
        .filter(|_| rng.random_bool(cfg.availability))
        .collect();
    if eligible.is_empty() {
        state.round = round;
        return Ok(RoundReport {
            round,
            participants: Vec::new(),
            num_examples: 0,
            mean_train_loss: None,
            skipped: true,
        });
    }

    let k = cfg.devices_per_round.min(eligible.len());
    let chosen = sample_clients(eligible.len(), k, &mut rng)?;
    let jobs: Vec<(&ClientDataset, u64)> = chosen
        .iter()
        .map(|&e| {
            let ds = &population[eligible[e]];
            let seed = derive(cfg.seed, "client", &[round as u64, u64::from(ds.client_id)]);
            (ds, seed)
        })
        .collect();

    let results: Result<Vec<_>> = if cfg.parallel {
        jobs.par_iter()
            .map(|(ds, seed)| client_update(&state.global, ds, client_cfg, *seed))
            .collect()
    } else {
        jobs.iter()
            .map(|(ds, seed)| client_update(&state.global, ds, client_cfg, *seed))
            .collect()
    };
    let updates: Vec<_> = results?.into_iter().flatten().collect();

    if updates.is_empty() {
        state.round = round;
        return Ok(RoundReport {
            round,
            participants: Vec::new(),
            num_examples: 0,
            mean_train_loss: None,
            skipped: true,
        });
    }

    let (mean_delta, num_examples) = aggregate(&updates)?;
    state.server.apply(&mut state.global, &mean_delta)?;
    if !state.global.is_finite() {
        return Err(Error::DivergedRound { round });
    }

    let mut participants: Vec<u32> = updates.iter().map(|u| u.client_id).collect();
    participants.sort_unstable();
    let loss_num: f64 = updates
        .iter()
        .map(|u| u.num_examples as f64 * u.train_loss)
        .sum();
    state.round = round;
    Ok(RoundReport {
        round,
        participants,
        num_examples,
        mean_train_loss: Some(loss_num / num_examples as f64),
        skipped: false,
    })
}

/// Model outputs for one example, as evaluation and trigger calibration
/// consume them.
#[derive(Debug, Clone, Copy)]
pub struct ScoredExample {
    /// Argmax over emoji classes (UNK excluded), ties to the lower id.
    pub pred: usize,
    pub label: usize,
    pub p_unk: f64,
}

/// Scores every example with the full forward pass. Order is preserved.
pub fn score_examples(params: &Parameters, examples: &[Example]) -> Result<Vec<ScoredExample>> {
    let unk = params.cfg.num_classes - 1;
    examples
        .par_iter()
        .map(|ex| {
            let (logits, _) = forward(params, &ex.tokens)?;
            let probs = softmax(&logits);
            let mut pred = 0usize;
            for c in 1..unk {
                if probs[c] > probs[pred] {
                    pred = c;
                }
            }
            Ok(ScoredExample {
                pred,
                label: ex.label,
                p_unk: probs[unk],
            })
        })
        .collect()
}

/// Samples `num_clients` holdout clients and computes accuracy and AUC
/// over all their examples. Metrics are computed on raw model
/// probabilities, before any ranking adjustment.
pub fn federated_eval(
    params: &Parameters,
    population: &[ClientDataset],
    num_clients: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalOutcome> {
    let chosen = sample_clients(population.len(), num_clients, rng)?;
    let examples: Vec<Example> = chosen
        .iter()
        .flat_map(|&i| population[i].examples.iter().cloned())
        .collect();
    let scored = score_examples(params, &examples)?;

    let unk = params.cfg.num_classes - 1;
    let pairs: Vec<(usize, usize)> = scored.iter().map(|s| (s.pred, s.label)).collect();
    let labeled: Vec<ScoredLabel> = scored
        .iter()
        .map(|s| ScoredLabel {
            score: 1.0 - s.p_unk,
            is_positive: s.label < unk,
        })
        .collect();
    let num_emoji_examples = labeled.iter().filter(|s| s.is_positive).count();
    Ok(EvalOutcome {
        accuracy_at_1: accuracy_at_1(&pairs, unk),
        auc: auc_roc(&labeled),
        num_examples: examples.len(),
        num_emoji_examples,
    })
}

/// Splits clients into train and holdout populations. The holdout gets
/// `round(holdout_fraction * n)` clients, chosen by seeded shuffle; both
/// sides come back in ascending client id order.
pub fn split_population(
    mut clients: Vec<ClientDataset>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<ClientDataset>, Vec<ClientDataset>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::InvalidInput(
            "holdout_fraction must be in [0, 1)".to_owned(),
        ));
    }
    let n_holdout = (holdout_fraction * clients.len() as f64).round() as usize;
    let mut rng = stream(seed, "holdout", &[]);
    let mut order: Vec<usize> = (0..clients.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let holdout_set: std::collections::HashSet<usize> =
        order.iter().take(n_holdout).copied().collect();
    let mut train = Vec::with_capacity(clients.len() - n_holdout);
    let mut holdout = Vec::with_capacity(n_holdout);
    for (i, ds) in clients.drain(..).enumerate() {
        if holdout_set.contains(&i) {
            holdout.push(ds);
        } else {
            train.push(ds);
        }
    }
    train.sort_by_key(|d| d.client_id);
    holdout.sort_by_key(|d| d.client_id);
    Ok((train, holdout))
}

/// Everything needed to start (or resume) a federated run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub init: Parameters,
    /// Server momentum buffer when resuming a momentum run.
    pub velocity: Option<Vec<f64>>,
    /// Rounds already completed (0 for a fresh run).
    pub start_round: usize,
    pub rule: ServerRule,
    pub server_lr: f64,
    pub client: ClientOptConfig,
    pub fed: FederationConfig,
}

#[derive(Debug)]
pub struct TrainResult {
    pub state: FederationState,
    pub rounds: Vec<RoundReport>,
    pub evals: Vec<(usize, EvalOutcome)>,
}

/// One progress event from a training driver, emitted after every round
/// (or epoch) so callers can report long runs as they happen.
#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub step: usize,
    pub loss: Option<f64>,
    pub eval: Option<EvalOutcome>,
}

fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_owned(),
    }
}

struct MetricsLog {
    file: Option<fs::File>,
}

impl MetricsLog {
    /// Opens `<dir>/metrics.tsv` for appending, writing the header only
    /// when the file is new or empty, so resumed runs extend the log.
    fn open(dir: Option<&Path>, header: &str) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(MetricsLog { file: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.tsv");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
        if empty {
            writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(MetricsLog { file: Some(file) })
    }

    fn row(
        &mut self,
        step: usize,
        loss: Option<f64>,
        acc: Option<f64>,
        auc: Option<f64>,
    ) -> Result<()> {
        if let Some(file) = &mut self.file {
            writeln!(
                file,
                "{step}\t{}\t{}\t{}",
                format_metric(loss),
                format_metric(acc),
                format_metric(auc)
            )
            .map_err(|e| Error::io(Path::new("metrics.tsv"), e))?;
        }
        Ok(())
    }
}

fn save_checkpoint(
    dir: Option<&Path>,
    stem: &str,
    params: &Parameters,
    server: &ServerOptimizer,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    write_checkpoint(&dir.join(format!("{stem}.ckpt")), params)?;
    if matches!(server.rule(), ServerRule::Nesterov { .. }) {
        write_velocity(&dir.join(format!("{stem}.vel")), server.velocity())?;
    }
    Ok(())
}

/// Full training driver. Evaluates and checkpoints at round 0 (fresh runs
/// only), every `eval_every` rounds, and at the final round; appends one
/// metrics row per round.
pub fn train_federated(
    setup: TrainSetup,
    train_pop: &[ClientDataset],
    eval_pop: &[ClientDataset],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(Progress),
) -> Result<TrainResult> {
    setup.fed.validate()?;
    setup.client.validate()?;
    if setup.fed.devices_per_round > train_pop.len() {
        return Err(Error::PopulationTooSmall {
            population: train_pop.len(),
            requested: setup.fed.devices_per_round,
        });
    }
    if setup.fed.eval_clients > eval_pop.len() {
        return Err(Error::PopulationTooSmall {
            population: eval_pop.len(),
            requested: setup.fed.eval_clients,
        });
    }

    let dim = setup.init.param_count();
    let server = match setup.velocity {
        Some(v) => {
            if v.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "velocity length {} does not match model dimension {dim}",
                    v.len()
                )));
            }
            ServerOptimizer::with_velocity(setup.rule, setup.server_lr, v)
        }
        None => ServerOptimizer::new(setup.rule, setup.server_lr, dim),
    };
    let mut state = FederationState {
        global: setup.init,
        server,
        round: setup.start_round,
        config: setup.fed,
    };

    let mut log = MetricsLog::open(out_dir, "round\tloss\taccuracy_at_1\tauc")?;
    let mut rounds = Vec::new();
    let mut evals = Vec::new();

    let eval_at = |round: usize,
                       loss: Option<f64>,
                       state: &FederationState,
                       log: &mut MetricsLog,
                       evals: &mut Vec<(usize, EvalOutcome)>|
     -> Result<EvalOutcome> {
        let mut rng = stream(state.config.seed, "eval", &[round as u64]);
        let outcome = federated_eval(&state.global, eval_pop, state.config.eval_clients, &mut rng)?;
        log.row(round, loss, outcome.accuracy_at_1, outcome.auc)?;
        save_checkpoint(out_dir, &format!("round_{round}"), &state.global, &state.server)?;
        evals.push((round, outcome));
        Ok(outcome)
    };

    if state.round == 0 {
        let outcome = eval_at(0, None, &state, &mut log, &mut evals)?;
        progress(Progress {
            step: 0,
            loss: None,
            eval: Some(outcome),
        });
    }
    let total = state.config.total_rounds;
    for round in state.round + 1..=total {
        let report = run_round(&mut state, train_pop, &setup.client)?;
        let loss = report.mean_train_loss;
        let is_eval = round % state.config.eval_every == 0 || round == total;
        let eval = if is_eval {
            Some(eval_at(round, loss, &state, &mut log, &mut evals)?)
        } else {
            log.row(round, loss, None, None)?;
            None
        };
        progress(Progress {
            step: round,
            loss,
            eval,
        });
        rounds.push(report);
    }
    Ok(TrainResult {
        state,
        rounds,
        evals,
    })
}

/// Centralized baseline settings: same optimizer knobs as a client, run
/// over the pooled corpus for a fixed number of epochs.
#[derive(Debug, Clone)]
pub struct CentralSetup {
    pub init: Parameters,
    pub opt: ClientOptConfig,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_clients: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct CentralResult {
    pub params: Parameters,
    /// Weighted mean loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<(usize, EvalOutcome)>,
}

/// Trains on all examples in one process, evaluating against the same
/// holdout population as the federated run.
pub fn train_central(
    setup: CentralSetup,
    pool: &[Example],
    eval_pop: &[ClientDataset],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(Progress),
) -> Result<CentralResult> {
    setup.opt.validate()?;
    if setup.eval_every == 0 {
        return Err(Error::InvalidInput("eval_every must be positive".to_owned()));
    }
    if setup.eval_clients > eval_pop.len() {
        return Err(Error::PopulationTooSmall {
            population: eval_pop.len(),
            requested: setup.eval_clients,
        });
    }

    let mut params = setup.init;
    let mut log = MetricsLog::open(out_dir, "epoch\tloss\taccuracy_at_1\tauc")?;
    let mut epoch_losses = Vec::new();
    let mut evals = Vec::new();

    let dummy = ServerOptimizer::new(ServerRule::Sgd, 1.0, 0);
    let eval_at = |epoch: usize,
                       loss: Option<f64>,
                       params: &Parameters,
                       log: &mut MetricsLog,
                       evals: &mut Vec<(usize, EvalOutcome)>|
     -> Result<EvalOutcome> {
        let mut rng = stream(setup.seed, "central-eval", &[epoch as u64]);
        let outcome = federated_eval(params, eval_pop, setup.eval_clients, &mut rng)?;
        log.row(epoch, loss, outcome.accuracy_at_1, outcome.auc)?;
        save_checkpoint(out_dir, &format!("epoch_{epoch}"), params, &dummy)?;
        evals.push((epoch, outcome));
        Ok(outcome)
    };

    let outcome = eval_at(0, None, &params, &mut log, &mut evals)?;
    progress(Progress {
        step: 0,
        loss: None,
        eval: Some(outcome),
    });
    for epoch in 1..=setup.epochs {
        let shuffle_seed = derive(setup.seed, "central", &[epoch as u64]);
        let (loss_sum, weight_sum) =
            crate::optim::sgd_epoch(&mut params, pool, &setup.opt, shuffle_seed)?;
        if !params.is_finite() {
            return Err(Error::DivergedRound { round: epoch });
        }
        let loss = if weight_sum > 0.0 {
            Some(loss_sum / weight_sum)
        } else {
            None
        };
        epoch_losses.push(loss.unwrap_or(f64::NAN));
        let eval = if epoch % setup.eval_every == 0 || epoch == setup.epochs {
            Some(eval_at(epoch, loss, &params, &mut log, &mut evals)?)
        } else {
            log.row(epoch, loss, None, None)?;
            None
        };
        progress(Progress {
            step: epoch,
            loss,
            eval,
        });
    }
    Ok(CentralResult {
        params,
        epoch_losses,
        evals,
    })
}
