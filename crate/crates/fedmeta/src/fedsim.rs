//! The federated round loop: sample clients, run them, aggregate, and
//! periodically evaluate on held-out clients.
//!
//! Each round the server broadcasts its state to a uniformly sampled set
//! of training clients. Meta-method clients run one support/query episode
//! and upload a meta-gradient; baseline clients train locally and upload
//! parameters. The server folds the uploads together in fixed client-id
//! order, so a run is bit-reproducible from its config. Evaluation
//! adapts on each held-out client's support records and scores its query
//! records; clients too small to split are excluded and reported, never
//! silently dropped.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    split_support_query, ClientDataset, FederatedDataset, SplitGroup, SplitMode,
};
use crate::diffcore::{loss, Batch, ModelObjective, Objective, ParamVector};
use crate::metalearn::{
    fomaml_meta_gradient, inner_update, local_sgd_train, maml_meta_gradient,
    metasgd_meta_gradient, AlgorithmState, ClientResult, InnerLr, Method,
};
use crate::metrics::{
    accuracy_datapoint_weighted, bytes_per_round, flops_for_client_round, CostLedger, RoundCost,
};
use crate::models::{classify, init_params, ModelSpec};
use crate::seed::{
    client_split_seed, hash_id, mix, rng_from, SALT_EVAL, SALT_INIT, SALT_LOCAL, SALT_SAMPLE,
};
use crate::{Error, Result};

/// How client uploads combine on the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain mean over participants.
    UniformMean,
    /// Weighted by sample counts (query records for meta methods, local
    /// records for the averaging baselines).
    SampleWeighted,
}

/// Everything a single run depends on besides the model and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    pub method: Method,
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Adaptation step size; also the local SGD rate for the baselines
    /// and the initial value of Meta-SGD's learned rate vector.
    pub inner_lr: f64,
    /// Server step size on aggregated meta-gradients.
    pub outer_lr: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub support_fraction: f64,
    pub aggregation: Aggregation,
    pub eval_every: usize,
    pub master_seed: u64,
    pub split_mode: SplitMode,
    /// Clamp learned per-parameter rates at zero when adapting for
    /// evaluation.
    pub clamp_alpha_at_eval: bool,
}

impl FederatedConfig {
    /// Defaults for the given method; aggregation follows the method's
    /// convention (uniform for meta methods, sample-weighted averaging
    /// for the baselines).
    pub fn new(method: Method) -> Self {
        FederatedConfig {
            method,
            rounds: 100,
            clients_per_round: 5,
            inner_lr: 0.01,
            outer_lr: 0.001,
            local_epochs: 1,
            local_batch: 32,
            support_fraction: 0.2,
            aggregation: if method.is_meta() {
                Aggregation::UniformMean
            } else {
                Aggregation::SampleWeighted
            },
            eval_every: 10,
            master_seed: 42,
            split_mode: SplitMode::default(),
            clamp_alpha_at_eval: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("method.rounds must be at least 1".into()));
        }
        if self.clients_per_round == 0 {
            return Err(Error::Config(
                "method.clients_per_round must be at least 1".into(),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("method.local_epochs must be at least 1".into()));
        }
        if self.local_batch == 0 {
            return Err(Error::Config("method.local_batch must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("method.eval_every must be at least 1".into()));
        }
        if !self.inner_lr.is_finite() || self.inner_lr < 0.0 {
            return Err(Error::Config(format!(
                "method.inner_lr must be a non-negative number, got {}",
                self.inner_lr
            )));
        }
        if !self.outer_lr.is_finite() || self.outer_lr < 0.0 {
            return Err(Error::Config(format!(
                "method.outer_lr must be a non-negative number, got {}",
                self.outer_lr
            )));
        }
        if !self.support_fraction.is_finite()
            || self.support_fraction <= 0.0
            || self.support_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "method.support_fraction must be in (0, 1), got {}",
                self.support_fraction
            )));
        }
        Ok(())
    }
}

/// One row of the experiment's metric stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub method: Method,
    /// Participating client ids, sorted.
    pub sampled_clients: Vec<String>,
    /// Sampled clients that were too small to split this round.
    pub skipped_clients: Vec<String>,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub cum_flops: u64,
    pub cum_uplink_bytes: u64,
    pub cum_downlink_bytes: u64,
}

/// Uniform sample of `m` distinct ids, returned sorted.
pub fn sample_clients(pool: &[String], m: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
    if m == 0 {
        return Err(Error::Config("clients_per_round must be at least 1".into()));
    }
    if m > pool.len() {
        return Err(Error::Config(format!(
            "cannot sample {m} clients from a pool of {}",
            pool.len()
        )));
    }
    let mut ids: Vec<String> = rand::seq::index::sample(rng, pool.len(), m)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    ids.sort();
    Ok(ids)
}

/// The upload one meta-method client computes from its episode: a
/// meta-gradient of length P, or 2P for Meta-SGD.
pub fn meta_episode(
    state: &AlgorithmState,
    support: &impl Objective,
    query: &impl Objective,
) -> Result<ParamVector> {
    match (state.method, &state.alpha) {
        (Method::Maml, InnerLr::Scalar(a)) => {
            maml_meta_gradient(&state.theta, *a, support, query)
        }
        (Method::Fomaml, InnerLr::Scalar(a)) => {
            fomaml_meta_gradient(&state.theta, *a, support, query)
        }
        (Method::MetaSgd, InnerLr::PerParam(a)) => {
            metasgd_meta_gradient(&state.theta, a, support, query)
        }
        _ => Err(Error::Config(format!(
            "method {} does not run meta episodes",
            state.method
        ))),
    }
}

/// One meta-method client round: split, episode, stats.
pub fn run_client_meta(
    state: &AlgorithmState,
    spec: &ModelSpec,
    client: &ClientDataset,
    support_fraction: f64,
    split_seed: u64,
    split_mode: SplitMode,
) -> Result<ClientResult> {
    let (support_batch, query_batch) =
        split_support_query(client, support_fraction, split_seed, split_mode)?;
    let support = ModelObjective::new(spec, &support_batch);
    let query = ModelObjective::new(spec, &query_batch);

    let payload = meta_episode(state, &support, &query)?;
    let support_loss = support.loss(&state.theta)?;
    let adapted = inner_update(&state.theta, &state.alpha, &support)?;
    let query_loss = query.loss(&adapted)?;
    let query_correct = count_correct(spec, &adapted, &query_batch)?;

    Ok(ClientResult {
        client_id: client.id().to_string(),
        payload,
        n_support: support_batch.len(),
        n_query: query_batch.len(),
        support_loss,
        query_loss,
        query_correct,
    })
}

/// One baseline client round: local SGD over all records. The loss
/// fields report the full local data before and after training; the
/// query fields stay zero because nothing is held out.
pub fn run_client_fedavg(
    theta: &ParamVector,
    spec: &ModelSpec,
    client: &ClientDataset,
    local_epochs: usize,
    local_batch: usize,
    lr: f64,
    seed: u64,
) -> Result<ClientResult> {
    let data = client.to_batch();
    let support_loss = loss(spec, theta, &data)?;
    let mut rng = rng_from(&[seed]);
    let trained = local_sgd_train(spec, theta, &data, local_epochs, local_batch, lr, &mut rng)?;
    let query_loss = loss(spec, &trained, &data)?;
    Ok(ClientResult {
        client_id: client.id().to_string(),
        payload: trained,
        n_support: data.len(),
        n_query: 0,
        support_loss,
        query_loss,
        query_correct: 0,
    })
}

fn count_correct(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<usize> {
    let mut correct = 0;
    for i in 0..batch.len() {
        if classify(spec, params, batch.row(i))? == batch.label(i) {
            correct += 1;
        }
    }
    Ok(correct)
}

enum WeightBy {
    QueryRecords,
    LocalRecords,
}

/// Aggregation weights for results already sorted by client id.
fn aggregation_weights(
    results: &[&ClientResult],
    aggregation: Aggregation,
    by: WeightBy,
) -> Result<Vec<f64>> {
    match aggregation {
        Aggregation::UniformMean => Ok(vec![1.0 / results.len() as f64; results.len()]),
        Aggregation::SampleWeighted => {
            let counts: Vec<usize> = results
                .iter()
                .map(|r| match by {
                    WeightBy::QueryRecords => r.n_query,
                    WeightBy::LocalRecords => r.n_support,
                })
                .collect();
            let total: usize = counts.iter().sum();
            if total == 0 {
                return Err(Error::Protocol(
                    "sample-weighted aggregation over zero records".into(),
                ));
            }
            Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
        }
    }
}

fn sorted_results<'a>(results: &'a [ClientResult]) -> Result<Vec<&'a ClientResult>> {
    if results.is_empty() {
        return Err(Error::Protocol("no client results to aggregate".into()));
    }
    let mut order: Vec<&ClientResult> = results.iter().collect();
    order.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    Ok(order)
}

/// Descends the server state along the aggregated meta-gradients:
/// theta <- theta - outer_lr * sum(w_u * g_u), and likewise for the rate
/// vector under Meta-SGD. Summation runs in client-id order, so the
/// result does not depend on arrival order.
pub fn server_update_meta(
    state: &AlgorithmState,
    results: &[ClientResult],
    aggregation: Aggregation,
) -> Result<AlgorithmState> {
    let p = state.theta.len();
    let expected = match state.method {
        Method::Maml | Method::Fomaml => p,
        Method::MetaSgd => 2 * p,
        other => {
            return Err(Error::Protocol(format!(
                "server_update_meta does not apply to {other}"
            )))
        }
    };
    let order = sorted_results(results)?;
    for r in &order {
        if r.payload.len() != expected {
            return Err(Error::Protocol(format!(
                "client {} payload has length {}, expected {expected}",
                r.client_id,
                r.payload.len()
            )));
        }
    }
    let weights = aggregation_weights(&order, aggregation, WeightBy::QueryRecords)?;
    let mut agg = ParamVector::zeros(expected);
    for (r, w) in order.iter().zip(&weights) {
        agg.add_scaled(&r.payload, *w);
    }

    let beta = state.outer_lr;
    let mut theta = state.theta.clone();
    for i in 0..p {
        theta[i] -= beta * agg[i];
    }
    theta.ensure_finite("server parameters")?;
    let alpha = match &state.alpha {
        InnerLr::PerParam(a) => {
            let mut next = a.clone();
            for i in 0..p {
                next[i] -= beta * agg[p + i];
            }
            next.ensure_finite("server rate vector")?;
            InnerLr::PerParam(next)
        }
        scalar => scalar.clone(),
    };
    AlgorithmState::new(state.method, theta, alpha, state.outer_lr)
}

/// Weighted average of locally trained parameters, in client-id order.
pub fn server_update_fedavg(
    results: &[ClientResult],
    aggregation: Aggregation,
) -> Result<ParamVector> {
    let order = sorted_results(results)?;
    let expected = order[0].payload.len();
    for r in &order {
        if r.payload.len() != expected {
            return Err(Error::Protocol(format!(
                "client {} payload has length {}, expected {expected}",
                r.client_id,
                r.payload.len()
            )));
        }
    }
    let weights = aggregation_weights(&order, aggregation, WeightBy::LocalRecords)?;
    let mut avg = ParamVector::zeros(expected);
    for (r, w) in order.iter().zip(&weights) {
        avg.add_scaled(&r.payload, *w);
    }
    avg.ensure_finite("averaged parameters")?;
    Ok(avg)
}

/// How held-out clients adapt before scoring.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub support_fraction: f64,
    pub split_mode: SplitMode,
    /// Fine-tuning budget for the FedAvgMeta baseline.
    pub fine_tune_epochs: usize,
    pub fine_tune_batch: usize,
    pub fine_tune_lr: f64,
    pub clamp_alpha: bool,
    pub master_seed: u64,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientScore {
    pub client_id: String,
    pub correct: usize,
    pub total: usize,
}

impl ClientScore {
    pub fn ratio(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub per_client: Vec<ClientScore>,
    /// Data-point-weighted accuracy over the scored clients.
    pub accuracy: f64,
    /// Clients with too few records to split; reported, not scored.
    pub excluded: Vec<String>,
}

/// Scores the current state on held-out clients: adapt on each client's
/// support records (per the method), classify its query records. Support
/// divisions depend only on the master seed and the client id, so every
/// method sees identical query sets.
pub fn evaluate(
    state: &AlgorithmState,
    spec: &ModelSpec,
    clients: &[&ClientDataset],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let mut per_client = Vec::new();
    let mut excluded = Vec::new();
    for client in clients {
        let split_seed = client_split_seed(cfg.master_seed, client.id());
        let (support_batch, query_batch) =
            match split_support_query(client, cfg.support_fraction, split_seed, cfg.split_mode) {
                Ok(split) => split,
                Err(Error::ClientTooSmall { client_id, .. }) => {
                    excluded.push(client_id);
                    continue;
                }
                Err(e) => return Err(e),
            };

        let adapted = match state.method {
            Method::FedAvg => state.theta.clone(),
            Method::FedAvgMeta => {
                let mut rng = rng_from(&[
                    cfg.master_seed,
                    SALT_EVAL,
                    cfg.round as u64,
                    hash_id(client.id()),
                ]);
                local_sgd_train(
                    spec,
                    &state.theta,
                    &support_batch,
                    cfg.fine_tune_epochs,
                    cfg.fine_tune_batch,
                    cfg.fine_tune_lr,
                    &mut rng,
                )?
            }
            Method::Maml | Method::Fomaml | Method::MetaSgd => {
                let support = ModelObjective::new(spec, &support_batch);
                let alpha = effective_alpha(&state.alpha, cfg.clamp_alpha);
                inner_update(&state.theta, &alpha, &support)?
            }
        };

        let correct = count_correct(spec, &adapted, &query_batch)?;
        per_client.push(ClientScore {
            client_id: client.id().to_string(),
            correct,
            total: query_batch.len(),
        });
    }
    let pairs: Vec<(usize, usize)> = per_client.iter().map(|s| (s.correct, s.total)).collect();
    let accuracy = accuracy_datapoint_weighted(&pairs)?;
    Ok(EvalOutcome {
        per_client,
        accuracy,
        excluded,
    })
}

fn effective_alpha(alpha: &InnerLr, clamp: bool) -> InnerLr {
    match (alpha, clamp) {
        (InnerLr::PerParam(a), true) => {
            InnerLr::PerParam(ParamVector::new(
                a.as_slice().iter().map(|v| v.max(0.0)).collect(),
            ))
        }
        _ => alpha.clone(),
    }
}

/// A finished run: the metric stream plus everything needed to analyze
/// it.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub final_state: AlgorithmState,
    /// Per-client scores of the final evaluation on test clients.
    pub final_test: EvalOutcome,
    pub ledger: CostLedger,
}

/// Runs the full federated loop on an already split dataset.
pub fn run_experiment(
    config: &FederatedConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    spec.validate()?;
    if !dataset.is_split() {
        return Err(Error::Config(
            "dataset needs a train/val/test client split before running".into(),
        ));
    }
    if spec.input_dim != dataset.feature_dim() {
        return Err(Error::Config(format!(
            "model input_dim {} does not match dataset feature dim {}",
            spec.input_dim,
            dataset.feature_dim()
        )));
    }
    if spec.classes != dataset.class_count() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            spec.classes,
            dataset.class_count()
        )));
    }
    let train_ids = dataset.ids_in(SplitGroup::Train);
    if config.clients_per_round > train_ids.len() {
        return Err(Error::Config(format!(
            "clients_per_round {} exceeds the {} training clients",
            config.clients_per_round,
            train_ids.len()
        )));
    }
    let val_clients = dataset.clients_in(SplitGroup::Val);
    let test_clients = dataset.clients_in(SplitGroup::Test);
    if test_clients.is_empty() {
        return Err(Error::Config("dataset split has no test clients".into()));
    }

    let p = spec.param_count();
    let theta = init_params(spec, mix(&[config.master_seed, SALT_INIT]))?;
    let alpha = if config.method == Method::MetaSgd {
        InnerLr::PerParam(ParamVector::new(vec![config.inner_lr; p]))
    } else {
        InnerLr::Scalar(config.inner_lr)
    };
    let mut state = AlgorithmState::new(config.method, theta, alpha, config.outer_lr)?;

    let mut ledger = CostLedger::new();
    let mut records = Vec::with_capacity(config.rounds);
    let mut final_test = None;

    for t in 1..=config.rounds {
        let mut sample_rng = rng_from(&[config.master_seed, SALT_SAMPLE, t as u64]);
        let sampled = sample_clients(&train_ids, config.clients_per_round, &mut sample_rng)?;

        let mut results: Vec<ClientResult> = Vec::new();
        let mut skipped: Vec<String> = Vec::new();
        let mut round_flops = 0u64;
        for id in &sampled {
            let client = dataset
                .client(id)
                .expect("sampled ids come from the dataset");
            let attempt = if config.method.is_meta() {
                run_client_meta(
                    &state,
                    spec,
                    client,
                    config.support_fraction,
                    client_split_seed(config.master_seed, id),
                    config.split_mode,
                )
            } else {
                run_client_fedavg(
                    &state.theta,
                    spec,
                    client,
                    config.local_epochs,
                    config.local_batch,
                    config.inner_lr,
                    mix(&[config.master_seed, SALT_LOCAL, t as u64, hash_id(id)]),
                )
            };
            match attempt {
                Ok(result) => {
                    round_flops += flops_for_client_round(
                        spec,
                        config.method,
                        result.n_support,
                        result.n_query,
                        config.local_epochs,
                        result.n_support,
                    );
                    results.push(result);
                }
                Err(Error::ClientTooSmall { client_id, n }) => {
                    warn!("round {t}: skipping client {client_id} with {n} records");
                    skipped.push(client_id);
                }
                Err(e) => return Err(with_round_context(e, t, id)),
            }
        }

        if !results.is_empty() {
            state = if config.method.is_meta() {
                server_update_meta(&state, &results, config.aggregation)?
            } else {
                let theta = server_update_fedavg(&results, config.aggregation)?;
                AlgorithmState::new(config.method, theta, state.alpha.clone(), state.outer_lr)?
            };
        }

        let (down, up) = bytes_per_round(config.method, p, results.len());
        ledger.record_round(RoundCost {
            flops: round_flops,
            downlink_bytes: down,
            uplink_bytes: up,
        });

        let mut val_accuracy = None;
        let mut test_accuracy = None;
        if t % config.eval_every == 0 || t == config.rounds {
            let eval_cfg = EvalConfig {
                support_fraction: config.support_fraction,
                split_mode: config.split_mode,
                fine_tune_epochs: config.local_epochs,
                fine_tune_batch: config.local_batch,
                fine_tune_lr: config.inner_lr,
                clamp_alpha: config.clamp_alpha_at_eval,
                master_seed: config.master_seed,
                round: t,
            };
            if !val_clients.is_empty() {
                val_accuracy = Some(evaluate(&state, spec, &val_clients, &eval_cfg)?.accuracy);
            }
            let test_eval = evaluate(&state, spec, &test_clients, &eval_cfg)?;
            test_accuracy = Some(test_eval.accuracy);
            if t == config.rounds {
                final_test = Some(test_eval);
            }
        }

        let m = results.len();
        let (mean_support_loss, mean_query_loss) = if m > 0 {
            (
                results.iter().map(|r| r.support_loss).sum::<f64>() / m as f64,
                results.iter().map(|r| r.query_loss).sum::<f64>() / m as f64,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let totals = ledger.total();
        records.push(RoundRecord {
            round: t,
            method: config.method,
            sampled_clients: sampled,
            skipped_clients: skipped,
            mean_support_loss,
            mean_query_loss,
            val_accuracy,
            test_accuracy,
            cum_flops: totals.flops,
            cum_uplink_bytes: totals.uplink_bytes,
            cum_downlink_bytes: totals.downlink_bytes,
        });
    }

    Ok(ExperimentOutcome {
        records,
        final_state: state,
        final_test: final_test.expect("the last round always evaluates"),
        ledger,
    })
}

fn with_round_context(e: Error, round: usize, client: &str) -> Error {
    let ctx = format!("round {round}, client {client}");
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::Protocol(m) => Error::Protocol(format!("{ctx}: {m}")),
        other => other,
    }
}
