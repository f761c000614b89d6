//! Cost and quality accounting: per-round FLOP and byte ledgers,
//! data-point-weighted accuracy, fairness statistics over per-client
//! accuracies, and time-to-target extraction.
//!
//! FLOPs follow a fixed convention so methods are comparable: a forward
//! pass costs 2 times the model's multiply-accumulates, a backward pass 2
//! forwards, a Hessian-vector product 4 forwards. Transfers count 4 bytes
//! per parameter each way (models ship as 32-bit floats); Meta-SGD moves
//! twice that because the rate vector travels with the parameters.

use std::f64::consts::PI;

use serde::Serialize;

use crate::fedsim::RoundRecord;
use crate::metalearn::Method;
use crate::models::ModelSpec;
use crate::{Error, Result};

const BYTES_PER_PARAM: u64 = 4;
pub const HISTOGRAM_BINS: usize = 20;
pub const KDE_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
    HessianVector,
}

/// FLOPs for one pass over one sample under the crate-wide convention.
pub fn flops_per_sample(spec: &ModelSpec, pass: Pass) -> u64 {
    let forward = 2 * spec.macs_per_sample();
    match pass {
        Pass::Forward => forward,
        Pass::Backward => 2 * forward,
        Pass::HessianVector => 4 * forward,
    }
}

/// FLOPs one client spends in one round.
///
/// Meta methods pay one gradient on the support set and one on the query
/// set (forward + backward each); the second-order methods add one
/// Hessian-vector product over the support set. The averaging baselines
/// pay `local_epochs` gradient passes over their `n_local` records;
/// minibatch boundaries do not change the per-sample count.
pub fn flops_for_client_round(
    spec: &ModelSpec,
    method: Method,
    n_support: usize,
    n_query: usize,
    local_epochs: usize,
    n_local: usize,
) -> u64 {
    let grad = flops_per_sample(spec, Pass::Forward) + flops_per_sample(spec, Pass::Backward);
    match method {
        Method::FedAvg | Method::FedAvgMeta => (local_epochs * n_local) as u64 * grad,
        Method::Fomaml => (n_support + n_query) as u64 * grad,
        Method::Maml | Method::MetaSgd => {
            (n_support + n_query) as u64 * grad
                + n_support as u64 * flops_per_sample(spec, Pass::HessianVector)
        }
    }
}

/// (downlink, uplink) bytes for one round with `participants` clients.
/// Both directions move one model per participant; Meta-SGD also moves
/// the rate vector.
pub fn bytes_per_round(method: Method, param_count: usize, participants: usize) -> (u64, u64) {
    let vectors = if method == Method::MetaSgd { 2 } else { 1 };
    let per_client = vectors * BYTES_PER_PARAM * param_count as u64;
    let total = per_client * participants as u64;
    (total, total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RoundCost {
    pub flops: u64,
    pub downlink_bytes: u64,
    pub uplink_bytes: u64,
}

/// Cumulative cost of a run, one entry per round.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CostLedger {
    rounds: Vec<RoundCost>,
    total: RoundCost,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    pub fn record_round(&mut self, cost: RoundCost) {
        self.total.flops += cost.flops;
        self.total.downlink_bytes += cost.downlink_bytes;
        self.total.uplink_bytes += cost.uplink_bytes;
        self.rounds.push(cost);
    }

    pub fn total(&self) -> RoundCost {
        self.total
    }

    pub fn rounds(&self) -> &[RoundCost] {
        &self.rounds
    }
}

/// Pools correct/total counts over clients, so every data point weighs
/// the same regardless of which client holds it.
pub fn accuracy_datapoint_weighted(per_client: &[(usize, usize)]) -> Result<f64> {
    if per_client.is_empty() {
        return Err(Error::UndefinedAccuracy);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for &(c, t) in per_client {
        if t == 0 {
            return Err(Error::UndefinedAccuracy);
        }
        if c > t {
            return Err(Error::Protocol(format!(
                "client reports {c} correct out of {t}"
            )));
        }
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total as f64)
}

/// Distribution of per-client accuracy: moments, a 20-bin histogram of
/// [0, 1], and a Gaussian KDE curve sampled at 101 evenly spaced points.
#[derive(Clone, Debug, Serialize)]
pub struct FairnessReport {
    pub per_client_accuracy: Vec<f64>,
    pub mean: f64,
    /// Population variance (divide by n).
    pub variance: f64,
    pub histogram: Vec<u64>,
    /// Silverman-bandwidth KDE with boundary reflection at 0 and 1, so
    /// the curve integrates to about 1 over the unit interval.
    pub kde: Vec<f64>,
}

pub fn fairness_stats(accuracies: &[f64]) -> Result<FairnessReport> {
    if accuracies.is_empty() {
        return Err(Error::Config(
            "fairness statistics need at least one per-client accuracy".into(),
        ));
    }
    if let Some(&bad) = accuracies
        .iter()
        .find(|a| !a.is_finite() || **a < 0.0 || **a > 1.0)
    {
        return Err(Error::Config(format!(
            "per-client accuracy {bad} is outside [0, 1]"
        )));
    }
    let n = accuracies.len();

    // Welford's recurrence; the two-pass formula is kept as a test oracle
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &a) in accuracies.iter().enumerate() {
        let delta = a - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (a - mean);
    }
    let variance = m2 / n as f64;

    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &a in accuracies {
        let bin = ((a * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }

    let kde = kde_curve(accuracies, variance.sqrt());

    Ok(FairnessReport {
        per_client_accuracy: accuracies.to_vec(),
        mean,
        variance,
        histogram,
        kde,
    })
}

fn kde_curve(values: &[f64], sigma: f64) -> Vec<f64> {
    let n = values.len() as f64;
    let bandwidth = (1.06 * sigma * n.powf(-0.2)).max(0.01);
    let norm = 1.0 / (n * bandwidth * (2.0 * PI).sqrt());
    (0..KDE_POINTS)
        .map(|j| {
            let x = j as f64 / (KDE_POINTS - 1) as f64;
            let mut acc = 0.0;
            for &a in values {
                // reflect each kernel at both boundaries so mass that
                // would spill outside [0, 1] folds back in
                for center in [a, -a, 2.0 - a] {
                    let t = (x - center) / bandwidth;
                    acc += (-0.5 * t * t).exp();
                }
            }
            norm * acc
        })
        .collect()
}

/// Cost snapshot at the first evaluated round whose test accuracy
/// reached `target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TargetHit {
    pub round: usize,
    pub cum_flops: u64,
    pub cum_uplink_bytes: u64,
    pub cum_downlink_bytes: u64,
}

/// Scans the records in order; `None` when the target was never reached.
pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<TargetHit> {
    for r in records {
        if let Some(acc) = r.test_accuracy {
            if acc >= target {
                return Some(TargetHit {
                    round: r.round,
                    cum_flops: r.cum_flops,
                    cum_uplink_bytes: r.cum_uplink_bytes,
                    cum_downlink_bytes: r.cum_downlink_bytes,
                });
            }
        }
    }
    None
}
