//! Deterministic simulator of the fan-out/fan-in chunk inference
//! orchestration: a bounded worker pool, independent per-activity retries,
//! ordered aggregation, and the capacity-planning formula.
//!
//! Determinism contract: failures and simulated latencies for chunk `i` come
//! from a ChaCha8 substream keyed by `i`, never from a shared draw sequence,
//! so reports are identical for any worker count or scheduling order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Outcome;
use crate::signalio::{extract_chunks, EcgTrace};

/// Probability that any single activity attempt fails, plus the seed that
/// drives the simulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FailureModel {
    pub rate: f64,
    pub seed: u64,
}

impl Default for FailureModel {
    fn default() -> Self {
        FailureModel { rate: 0.0, seed: 0 }
    }
}

/// Lognormal latency model, reporting only — never used for correctness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Mean of the underlying normal (ln milliseconds).
    pub mu_ln: f64,
    pub sigma_ln: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        // median ~150 ms per endpoint call
        LatencyModel {
            mu_ln: 5.0,
            sigma_ln: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrchestrateConfig {
    pub window_s: f64,
    pub overlap_s: f64,
    pub workers: usize,
    pub retry_limit: usize,
    /// Verdict threshold on the aggregate probability.
    pub threshold: f64,
    pub failure: FailureModel,
    pub latency: LatencyModel,
}

impl Default for OrchestrateConfig {
    fn default() -> Self {
        OrchestrateConfig {
            window_s: 8.0,
            overlap_s: 1.0,
            workers: 4,
            retry_limit: 3,
            threshold: 0.5,
            failure: FailureModel::default(),
            latency: LatencyModel::default(),
        }
    }
}

/// Outcome of one chunk's inference activity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivityResult {
    pub chunk_index: usize,
    pub abnormal_probability: f64,
    pub attempts: usize,
    pub latency_ms: f64,
}

/// Aggregated orchestration outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrchestrationReport {
    pub per_chunk: Vec<ActivityResult>,
    pub aggregate_probability: f64,
    pub verdict: Outcome,
    pub threshold_used: f64,
    pub total_retries: usize,
    /// Diagnostics: maximum per-chunk probability and the fraction of chunks
    /// at or above the threshold.
    pub max_probability: f64,
    pub abnormal_fraction: f64,
}

/// Mean/max/fraction view of a result list.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub aggregate_probability: f64,
    pub verdict: Outcome,
    pub max_probability: f64,
    pub abnormal_fraction: f64,
}

/// Mean-probability aggregation with the `>=` verdict rule; the maximum and
/// the abnormal fraction ride along as diagnostics.
pub fn aggregate(results: &[ActivityResult], threshold: f64) -> Result<AggregateSummary> {
    if results.is_empty() {
        return Err(Error::EmptyInput("aggregate of zero results".into()));
    }
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.abnormal_probability).sum::<f64>() / n;
    let max = results
        .iter()
        .map(|r| r.abnormal_probability)
        .fold(f64::NEG_INFINITY, f64::max);
    let frac = results
        .iter()
        .filter(|r| r.abnormal_probability >= threshold)
        .count() as f64
        / n;
    Ok(AggregateSummary {
        aggregate_probability: mean,
        verdict: if mean >= threshold {
            Outcome::Abnormal
        } else {
            Outcome::Normal
        },
        max_probability: max,
        abnormal_fraction: frac,
    })
}

struct ActivityOutcome {
    result: Option<ActivityResult>,
    attempts: usize,
}

/// Run one activity: up to `retry_limit + 1` attempts, each failing with
/// `rate` on its own substream draw.
fn run_activity(
    chunk_index: usize,
    chunk: &EcgTrace,
    classifier: &(dyn Fn(&EcgTrace) -> f64 + Sync),
    config: &OrchestrateConfig,
) -> ActivityOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(config.failure.seed);
    rng.set_stream(chunk_index as u64 + 1);
    let lat = LogNormal::new(config.latency.mu_ln, config.latency.sigma_ln)
        .expect("latency sigma must be finite");
    let mut total_latency = 0.0;
    for attempt in 1..=(config.retry_limit + 1) {
        total_latency += lat.sample(&mut rng);
        let failed = rng.random_range(0.0..1.0) < config.failure.rate;
        if !failed {
            return ActivityOutcome {
                result: Some(ActivityResult {
                    chunk_index,
                    abnormal_probability: classifier(chunk),
                    attempts: attempt,
                    latency_ms: total_latency,
                }),
                attempts: attempt,
            };
        }
    }
    ActivityOutcome {
        result: None,
        attempts: config.retry_limit + 1,
    }
}

/// Chunk the trace, score every chunk on a bounded worker pool with
/// per-activity retries, and aggregate one verdict.
///
/// Results are ordered by chunk index regardless of completion order. Any
/// chunk that exhausts its retries surfaces as [`Error::PartialFailure`]
/// carrying the successful results.
pub fn fan_out(
    trace: &EcgTrace,
    classifier: &(dyn Fn(&EcgTrace) -> f64 + Sync),
    config: &OrchestrateConfig,
) -> Result<OrchestrationReport> {
    if config.workers == 0 {
        return Err(Error::Domain("worker count must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&config.failure.rate) {
        return Err(Error::Domain(format!(
            "failure rate must lie in [0, 1), got {}",
            config.failure.rate
        )));
    }
    let chunks = extract_chunks(trace, config.window_s, config.overlap_s)?.chunks;
    let total = chunks.len();

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, ActivityOutcome)>();
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(total).max(1) {
            let tx = tx.clone();
            let next = &next;
            let chunks = &chunks;
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= chunks.len() {
                    break;
                }
                let outcome = run_activity(idx, &chunks[idx], classifier, config);
                if tx.send((idx, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
    });

    let mut slots: Vec<Option<ActivityOutcome>> = (0..total).map(|_| None).collect();
    for (idx, outcome) in rx {
        slots[idx] = Some(outcome);
    }

    let mut per_chunk = Vec::with_capacity(total);
    let mut failed = Vec::new();
    let mut total_retries = 0usize;
    for (idx, slot) in slots.into_iter().enumerate() {
        let outcome = slot.expect("every chunk is dispatched exactly once");
        total_retries += outcome.attempts - 1;
        match outcome.result {
            Some(r) => per_chunk.push(r),
            None => failed.push(idx),
        }
    }

    let summary = if per_chunk.is_empty() {
        AggregateSummary {
            aggregate_probability: 0.0,
            verdict: Outcome::Normal,
            max_probability: 0.0,
            abnormal_fraction: 0.0,
        }
    } else {
        aggregate(&per_chunk, config.threshold)?
    };
    let report = OrchestrationReport {
        per_chunk,
        aggregate_probability: summary.aggregate_probability,
        verdict: summary.verdict,
        threshold_used: config.threshold,
        total_retries,
        max_probability: summary.max_probability,
        abnormal_fraction: summary.abnormal_fraction,
    };
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(Error::PartialFailure {
            failed,
            report: Box::new(report),
        })
    }
}

/// Endpoint capacity available from a node-pool configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityPlan {
    pub node_pool_count: u64,
    pub total_node_resources: f64,
    pub single_instance_utilisation: f64,
    pub available_endpoints: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// `available_endpoints = node_pool_count * floor(total / utilisation)`.
/// Utilisation above the per-node resources yields a zero-endpoint plan with
/// a warning instead of an error.
pub fn plan_capacity(
    node_pool_count: u64,
    total_node_resources: f64,
    single_instance_utilisation: f64,
) -> Result<CapacityPlan> {
    if node_pool_count == 0 || !(total_node_resources > 0.0) || !(single_instance_utilisation > 0.0)
    {
        return Err(Error::Domain(
            "capacity inputs must all be positive".into(),
        ));
    }
    let per_node = (total_node_resources / single_instance_utilisation).floor() as u64;
    let warning = if single_instance_utilisation > total_node_resources {
        let msg = format!(
            "instance utilisation {single_instance_utilisation} exceeds node resources {total_node_resources}; no endpoints fit"
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(CapacityPlan {
        node_pool_count,
        total_node_resources,
        single_instance_utilisation,
        available_endpoints: node_pool_count * per_node,
        warning,
    })
}
