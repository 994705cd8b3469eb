//! Evaluation quantities: reward summaries, unigram/bigram Shannon
//! entropies over sample pools (diversity), and held-out NLL as the
//! perplexity proxy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamVector;
use crate::data::Trajectory;
use crate::model::QModel;
use crate::objectives::nll_terms;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("n-gram order must be >= 1")]
    ZeroOrder,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Entropy in nats, with a flag raised when no n-grams were available
/// (all sequences shorter than n).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyResult {
    pub nats: f64,
    pub degenerate: bool,
}

/// Shannon entropy of the empirical n-gram distribution pooled across all
/// samples (natural log). Bigrams carry no sequence-boundary padding.
pub fn entropy_h(samples: &[Vec<usize>], n: usize) -> Result<EntropyResult, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    let mut total = 0usize;
    for sample in samples {
        if sample.len() < n {
            continue;
        }
        for gram in sample.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Ok(EntropyResult {
            nats: 0.0,
            degenerate: true,
        });
    }
    // Sum in sorted-count order: hash iteration order must not leak into
    // the floating-point rounding.
    let mut count_values: Vec<usize> = counts.into_values().collect();
    count_values.sort_unstable();
    let total = total as f64;
    let nats = -count_values
        .into_iter()
        .map(|c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(EntropyResult {
        nats,
        degenerate: false,
    })
}

/// Mean per-token −log π over a held-out set. Perplexity is exp of this.
pub fn heldout_nll(
    model: &QModel,
    params: &ParamVector,
    dataset: &[Trajectory],
) -> Result<f64, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for traj in dataset {
        let rows = model.q_rows(params, &traj.token_ids)?;
        for nll in nll_terms(&rows, &traj.token_ids) {
            sum += nll;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// Mean, population standard deviation, and max of a reward sample.
pub fn reward_summary(rewards: &[f64]) -> Result<RewardSummary, MetricsError> {
    if rewards.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(RewardSummary {
        mean,
        std: var.sqrt(),
        max,
    })
}

/// One metrics line per training step. Evaluation-only quantities are
/// absent on non-evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_pcl_single: f64,
    pub loss_pcl_multi: f64,
    pub loss_mle: f64,
    pub loss_pg: f64,
    pub loss_q_hard: f64,
    pub loss_sql_vanilla: f64,
    /// Number of on-policy rollouts in this step's batch (zero during the
    /// off-policy warmup phase).
    pub n_on: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward_on: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward_greedy: Option<f64>,
    /// Mean reward of the top-p evaluation samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward_sample: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_to_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_gap_to_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2: Option<f64>,
}

impl MetricsRecord {
    /// Every present value must be finite.
    pub fn all_finite(&self) -> bool {
        let required = [
            self.loss_total,
            self.loss_pcl_single,
            self.loss_pcl_multi,
            self.loss_mle,
            self.loss_pg,
            self.loss_q_hard,
            self.loss_sql_vanilla,
        ];
        let optional = [
            self.mean_reward_on,
            self.mean_reward_greedy,
            self.mean_reward_sample,
            self.tv_to_oracle,
            self.v_gap_to_oracle,
            self.soft_return,
            self.h1,
            self.h2,
        ];
        required.iter().all(|v| v.is_finite()) && optional.iter().flatten().all(|v| v.is_finite())
    }
}
