//! Terminal-reward computation: weighted sums of pluggable components,
//! scaled by a global factor that doubles as the maximum-entropy
//! temperature (large scale pushes the soft-optimal policy toward the
//! deterministic argmax policy).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Trajectory, Vocab};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward spec must have at least one component")]
    NoComponents,
    #[error("reward scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("ngram_bleu max_n must be >= 1")]
    ZeroMaxN,
    #[error("length_window requires min <= max, got [{min}, {max}]")]
    BadWindow { min: usize, max: usize },
    #[error("unknown token {0} in reward component")]
    UnknownToken(String),
}

/// Add-one smoothing keeps tiny-sequence BLEU away from degenerate zeros;
/// unsmoothed BLEU is kept for exact hand-checkable values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    #[default]
    AddOne,
}

/// One reward ingredient, parameters already resolved to token ids.
#[derive(Debug, Clone)]
pub enum RewardComponent {
    /// 1.0 iff the sequence equals the target exactly.
    ExactMatch(Vec<usize>),
    /// 1.0 iff the pattern occurs as a contiguous run.
    SubstringBonus(Vec<usize>),
    /// Smoothed n-gram precision BLEU against fixed references.
    NgramBleu {
        references: Vec<Vec<usize>>,
        max_n: usize,
        smoothing: Smoothing,
    },
    /// Non-positive penalty for adjacent repeated tokens.
    RepetitionPenalty,
    /// 1.0 iff the sequence length lies in [min, max].
    LengthWindow { min: usize, max: usize },
    /// Arbitrary hand-crafted reward landscape over whole sequences.
    LookupTable {
        table: HashMap<Vec<usize>, f64>,
        default: Option<f64>,
    },
}

impl RewardComponent {
    pub fn evaluate(&self, tokens: &[usize]) -> f64 {
        match self {
            RewardComponent::ExactMatch(target) => {
                if tokens == target.as_slice() {
                    1.0
                } else {
                    0.0
                }
            }
            RewardComponent::SubstringBonus(pattern) => {
                if pattern.is_empty() || tokens.windows(pattern.len()).any(|w| w == pattern) {
                    1.0
                } else {
                    0.0
                }
            }
            RewardComponent::NgramBleu {
                references,
                max_n,
                smoothing,
            } => ngram_bleu(tokens, references, *max_n, *smoothing),
            RewardComponent::RepetitionPenalty => repetition_penalty(tokens),
            RewardComponent::LengthWindow { min, max } => {
                if (*min..=*max).contains(&tokens.len()) {
                    1.0
                } else {
                    0.0
                }
            }
            RewardComponent::LookupTable { table, default } => {
                table.get(tokens).copied().or(*default).unwrap_or(0.0)
            }
        }
    }
}

/// Weighted-sum reward composition with a global scale.
#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub components: Vec<(RewardComponent, f64)>,
    pub scale: f64,
}

impl RewardSpec {
    pub fn new(components: Vec<(RewardComponent, f64)>, scale: f64) -> Result<Self, RewardError> {
        if components.is_empty() {
            return Err(RewardError::NoComponents);
        }
        if !(scale > 0.0) {
            return Err(RewardError::NonPositiveScale(scale));
        }
        for (component, _) in &components {
            match component {
                RewardComponent::NgramBleu { max_n, .. } if *max_n == 0 => {
                    return Err(RewardError::ZeroMaxN)
                }
                RewardComponent::LengthWindow { min, max } if min > max => {
                    return Err(RewardError::BadWindow {
                        min: *min,
                        max: *max,
                    })
                }
                _ => {}
            }
        }
        Ok(RewardSpec { components, scale })
    }

    /// scale × Σ weight_i × component_i(tokens). Deterministic.
    pub fn reward(&self, tokens: &[usize]) -> f64 {
        let sum: f64 = self
            .components
            .iter()
            .map(|(component, weight)| weight * component.evaluate(tokens))
            .sum();
        self.scale * sum
    }

    /// Resolves the on-disk form against a vocabulary.
    pub fn from_file(file: &RewardSpecFile, vocab: &Vocab) -> Result<Self, RewardError> {
        let encode = |tokens: &[String]| -> Result<Vec<usize>, RewardError> {
            tokens
                .iter()
                .map(|t| {
                    vocab
                        .id(t)
                        .ok_or_else(|| RewardError::UnknownToken(t.clone()))
                })
                .collect()
        };
        let mut components = Vec::with_capacity(file.components.len());
        for c in &file.components {
            let resolved = match &c.kind {
                RewardComponentFile::ExactMatch { target } => {
                    RewardComponent::ExactMatch(encode(target)?)
                }
                RewardComponentFile::SubstringBonus { pattern } => {
                    RewardComponent::SubstringBonus(encode(pattern)?)
                }
                RewardComponentFile::NgramBleu {
                    references,
                    max_n,
                    smoothing,
                } => RewardComponent::NgramBleu {
                    references: references
                        .iter()
                        .map(|r| encode(r))
                        .collect::<Result<_, _>>()?,
                    max_n: *max_n,
                    smoothing: *smoothing,
                },
                RewardComponentFile::RepetitionPenalty {} => RewardComponent::RepetitionPenalty,
                RewardComponentFile::LengthWindow { min, max } => RewardComponent::LengthWindow {
                    min: *min,
                    max: *max,
                },
                RewardComponentFile::LookupTable { entries, default } => {
                    let mut table = HashMap::with_capacity(entries.len());
                    for entry in entries {
                        table.insert(encode(&entry.tokens)?, entry.reward);
                    }
                    RewardComponent::LookupTable {
                        table,
                        default: *default,
                    }
                }
            };
            components.push((resolved, c.weight));
        }
        RewardSpec::new(components, file.scale)
    }
}

/// On-disk reward spec: `{"scale": 1.0, "components": [{"kind": ..., "weight": ...}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpecFile {
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub components: Vec<RewardComponentEntry>,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardComponentEntry {
    #[serde(flatten)]
    pub kind: RewardComponentFile,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

fn default_max_n() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardComponentFile {
    ExactMatch {
        target: Vec<String>,
    },
    SubstringBonus {
        pattern: Vec<String>,
    },
    NgramBleu {
        references: Vec<Vec<String>>,
        #[serde(default = "default_max_n")]
        max_n: usize,
        #[serde(default)]
        smoothing: Smoothing,
    },
    RepetitionPenalty {},
    LengthWindow {
        min: usize,
        max: usize,
    },
    LookupTable {
        entries: Vec<LookupEntry>,
        #[serde(default)]
        default: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LookupEntry {
    pub tokens: Vec<String>,
    pub reward: f64,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU: geometric mean of modified n-gram precisions times the brevity
/// penalty. `max_n` is clamped to the candidate length so that short
/// candidates are scored over the orders they can actually populate.
pub fn ngram_bleu(
    candidate: &[usize],
    references: &[Vec<usize>],
    max_n: usize,
    smoothing: Smoothing,
) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let max_n = max_n.min(candidate.len());

    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        let mut matched = 0usize;
        for (gram, &count) in &cand_counts {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        let precision = match smoothing {
            Smoothing::AddOne => (matched + 1) as f64 / (total + 1) as f64,
            Smoothing::None => {
                if matched == 0 {
                    return 0.0;
                }
                matched as f64 / total as f64
            }
        };
        log_precision_sum += precision.ln();
    }
    let geo_mean = (log_precision_sum / max_n as f64).exp();

    // Brevity penalty against the closest reference length (ties favor the
    // shorter reference, as in the original definition).
    let cand_len = candidate.len();
    let ref_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let diff = len.abs_diff(cand_len);
            (diff, len)
        })
        .unwrap_or(0);
    let bp = if cand_len >= ref_len || ref_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    (bp * geo_mean).clamp(0.0, 1.0)
}

/// −(adjacent repeats) / max(1, length). Zero for repeat-free sequences.
pub fn repetition_penalty(tokens: &[usize]) -> f64 {
    let repeats = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    -(repeats as f64) / (tokens.len().max(1) as f64)
}

/// Keeps exactly the trajectories with reward >= threshold, in order.
pub fn filter_dataset_by_reward(
    dataset: &[Trajectory],
    spec: &RewardSpec,
    threshold: f64,
) -> Vec<Trajectory> {
    dataset
        .iter()
        .filter(|t| spec.reward(&t.token_ids) >= threshold)
        .cloned()
        .collect()
}
