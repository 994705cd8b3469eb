//! Turning Q-rows into sequences: stochastic rollouts for on-policy
//! training, and greedy / top-p / beam-search decoding for evaluation.
//!
//! Ties break toward the lowest token index everywhere, and per-trajectory
//! RNG streams are split off the caller's stream up front, so results do
//! not depend on execution order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_sum_exp, ParamVector};
use crate::data::{Source, TaskSpec, Trajectory};
use crate::model::{policy_from_q, QModel};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("top-p must lie in (0, 1], got {0}")]
    BadTopP(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("beam width must be >= 1")]
    ZeroBeamWidth,
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
    #[error("rollout count must be >= 1")]
    ZeroCount,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
    TopP,
    Beam,
}

/// Decoder settings. Temperature divides the Q-rows before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub p: f64,
    pub beam_width: usize,
    /// Cap on emitted tokens; the task horizon still applies.
    pub max_len: Option<usize>,
    pub temperature: f64,
    /// Rank beam hypotheses by score/length instead of raw score.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Sample,
            p: 1.0,
            beam_width: 4,
            max_len: None,
            temperature: 1.0,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(DecodeError::BadTopP(self.p));
        }
        if !(self.temperature > 0.0) {
            return Err(DecodeError::BadTemperature(self.temperature));
        }
        if self.beam_width == 0 {
            return Err(DecodeError::ZeroBeamWidth);
        }
        if self.max_len == Some(0) {
            return Err(DecodeError::ZeroMaxLen);
        }
        Ok(())
    }

    fn horizon(&self, task: &TaskSpec) -> usize {
        self.max_len.unwrap_or(task.t_max).min(task.t_max)
    }
}

/// Keeps the smallest set of highest-probability tokens whose cumulative
/// mass reaches `p`, zeroes the rest, and renormalizes. Ties sort by
/// token index so the nucleus is deterministic. `p >= 1` returns the
/// input unchanged.
pub fn top_p_filter(probs: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; probs.len()];
    let mut cumulative = 0.0;
    for &idx in &order {
        keep[idx] = true;
        cumulative += probs[idx];
        if cumulative >= p {
            break;
        }
    }
    let mass: f64 = probs
        .iter()
        .zip(keep.iter())
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .sum();
    probs
        .iter()
        .zip(keep.iter())
        .map(|(&v, &k)| if k { v / mass } else { 0.0 })
        .collect()
}

fn step_distribution(row: &[f64], temperature: f64, p: f64) -> Vec<f64> {
    let probs = if temperature == 1.0 {
        policy_from_q(row)
    } else {
        let scaled: Vec<f64> = row.iter().map(|q| q / temperature).collect();
        policy_from_q(&scaled)
    };
    top_p_filter(&probs, p)
}

fn sample_index(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last_supported = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_supported = i;
        cumulative += p;
        if draw < cumulative {
            return i;
        }
    }
    // Rounding can leave the cumulative fractionally below 1; never fall
    // outside the support.
    last_supported
}

#[allow(clippy::too_many_arguments)]
fn sample_one(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
    horizon: usize,
    temperature: f64,
    p: f64,
    reward_scale: f64,
    rng: &mut ChaCha12Rng,
) -> Trajectory {
    let mut state = model.start_state(params);
    let mut tokens = Vec::new();
    loop {
        let row = model.state_q_row(params, &state);
        let probs = step_distribution(&row, temperature, p);
        let tok = sample_index(&probs, rng);
        tokens.push(tok);
        if tokens.len() >= horizon || task.is_terminal(&tokens) {
            break;
        }
        model.advance(params, &mut state, tok);
    }
    let reward = reward_scale * task.reward_spec.reward(&tokens);
    Trajectory::new(tokens, reward, Source::OnPolicy)
}

/// Draws `n` trajectories token-by-token from the policy induced by the
/// live Q-rows, stopping at eos or the horizon. Terminal rewards are
/// filled from the task's reward spec, multiplied by `reward_scale`.
///
/// Each trajectory runs on its own child RNG stream split off `rng`
/// before any sampling starts.
pub fn rollout(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
    n: usize,
    temperature: f64,
    reward_scale: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Trajectory>, DecodeError> {
    if n == 0 {
        return Err(DecodeError::ZeroCount);
    }
    if !(temperature > 0.0) {
        return Err(DecodeError::BadTemperature(temperature));
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    Ok(seeds
        .into_iter()
        .map(|seed| {
            let mut child = ChaCha12Rng::seed_from_u64(seed);
            sample_one(
                model,
                params,
                task,
                task.t_max,
                temperature,
                1.0,
                reward_scale,
                &mut child,
            )
        })
        .collect())
}

/// Evaluation sampler: like [`rollout`] but honoring a decode config
/// (temperature and top-p nucleus).
pub fn sample_sequences(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
    n: usize,
    config: &DecodeConfig,
    reward_scale: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Trajectory>, DecodeError> {
    if n == 0 {
        return Err(DecodeError::ZeroCount);
    }
    config.validate()?;
    let horizon = config.horizon(task);
    let p = match config.mode {
        DecodeMode::TopP => config.p,
        _ => 1.0,
    };
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    Ok(seeds
        .into_iter()
        .map(|seed| {
            let mut child = ChaCha12Rng::seed_from_u64(seed);
            sample_one(
                model,
                params,
                task,
                horizon,
                config.temperature,
                p,
                reward_scale,
                &mut child,
            )
        })
        .collect())
}

fn argmax_lowest_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic argmax decode; ties break to the lowest token index.
pub fn greedy_decode(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
    reward_scale: f64,
) -> Trajectory {
    let mut state = model.start_state(params);
    let mut tokens = Vec::new();
    loop {
        let row = model.state_q_row(params, &state);
        let tok = argmax_lowest_index(&row);
        tokens.push(tok);
        if tokens.len() >= task.t_max || task.is_terminal(&tokens) {
            break;
        }
        model.advance(params, &mut state, tok);
    }
    let reward = reward_scale * task.reward_spec.reward(&tokens);
    Trajectory::new(tokens, reward, Source::OnPolicy)
}

struct BeamHyp {
    tokens: Vec<usize>,
    score: f64,
    finished: bool,
    state: crate::model::DecodeState,
}

/// Standard beam search over cumulative log-policy. Scores carry no
/// length normalization unless the config flag asks for it at the final
/// ranking. Width 1 reproduces greedy decoding.
pub fn beam_search(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
    width: usize,
    length_normalize: bool,
    reward_scale: f64,
) -> Result<Vec<(Trajectory, f64)>, DecodeError> {
    if width == 0 {
        return Err(DecodeError::ZeroBeamWidth);
    }
    let mut beams = vec![BeamHyp {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        state: model.start_state(params),
    }];

    while beams.iter().any(|b| !b.finished) {
        let mut candidates: Vec<BeamHyp> = Vec::new();
        for beam in beams {
            if beam.finished {
                candidates.push(beam);
                continue;
            }
            let row = model.state_q_row(params, &beam.state);
            let lse = log_sum_exp(&row);
            for (tok, &q) in row.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                let score = beam.score + (q - lse);
                let finished = tokens.len() >= task.t_max || task.is_terminal(&tokens);
                let state = if finished {
                    beam.state.clone()
                } else {
                    let mut next = beam.state.clone();
                    model.advance(params, &mut next, tok);
                    next
                };
                candidates.push(BeamHyp {
                    tokens,
                    score,
                    finished,
                    state,
                });
            }
        }
        // Stable sort: ties keep parent order, then lowest token index.
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        candidates.truncate(width);
        beams = candidates;
    }

    let rank = |b: &BeamHyp| {
        if length_normalize {
            b.score / b.tokens.len().max(1) as f64
        } else {
            b.score
        }
    };
    beams.sort_by(|a, b| rank(b).partial_cmp(&rank(a)).unwrap());
    Ok(beams
        .into_iter()
        .map(|b| {
            let reward = reward_scale * task.reward_spec.reward(&b.tokens);
            let score = rank(&b);
            (Trajectory::new(b.tokens, reward, Source::OnPolicy), score)
        })
        .collect())
}

/// Every complete sequence of the task, with its cumulative log-policy
/// score. Exhaustive; only usable on tiny tasks.
pub fn enumerate_sequences(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
) -> Result<Vec<(Vec<usize>, f64)>, DecodeError> {
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn recurse(
        model: &QModel,
        params: &ParamVector,
        task: &TaskSpec,
        prefix: &mut Vec<usize>,
        score: f64,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) -> Result<(), DecodeError> {
        let row = model.q_row(params, prefix)?;
        let lse = log_sum_exp(&row);
        for (tok, &q) in row.iter().enumerate() {
            prefix.push(tok);
            let next_score = score + (q - lse);
            if task.is_terminal(prefix) {
                out.push((prefix.clone(), next_score));
            } else {
                recurse(model, params, task, prefix, next_score, out)?;
            }
            prefix.pop();
        }
        Ok(())
    }
    recurse(model, params, task, &mut prefix, 0.0, &mut out)?;
    Ok(out)
}
