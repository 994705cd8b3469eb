//! Training losses: maximum likelihood, policy gradient with reward-to-go,
//! hard Q-learning regression, vanilla soft Q-learning regression, and
//! single-/multi-step path-consistency objectives, plus their weighted
//! combination.
//!
//! Every loss exists on two routes: a plain value route computed from
//! explicit Q-rows (used by the oracle checks and diagnostics) and a tape
//! route whose gradients flow only through the live parameters — target
//! network quantities always enter as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, DiffError, GradVector, ParamVector, ScalarId, Tape};
use crate::data::{Batch, Trajectory};
use crate::model::{ModelError, QModel};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("at least one loss weight must be positive")]
    NoActiveLoss,
    #[error("policy-gradient loss requires a non-empty on-policy batch")]
    PgNeedsOnPolicy,
    #[error("both batches are empty")]
    EmptyBatches,
    #[error("gamma must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mixture weights over the loss components. The default enables the
/// single- and multi-step path-consistency pair plus a small vanilla
/// regression term.
///
/// The vanilla term is the value-level anchor: path-consistency gradients
/// reach the parameters only through log π, which is invariant to adding
/// a constant to a Q-row, so on their own they can never settle the
/// absolute level of the Q-values (and hence of V). The vanilla residual
/// regresses Q(s_t, a_t) itself against r_t + γ·V̄(s_{t+1}), giving the
/// levels a restoring force toward the soft Bellman fixed point. All
/// three components vanish at Q*, so the anchor does not move the
/// optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_pcl_single: f64,
    pub w_pcl_multi: f64,
    pub w_mle: f64,
    pub w_pg: f64,
    pub w_q_hard: f64,
    pub w_sql_vanilla: f64,
}

pub const DEFAULT_VALUE_ANCHOR: f64 = 0.1;

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pcl_single: 1.0,
            w_pcl_multi: 1.0,
            w_mle: 0.0,
            w_pg: 0.0,
            w_q_hard: 0.0,
            w_sql_vanilla: DEFAULT_VALUE_ANCHOR,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let all = [
            self.w_pcl_single,
            self.w_pcl_multi,
            self.w_mle,
            self.w_pg,
            self.w_q_hard,
            self.w_sql_vanilla,
        ];
        if all.iter().any(|&w| w > 0.0) {
            Ok(())
        } else {
            Err(ObjectiveError::NoActiveLoss)
        }
    }

    pub fn only(kind: LossKind) -> LossWeights {
        let mut w = LossWeights {
            w_pcl_single: 0.0,
            w_pcl_multi: 0.0,
            w_mle: 0.0,
            w_pg: 0.0,
            w_q_hard: 0.0,
            w_sql_vanilla: 0.0,
        };
        match kind {
            LossKind::PclSingle => w.w_pcl_single = 1.0,
            LossKind::PclMulti => w.w_pcl_multi = 1.0,
            LossKind::Mle => w.w_mle = 1.0,
            LossKind::Pg => w.w_pg = 1.0,
            LossKind::QHard => w.w_q_hard = 1.0,
            LossKind::SqlVanilla => w.w_sql_vanilla = 1.0,
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    PclSingle,
    PclMulti,
    Mle,
    Pg,
    QHard,
    SqlVanilla,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::PclSingle,
        LossKind::PclMulti,
        LossKind::Mle,
        LossKind::Pg,
        LossKind::QHard,
        LossKind::SqlVanilla,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::PclSingle => "pcl_single",
            LossKind::PclMulti => "pcl_multi",
            LossKind::Mle => "mle",
            LossKind::Pg => "pg",
            LossKind::QHard => "q_hard",
            LossKind::SqlVanilla => "sql_vanilla",
        }
    }
}

/// Per-component loss values for logging, alongside the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pcl_single: f64,
    pub pcl_multi: f64,
    pub mle: f64,
    pub pg: f64,
    pub q_hard: f64,
    pub sql_vanilla: f64,
    pub total: f64,
}

fn check_gamma(gamma: f64) -> Result<(), ObjectiveError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(ObjectiveError::BadGamma(gamma))
    }
}

// ---------------------------------------------------------------------------
// Value route: residuals and losses from explicit Q-rows.
// ---------------------------------------------------------------------------

/// log π(a_t | s_t) per position, from the rows' own normalizers.
pub fn log_probs_from_rows(rows: &[Vec<f64>], tokens: &[usize]) -> Vec<f64> {
    rows.iter()
        .zip(tokens.iter())
        .map(|(row, &tok)| row[tok] - autodiff::log_sum_exp(row))
        .collect()
}

/// −log π(a_t | s_t) per position.
pub fn nll_terms(rows: &[Vec<f64>], tokens: &[usize]) -> Vec<f64> {
    log_probs_from_rows(rows, tokens)
        .into_iter()
        .map(|lp| -lp)
        .collect()
}

/// Discounted reward-to-go per step. With sparse terminal rewards this is
/// γ^(T−t)·r_T.
pub fn reward_to_go(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let len = traj.len();
    (0..len)
        .map(|t| gamma.powi((len - 1 - t) as i32) * traj.terminal_reward)
        .collect()
}

/// Single-step path-consistency residuals:
/// −V̄(s_t) + γ·V̄(s_{t+1}) + r_t − log π(a_t|s_t), with the past-terminal
/// value fixed at zero.
pub fn pcl_single_residuals(
    live_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    tokens: &[usize],
    reward: f64,
    gamma: f64,
) -> Vec<f64> {
    let len = tokens.len();
    let log_probs = log_probs_from_rows(live_rows, tokens);
    let target_values: Vec<f64> = target_rows
        .iter()
        .map(|row| autodiff::log_sum_exp(row))
        .collect();
    (0..len)
        .map(|t| {
            let next_value = if t + 1 < len {
                target_values[t + 1]
            } else {
                0.0
            };
            let r = if t + 1 == len { reward } else { 0.0 };
            -target_values[t] + gamma * next_value + r - log_probs[t]
        })
        .collect()
}

/// Multi-step (telescoped) residuals, one per start index t:
/// −V̄(s_t) + γ^(T−t)·r_T − Σ_l γ^l·log π(a_{t+l}|s_{t+l}).
pub fn pcl_multi_residuals(
    live_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    tokens: &[usize],
    reward: f64,
    gamma: f64,
) -> Vec<f64> {
    let len = tokens.len();
    let log_probs = log_probs_from_rows(live_rows, tokens);
    (0..len)
        .map(|t| {
            let v_start = autodiff::log_sum_exp(&target_rows[t]);
            let discounted_reward = gamma.powi((len - 1 - t) as i32) * reward;
            let mut acc = -v_start + discounted_reward;
            for (l, lp) in log_probs[t..].iter().enumerate() {
                acc -= gamma.powi(l as i32) * lp;
            }
            acc
        })
        .collect()
}

/// Hard Q-learning residuals: r_t + γ·max_a′ Q̄(s_{t+1},a′) − Q(s_t,a_t),
/// bootstrap term zero at the final step.
pub fn q_hard_residuals(
    live_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    tokens: &[usize],
    reward: f64,
    gamma: f64,
) -> Vec<f64> {
    let len = tokens.len();
    (0..len)
        .map(|t| {
            let bootstrap = if t + 1 < len {
                target_rows[t + 1]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                0.0
            };
            let r = if t + 1 == len { reward } else { 0.0 };
            r + gamma * bootstrap - live_rows[t][tokens[t]]
        })
        .collect()
}

/// Vanilla soft Q-learning residuals:
/// r_t + γ·log Σ exp Q̄(s_{t+1},·) − Q(s_t,a_t), bootstrap zero at the end.
pub fn sql_vanilla_residuals(
    live_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    tokens: &[usize],
    reward: f64,
    gamma: f64,
) -> Vec<f64> {
    let len = tokens.len();
    (0..len)
        .map(|t| {
            let bootstrap = if t + 1 < len {
                autodiff::log_sum_exp(&target_rows[t + 1])
            } else {
                0.0
            };
            let r = if t + 1 == len { reward } else { 0.0 };
            r + gamma * bootstrap - live_rows[t][tokens[t]]
        })
        .collect()
}

struct RowSet {
    tokens: Vec<usize>,
    reward: f64,
    live_rows: Vec<Vec<f64>>,
    target_rows: Vec<Vec<f64>>,
}

fn row_sets(
    model: &QModel,
    params: &ParamVector,
    target_params: Option<&ParamVector>,
    batch: &Batch,
) -> Result<Vec<RowSet>, ObjectiveError> {
    let mut out = Vec::with_capacity(batch.n_rows());
    for (tokens, reward) in batch.rows() {
        let live_rows = model.q_rows(params, tokens)?;
        let target_rows = match target_params {
            Some(tp) => model.q_rows(tp, tokens)?,
            None => Vec::new(),
        };
        out.push(RowSet {
            tokens: tokens.to_vec(),
            reward,
            live_rows,
            target_rows,
        });
    }
    Ok(out)
}

fn mean_half_square(residuals_per_row: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for residuals in residuals_per_row {
        for r in residuals {
            sum += 0.5 * r * r;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean over valid positions of −log π(a_t|s_t).
pub fn loss_mle(
    model: &QModel,
    params: &ParamVector,
    batch: &Batch,
) -> Result<f64, ObjectiveError> {
    let sets = row_sets(model, params, None, batch)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for set in &sets {
        for nll in nll_terms(&set.live_rows, &set.tokens) {
            sum += nll;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean over sequences of −Σ_t (Q̂_t − baseline)·log π(a_t|s_t), where
/// Q̂ is the sampled reward-to-go treated as a constant.
pub fn loss_pg(
    model: &QModel,
    params: &ParamVector,
    on_policy_batch: &Batch,
    gamma: f64,
    baseline: f64,
) -> Result<f64, ObjectiveError> {
    check_gamma(gamma)?;
    if on_policy_batch.is_empty() {
        return Err(ObjectiveError::PgNeedsOnPolicy);
    }
    let sets = row_sets(model, params, None, on_policy_batch)?;
    let mut sum = 0.0;
    for set in &sets {
        let log_probs = log_probs_from_rows(&set.live_rows, &set.tokens);
        let len = set.tokens.len();
        for (t, lp) in log_probs.iter().enumerate() {
            let q_hat = gamma.powi((len - 1 - t) as i32) * set.reward;
            sum -= (q_hat - baseline) * lp;
        }
    }
    Ok(sum / sets.len() as f64)
}

macro_rules! residual_loss_fn {
    ($name:ident, $residuals:ident, $doc:expr) => {
        #[doc = $doc]
        pub fn $name(
            model: &QModel,
            params: &ParamVector,
            target_params: &ParamVector,
            batch: &Batch,
            gamma: f64,
        ) -> Result<f64, ObjectiveError> {
            check_gamma(gamma)?;
            let sets = row_sets(model, params, Some(target_params), batch)?;
            let residuals: Vec<Vec<f64>> = sets
                .iter()
                .map(|s| $residuals(&s.live_rows, &s.target_rows, &s.tokens, s.reward, gamma))
                .collect();
            Ok(mean_half_square(&residuals))
        }
    };
}

residual_loss_fn!(
    loss_pcl_single,
    pcl_single_residuals,
    "Masked mean of half squared single-step path-consistency residuals."
);
residual_loss_fn!(
    loss_pcl_multi,
    pcl_multi_residuals,
    "Mean over sequences and start steps of half squared multi-step residuals."
);
residual_loss_fn!(
    loss_q_hard,
    q_hard_residuals,
    "Masked mean of half squared hard Q-learning regression residuals."
);
residual_loss_fn!(
    loss_sql_vanilla,
    sql_vanilla_residuals,
    "Masked mean of half squared vanilla soft Q-learning residuals."
);

// ---------------------------------------------------------------------------
// Tape route: the combined objective with gradients.
// ---------------------------------------------------------------------------

struct TapeItem<'a> {
    tokens: &'a [usize],
    reward: f64,
    /// Target-network V̄ at each state (constants on the tape).
    target_values: Vec<f64>,
    /// Target-network max-Q at each state, for the hard bootstrap.
    target_maxes: Vec<f64>,
    on_policy: bool,
}

/// Weighted combination of the enabled loss components, evaluated on the
/// union of the on- and off-policy batches (policy gradient on the
/// on-policy rows only). Returns the per-component breakdown and the
/// gradient with respect to the live parameters.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    model: &QModel,
    params: &ParamVector,
    target_params: &ParamVector,
    on_batch: &Batch,
    off_batch: &Batch,
    weights: &LossWeights,
    gamma: f64,
    pg_baseline: f64,
) -> Result<(LossBreakdown, GradVector), ObjectiveError> {
    weights.validate()?;
    check_gamma(gamma)?;
    if on_batch.is_empty() && off_batch.is_empty() {
        return Err(ObjectiveError::EmptyBatches);
    }
    if weights.w_pg > 0.0 && on_batch.is_empty() {
        return Err(ObjectiveError::PgNeedsOnPolicy);
    }

    let needs_target =
        weights.w_pcl_single > 0.0 || weights.w_pcl_multi > 0.0 || weights.w_sql_vanilla > 0.0;
    let needs_max = weights.w_q_hard > 0.0;

    let mut items: Vec<TapeItem> = Vec::with_capacity(on_batch.n_rows() + off_batch.n_rows());
    for (batch, on_policy) in [(on_batch, true), (off_batch, false)] {
        for (tokens, reward) in batch.rows() {
            let (target_values, target_maxes) = if needs_target || needs_max {
                let rows = model.q_rows(target_params, tokens)?;
                let values = if needs_target {
                    rows.iter().map(|r| autodiff::log_sum_exp(r)).collect()
                } else {
                    Vec::new()
                };
                let maxes = if needs_max {
                    rows.iter()
                        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                } else {
                    Vec::new()
                };
                (values, maxes)
            } else {
                (Vec::new(), Vec::new())
            };
            items.push(TapeItem {
                tokens,
                reward,
                target_values,
                target_maxes,
                on_policy,
            });
        }
    }

    let weights = *weights;
    let mut breakdown_slot = LossBreakdown::default();
    let breakdown_ref = &mut breakdown_slot;
    let (total, grad) = autodiff::backward(params, |tape| {
        let (root, breakdown) = build_combined(tape, model, &items, &weights, gamma, pg_baseline)?;
        *breakdown_ref = breakdown;
        Ok(root)
    })?;
    breakdown_slot.total = total;
    Ok((breakdown_slot, grad))
}

fn build_combined(
    tape: &mut Tape,
    model: &QModel,
    items: &[TapeItem],
    weights: &LossWeights,
    gamma: f64,
    pg_baseline: f64,
) -> Result<(ScalarId, LossBreakdown), DiffError> {
    let needs_log_probs = weights.w_pcl_single > 0.0
        || weights.w_pcl_multi > 0.0
        || weights.w_mle > 0.0
        || weights.w_pg > 0.0;
    let needs_picks = weights.w_q_hard > 0.0 || weights.w_sql_vanilla > 0.0;

    let total_positions: usize = items.iter().map(|i| i.tokens.len()).sum();
    let n_on_seqs = items.iter().filter(|i| i.on_policy).count();

    let mut single_sq: Vec<ScalarId> = Vec::new();
    let mut multi_sq: Vec<ScalarId> = Vec::new();
    let mut mle_terms: Vec<(f64, ScalarId)> = Vec::new();
    let mut pg_seq_terms: Vec<ScalarId> = Vec::new();
    let mut q_hard_sq: Vec<ScalarId> = Vec::new();
    let mut vanilla_sq: Vec<ScalarId> = Vec::new();

    for item in items {
        let len = item.tokens.len();
        let rows = model.q_rows_tape(tape, item.tokens)?;

        let log_probs: Vec<ScalarId> = if needs_log_probs {
            rows.iter()
                .zip(item.tokens.iter())
                .map(|(&row, &tok)| model.log_prob_node(tape, row, tok))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        let picks: Vec<ScalarId> = if needs_picks {
            rows.iter()
                .zip(item.tokens.iter())
                .map(|(&row, &tok)| tape.pick(row, tok))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };

        for t in 0..len {
            let r_t = if t + 1 == len { item.reward } else { 0.0 };

            if weights.w_pcl_single > 0.0 {
                let next_value = if t + 1 < len {
                    item.target_values[t + 1]
                } else {
                    0.0
                };
                let bias = -item.target_values[t] + gamma * next_value + r_t;
                let resid = tape.lin(&[(-1.0, log_probs[t])], bias)?;
                single_sq.push(tape.square(resid)?);
            }
            if weights.w_pcl_multi > 0.0 {
                let bias = -item.target_values[t] + gamma.powi((len - 1 - t) as i32) * item.reward;
                let terms: Vec<(f64, ScalarId)> = (t..len)
                    .map(|u| (-gamma.powi((u - t) as i32), log_probs[u]))
                    .collect();
                let resid = tape.lin(&terms, bias)?;
                multi_sq.push(tape.square(resid)?);
            }
            if weights.w_mle > 0.0 {
                mle_terms.push((-1.0 / total_positions as f64, log_probs[t]));
            }
            if weights.w_q_hard > 0.0 {
                let bootstrap = if t + 1 < len {
                    item.target_maxes[t + 1]
                } else {
                    0.0
                };
                let resid = tape.lin(&[(-1.0, picks[t])], r_t + gamma * bootstrap)?;
                q_hard_sq.push(tape.square(resid)?);
            }
            if weights.w_sql_vanilla > 0.0 {
                let bootstrap = if t + 1 < len {
                    item.target_values[t + 1]
                } else {
                    0.0
                };
                let resid = tape.lin(&[(-1.0, picks[t])], r_t + gamma * bootstrap)?;
                vanilla_sq.push(tape.square(resid)?);
            }
        }

        if weights.w_pg > 0.0 && item.on_policy {
            let terms: Vec<(f64, ScalarId)> = (0..len)
                .map(|t| {
                    let q_hat = gamma.powi((len - 1 - t) as i32) * item.reward;
                    (-(q_hat - pg_baseline), log_probs[t])
                })
                .collect();
            pg_seq_terms.push(tape.lin(&terms, 0.0)?);
        }
    }

    let half_mean = |tape: &mut Tape, squares: &[ScalarId]| -> Result<ScalarId, DiffError> {
        if squares.is_empty() {
            return tape.const_scalar(0.0);
        }
        let w = 0.5 / squares.len() as f64;
        let terms: Vec<(f64, ScalarId)> = squares.iter().map(|&s| (w, s)).collect();
        tape.lin(&terms, 0.0)
    };

    let pcl_single = half_mean(tape, &single_sq)?;
    let pcl_multi = half_mean(tape, &multi_sq)?;
    let mle = tape.lin(&mle_terms, 0.0)?;
    let pg = if pg_seq_terms.is_empty() {
        tape.const_scalar(0.0)?
    } else {
        let w = 1.0 / n_on_seqs as f64;
        let terms: Vec<(f64, ScalarId)> = pg_seq_terms.iter().map(|&s| (w, s)).collect();
        tape.lin(&terms, 0.0)?
    };
    let q_hard = half_mean(tape, &q_hard_sq)?;
    let sql_vanilla = half_mean(tape, &vanilla_sq)?;

    let total = tape.lin(
        &[
            (weights.w_pcl_single, pcl_single),
            (weights.w_pcl_multi, pcl_multi),
            (weights.w_mle, mle),
            (weights.w_pg, pg),
            (weights.w_q_hard, q_hard),
            (weights.w_sql_vanilla, sql_vanilla),
        ],
        0.0,
    )?;

    let breakdown = LossBreakdown {
        pcl_single: tape.value(pcl_single),
        pcl_multi: tape.value(pcl_multi),
        mle: tape.value(mle),
        pg: tape.value(pg),
        q_hard: tape.value(q_hard),
        sql_vanilla: tape.value(sql_vanilla),
        total: tape.value(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pad_batch, Source, TaskSpec, Trajectory, Vocab};
    use crate::model::{Arch, ModelConfig};
    use crate::oracle;
    use crate::reward::{RewardComponent, RewardSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn tiny_model(vocab_size: usize) -> QModel {
        QModel::new(
            ModelConfig {
                arch: Arch::RecurrentCell,
                embed_dim: 3,
                hidden_dim: 4,
                window: 1,
            },
            vocab_size,
        )
        .unwrap()
    }

    fn batch_of(rows: Vec<(Vec<usize>, f64)>) -> Batch {
        let trajs: Vec<Trajectory> = rows
            .into_iter()
            .map(|(ids, r)| Trajectory::new(ids, r, Source::OffPolicy))
            .collect();
        pad_batch(&trajs, usize::MAX).unwrap()
    }

    fn uniform_params(model: &QModel) -> ParamVector {
        model.init_params(0).zeros_like()
    }

    #[test]
    fn mle_of_uniform_model_is_log_vocab() {
        let model = tiny_model(4);
        let params = uniform_params(&model);
        let batch = batch_of(vec![(vec![0, 1, 2], 0.0), (vec![3], 0.0)]);
        let loss = loss_mle(&model, &params, &batch).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mle_near_zero_when_mass_sits_on_observed_tokens() {
        // Synthetic rows: +40 logits on the observed token swamp the rest.
        let rows = vec![vec![40.0, 0.0], vec![0.0, 40.0]];
        let total: f64 = nll_terms(&rows, &[0, 1]).iter().sum();
        assert!(total < 1e-12, "nll sum {total}");
    }

    #[test]
    fn mle_matches_hand_sum_on_two_row_batch() {
        let model = tiny_model(3);
        let params = model.init_params(5);
        let batch = batch_of(vec![(vec![0, 2], 0.0), (vec![1, 1], 0.0)]);
        let loss = loss_mle(&model, &params, &batch).unwrap();

        let mut hand = 0.0;
        for (tokens, _) in batch.rows() {
            let rows = model.q_rows(&params, tokens).unwrap();
            for (row, &tok) in rows.iter().zip(tokens) {
                hand += autodiff::log_sum_exp(row) - row[tok];
            }
        }
        hand /= 4.0;
        assert!((loss - hand).abs() < 1e-12);
    }

    #[test]
    fn reward_to_go_examples() {
        let traj = Trajectory::new(vec![0, 0, 0], 1.0, Source::OnPolicy);
        assert_eq!(reward_to_go(&traj, 0.5), vec![0.25, 0.5, 1.0]);

        let zero = Trajectory::new(vec![0, 1], 0.0, Source::OnPolicy);
        assert_eq!(reward_to_go(&zero, 0.9), vec![0.0, 0.0]);

        let flat = Trajectory::new(vec![0, 1, 0, 1], 3.0, Source::OnPolicy);
        assert_eq!(reward_to_go(&flat, 1.0), vec![3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn pg_loss_examples() {
        let model = tiny_model(2);
        let params = uniform_params(&model);

        // Zero rewards: zero loss and zero gradient.
        let zero_batch = batch_of(vec![(vec![0, 1], 0.0)]);
        assert_eq!(
            loss_pg(&model, &params, &zero_batch, 1.0, 0.0).unwrap(),
            0.0
        );
        let (loss, grad) = combined_loss(
            &model,
            &params,
            &params,
            &zero_batch,
            &Batch::empty(),
            &LossWeights::only(LossKind::Pg),
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(loss.total, 0.0);
        assert!((0..grad.total_count()).all(|i| grad.get_flat(i) == 0.0));

        // Centered weights: equal rewards with baseline at the mean give a
        // zero gradient (gamma = 1).
        let equal_batch = batch_of(vec![(vec![0, 1], 2.0), (vec![1, 0], 2.0)]);
        let (_, grad) = combined_loss(
            &model,
            &params,
            &params,
            &equal_batch,
            &Batch::empty(),
            &LossWeights::only(LossKind::Pg),
            1.0,
            2.0,
        )
        .unwrap();
        for i in 0..grad.total_count() {
            assert!(grad.get_flat(i).abs() < 1e-12);
        }

        // Single trajectory, rewards-to-go [1, 1], uniform policy over two
        // tokens: loss = 2 ln 2.
        let one = batch_of(vec![(vec![0, 1], 1.0)]);
        let loss = loss_pg(&model, &params, &one, 1.0, 0.0).unwrap();
        assert!((loss - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn pg_requires_on_policy_rows() {
        let model = tiny_model(2);
        let params = uniform_params(&model);
        assert!(matches!(
            loss_pg(&model, &params, &Batch::empty(), 1.0, 0.0),
            Err(ObjectiveError::PgNeedsOnPolicy)
        ));
        let off = batch_of(vec![(vec![0], 1.0)]);
        assert!(matches!(
            combined_loss(
                &model,
                &params,
                &params,
                &Batch::empty(),
                &off,
                &LossWeights::only(LossKind::Pg),
                1.0,
                0.0,
            ),
            Err(ObjectiveError::PgNeedsOnPolicy)
        ));
    }

    #[test]
    fn q_hard_residual_cases() {
        // Satisfied Bellman equation: r=0, gamma=1, next target max 2,
        // Q(s,a)=2 -> residual 0.
        let live = vec![vec![2.0, -1.0], vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
        let r = q_hard_residuals(&live, &target, &[0, 0], 0.0, 1.0);
        assert!((r[0] - 0.0).abs() < 1e-15);

        // Terminal step: r_T = 1, Q = 0 -> residual 1, loss 0.5.
        let live = vec![vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0]];
        let r = q_hard_residuals(&live, &target, &[0], 1.0, 1.0);
        assert_eq!(r, vec![1.0]);
        assert!((mean_half_square(&[r]) - 0.5).abs() < 1e-15);

        // r=0, gamma=0.5, next row [0,4], Q=1 -> 0.5*(2-1)^2 = 0.5.
        let live = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0], vec![0.0, 4.0]];
        let r = q_hard_residuals(&live, &target, &[0, 1], 0.0, 0.5);
        assert!((r[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sql_vanilla_residual_cases() {
        // r=0, gamma=1, next target row [0,0], Q=ln2 -> residual 0.
        let live = vec![vec![LN2, 0.0], vec![0.0, 0.0]];
        let target = vec![vec![9.0, 9.0], vec![0.0, 0.0]];
        let r = sql_vanilla_residuals(&live, &target, &[0, 0], 0.0, 1.0);
        assert!(r[0].abs() < 1e-15);

        // Terminal: r_T = 1, Q = 1 -> residual 0.
        let live = vec![vec![1.0, 0.0]];
        let target = vec![vec![0.0, 0.0]];
        let r = sql_vanilla_residuals(&live, &target, &[0], 1.0, 1.0);
        assert!(r[0].abs() < 1e-15);

        // r=0, gamma=1, next row [0,1], Q=0 -> 0.5*(ln(1+e))^2.
        let live = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
        let r = sql_vanilla_residuals(&live, &target, &[0, 1], 0.0, 1.0);
        let lse = (1.0 + std::f64::consts::E).ln();
        assert!((r[0] - lse).abs() < 1e-12);
        let loss = mean_half_square(&[vec![r[0]]]);
        assert!((loss - 0.5 * lse * lse).abs() < 1e-12);
    }

    #[test]
    fn pcl_single_residual_cases() {
        // Terminal step, vocab 2, uniform live and target rows, r_T = 1:
        // residual = -ln2 + 0 + 1 + ln2 = 1.
        let live = vec![vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0]];
        let r = pcl_single_residuals(&live, &target, &[0], 1.0, 1.0);
        assert!((r[0] - 1.0).abs() < 1e-15);

        // Mid-sequence step with uniform rows and zero reward, gamma = 1:
        // residual = -ln2 + ln2 + 0 + ln2 = ln2.
        let live = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let r = pcl_single_residuals(&live, &target, &[0, 1], 0.0, 1.0);
        assert!((r[0] - LN2).abs() < 1e-15);
        let loss = mean_half_square(&[vec![r[0]]]);
        assert!((loss - 0.5 * LN2 * LN2).abs() < 1e-12);
    }

    #[test]
    fn pcl_multi_residual_cases() {
        // Length-1 episode coincides with the terminal single-step case.
        let live = vec![vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0]];
        let r = pcl_multi_residuals(&live, &target, &[0], 1.0, 1.0);
        assert!((r[0] - 1.0).abs() < 1e-15);

        // r_T=0, uniform rows, gamma=1, length 2, start t=0:
        // residual = -ln2 + 0 + 2 ln2 = ln2.
        let live = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let target = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let r = pcl_multi_residuals(&live, &target, &[0, 1], 0.0, 1.0);
        assert!((r[0] - LN2).abs() < 1e-15);
    }

    fn ab_task() -> TaskSpec {
        let vocab = Vocab::new(vec!["a", "b"], None).unwrap();
        let spec =
            RewardSpec::new(vec![(RewardComponent::ExactMatch(vec![0, 1]), 1.0)], 1.0).unwrap();
        TaskSpec::new(vocab, 2, spec, None).unwrap()
    }

    /// All losses vanish when both networks hold the oracle Q*.
    #[test]
    fn zero_loss_at_the_oracle_fixed_point() {
        let task = ab_task();
        for gamma in [1.0, 0.8] {
            let tables = oracle::soft_value_iteration(&task, gamma, 1.0).unwrap();
            for tokens in [vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]] {
                let reward = task.reward_spec.reward(&tokens);
                let rows: Vec<Vec<f64>> = (0..tokens.len())
                    .map(|t| tables.q_star(&tokens[..t]).unwrap().to_vec())
                    .collect();
                for (name, residuals) in [
                    (
                        "single",
                        pcl_single_residuals(&rows, &rows, &tokens, reward, gamma),
                    ),
                    (
                        "multi",
                        pcl_multi_residuals(&rows, &rows, &tokens, reward, gamma),
                    ),
                    (
                        "vanilla",
                        sql_vanilla_residuals(&rows, &rows, &tokens, reward, gamma),
                    ),
                ] {
                    for r in &residuals {
                        assert!(
                            r.abs() < 1e-9,
                            "{name} residual {r} on {tokens:?} at gamma {gamma}"
                        );
                    }
                }
            }
        }
    }

    /// At the zero-loss point with the target at the oracle, the log
    /// policy matches the approximate advantage r + γV*(s′) − V*(s).
    #[test]
    fn advantage_matching_at_the_stationary_point() {
        let task = ab_task();
        let gamma = 1.0;
        let tables = oracle::soft_value_iteration(&task, gamma, 1.0).unwrap();
        for state in tables.states() {
            let q = tables.q_star(&state.prefix).unwrap();
            let v = tables.v_star(&state.prefix).unwrap();
            for a in 0..task.vocab.size() {
                let log_pi = q[a] - autodiff::log_sum_exp(q);
                let mut successor = state.prefix.clone();
                successor.push(a);
                let (r, v_next) = if task.is_terminal(&successor) {
                    (task.reward_spec.reward(&successor), 0.0)
                } else {
                    (0.0, tables.v_star(&successor).unwrap())
                };
                let approx_advantage = r + gamma * v_next - v;
                assert!(
                    (log_pi - approx_advantage).abs() < 1e-6,
                    "state {:?} action {a}: {log_pi} vs {approx_advantage}",
                    state.prefix
                );
            }
        }
    }

    /// Multi-step residual at t equals the γ-weighted sum of single-step
    /// residuals from t to the end.
    #[test]
    fn telescoping_identity_on_random_models() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        for trial in 0..30 {
            let model = tiny_model(3);
            let live = model.init_params(trial);
            let target = model.init_params(trial + 1000);
            let len = rng.gen_range(1..=5);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..3)).collect();
            let reward = rng.gen_range(-2.0..2.0);
            let gamma = rng.gen_range(0.5..=1.0);

            let live_rows = model.q_rows(&live, &tokens).unwrap();
            let target_rows = model.q_rows(&target, &tokens).unwrap();
            let single = pcl_single_residuals(&live_rows, &target_rows, &tokens, reward, gamma);
            let multi = pcl_multi_residuals(&live_rows, &target_rows, &tokens, reward, gamma);
            for (t, m) in multi.iter().enumerate() {
                let telescoped: f64 = (t..len)
                    .map(|u| gamma.powi((u - t) as i32) * single[u])
                    .sum();
                assert!(
                    (m - telescoped).abs() < 1e-10,
                    "trial {trial} t {t}: {} vs {telescoped}",
                    m
                );
            }
        }
    }

    #[test]
    fn combined_loss_terminal_example_sums_components() {
        let model = tiny_model(2);
        let params = uniform_params(&model);
        let batch = batch_of(vec![(vec![0], 1.0)]);
        let weights = LossWeights {
            w_pcl_single: 1.0,
            w_pcl_multi: 1.0,
            w_mle: 0.0,
            w_pg: 0.0,
            w_q_hard: 0.0,
            w_sql_vanilla: 0.0,
        };
        let (breakdown, _) = combined_loss(
            &model,
            &params,
            &params,
            &Batch::empty(),
            &batch,
            &weights,
            1.0,
            0.0,
        )
        .unwrap();
        assert!((breakdown.pcl_single - 0.5).abs() < 1e-12);
        assert!((breakdown.pcl_multi - 0.5).abs() < 1e-12);
        assert!((breakdown.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_enabled_component_equals_its_standalone_loss() {
        let model = tiny_model(3);
        let params = model.init_params(7);
        let target = model.init_params(8);
        let batch = batch_of(vec![(vec![0, 2, 1], 1.5), (vec![2], -0.5)]);
        let gamma = 0.9;

        let pairs: Vec<(LossKind, f64)> = vec![
            (
                LossKind::PclSingle,
                loss_pcl_single(&model, &params, &target, &batch, gamma).unwrap(),
            ),
            (
                LossKind::PclMulti,
                loss_pcl_multi(&model, &params, &target, &batch, gamma).unwrap(),
            ),
            (LossKind::Mle, loss_mle(&model, &params, &batch).unwrap()),
            (
                LossKind::QHard,
                loss_q_hard(&model, &params, &target, &batch, gamma).unwrap(),
            ),
            (
                LossKind::SqlVanilla,
                loss_sql_vanilla(&model, &params, &target, &batch, gamma).unwrap(),
            ),
            (
                LossKind::Pg,
                loss_pg(&model, &params, &batch, gamma, 0.25).unwrap(),
            ),
        ];
        for (kind, standalone) in pairs {
            let (on, off) = if kind == LossKind::Pg {
                (batch.clone(), Batch::empty())
            } else {
                (Batch::empty(), batch.clone())
            };
            let (breakdown, _) = combined_loss(
                &model,
                &params,
                &target,
                &on,
                &off,
                &LossWeights::only(kind),
                gamma,
                0.25,
            )
            .unwrap();
            assert!(
                (breakdown.total - standalone).abs() < 1e-12,
                "{}: {} vs {standalone}",
                kind.name(),
                breakdown.total
            );
        }
    }

    #[test]
    fn padding_columns_leave_losses_bit_identical() {
        let model = tiny_model(3);
        let params = model.init_params(13);
        let target = model.init_params(14);
        let batch = batch_of(vec![(vec![0, 2], 1.0), (vec![1], 0.5)]);

        let mut padded = batch.clone();
        for row in &mut padded.token_matrix {
            row.extend([usize::MAX, usize::MAX]);
        }
        for mask in &mut padded.mask {
            mask.extend([false, false]);
        }

        for kind in LossKind::ALL {
            let run = |b: &Batch| {
                let (on, off) = if kind == LossKind::Pg {
                    (b.clone(), Batch::empty())
                } else {
                    (Batch::empty(), b.clone())
                };
                combined_loss(
                    &model,
                    &params,
                    &target,
                    &on,
                    &off,
                    &LossWeights::only(kind),
                    0.9,
                    0.0,
                )
                .unwrap()
                .0
                .total
            };
            let plain = run(&batch);
            let extended = run(&padded);
            assert!(
                plain.to_bits() == extended.to_bits(),
                "{}: {plain} vs {extended}",
                kind.name()
            );
        }
    }

    /// Every loss gradient matches finite differences; target parameters
    /// stay fixed while probing (gradient gating).
    #[test]
    fn all_losses_pass_finite_difference_checks() {
        let model = tiny_model(3);
        let params = model.init_params(19);
        let target = model.init_params(20);
        let batch = batch_of(vec![(vec![0, 2, 1], 1.0), (vec![2, 2], -0.5)]);
        let gamma = 0.85;

        for kind in LossKind::ALL {
            let max_err = finite_diff_for_kind(&model, &params, &target, &batch, kind, gamma);
            assert!(max_err <= 1e-4, "{}: err {max_err}", kind.name());
        }
    }

    fn finite_diff_for_kind(
        model: &QModel,
        params: &ParamVector,
        target: &ParamVector,
        batch: &Batch,
        kind: LossKind,
        gamma: f64,
    ) -> f64 {
        let (on, off) = if kind == LossKind::Pg {
            (batch.clone(), Batch::empty())
        } else {
            (Batch::empty(), batch.clone())
        };
        gradcheck_loss(
            model, params, target, &on, &off, kind, gamma, 0.1, 64, 1e-5, 99,
        )
        .unwrap()
    }

    #[test]
    fn perturbing_target_changes_value_but_check_still_passes() {
        let model = tiny_model(2);
        let params = model.init_params(23);
        let t1 = model.init_params(24);
        let t2 = model.init_params(25);
        let batch = batch_of(vec![(vec![0, 1], 1.0)]);

        let l1 = loss_pcl_single(&model, &params, &t1, &batch, 1.0).unwrap();
        let l2 = loss_pcl_single(&model, &params, &t2, &batch, 1.0).unwrap();
        assert_ne!(l1, l2);

        for target in [&t1, &t2] {
            let err = gradcheck_loss(
                &model,
                &params,
                target,
                &Batch::empty(),
                &batch,
                LossKind::PclSingle,
                1.0,
                0.0,
                32,
                1e-5,
                7,
            )
            .unwrap();
            assert!(err <= 1e-4);
        }
    }

    #[test]
    fn tape_route_agrees_with_value_route() {
        let model = tiny_model(4);
        let params = model.init_params(31);
        let target = model.init_params(32);
        let batch = batch_of(vec![(vec![0, 3, 1, 2], 2.0), (vec![1, 1], 0.0)]);
        let gamma = 0.95;
        let (breakdown, _) = combined_loss(
            &model,
            &params,
            &target,
            &batch,
            &batch,
            &LossWeights {
                w_pcl_single: 1.0,
                w_pcl_multi: 1.0,
                w_mle: 1.0,
                w_pg: 1.0,
                w_q_hard: 1.0,
                w_sql_vanilla: 1.0,
            },
            gamma,
            0.3,
        )
        .unwrap();

        let union = batch_of(vec![
            (vec![0, 3, 1, 2], 2.0),
            (vec![1, 1], 0.0),
            (vec![0, 3, 1, 2], 2.0),
            (vec![1, 1], 0.0),
        ]);
        assert!(
            (breakdown.pcl_single
                - loss_pcl_single(&model, &params, &target, &union, gamma).unwrap())
            .abs()
                < 1e-12
        );
        assert!(
            (breakdown.pcl_multi
                - loss_pcl_multi(&model, &params, &target, &union, gamma).unwrap())
            .abs()
                < 1e-12
        );
        assert!((breakdown.mle - loss_mle(&model, &params, &union).unwrap()).abs() < 1e-12);
        assert!(
            (breakdown.pg - loss_pg(&model, &params, &batch, gamma, 0.3).unwrap()).abs() < 1e-12
        );
        assert!(
            (breakdown.q_hard - loss_q_hard(&model, &params, &target, &union, gamma).unwrap())
                .abs()
                < 1e-12
        );
        assert!(
            (breakdown.sql_vanilla
                - loss_sql_vanilla(&model, &params, &target, &union, gamma).unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn weights_must_enable_something() {
        let zero = LossWeights {
            w_pcl_single: 0.0,
            w_pcl_multi: 0.0,
            w_mle: 0.0,
            w_pg: 0.0,
            w_q_hard: 0.0,
            w_sql_vanilla: 0.0,
        };
        assert!(matches!(zero.validate(), Err(ObjectiveError::NoActiveLoss)));
        assert!(LossWeights::default().validate().is_ok());
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub loss: &'static str,
    pub arch: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_err: f64,
}

/// Finite-difference sweep over every loss on randomly initialized small
/// models of both architectures, with a random mixed batch. Returns the
/// per-(loss, architecture) maxima of the relative gradient error.
pub fn run_gradcheck(
    seed: u64,
    n_probes: usize,
    step: f64,
) -> Result<GradcheckReport, ObjectiveError> {
    use crate::data::{pad_batch, Source, Trajectory};
    use crate::model::{Arch, ModelConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let vocab_size = 4;
    let random_batch = |rng: &mut ChaCha12Rng, rows: usize| {
        let trajs: Vec<Trajectory> = (0..rows)
            .map(|_| {
                let len = rng.gen_range(1..=5);
                let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
                Trajectory::new(tokens, rng.gen_range(-2.0..2.0), Source::OffPolicy)
            })
            .collect();
        pad_batch(&trajs, vocab_size).expect("non-empty")
    };

    let mut entries = Vec::new();
    let mut overall = 0.0f64;
    for arch in [Arch::RecurrentCell, Arch::FixedWindowMlp] {
        let model = QModel::new(
            ModelConfig {
                arch,
                embed_dim: 3,
                hidden_dim: 5,
                window: 3,
            },
            vocab_size,
        )?;
        let params = model.init_params(rng.gen());
        let target = model.init_params(rng.gen());
        let on_batch = random_batch(&mut rng, 3);
        let off_batch = random_batch(&mut rng, 3);
        let gamma = rng.gen_range(0.6..=1.0);
        let baseline = rng.gen_range(-0.5..0.5);
        let arch_name = match arch {
            Arch::RecurrentCell => "recurrent_cell",
            Arch::FixedWindowMlp => "fixed_window_mlp",
        };
        for kind in LossKind::ALL {
            let err = gradcheck_loss(
                &model,
                &params,
                &target,
                &on_batch,
                &off_batch,
                kind,
                gamma,
                baseline,
                n_probes,
                step,
                rng.gen(),
            )?;
            overall = overall.max(err);
            entries.push(GradcheckEntry {
                loss: kind.name(),
                arch: arch_name,
                max_rel_err: err,
            });
        }
    }
    Ok(GradcheckReport {
        entries,
        max_rel_err: overall,
    })
}

/// Finite-difference check for a single loss component: builds the loss
/// through the tape route and compares its gradient on `n_probes` random
/// coordinates. Target parameters are held fixed throughout.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_loss(
    model: &QModel,
    params: &ParamVector,
    target_params: &ParamVector,
    on_batch: &Batch,
    off_batch: &Batch,
    kind: LossKind,
    gamma: f64,
    pg_baseline: f64,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64, ObjectiveError> {
    check_gamma(gamma)?;
    let weights = LossWeights::only(kind);
    if weights.w_pg > 0.0 && on_batch.is_empty() {
        return Err(ObjectiveError::PgNeedsOnPolicy);
    }

    // Precompute everything that is constant with respect to the live
    // parameters, exactly as combined_loss does.
    // (tokens, reward, target values, target maxes, on_policy)
    type FrozenItem = (Vec<usize>, f64, Vec<f64>, Vec<f64>, bool);
    let mut items: Vec<FrozenItem> = Vec::new();
    for (batch, on_policy) in [(on_batch, true), (off_batch, false)] {
        for (tokens, reward) in batch.rows() {
            let rows = model.q_rows(target_params, tokens)?;
            let values: Vec<f64> = rows.iter().map(|r| autodiff::log_sum_exp(r)).collect();
            let maxes: Vec<f64> = rows
                .iter()
                .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            items.push((tokens.to_vec(), reward, values, maxes, on_policy));
        }
    }

    let err = autodiff::finite_diff_check(
        params,
        |tape| {
            let tape_items: Vec<TapeItem> = items
                .iter()
                .map(|(tokens, reward, values, maxes, on_policy)| TapeItem {
                    tokens,
                    reward: *reward,
                    target_values: values.clone(),
                    target_maxes: maxes.clone(),
                    on_policy: *on_policy,
                })
                .collect();
            let (root, _) = build_combined(tape, model, &tape_items, &weights, gamma, pg_baseline)?;
            Ok(root)
        },
        n_probes,
        step,
        seed,
    )?;
    Ok(err)
}
