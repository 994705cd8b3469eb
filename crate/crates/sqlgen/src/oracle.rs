//! Exact ground truth on tiny tasks: enumerate every reachable prefix,
//! run backward soft value iteration, and score arbitrary policies by
//! full enumeration.
//!
//! The backward recursion is Q*(s,a) = r(s,a) + γ·V*(s′) with
//! V*(s′) = log Σ exp Q*(s′,·) at non-terminal successors and 0 past the
//! terminal; rewards are the scale-multiplied terminal rewards, awarded
//! on the transition that finishes the episode.

use std::collections::HashMap;

use serde_json::json;
use thiserror::Error;

use crate::autodiff::{log_sum_exp, softmax};
use crate::data::{TaskSpec, Vocab};

/// Keeps oracle construction comfortably within seconds.
pub const DEFAULT_STATE_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state cap exceeded: reached {reached} states (cap {cap})")]
    StateCapExceeded { reached: usize, cap: usize },
    #[error("distribution length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("gamma must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
}

#[derive(Debug, Clone)]
pub struct OracleState {
    pub prefix: Vec<usize>,
    pub q: Vec<f64>,
    pub v: f64,
    pub pi: Vec<f64>,
}

/// Exact Q*, V*, and π* over all non-terminal prefixes of a task.
#[derive(Debug, Clone)]
pub struct OracleTables {
    pub gamma: f64,
    pub scale: f64,
    states: Vec<OracleState>,
    by_prefix: HashMap<Vec<usize>, usize>,
}

impl OracleTables {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[OracleState] {
        &self.states
    }

    pub fn state(&self, prefix: &[usize]) -> Option<&OracleState> {
        self.by_prefix.get(prefix).map(|&i| &self.states[i])
    }

    pub fn q_star(&self, prefix: &[usize]) -> Option<&[f64]> {
        self.state(prefix).map(|s| s.q.as_slice())
    }

    pub fn v_star(&self, prefix: &[usize]) -> Option<f64> {
        self.state(prefix).map(|s| s.v)
    }

    pub fn pi_star(&self, prefix: &[usize]) -> Option<&[f64]> {
        self.state(prefix).map(|s| s.pi.as_slice())
    }

    /// Probability that π* visits this prefix: the product of π* token
    /// probabilities along it.
    pub fn reach_probability(&self, prefix: &[usize]) -> f64 {
        let mut p = 1.0;
        for t in 0..prefix.len() {
            match self.state(&prefix[..t]) {
                Some(s) => p *= s.pi[prefix[t]],
                None => return 0.0,
            }
        }
        p
    }

    /// Serializable dump for inspection and test fixtures.
    pub fn to_json(&self, vocab: &Vocab) -> serde_json::Value {
        let states: Vec<serde_json::Value> = self
            .states
            .iter()
            .map(|s| {
                let tokens: Vec<&str> = s
                    .prefix
                    .iter()
                    .map(|&id| vocab.token(id).unwrap_or("?"))
                    .collect();
                json!({
                    "prefix": tokens,
                    "q": s.q,
                    "v": s.v,
                    "pi": s.pi,
                })
            })
            .collect();
        json!({
            "gamma": self.gamma,
            "scale": self.scale,
            "n_states": self.states.len(),
            "states": states,
        })
    }
}

fn check_gamma_scale(gamma: f64, scale: f64) -> Result<(), OracleError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(OracleError::BadGamma(gamma));
    }
    if !(scale > 0.0) {
        return Err(OracleError::BadScale(scale));
    }
    Ok(())
}

/// Backward soft value iteration over all enumerable prefixes.
///
/// `scale` multiplies the task's terminal rewards on top of whatever
/// scale the reward spec itself declares, mirroring the training-time
/// reward scale.
pub fn soft_value_iteration(
    task: &TaskSpec,
    gamma: f64,
    scale: f64,
) -> Result<OracleTables, OracleError> {
    soft_value_iteration_capped(task, gamma, scale, DEFAULT_STATE_CAP)
}

pub fn soft_value_iteration_capped(
    task: &TaskSpec,
    gamma: f64,
    scale: f64,
    cap: usize,
) -> Result<OracleTables, OracleError> {
    check_gamma_scale(gamma, scale)?;
    let mut tables = OracleTables {
        gamma,
        scale,
        states: Vec::new(),
        by_prefix: HashMap::new(),
    };
    solve_state(task, gamma, scale, cap, &mut tables, Vec::new())?;
    Ok(tables)
}

/// Returns V*(prefix) for a non-terminal prefix, materializing its
/// subtree in the tables.
fn solve_state(
    task: &TaskSpec,
    gamma: f64,
    scale: f64,
    cap: usize,
    tables: &mut OracleTables,
    prefix: Vec<usize>,
) -> Result<f64, OracleError> {
    if let Some(&idx) = tables.by_prefix.get(&prefix) {
        return Ok(tables.states[idx].v);
    }
    if tables.states.len() >= cap {
        return Err(OracleError::StateCapExceeded {
            reached: tables.states.len() + 1,
            cap,
        });
    }
    let size = task.vocab.size();
    let mut q = Vec::with_capacity(size);
    for a in 0..size {
        let mut successor = prefix.clone();
        successor.push(a);
        let value = if task.is_terminal(&successor) {
            scale * task.reward_spec.reward(&successor)
        } else {
            gamma * solve_state(task, gamma, scale, cap, tables, successor)?
        };
        q.push(value);
    }
    let v = log_sum_exp(&q);
    let pi = softmax(&q);
    let state = OracleState {
        prefix: prefix.clone(),
        q,
        v,
        pi,
    };
    tables.states.push(state);
    tables.by_prefix.insert(prefix, tables.states.len() - 1);
    Ok(tables.states.last().unwrap().v)
}

/// Exact expected discounted reward and soft return (reward plus
/// discounted entropy) of a policy, by enumerating every complete
/// sequence. The policy maps a prefix to a probability vector over the
/// vocabulary.
pub fn exact_policy_return<F>(
    task: &TaskSpec,
    policy: &F,
    gamma: f64,
    scale: f64,
) -> Result<(f64, f64), OracleError>
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    exact_policy_return_capped(task, policy, gamma, scale, DEFAULT_STATE_CAP)
}

pub fn exact_policy_return_capped<F>(
    task: &TaskSpec,
    policy: &F,
    gamma: f64,
    scale: f64,
    cap: usize,
) -> Result<(f64, f64), OracleError>
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    check_gamma_scale(gamma, scale)?;
    let mut expected_reward = 0.0;
    let mut soft_return = 0.0;
    let mut visited = 0usize;
    let mut prefix = Vec::new();
    walk(
        task,
        policy,
        gamma,
        scale,
        cap,
        &mut prefix,
        1.0,
        0.0,
        &mut expected_reward,
        &mut soft_return,
        &mut visited,
    )?;
    Ok((expected_reward, soft_return))
}

#[allow(clippy::too_many_arguments)]
fn walk<F>(
    task: &TaskSpec,
    policy: &F,
    gamma: f64,
    scale: f64,
    cap: usize,
    prefix: &mut Vec<usize>,
    prob: f64,
    entropy_acc: f64,
    expected_reward: &mut f64,
    soft_return: &mut f64,
    visited: &mut usize,
) -> Result<(), OracleError>
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    *visited += 1;
    if *visited > cap {
        return Err(OracleError::StateCapExceeded {
            reached: *visited,
            cap,
        });
    }
    let probs = policy(prefix);
    let depth = prefix.len();
    let discount = gamma.powi(depth as i32);
    for (a, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let branch_prob = prob * p;
        let branch_entropy = entropy_acc - discount * p.ln();
        prefix.push(a);
        if task.is_terminal(prefix) {
            let r = discount * scale * task.reward_spec.reward(prefix);
            *expected_reward += branch_prob * r;
            *soft_return += branch_prob * (r + branch_entropy);
        } else {
            walk(
                task,
                policy,
                gamma,
                scale,
                cap,
                prefix,
                branch_prob,
                branch_entropy,
                expected_reward,
                soft_return,
                visited,
            )?;
        }
        prefix.pop();
    }
    Ok(())
}

/// Total variation distance: half the L1 distance between distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, OracleError> {
    if p.len() != q.len() {
        return Err(OracleError::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5
        * p.iter()
            .zip(q.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}
