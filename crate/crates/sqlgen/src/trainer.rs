//! The training loop: off-policy batches from the dataset, on-policy
//! rollouts from the live policy, combined loss, gradient step, Polyak
//! target update, metrics, and checkpointing.
//!
//! Every random stream is derived statelessly from (run seed, domain,
//! step), so a resumed run consumes exactly the streams an uninterrupted
//! run would, and adding a new consumer never perturbs existing ones.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradVector, ParamVector};
use crate::data::{pad_batch, Batch, DataError, TaskSpec, Trajectory};
use crate::decoding::{self, DecodeConfig, DecodeMode};
use crate::metrics::{entropy_h, reward_summary, MetricsRecord};
use crate::model::{param_map, policy_from_q, state_value, ModelConfig, QModel, TargetModel};
use crate::objectives::{combined_loss, LossBreakdown, LossWeights};
use crate::oracle::{self, OracleTables};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; offending batch: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Diff(#[from] crate::autodiff::DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Gradient-descent state. Adam moments materialize on first use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    t: u64,
    m: Option<ParamVector>,
    v: Option<ParamVector>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            m: None,
            v: None,
        }
    }

    /// One descent update of `params` along `grad`.
    pub fn step(
        &mut self,
        params: &mut ParamVector,
        grad: &GradVector,
        lr: f64,
    ) -> Result<(), crate::autodiff::DiffError> {
        params.congruent_with(&grad.0)?;
        match self.kind {
            OptimizerKind::Sgd => params.zip_apply(&grad.0, |p, g| p - lr * g),
            OptimizerKind::Adam => {
                if self.m.is_none() {
                    self.m = Some(params.zeros_like());
                    self.v = Some(params.zeros_like());
                }
                self.t += 1;
                let m = self.m.as_mut().unwrap();
                let v = self.v.as_mut().unwrap();
                m.zip_apply(&grad.0, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
                v.zip_apply(&grad.0, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
                let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                let m = self.m.as_ref().unwrap();
                let v = self.v.as_ref().unwrap();
                for i in 0..params.total_count() {
                    let m_hat = m.get_flat(i) / bias1;
                    let v_hat = v.get_flat(i) / bias2;
                    let p = params.get_flat(i);
                    params.set_flat(i, p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
                }
                Ok(())
            }
        }
    }
}

/// Plain θ ← θ − lr·g.
pub fn sgd_update(
    params: &mut ParamVector,
    grad: &GradVector,
    lr: f64,
) -> Result<(), crate::autodiff::DiffError> {
    params.congruent_with(&grad.0)?;
    params.zip_apply(&grad.0, |p, g| p - lr * g)
}

/// Complete training configuration. Unset file keys fall back to these
/// defaults; unknown keys are schema errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub reward_scale: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_off: usize,
    pub batch_on: usize,
    pub warmup_steps: u64,
    pub rho: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: u64,
    pub optimizer: OptimizerKind,
    pub model: ModelConfig,
    pub pg_use_baseline: bool,
    pub pg_baseline_decay: f64,
    pub eval_samples: usize,
    pub eval_top_p: f64,
    pub rollout_temperature: f64,
    pub eval_oracle: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            reward_scale: 1.0,
            lr: 1e-3,
            steps: 2000,
            batch_off: 0,
            batch_on: 16,
            warmup_steps: 0,
            rho: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 200,
            optimizer: OptimizerKind::Adam,
            model: ModelConfig::default(),
            pg_use_baseline: true,
            pg_baseline_decay: 0.95,
            eval_samples: 128,
            eval_top_p: 1.0,
            rollout_temperature: 1.0,
            eval_oracle: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::Config(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.reward_scale > 0.0) {
            return err(format!(
                "reward_scale must be positive, got {}",
                self.reward_scale
            ));
        }
        if !(self.lr >= 0.0) {
            return err(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return err(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.batch_off + self.batch_on == 0 {
            return err("batch_off + batch_on must be >= 1".to_string());
        }
        if self.weights.w_pg > 0.0 && self.batch_on == 0 {
            return err("w_pg > 0 requires batch_on >= 1 after warmup".to_string());
        }
        if self.warmup_steps > 0 && self.batch_off == 0 {
            return err("warmup_steps > 0 requires batch_off >= 1".to_string());
        }
        if !(self.pg_baseline_decay >= 0.0 && self.pg_baseline_decay < 1.0) {
            return err(format!(
                "pg_baseline_decay must lie in [0, 1), got {}",
                self.pg_baseline_decay
            ));
        }
        if !(self.eval_top_p > 0.0 && self.eval_top_p <= 1.0) {
            return err(format!(
                "eval_top_p must lie in (0, 1], got {}",
                self.eval_top_p
            ));
        }
        if !(self.rollout_temperature > 0.0) {
            return err(format!(
                "rollout_temperature must be positive, got {}",
                self.rollout_temperature
            ));
        }
        if self.threads == 0 {
            return err("threads must be >= 1".to_string());
        }
        self.weights.validate()?;
        Ok(())
    }

    fn validate_against(&self, task: &TaskSpec) -> Result<(), TrainError> {
        self.validate()?;
        if self.batch_off > 0 && task.dataset.as_ref().is_none_or(|d| d.is_empty()) {
            return Err(TrainError::Config(
                "batch_off > 0 but the task has no dataset".to_string(),
            ));
        }
        if self.model.arch == crate::model::Arch::FixedWindowMlp && self.model.window > task.t_max {
            return Err(TrainError::Config(format!(
                "model window {} exceeds task horizon {}",
                self.model.window, task.t_max
            )));
        }
        Ok(())
    }
}

/// Applies `key=value` overrides onto a JSON config object and resolves
/// it to a validated TrainConfig. Dotted keys reach nested fields
/// (`weights.w_mle=1`). Unknown keys and type mismatches are schema
/// errors naming the key.
pub fn config_resolve(
    file_json: serde_json::Value,
    overrides: &[(String, String)],
) -> Result<TrainConfig, TrainError> {
    let mut root = file_json;
    if !root.is_object() {
        return Err(TrainError::Config(
            "config must be a JSON object".to_string(),
        ));
    }
    for (key, raw_value) in overrides {
        let value: serde_json::Value = match serde_json::from_str(raw_value) {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(raw_value.clone()),
        };
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_object_mut()
                .ok_or_else(|| {
                    TrainError::Config(format!("override {key}: {part} is not an object"))
                })?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| TrainError::Config(format!("override {key}: not an object path")))?
            .insert(parts[parts.len() - 1].to_string(), value);
    }
    let config: TrainConfig = serde_json::from_value(root)
        .map_err(|e| TrainError::Config(format!("schema error: {e}")))?;
    config.validate()?;
    Ok(config)
}

// Stream domains for stateless child-seed derivation.
const DOMAIN_INIT: u64 = 0;
const DOMAIN_ROLLOUT: u64 = 1;
const DOMAIN_OFF_POLICY: u64 = 2;
const DOMAIN_EVAL: u64 = 3;

/// SplitMix64-style mixing of (seed, domain, step) into a child seed.
pub fn child_seed(seed: u64, domain: u64, step: u64) -> u64 {
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(step.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, domain: u64, step: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(child_seed(seed, domain, step))
}

/// Mutable training state threaded through the step loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamVector,
    pub target: TargetModel,
    pub optimizer: Optimizer,
    pub step: u64,
    pub pg_baseline: Option<f64>,
}

impl TrainState {
    pub fn fresh(model: &QModel, config: &TrainConfig) -> Self {
        let params = model.init_params(child_seed(config.seed, DOMAIN_INIT, 0));
        let target = TargetModel::new(params.clone(), config.rho);
        TrainState {
            params,
            target,
            optimizer: Optimizer::new(config.optimizer),
            step: 0,
            pg_baseline: None,
        }
    }
}

fn dataset_batch(
    dataset: &[Trajectory],
    n: usize,
    reward_scale: f64,
    rng: &mut ChaCha12Rng,
    pad_id: usize,
) -> Result<Batch, TrainError> {
    if n == 0 {
        return Ok(Batch::empty());
    }
    let picked: Vec<Trajectory> = (0..n)
        .map(|_| {
            let idx = rng.gen_range(0..dataset.len());
            let mut t = dataset[idx].clone();
            t.terminal_reward *= reward_scale;
            t
        })
        .collect();
    Ok(pad_batch(&picked, pad_id)?)
}

/// One iteration of the training loop: sample batches, evaluate the
/// combined objective, descend, and move the target toward the freshly
/// updated parameters.
pub fn train_step(
    state: &mut TrainState,
    model: &QModel,
    task: &TaskSpec,
    config: &TrainConfig,
) -> Result<MetricsRecord, TrainError> {
    let step = state.step;
    let warmup = step < config.warmup_steps;

    let on_trajs = if !warmup && config.batch_on > 0 {
        let mut rng = stream(config.seed, DOMAIN_ROLLOUT, step);
        decoding::rollout(
            model,
            &state.params,
            task,
            config.batch_on,
            config.rollout_temperature,
            config.reward_scale,
            &mut rng,
        )?
    } else {
        Vec::new()
    };
    let pad_id = task.vocab.pad_id();
    let on_batch = if on_trajs.is_empty() {
        Batch::empty()
    } else {
        pad_batch(&on_trajs, pad_id)?
    };

    let off_batch = match (&task.dataset, config.batch_off) {
        (Some(dataset), n) if n > 0 => {
            let mut rng = stream(config.seed, DOMAIN_OFF_POLICY, step);
            dataset_batch(dataset, n, config.reward_scale, &mut rng, pad_id)?
        }
        _ => Batch::empty(),
    };

    // During warmup the policy-gradient term contributes nothing.
    let mut weights = config.weights;
    if warmup {
        weights.w_pg = 0.0;
    }
    if weights.validate().is_err() {
        // Every enabled component was gated off by warmup; nothing to do
        // this step beyond the target update.
        weights = config.weights;
    }

    let mean_reward_on = if on_batch.is_empty() {
        None
    } else {
        Some(reward_summary(&on_batch.rewards).expect("non-empty").mean)
    };

    let baseline = if config.weights.w_pg > 0.0 && config.pg_use_baseline {
        match (state.pg_baseline, mean_reward_on) {
            (Some(b), _) => b,
            (None, Some(m)) => m,
            (None, None) => 0.0,
        }
    } else {
        0.0
    };

    let (breakdown, grad) = combined_loss(
        model,
        &state.params,
        &state.target.params,
        &on_batch,
        &off_batch,
        &weights,
        config.gamma,
        baseline,
    )
    .map_err(|e| match e {
        crate::objectives::ObjectiveError::Diff(crate::autodiff::DiffError::NonFinite {
            primitive,
        }) => TrainError::NonFiniteLoss {
            step,
            dump: format!(
                "primitive {primitive}; on rows {:?}; off rows {:?}",
                on_batch.token_matrix, off_batch.token_matrix
            ),
        },
        other => other.into(),
    })?;

    if config.weights.w_pg > 0.0 && config.pg_use_baseline {
        if let Some(m) = mean_reward_on {
            let d = config.pg_baseline_decay;
            state.pg_baseline = Some(match state.pg_baseline {
                Some(b) => d * b + (1.0 - d) * m,
                None => m,
            });
        }
    }

    state.optimizer.step(&mut state.params, &grad, config.lr)?;
    // Algorithm ordering: the parameter update precedes the target
    // update, so the target mixes with the post-update parameters.
    state.target.polyak_update(&state.params)?;
    state.step += 1;

    Ok(record_from(
        step,
        &breakdown,
        on_batch.n_rows(),
        mean_reward_on,
    ))
}

fn record_from(
    step: u64,
    breakdown: &LossBreakdown,
    n_on: usize,
    mean_reward_on: Option<f64>,
) -> MetricsRecord {
    MetricsRecord {
        step,
        loss_total: breakdown.total,
        loss_pcl_single: breakdown.pcl_single,
        loss_pcl_multi: breakdown.pcl_multi,
        loss_mle: breakdown.mle,
        loss_pg: breakdown.pg,
        loss_q_hard: breakdown.q_hard,
        loss_sql_vanilla: breakdown.sql_vanilla,
        n_on,
        mean_reward_on,
        mean_reward_greedy: None,
        mean_reward_sample: None,
        tv_to_oracle: None,
        v_gap_to_oracle: None,
        soft_return: None,
        h1: None,
        h2: None,
    }
}

/// Oracle-comparison quantities at the prefixes π* visits with
/// probability at least `reach_floor`.
pub struct OracleComparison {
    pub max_tv: f64,
    pub max_v_gap: f64,
    pub soft_return: f64,
    pub expected_reward: f64,
}

pub const REACH_FLOOR: f64 = 0.01;

pub fn compare_to_oracle(
    model: &QModel,
    params: &ParamVector,
    task: &TaskSpec,
    tables: &OracleTables,
) -> Result<OracleComparison, TrainError> {
    let mut max_tv = 0.0f64;
    let mut max_v_gap = 0.0f64;
    for state in tables.states() {
        if tables.reach_probability(&state.prefix) < REACH_FLOOR {
            continue;
        }
        let row = model.q_row(params, &state.prefix)?;
        let tv = oracle::tv_distance(&policy_from_q(&row), &state.pi)?;
        let v_gap = (state_value(&row) - state.v).abs();
        max_tv = max_tv.max(tv);
        max_v_gap = max_v_gap.max(v_gap);
    }
    let policy = |prefix: &[usize]| {
        policy_from_q(
            &model
                .q_row(params, prefix)
                .expect("prefix enumerated by the oracle"),
        )
    };
    let (expected_reward, soft_return) =
        oracle::exact_policy_return(task, &policy, tables.gamma, tables.scale)?;
    Ok(OracleComparison {
        max_tv,
        max_v_gap,
        soft_return,
        expected_reward,
    })
}

fn attach_eval(
    rec: &mut MetricsRecord,
    model: &QModel,
    state: &TrainState,
    task: &TaskSpec,
    config: &TrainConfig,
    tables: Option<&OracleTables>,
) -> Result<(), TrainError> {
    let greedy = decoding::greedy_decode(model, &state.params, task, config.reward_scale);
    rec.mean_reward_greedy = Some(greedy.terminal_reward);

    if config.eval_samples > 0 {
        let cfg = DecodeConfig {
            mode: DecodeMode::TopP,
            p: config.eval_top_p,
            ..DecodeConfig::default()
        };
        let mut rng = stream(config.seed, DOMAIN_EVAL, rec.step);
        let samples = decoding::sample_sequences(
            model,
            &state.params,
            task,
            config.eval_samples,
            &cfg,
            config.reward_scale,
            &mut rng,
        )?;
        let rewards: Vec<f64> = samples.iter().map(|t| t.terminal_reward).collect();
        rec.mean_reward_sample = Some(reward_summary(&rewards).expect("non-empty").mean);
        let pool: Vec<Vec<usize>> = samples.into_iter().map(|t| t.token_ids).collect();
        rec.h1 = Some(entropy_h(&pool, 1).expect("non-empty").nats);
        rec.h2 = Some(entropy_h(&pool, 2).expect("non-empty").nats);
    }

    if let Some(tables) = tables {
        let cmp = compare_to_oracle(model, &state.params, task, tables)?;
        rec.tv_to_oracle = Some(cmp.max_tv);
        rec.v_gap_to_oracle = Some(cmp.max_v_gap);
        rec.soft_return = Some(cmp.soft_return);
    }
    Ok(())
}

/// Checkpoint: model config, live and target parameters, optimizer state,
/// and enough bookkeeping to resume a run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: BTreeMap<String, Vec<f64>>,
    pub target_params: BTreeMap<String, Vec<f64>>,
    pub rho: f64,
    pub step: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg_baseline: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(model: &QModel, state: &TrainState, seed: u64) -> Self {
        let optimizer = match state.optimizer.kind {
            OptimizerKind::Sgd => Some(OptimizerState {
                kind: OptimizerKind::Sgd,
                t: state.optimizer.t,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            }),
            OptimizerKind::Adam => Some(OptimizerState {
                kind: OptimizerKind::Adam,
                t: state.optimizer.t,
                m: state
                    .optimizer
                    .m
                    .as_ref()
                    .map(param_map)
                    .unwrap_or_default(),
                v: state
                    .optimizer
                    .v
                    .as_ref()
                    .map(param_map)
                    .unwrap_or_default(),
            }),
        };
        Checkpoint {
            config: *model.config(),
            vocab_size: model.vocab_size(),
            params: param_map(&state.params),
            target_params: param_map(&state.target.params),
            rho: state.target.rho,
            step: state.step,
            seed,
            optimizer,
            pg_baseline: state.pg_baseline,
        }
    }

    pub fn restore(&self, model: &QModel) -> Result<TrainState, TrainError> {
        if *model.config() != self.config || model.vocab_size() != self.vocab_size {
            return Err(TrainError::CheckpointMismatch(format!(
                "checkpoint for {:?}/|V|={}, model is {:?}/|V|={}",
                self.config,
                self.vocab_size,
                model.config(),
                model.vocab_size()
            )));
        }
        let params = model.params_from_map(&self.params)?;
        let target_params = model.params_from_map(&self.target_params)?;
        let optimizer = match &self.optimizer {
            None => Optimizer::new(OptimizerKind::Adam),
            Some(os) => {
                let mut opt = Optimizer::new(os.kind);
                opt.t = os.t;
                if os.kind == OptimizerKind::Adam && !os.m.is_empty() {
                    opt.m = Some(model.params_from_map(&os.m)?);
                    opt.v = Some(model.params_from_map(&os.v)?);
                }
                opt
            }
        };
        Ok(TrainState {
            params,
            target: TargetModel::new(target_params, self.rho),
            optimizer,
            step: self.step,
            pg_baseline: self.pg_baseline,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let body = serde_json::to_string(self)?;
        std::fs::write(path, body).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Immutable record of everything that influences a run, written before
/// step zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub started_unix_s: u64,
    pub seed: u64,
    pub threads: usize,
    pub config: TrainConfig,
    pub task_summary: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_source: Option<serde_json::Value>,
    pub metrics_path: String,
    pub checkpoint_path: String,
}

fn task_summary(task: &TaskSpec) -> serde_json::Value {
    serde_json::json!({
        "vocab": task.vocab.tokens(),
        "eos": task.vocab.eos_id().map(|id| task.vocab.token(id).unwrap().to_string()),
        "t_max": task.t_max,
        "dataset_len": task.dataset.as_ref().map_or(0, |d| d.len()),
    })
}

pub struct RunOutcome {
    pub state: TrainState,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_record: Option<MetricsRecord>,
}

/// Runs (or resumes) the full training loop, writing the manifest,
/// per-step metrics JSONL, and checkpoints under `out_dir`.
pub fn run_training(
    task: &TaskSpec,
    config: &TrainConfig,
    out_dir: &Path,
    task_source: Option<serde_json::Value>,
    resume_from: Option<&Checkpoint>,
) -> Result<RunOutcome, TrainError> {
    config.validate_against(task)?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let model = QModel::new(config.model, task.vocab.size())?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.json");

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seed: config.seed,
        threads: config.threads,
        config: config.clone(),
        task_summary: task_summary(task),
        task_source,
        metrics_path: metrics_path.display().to_string(),
        checkpoint_path: checkpoint_path.display().to_string(),
    };
    let manifest_path = out_dir.join("run_manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|source| {
        TrainError::Io {
            path: manifest_path.display().to_string(),
            source,
        }
    })?;

    let mut state = match resume_from {
        Some(ck) => ck.restore(&model)?,
        None => TrainState::fresh(&model, config),
    };
    let resumed = resume_from.is_some();

    let tables = if config.eval_oracle {
        match oracle::soft_value_iteration_capped(task, config.gamma, config.reward_scale, 100_000)
        {
            Ok(t) => Some(t),
            Err(oracle::OracleError::StateCapExceeded { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };

    // Initial checkpoint so a zero-step run still leaves an artifact.
    Checkpoint::capture(&model, &state, config.seed).save(&checkpoint_path)?;

    let mut open = std::fs::OpenOptions::new();
    open.create(true);
    if resumed {
        open.append(true);
    } else {
        open.write(true).truncate(true);
    }
    let mut metrics_file = open.open(&metrics_path).map_err(|source| TrainError::Io {
        path: metrics_path.display().to_string(),
        source,
    })?;

    let mut final_record = None;
    while state.step < config.steps {
        let mut rec = train_step(&mut state, &model, task, config)?;
        let done = state.step == config.steps;
        let eval_now = done || (config.eval_every > 0 && state.step % config.eval_every == 0);
        if eval_now {
            attach_eval(&mut rec, &model, &state, task, config, tables.as_ref())?;
            Checkpoint::capture(&model, &state, config.seed).save(&checkpoint_path)?;
        }
        if !rec.all_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: rec.step,
                dump: format!("non-finite metrics: {rec:?}"),
            });
        }
        let line = serde_json::to_string(&rec)?;
        writeln!(metrics_file, "{line}").map_err(|source| TrainError::Io {
            path: metrics_path.display().to_string(),
            source,
        })?;
        final_record = Some(rec);
    }
    metrics_file.flush().map_err(|source| TrainError::Io {
        path: metrics_path.display().to_string(),
        source,
    })?;
    Checkpoint::capture(&model, &state, config.seed).save(&checkpoint_path)?;

    Ok(RunOutcome {
        state,
        metrics_path,
        checkpoint_path,
        final_record,
    })
}
