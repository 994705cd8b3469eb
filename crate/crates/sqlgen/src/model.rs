//! The parameterized Q-function: prefix in, one Q-value per vocabulary
//! token out. The same row doubles as the generation logits, so the
//! induced policy is exactly the row's softmax and the state value is its
//! log-normalizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, DiffError, ParamVector, ScalarId, Shape, Tape, Tensor, VecId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of range for vocab of size {size}")]
    InvalidToken { id: usize, size: usize },
    #[error("model dimensions must be >= 1")]
    ZeroDim,
    #[error("window must be >= 1 for fixed_window_mlp")]
    ZeroWindow,
    #[error("parameter {name} has {got} entries, expected {expected}")]
    BadParamLength {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    RecurrentCell,
    FixedWindowMlp,
}

/// Architecture hyperparameters. `window` only applies to the
/// fixed-window MLP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::RecurrentCell,
            embed_dim: 8,
            hidden_dim: 24,
            window: default_window(),
        }
    }
}

/// Q-function over a fixed vocabulary: token embedding, a small trunk
/// (tanh recurrent cell or fixed-window MLP), and an affine head emitting
/// one Q-value per token.
#[derive(Debug, Clone)]
pub struct QModel {
    config: ModelConfig,
    vocab_size: usize,
}

const INIT_RANGE: f64 = 0.1;

impl QModel {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self, ModelError> {
        if config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        if config.arch == Arch::FixedWindowMlp && config.window == 0 {
            return Err(ModelError::ZeroWindow);
        }
        Ok(QModel { config, vocab_size })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn shapes(&self) -> Vec<(&'static str, Shape)> {
        let c = &self.config;
        let v = self.vocab_size;
        match c.arch {
            Arch::RecurrentCell => vec![
                ("embed", Shape::Matrix(v, c.embed_dim)),
                ("start", Shape::Vector(c.embed_dim)),
                ("w_in", Shape::Matrix(c.hidden_dim, c.embed_dim)),
                ("w_rec", Shape::Matrix(c.hidden_dim, c.hidden_dim)),
                ("b_rec", Shape::Vector(c.hidden_dim)),
                ("w_head", Shape::Matrix(v, c.hidden_dim)),
                ("b_head", Shape::Vector(v)),
            ],
            Arch::FixedWindowMlp => vec![
                ("embed", Shape::Matrix(v, c.embed_dim)),
                ("start", Shape::Vector(c.embed_dim)),
                (
                    "w_hidden",
                    Shape::Matrix(c.hidden_dim, c.window * c.embed_dim),
                ),
                ("b_hidden", Shape::Vector(c.hidden_dim)),
                ("w_head", Shape::Matrix(v, c.hidden_dim)),
                ("b_head", Shape::Vector(v)),
            ],
        }
    }

    /// Seeded initialization: weights and embeddings uniform in
    /// [-0.1, 0.1], final-head bias zero so the initial policy is close to
    /// uniform.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let tensors = self
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let data = if name == "b_head" {
                    vec![0.0; shape.count()]
                } else {
                    (0..shape.count())
                        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
                        .collect()
                };
                Tensor {
                    name: name.to_string(),
                    shape,
                    data,
                }
            })
            .collect();
        ParamVector::new(tensors).expect("init params are finite")
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        for &id in tokens {
            if id >= self.vocab_size {
                return Err(ModelError::InvalidToken {
                    id,
                    size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Trunk state for incremental decoding.
    pub fn start_state(&self, params: &ParamVector) -> DecodeState {
        match self.config.arch {
            Arch::RecurrentCell => {
                let start = &tensor(params, "start").data;
                let mut h = mat_vec(tensor(params, "w_in"), start);
                add_assign(&mut h, &tensor(params, "b_rec").data);
                tanh_in_place(&mut h);
                DecodeState::Recurrent { hidden: h }
            }
            Arch::FixedWindowMlp => DecodeState::Window { recent: Vec::new() },
        }
    }

    /// Consumes one token, moving the state from s_t to s_{t+1}.
    pub fn advance(&self, params: &ParamVector, state: &mut DecodeState, token: usize) {
        debug_assert!(token < self.vocab_size);
        match (self.config.arch, state) {
            (Arch::RecurrentCell, DecodeState::Recurrent { hidden }) => {
                let embed = tensor(params, "embed");
                let cols = self.config.embed_dim;
                let x = &embed.data[token * cols..(token + 1) * cols];
                let mut h = mat_vec(tensor(params, "w_in"), x);
                let rec = mat_vec(tensor(params, "w_rec"), hidden);
                add_assign(&mut h, &rec);
                add_assign(&mut h, &tensor(params, "b_rec").data);
                tanh_in_place(&mut h);
                *hidden = h;
            }
            (Arch::FixedWindowMlp, DecodeState::Window { recent }) => {
                recent.push(token);
                if recent.len() > self.config.window {
                    recent.remove(0);
                }
            }
            _ => unreachable!("state built by a different architecture"),
        }
    }

    /// The Q-row at the state, one value per vocabulary token.
    pub fn state_q_row(&self, params: &ParamVector, state: &DecodeState) -> Vec<f64> {
        let h = match (self.config.arch, state) {
            (Arch::RecurrentCell, DecodeState::Recurrent { hidden }) => hidden.clone(),
            (Arch::FixedWindowMlp, DecodeState::Window { recent }) => {
                let z = self.window_input(params, recent);
                let mut h = mat_vec(tensor(params, "w_hidden"), &z);
                add_assign(&mut h, &tensor(params, "b_hidden").data);
                tanh_in_place(&mut h);
                h
            }
            _ => unreachable!("state built by a different architecture"),
        };
        let mut row = mat_vec(tensor(params, "w_head"), &h);
        add_assign(&mut row, &tensor(params, "b_head").data);
        row
    }

    fn window_input(&self, params: &ParamVector, recent: &[usize]) -> Vec<f64> {
        let cols = self.config.embed_dim;
        let start = &tensor(params, "start").data;
        let embed = tensor(params, "embed");
        let mut z = Vec::with_capacity(self.config.window * cols);
        let missing = self.config.window - recent.len();
        for _ in 0..missing {
            z.extend_from_slice(start);
        }
        for &tok in recent {
            z.extend_from_slice(&embed.data[tok * cols..(tok + 1) * cols]);
        }
        z
    }

    /// Q-row for an explicit prefix (the state after consuming it).
    pub fn q_row(&self, params: &ParamVector, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(prefix)?;
        let mut state = self.start_state(params);
        for &tok in prefix {
            self.advance(params, &mut state, tok);
        }
        Ok(self.state_q_row(params, &state))
    }

    /// Q-rows at every state visited while emitting `tokens`:
    /// row t corresponds to the prefix `tokens[..t]`, for t in 0..len.
    pub fn q_rows(
        &self,
        params: &ParamVector,
        tokens: &[usize],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_tokens(tokens)?;
        let mut rows = Vec::with_capacity(tokens.len());
        let mut state = self.start_state(params);
        for &tok in tokens {
            rows.push(self.state_q_row(params, &state));
            self.advance(params, &mut state, tok);
        }
        Ok(rows)
    }

    /// Tape version of [`QModel::q_rows`]: identical arithmetic, with
    /// gradients flowing back into the parameters read through the tape.
    /// Token validity surfaces as index errors from the tape primitives.
    pub fn q_rows_tape(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Vec<VecId>, DiffError> {
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab_size) {
            return Err(DiffError::IndexOutOfBounds {
                index: id,
                len: self.vocab_size,
            });
        }
        let mut rows = Vec::with_capacity(tokens.len());
        match self.config.arch {
            Arch::RecurrentCell => {
                let start = tape.param_vec("start")?;
                let mut hidden = self.cell_step(tape, start, None)?;
                for (t, &tok) in tokens.iter().enumerate() {
                    rows.push(self.head_row(tape, hidden)?);
                    if t + 1 < tokens.len() {
                        let x = tape.embed_row("embed", tok)?;
                        hidden = self.cell_step(tape, x, Some(hidden))?;
                    }
                }
            }
            Arch::FixedWindowMlp => {
                for t in 0..tokens.len() {
                    let from = t.saturating_sub(self.config.window);
                    let recent = &tokens[from..t];
                    let missing = self.config.window - recent.len();
                    let mut parts = Vec::with_capacity(self.config.window);
                    for _ in 0..missing {
                        parts.push(tape.param_vec("start")?);
                    }
                    for &tok in recent {
                        parts.push(tape.embed_row("embed", tok)?);
                    }
                    let z = tape.concat(&parts)?;
                    let wz = tape.matvec("w_hidden", z)?;
                    let b = tape.param_vec("b_hidden")?;
                    let pre = tape.add(wz, b)?;
                    let hidden = tape.tanh(pre)?;
                    rows.push(self.head_row(tape, hidden)?);
                }
            }
        }
        Ok(rows)
    }

    fn cell_step(
        &self,
        tape: &mut Tape,
        x: VecId,
        hidden: Option<VecId>,
    ) -> Result<VecId, DiffError> {
        let mut pre = tape.matvec("w_in", x)?;
        if let Some(h) = hidden {
            let rec = tape.matvec("w_rec", h)?;
            pre = tape.add(pre, rec)?;
        }
        let b = tape.param_vec("b_rec")?;
        let pre = tape.add(pre, b)?;
        tape.tanh(pre)
    }

    fn head_row(&self, tape: &mut Tape, hidden: VecId) -> Result<VecId, DiffError> {
        let wh = tape.matvec("w_head", hidden)?;
        let b = tape.param_vec("b_head")?;
        tape.add(wh, b)
    }

    /// log π(token | state) as a tape scalar: pick(row) − logsumexp(row).
    pub fn log_prob_node(
        &self,
        tape: &mut Tape,
        row: VecId,
        token: usize,
    ) -> Result<ScalarId, DiffError> {
        let logit = tape.pick(row, token)?;
        let lse = tape.log_sum_exp(row)?;
        tape.lin(&[(1.0, logit), (-1.0, lse)], 0.0)
    }

    /// Validates that a named flat-array map matches this model's shapes
    /// and assembles a ParamVector from it.
    pub fn params_from_map(
        &self,
        map: &BTreeMap<String, Vec<f64>>,
    ) -> Result<ParamVector, ModelError> {
        let mut tensors = Vec::new();
        for (name, shape) in self.shapes() {
            let data = map
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if data.len() != shape.count() {
                return Err(ModelError::BadParamLength {
                    name: name.to_string(),
                    got: data.len(),
                    expected: shape.count(),
                });
            }
            tensors.push(Tensor {
                name: name.to_string(),
                shape,
                data: data.clone(),
            });
        }
        Ok(ParamVector::new(tensors)?)
    }
}

/// Incremental trunk state used by the decoders.
#[derive(Debug, Clone)]
pub enum DecodeState {
    Recurrent { hidden: Vec<f64> },
    Window { recent: Vec<usize> },
}

/// Flat-array view of parameters for checkpoints (ordered for
/// deterministic JSON).
pub fn param_map(params: &ParamVector) -> BTreeMap<String, Vec<f64>> {
    params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.clone()))
        .collect()
}

/// softmax(q): the policy induced by a Q-row. Stable via max-subtraction;
/// entries are positive and sum to one.
pub fn policy_from_q(q_row: &[f64]) -> Vec<f64> {
    autodiff::softmax(q_row)
}

/// V(q) = log Σ exp(q): the state value as the row's log-normalizer.
pub fn state_value(q_row: &[f64]) -> f64 {
    autodiff::log_sum_exp(q_row)
}

/// A(q) = q − V(q), so exp(A) equals the induced policy.
pub fn advantage(q_row: &[f64]) -> Vec<f64> {
    let v = state_value(q_row);
    q_row.iter().map(|q| q - v).collect()
}

/// Slow copy of the live parameters, mixed toward them by Polyak
/// averaging at rate rho per update.
#[derive(Debug, Clone)]
pub struct TargetModel {
    pub params: ParamVector,
    pub rho: f64,
}

impl TargetModel {
    pub fn new(params: ParamVector, rho: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&rho));
        TargetModel { params, rho }
    }

    /// θ̄ ← ρ·θ̄ + (1−ρ)·θ elementwise.
    pub fn polyak_update(&mut self, live: &ParamVector) -> Result<(), DiffError> {
        let rho = self.rho;
        self.params
            .zip_apply(live, |t, l| rho * t + (1.0 - rho) * l)
    }
}

fn tensor<'p>(params: &'p ParamVector, name: &str) -> &'p Tensor {
    params
        .tensor(name)
        .unwrap_or_else(|| panic!("model parameter {name} missing"))
}

fn mat_vec(t: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = match t.shape {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(_) => panic!("{} is not a matrix", t.name),
    };
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| {
            t.data[r * cols..(r + 1) * cols]
                .iter()
                .zip(x.iter())
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect()
}

fn add_assign(target: &mut [f64], other: &[f64]) {
    debug_assert_eq!(target.len(), other.len());
    for (t, o) in target.iter_mut().zip(other.iter()) {
        *t += o;
    }
}

fn tanh_in_place(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = v.tanh();
    }
}
