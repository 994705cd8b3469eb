//! Soft Q-learning for small-vocabulary sequence generation.
//!
//! The generation model's logits are reinterpreted as Q-values: the
//! induced policy is the logits' softmax and the state value is their
//! log-normalizer. Training minimizes squared path-consistency residuals
//! (single-step and telescoped multi-step) over mixed on-/off-policy
//! batches, with a Polyak-averaged target network supplying the value
//! estimates. An exact soft-value-iteration oracle over enumerable token
//! spaces verifies the learned policies.

// Negated float comparisons in validation (`!(x > 0.0)`) are deliberate:
// they reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod reward;
pub mod trainer;
