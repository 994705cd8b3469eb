//! Token alphabet, trajectories, batching, and task definitions shared by
//! every other module.
//!
//! Episodes end when the eos token is emitted or when the horizon cap
//! `t_max` is reached, whichever comes first. The terminal reward is
//! attached to the final emitted token; all intermediate rewards are zero.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{RewardSpec, RewardSpecFile};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocab must contain at least 2 distinct tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("duplicate token {0} in vocab")]
    DuplicateToken(String),
    #[error("eos token {0} not present in vocab")]
    EosNotInVocab(String),
    #[error("cannot pad an empty trajectory list")]
    EmptyBatch,
    #[error("t_max must be >= 1")]
    ZeroHorizon,
    #[error("dataset trajectory {index}: {violation}")]
    InvalidDatasetTrajectory { index: usize, violation: Violation },
    #[error("lookup table declares no default and misses sequence {sequence}")]
    LookupGap { sequence: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Reward(#[from] crate::reward::RewardError),
}

/// Ordered token alphabet with an optional end-of-sequence token.
///
/// When `eos` is absent, episodes terminate only at the horizon cap.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: Option<usize>,
    by_token: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: Into<String>>(tokens: Vec<S>, eos: Option<&str>) -> Result<Self, DataError> {
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.into()).collect();
        if tokens.len() < 2 {
            return Err(DataError::VocabTooSmall(tokens.len()));
        }
        let mut by_token = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if by_token.insert(tok.clone(), id).is_some() {
                return Err(DataError::DuplicateToken(tok.clone()));
            }
        }
        let eos_id = match eos {
            None => None,
            Some(tok) => Some(
                *by_token
                    .get(tok)
                    .ok_or_else(|| DataError::EosNotInVocab(tok.to_string()))?,
            ),
        };
        Ok(Vocab {
            tokens,
            eos_id,
            by_token,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.eos_id
    }

    /// Reserved non-vocabulary sentinel used only for batch padding.
    /// Never scored by the model.
    pub fn pad_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.by_token.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps token strings to ids. Fails on the first unknown token.
    pub fn encode<S: AsRef<str>>(&self, text_tokens: &[S]) -> Result<Vec<usize>, DataError> {
        text_tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| DataError::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    /// Maps ids back to token strings. Inverse of [`Vocab::encode`].
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, DataError> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(DataError::IdOutOfRange {
                        id,
                        size: self.size(),
                    })
            })
            .collect()
    }
}

/// Where a trajectory came from: the current policy or external data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OnPolicy,
    OffPolicy,
}

/// A complete sampled sequence with its sparse terminal reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub token_ids: Vec<usize>,
    pub terminal_reward: f64,
    pub source: Source,
}

impl Trajectory {
    pub fn new(token_ids: Vec<usize>, terminal_reward: f64, source: Source) -> Self {
        Trajectory {
            token_ids,
            terminal_reward,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// A trajectory-invariant violation. Violations are ordinary return values,
/// not errors: callers decide what to do with them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    TokenOutOfRange { position: usize, id: usize },
    EosNotFinal { position: usize },
    ExceedsHorizon { len: usize, t_max: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty trajectory"),
            Violation::TokenOutOfRange { position, id } => {
                write!(f, "token id {id} at position {position} out of range")
            }
            Violation::EosNotFinal { position } => {
                write!(f, "eos not final (appears at position {position})")
            }
            Violation::ExceedsHorizon { len, t_max } => {
                write!(f, "exceeds horizon: length {len} > t_max {t_max}")
            }
        }
    }
}

impl std::error::Error for Violation {}

/// Checks all trajectory invariants against a task: ids in range, eos only
/// in final position, length within the horizon cap.
pub fn validate_trajectory(traj: &Trajectory, task: &TaskSpec) -> Result<(), Violation> {
    if traj.is_empty() {
        return Err(Violation::Empty);
    }
    let size = task.vocab.size();
    for (position, &id) in traj.token_ids.iter().enumerate() {
        if id >= size {
            return Err(Violation::TokenOutOfRange { position, id });
        }
        if Some(id) == task.vocab.eos_id() && position + 1 != traj.len() {
            return Err(Violation::EosNotFinal { position });
        }
    }
    if traj.len() > task.t_max {
        return Err(Violation::ExceedsHorizon {
            len: traj.len(),
            t_max: task.t_max,
        });
    }
    Ok(())
}

/// Rows of token ids padded to a common width, with a validity mask.
///
/// Padded positions never contribute to any loss; every objective iterates
/// only over mask-valid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_matrix: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub rewards: Vec<f64>,
}

impl Batch {
    pub fn n_rows(&self) -> usize {
        self.token_matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_matrix.is_empty()
    }

    /// Iterates over (valid token slice, terminal reward) per row.
    pub fn rows(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.token_matrix
            .iter()
            .zip(self.mask.iter())
            .zip(self.rewards.iter())
            .map(|((row, mask), &r)| {
                let len = mask.iter().take_while(|&&m| m).count();
                (&row[..len], r)
            })
    }

    pub fn empty() -> Self {
        Batch {
            token_matrix: Vec::new(),
            mask: Vec::new(),
            rewards: Vec::new(),
        }
    }
}

/// Pads trajectories into a rectangular batch. `pad_id` fills the unused
/// positions; it is conventionally `vocab.pad_id()` and is never scored.
pub fn pad_batch(trajs: &[Trajectory], pad_id: usize) -> Result<Batch, DataError> {
    if trajs.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let width = trajs.iter().map(Trajectory::len).max().unwrap_or(0);
    let mut token_matrix = Vec::with_capacity(trajs.len());
    let mut mask = Vec::with_capacity(trajs.len());
    let mut rewards = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let mut row = traj.token_ids.clone();
        let mut row_mask = vec![true; traj.len()];
        row.resize(width, pad_id);
        row_mask.resize(width, false);
        token_matrix.push(row);
        mask.push(row_mask);
        rewards.push(traj.terminal_reward);
    }
    Ok(Batch {
        token_matrix,
        mask,
        rewards,
    })
}

/// A complete task: alphabet, horizon cap, reward definition, and an
/// optional offline dataset serving as the behavior distribution.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub vocab: Vocab,
    pub t_max: usize,
    pub reward_spec: RewardSpec,
    pub dataset: Option<Vec<Trajectory>>,
}

impl TaskSpec {
    pub fn new(
        vocab: Vocab,
        t_max: usize,
        reward_spec: RewardSpec,
        dataset: Option<Vec<Trajectory>>,
    ) -> Result<Self, DataError> {
        if t_max == 0 {
            return Err(DataError::ZeroHorizon);
        }
        let task = TaskSpec {
            vocab,
            t_max,
            reward_spec,
            dataset: None,
        };
        let task = match dataset {
            None => task,
            Some(trajs) => {
                for (index, traj) in trajs.iter().enumerate() {
                    validate_trajectory(traj, &task).map_err(|violation| {
                        DataError::InvalidDatasetTrajectory { index, violation }
                    })?;
                }
                TaskSpec {
                    dataset: Some(trajs),
                    ..task
                }
            }
        };
        task.check_lookup_coverage()?;
        Ok(task)
    }

    /// A lookup-table component without a default must cover every
    /// complete sequence of the task.
    fn check_lookup_coverage(&self) -> Result<(), DataError> {
        use crate::reward::RewardComponent;
        let tables: Vec<_> = self
            .reward_spec
            .components
            .iter()
            .filter_map(|(c, _)| match c {
                RewardComponent::LookupTable {
                    table,
                    default: None,
                } => Some(table),
                _ => None,
            })
            .collect();
        if tables.is_empty() {
            return Ok(());
        }
        let mut prefix = Vec::new();
        let mut visited = 0usize;
        self.walk_sequences(&mut prefix, &mut visited, &|seq| {
            for table in &tables {
                if !table.contains_key(seq) {
                    return Err(DataError::LookupGap {
                        sequence: format!("{seq:?}"),
                    });
                }
            }
            Ok(())
        })
    }

    fn walk_sequences(
        &self,
        prefix: &mut Vec<usize>,
        visited: &mut usize,
        check: &dyn Fn(&[usize]) -> Result<(), DataError>,
    ) -> Result<(), DataError> {
        const COVERAGE_CAP: usize = 1_000_000;
        for a in 0..self.vocab.size() {
            *visited += 1;
            if *visited > COVERAGE_CAP {
                return Err(DataError::LookupGap {
                    sequence: format!("coverage check exceeded {COVERAGE_CAP} sequences"),
                });
            }
            prefix.push(a);
            if self.is_terminal(prefix) {
                check(prefix)?;
            } else {
                self.walk_sequences(prefix, visited, check)?;
            }
            prefix.pop();
        }
        Ok(())
    }

    /// True when `prefix` is a finished episode: ends with eos or hits the
    /// horizon cap. The oracle and the decoders share this rule.
    pub fn is_terminal(&self, prefix: &[usize]) -> bool {
        if prefix.len() >= self.t_max {
            return true;
        }
        match (self.vocab.eos_id(), prefix.last()) {
            (Some(eos), Some(&last)) => last == eos,
            _ => false,
        }
    }

    /// Loads a task definition file, resolving any dataset path relative to
    /// the task file's directory and recomputing absent dataset rewards
    /// from the reward spec.
    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: TaskFile = serde_json::from_str(&text).map_err(|source| DataError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let vocab = Vocab::new(file.vocab, file.eos.as_deref())?;
        let reward_spec = RewardSpec::from_file(&file.reward, &vocab)?;
        let dataset = match file.dataset {
            None => None,
            Some(rel) => {
                let data_path = match path.parent() {
                    Some(dir) => dir.join(&rel),
                    None => Path::new(&rel).to_path_buf(),
                };
                Some(load_dataset_jsonl(&data_path, &vocab, &reward_spec)?)
            }
        };
        TaskSpec::new(vocab, file.t_max, reward_spec, dataset)
    }
}

/// On-disk task definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub vocab: Vec<String>,
    #[serde(default)]
    pub eos: Option<String>,
    pub t_max: usize,
    pub reward: RewardSpecFile,
    /// Optional path to a JSONL dataset, relative to the task file.
    #[serde(default)]
    pub dataset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetLine {
    tokens: Vec<String>,
    #[serde(default)]
    reward: Option<f64>,
}

/// Reads a JSONL dataset: one `{"tokens": [...], "reward": <optional>}`
/// object per line. Rewards absent from the file are recomputed from the
/// reward spec.
pub fn load_dataset_jsonl(
    path: &Path,
    vocab: &Vocab,
    spec: &RewardSpec,
) -> Result<Vec<Trajectory>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: DatasetLine =
            serde_json::from_str(line).map_err(|source| DataError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let ids = vocab.encode(&parsed.tokens)?;
        let reward = match parsed.reward {
            Some(r) => r,
            None => spec.reward(&ids),
        };
        out.push(Trajectory::new(ids, reward, Source::OffPolicy));
    }
    Ok(out)
}

/// Writes trajectories in the JSONL dataset format.
pub fn write_dataset_jsonl(
    path: &Path,
    vocab: &Vocab,
    trajs: &[Trajectory],
) -> Result<(), DataError> {
    let mut body = String::new();
    for traj in trajs {
        let tokens = vocab.decode(&traj.token_ids)?;
        let line = serde_json::json!({ "tokens": tokens, "reward": traj.terminal_reward });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
