//! `sqlgen`: train / eval / sample / oracle / gradcheck over task files.
//!
//! Failures print a single machine-readable line `error[<class>]: ...`
//! and exit nonzero: usage errors exit 2, everything else exits 1.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use sqlgen::data::TaskSpec;
use sqlgen::decoding::{self, DecodeConfig, DecodeMode};
use sqlgen::metrics::{entropy_h, heldout_nll, reward_summary};
use sqlgen::model::QModel;
use sqlgen::objectives::run_gradcheck;
use sqlgen::oracle;
use sqlgen::trainer::{self, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sqlgen",
    version,
    about = "Soft Q-learning sequence generation engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop defined by a task file and a train config.
    Train {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Extra config overrides as key=value (nested keys use dots,
        /// e.g. weights.w_mle=1).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker count; 1 is the fully deterministic path. The current
        /// implementation executes sequentially for any value; results
        /// are thread-count independent by construction.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: greedy reward, top-p sweeps, entropies,
    /// held-out NLL, and oracle distances where available.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Comma-separated top-p values to sweep.
        #[arg(long, default_value = "1.0", value_delimiter = ',')]
        p: Vec<f64>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// Emit sampled sequences as JSONL rows {tokens, logprob, reward}.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value = "top-p")]
        mode: SampleMode,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 4)]
        beam_width: usize,
        #[arg(short = 'n', long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Print the exact soft-value-iteration tables for a task.
    Oracle {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Finite-difference check of every loss gradient; exits 0 iff the
    /// max relative error is at most 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SampleMode {
    Greedy,
    Sample,
    TopP,
    Beam,
}

struct Failure {
    class: &'static str,
    message: String,
    code: i32,
}

impl Failure {
    fn new(class: &'static str, message: impl Into<String>) -> Self {
        Failure {
            class,
            message: message.into(),
            code: 1,
        }
    }
}

fn io_fail(message: impl Into<String>) -> Failure {
    Failure::new("io", message)
}

fn schema_fail(message: impl Into<String>) -> Failure {
    Failure::new("schema", message)
}

fn load_task(path: &Path) -> Result<TaskSpec, Failure> {
    TaskSpec::from_json_file(path).map_err(|e| match e {
        sqlgen::data::DataError::Io { .. } => io_fail(e.to_string()),
        other => schema_fail(other.to_string()),
    })
}

fn load_json(path: &Path) -> Result<serde_json::Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_fail(format!("failed to read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| schema_fail(format!("failed to parse {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, task: &TaskSpec) -> Result<(QModel, Checkpoint), Failure> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        trainer::TrainError::Io { .. } => io_fail(e.to_string()),
        other => schema_fail(other.to_string()),
    })?;
    if ck.vocab_size != task.vocab.size() {
        return Err(schema_fail(format!(
            "checkpoint vocab size {} does not match task vocab size {}",
            ck.vocab_size,
            task.vocab.size()
        )));
    }
    let model = QModel::new(ck.config, ck.vocab_size)
        .map_err(|e| schema_fail(format!("bad model config in checkpoint: {e}")))?;
    Ok((model, ck))
}

fn run(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Train {
            task,
            config,
            out,
            seed,
            overrides,
            threads,
            resume,
        } => {
            let task_source = load_json(&task)?;
            let task = load_task(&task)?;
            let config_json = load_json(&config)?;
            let mut pairs: Vec<(String, String)> = Vec::new();
            for item in &overrides {
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| schema_fail(format!("override {item} is not key=value")))?;
                pairs.push((k.to_string(), v.to_string()));
            }
            if let Some(seed) = seed {
                pairs.push(("seed".to_string(), seed.to_string()));
            }
            pairs.push(("threads".to_string(), threads.to_string()));
            let resolved: TrainConfig = trainer::config_resolve(config_json, &pairs)
                .map_err(|e| schema_fail(e.to_string()))?;
            let resume_ck = match resume {
                None => None,
                Some(path) => Some(
                    Checkpoint::load(&path)
                        .map_err(|e| schema_fail(format!("bad resume checkpoint: {e}")))?,
                ),
            };
            let outcome = trainer::run_training(
                &task,
                &resolved,
                &out,
                Some(task_source),
                resume_ck.as_ref(),
            )
            .map_err(|e| match e {
                trainer::TrainError::Io { .. } => io_fail(e.to_string()),
                trainer::TrainError::Config(_) => schema_fail(e.to_string()),
                other => Failure::new("train", other.to_string()),
            })?;
            let summary = json!({
                "steps": outcome.state.step,
                "metrics": outcome.metrics_path.display().to_string(),
                "checkpoint": outcome.checkpoint_path.display().to_string(),
                "final": outcome.final_record,
            });
            println!("{summary}");
            Ok(0)
        }

        Command::Eval {
            checkpoint,
            task,
            p,
            samples,
            seed,
            scale,
            gamma,
        } => {
            let task = load_task(&task)?;
            let (model, ck) = load_checkpoint(&checkpoint, &task)?;
            let params = model
                .params_from_map(&ck.params)
                .map_err(|e| schema_fail(e.to_string()))?;

            let greedy = decoding::greedy_decode(&model, &params, &task, scale);
            let mut per_p = Vec::new();
            for (i, &p_value) in p.iter().enumerate() {
                let cfg = DecodeConfig {
                    mode: DecodeMode::TopP,
                    p: p_value,
                    ..DecodeConfig::default()
                };
                let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let trajs = decoding::sample_sequences(
                    &model, &params, &task, samples, &cfg, scale, &mut rng,
                )
                .map_err(|e| schema_fail(e.to_string()))?;
                let rewards: Vec<f64> = trajs.iter().map(|t| t.terminal_reward).collect();
                let pool: Vec<Vec<usize>> = trajs.into_iter().map(|t| t.token_ids).collect();
                let summary = reward_summary(&rewards).expect("non-empty");
                per_p.push(json!({
                    "p": p_value,
                    "sample_reward_mean": summary.mean,
                    "sample_reward_std": summary.std,
                    "h1": entropy_h(&pool, 1).expect("non-empty").nats,
                    "h2": entropy_h(&pool, 2).expect("non-empty").nats,
                }));
            }

            let mut report = json!({
                "greedy_reward": greedy.terminal_reward,
                "greedy_tokens": task.vocab.decode(&greedy.token_ids).unwrap_or_default(),
                "per_p": per_p,
            });
            if let Some(dataset) = &task.dataset {
                let nll = heldout_nll(&model, &params, dataset)
                    .map_err(|e| Failure::new("eval", e.to_string()))?;
                report["nll"] = json!(nll);
                report["perplexity"] = json!(nll.exp());
            }
            match oracle::soft_value_iteration_capped(&task, gamma, scale, 100_000) {
                Ok(tables) => {
                    let cmp = trainer::compare_to_oracle(&model, &params, &task, &tables)
                        .map_err(|e| Failure::new("eval", e.to_string()))?;
                    report["tv_to_oracle"] = json!(cmp.max_tv);
                    report["v_gap_to_oracle"] = json!(cmp.max_v_gap);
                    report["soft_return"] = json!(cmp.soft_return);
                    report["oracle_v_root"] = json!(tables.v_star(&[]).unwrap());
                }
                Err(oracle::OracleError::StateCapExceeded { .. }) => {}
                Err(e) => return Err(Failure::new("eval", e.to_string())),
            }
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(0)
        }

        Command::Sample {
            checkpoint,
            task,
            mode,
            p,
            temperature,
            beam_width,
            count,
            seed,
            scale,
        } => {
            let task = load_task(&task)?;
            let (model, ck) = load_checkpoint(&checkpoint, &task)?;
            let params = model
                .params_from_map(&ck.params)
                .map_err(|e| schema_fail(e.to_string()))?;

            let log_prob_of = |tokens: &[usize]| -> f64 {
                let rows = model.q_rows(&params, tokens).expect("valid tokens");
                sqlgen::objectives::log_probs_from_rows(&rows, tokens)
                    .iter()
                    .sum()
            };
            let emit = |tokens: &[usize], reward: f64| {
                let line = json!({
                    "tokens": task.vocab.decode(tokens).unwrap_or_default(),
                    "logprob": log_prob_of(tokens),
                    "reward": reward,
                });
                println!("{line}");
            };

            match mode {
                SampleMode::Greedy => {
                    let traj = decoding::greedy_decode(&model, &params, &task, scale);
                    emit(&traj.token_ids, traj.terminal_reward);
                }
                SampleMode::Beam => {
                    let beams =
                        decoding::beam_search(&model, &params, &task, beam_width, false, scale)
                            .map_err(|e| schema_fail(e.to_string()))?;
                    for (traj, _) in beams {
                        emit(&traj.token_ids, traj.terminal_reward);
                    }
                }
                SampleMode::Sample | SampleMode::TopP => {
                    let cfg = DecodeConfig {
                        mode: if matches!(mode, SampleMode::TopP) {
                            DecodeMode::TopP
                        } else {
                            DecodeMode::Sample
                        },
                        p,
                        temperature,
                        ..DecodeConfig::default()
                    };
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    let trajs = decoding::sample_sequences(
                        &model, &params, &task, count, &cfg, scale, &mut rng,
                    )
                    .map_err(|e| schema_fail(e.to_string()))?;
                    for traj in trajs {
                        emit(&traj.token_ids, traj.terminal_reward);
                    }
                }
            }
            Ok(0)
        }

        Command::Oracle { task, gamma, scale } => {
            let task = load_task(&task)?;
            let tables = oracle::soft_value_iteration(&task, gamma, scale)
                .map_err(|e| Failure::new("oracle", e.to_string()))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&tables.to_json(&task.vocab)).unwrap()
            );
            Ok(0)
        }

        Command::Gradcheck { seed, probes, step } => {
            let report = run_gradcheck(seed, probes, step)
                .map_err(|e| Failure::new("gradcheck", e.to_string()))?;
            for entry in &report.entries {
                println!(
                    "{:<12} {:<18} max_rel_err {:.3e}",
                    entry.loss, entry.arch, entry.max_rel_err
                );
            }
            println!("overall max_rel_err {:.3e}", report.max_rel_err);
            if report.max_rel_err <= 1e-4 {
                println!("gradcheck PASS");
                Ok(0)
            } else {
                println!("gradcheck FAIL (threshold 1e-4)");
                Ok(1)
            }
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // Help and version requests are not errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("error[usage]: {}", e.kind());
            std::process::exit(2);
        }
    };
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(f) => {
            eprintln!("error[{}]: {}", f.class, f.message);
            std::process::exit(f.code);
        }
    }
}
