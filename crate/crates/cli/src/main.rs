//! `pcl`: train, sweep, verify, generate experts and evaluate checkpoints.
//!
//! Exit codes: 0 success, 1 runtime failure or failed verification,
//! 2 invalid configuration or usage.

mod config;
mod experts;
mod runner;
mod sweep;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pcl_core::mdp::{write_episodes, Curriculum, EnvConfig, EpisodeRecord, TapeEnv, TapeInstance, TaskId};
use pcl_core::model::{read_checkpoint, ModelKind, PolicyValueModel, UnifiedQModel};
use pcl_core::parallel::with_threads;
use pcl_core::suites::{run_suite, Scope};
use pcl_core::train::evaluate_returns;
use pcl_core::Execution;

use config::{parse_config, parse_seeds, ConfigError, ExperimentConfig, GridSpec, Preset};
use runner::{mean_std, run_all, write_outputs, TaskEnv};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "PCL_OUT_DIR";
const DEFAULT_OUT: &str = "pcl-out";

#[derive(Parser)]
#[command(name = "pcl", version, about = "Path consistency learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seeds overriding the configuration, e.g. `0..10` or `1,4,7`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (default: config `out`, then $PCL_OUT_DIR, then ./pcl-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a configuration.
    Train(RunArgs),
    /// Train every point of a hyperparameter grid and rank them.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid preset used when the configuration has no [grid] table.
        #[arg(long, value_parser = ["tree", "algorithmic"])]
        preset: Option<String>,
    },
    /// Run randomized property suites against the exact oracles.
    Verify {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write optimal episodes for a task.
    Experts {
        /// Configuration providing the task; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Episode file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        tree_seed: Option<u64>,
        #[arg(long)]
        min_length: Option<usize>,
        #[arg(long)]
        max_length: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        /// Fixed tape input, e.g. `ABC` or `12/21` for addition tasks.
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint by sampling episodes from its policy.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training seed of the checkpoint; selects its tree when every run
        /// draws its own.
        #[arg(long)]
        run_seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e: ConfigError| usage(format!("{}:{e}", path.display())))
}

fn execution(parallelism: Option<usize>) -> Execution {
    match parallelism {
        Some(1) => Execution::Sequential,
        _ => Execution::default(),
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Loads the configuration, applies flag overrides and builds the task; all
/// failures here are configuration errors.
fn prepare(args: &RunArgs) -> Result<(ExperimentConfig, TaskEnv, PathBuf)> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s).map_err(|e| usage(format!("--seeds: {e}")))?;
    }
    if args.parallelism == Some(0) {
        return Err(usage("--parallelism must be >= 1"));
    }
    let task = TaskEnv::build(&cfg).map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    let out = output_dir(args.out.clone(), &cfg);
    Ok((cfg, task, out))
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let (cfg, task, out) = prepare(&args)?;
    let exec = execution(args.parallelism);
    let results = with_threads(args.parallelism, || run_all(&cfg, &task, exec))?;
    write_outputs(&out, &results)?;
    for r in &results {
        if let Some(last) = r.rows.last() {
            println!("{}: iteration {} avg_reward {:.4}", r.run_id, last.iteration, last.avg_reward);
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(args: RunArgs, preset: Option<String>) -> Result<()> {
    let (cfg, _, out) = prepare(&args)?;
    let grid = match preset.as_deref() {
        Some(p) if cfg.grid.cardinality() == 1 => {
            let g = GridSpec::preset(if p == "tree" { Preset::Tree } else { Preset::Algorithmic });
            if g.cardinality() > cfg.grid.cap {
                return Err(usage(format!("grid has {} points, above the cap of {}", g.cardinality(), cfg.grid.cap)));
            }
            g
        }
        _ => cfg.grid.clone(),
    };
    let points = sweep::expand(&grid, &cfg);
    let exec = execution(args.parallelism);
    let ranking = with_threads(args.parallelism, || sweep::run_sweep(&cfg, &points, &out, exec))?;
    for r in ranking.iter().take(5) {
        println!(
            "#{} point {}: reward {:.4} (lr {} C {} tau {} gamma {} alpha {} d {})",
            r.rank,
            r.point,
            r.final_reward_mean,
            r.params.lr_policy,
            r.params.critic_weight,
            r.params.tau,
            r.params.gamma,
            r.params.alpha,
            r.params.rollout
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_verify(scope: &str, trials: usize, seed: u64, parallelism: Option<usize>, out: Option<PathBuf>) -> Result<bool> {
    let scope: Scope = scope.parse().map_err(usage)?;
    if trials == 0 {
        eprintln!("warning: --trials 0 runs no instances; the report passes vacuously");
    }
    let exec = execution(parallelism);
    let report = with_threads(parallelism, || run_suite(scope, trials, seed, exec))?;
    let text = format!(
        "scope {} trials {} seed {}\n{}overall {}\n",
        report.scope,
        report.trials,
        report.seed,
        report.render(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    if let Some(path) = out {
        fs::write(&path, &text).with_context(|| format!("write {}", path.display()))?;
    }
    Ok(report.passed())
}

#[allow(clippy::too_many_arguments)]
fn cmd_experts(
    config: Option<PathBuf>,
    task: Option<String>,
    count: usize,
    out: PathBuf,
    depth: Option<usize>,
    tree_seed: Option<u64>,
    min_length: Option<usize>,
    max_length: Option<usize>,
    vocab: Option<usize>,
    input: Option<String>,
    seed: u64,
) -> Result<()> {
    let mut env = match &config {
        Some(path) => load_config(path)?.env,
        None => EnvConfig {
            task: TaskId::SyntheticTree,
            depth: 20,
            min_length: 1,
            max_length: 10,
            vocab: 5,
            seed: 0,
        },
    };
    match task {
        Some(t) => env.task = t.parse().map_err(|e: pcl_core::mdp::EnvError| usage(e.to_string()))?,
        None if config.is_none() => return Err(usage("experts needs --task or --config")),
        None => {}
    }
    env.depth = depth.unwrap_or(env.depth);
    env.seed = tree_seed.unwrap_or(env.seed);
    env.min_length = min_length.unwrap_or(env.min_length);
    env.max_length = max_length.unwrap_or(env.max_length);
    env.vocab = vocab.unwrap_or(env.vocab);
    env.validate().map_err(|e| usage(e.to_string()))?;

    let records: Vec<EpisodeRecord> = match (&env.task, input) {
        (TaskId::Tape(kind), Some(text)) => {
            let rows = experts::parse_input(&text, env.vocab).map_err(|e| usage(e.to_string()))?;
            let instance = TapeInstance::new(*kind, env.vocab, rows).map_err(|e| usage(e.to_string()))?;
            let tape = TapeEnv::new(*kind, env.vocab, Curriculum::fixed(1, instance.width()));
            (0..count as u64)
                .map(|id| {
                    Ok(EpisodeRecord {
                        id,
                        seed,
                        episode: experts::tape_expert(&tape, instance.clone())?,
                    })
                })
                .collect::<Result<_>>()?
        }
        (TaskId::SyntheticTree, Some(_)) => return Err(usage("--input applies to tape tasks only")),
        (task, None) => {
            // sample over the full length range, not just the curriculum start
            let built = match task {
                TaskId::SyntheticTree => {
                    let cfg = ExperimentConfig {
                        env: env.clone(),
                        ..parse_config("task = \"synthetic_tree\"\nalgorithm = \"pcl\"\n").expect("static config")
                    };
                    TaskEnv::build(&cfg).map_err(|e| usage(e.to_string()))?
                }
                TaskId::Tape(kind) => TaskEnv::Tape(TapeEnv::new(*kind, env.vocab, Curriculum::fixed(env.min_length, env.max_length))),
            };
            experts::generate(&built, count, seed)?
        }
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(&out).with_context(|| format!("create {}", out.display()))?;
    write_episodes(BufWriter::new(file), &records)?;
    let total: f64 = records.iter().map(|r| r.episode.total_reward()).sum();
    let mean = if records.is_empty() { 0.0 } else { total / records.len() as f64 };
    println!("wrote {} episodes to {} (mean reward {mean:.4})", records.len(), out.display());
    Ok(())
}

fn cmd_eval(
    config: PathBuf,
    checkpoint: PathBuf,
    episodes: usize,
    seed: u64,
    run_seed: Option<u64>,
    parallelism: Option<usize>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let mut task = TaskEnv::build(&cfg).map_err(|e| usage(e.to_string()))?;
    if matches!(task, TaskEnv::Tree { .. }) && cfg.tree_per_run {
        let Some(s) = run_seed else {
            return Err(usage("this configuration draws a tree per run; pass --run-seed (or pin [env] tree_seed)"));
        };
        task = task.for_run(&cfg, s)?;
    }
    let task = task.for_evaluation(&cfg);
    let file = fs::File::open(&checkpoint).map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let cp = read_checkpoint(std::io::BufReader::new(file)).map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let exec = execution(parallelism);
    let returns = with_threads(parallelism, || -> Result<Vec<f64>> {
        Ok(match (cp.kind, &task) {
            (ModelKind::PolicyValue, TaskEnv::Tree { env, .. }) => {
                evaluate_returns(&PolicyValueModel::try_from(&cp)?, env, episodes, seed, exec)?
            }
            (ModelKind::PolicyValue, TaskEnv::Tape(env)) => {
                evaluate_returns(&PolicyValueModel::try_from(&cp)?, env, episodes, seed, exec)?
            }
            (ModelKind::Unified, TaskEnv::Tree { env, .. }) => {
                evaluate_returns(&UnifiedQModel::try_from(&cp)?, env, episodes, seed, exec)?
            }
            (ModelKind::Unified, TaskEnv::Tape(env)) => {
                evaluate_returns(&UnifiedQModel::try_from(&cp)?, env, episodes, seed, exec)?
            }
        })
    })?;
    if returns.is_empty() {
        println!("episodes 0");
        return Ok(());
    }
    let (mean, std) = mean_std(&returns);
    println!("episodes {} mean_reward {mean:.6} std {std:.6}", returns.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => cmd_train(args).map(|_| true),
        Command::Sweep { run, preset } => cmd_sweep(run, preset).map(|_| true),
        Command::Verify {
            scope,
            trials,
            seed,
            parallelism,
            out,
        } => cmd_verify(&scope, trials, seed, parallelism, out),
        Command::Experts {
            config,
            task,
            count,
            out,
            depth,
            tree_seed,
            min_length,
            max_length,
            vocab,
            input,
            seed,
        } => cmd_experts(config, task, count, out, depth, tree_seed, min_length, max_length, vocab, input, seed).map(|_| true),
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
            run_seed,
            parallelism,
        } => cmd_eval(config, checkpoint, episodes, seed, run_seed, parallelism).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
