//! Builds environments and models from a configuration and runs seeds.

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use pcl_core::mdp::{Curriculum, Environment, Episode, SyntheticTree, TabularEnv, TabularMdp, TapeEnv, TaskId};
use pcl_core::model::{write_checkpoint, ActorCritic, Checkpoint, NetSpec, PolicyValueModel, UnifiedQModel};
use pcl_core::oracle::{hardmax_value_iteration, optimal_values, q_table, default_max_iters, PolicyTable, QTable};
use pcl_core::softmax::hard_max;
use pcl_core::train::{
    evaluate, train_a2c, train_pcl, train_tabular_q, train_unified_pcl, Algorithm, RunMetrics, TabularQConfig,
};
use pcl_core::Execution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelArch};
use crate::experts;

/// Episodes used to score a tabular Q result.
const Q_EVAL_EPISODES: usize = 100;

/// The environment of an experiment, built once and cloned per run.
#[derive(Debug, Clone)]
pub enum TaskEnv {
    Tree { tree: Arc<SyntheticTree>, env: TabularEnv },
    Tape(TapeEnv),
}

impl TaskEnv {
    /// Builds the task; the tree comes from `env.seed`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.env.task {
            TaskId::SyntheticTree => Self::tree(cfg, cfg.env.seed),
            TaskId::Tape(_) => Ok(TaskEnv::Tape(TapeEnv::from_config(&cfg.env)?)),
        }
    }

    fn tree(cfg: &ExperimentConfig, tree_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
        let tree = SyntheticTree::generate(cfg.env.depth, &mut rng)?;
        let mdp = tree.to_mdp(cfg.hp.gamma)?;
        Ok(TaskEnv::Tree {
            tree: Arc::new(tree),
            env: TabularEnv::new(Arc::new(mdp)),
        })
    }

    /// The task seen by the run with training seed `seed`: its own tree
    /// unless the configuration pins one.
    pub fn for_run(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        match self {
            TaskEnv::Tree { .. } if cfg.tree_per_run => Self::tree(cfg, seed),
            other => Ok(other.clone()),
        }
    }

    /// Same task with a static length range covering the whole curriculum.
    pub fn for_evaluation(&self, cfg: &ExperimentConfig) -> Self {
        match self {
            TaskEnv::Tape(env) => TaskEnv::Tape(TapeEnv::new(
                env.kind(),
                env.base(),
                Curriculum::fixed(cfg.env.min_length, cfg.env.max_length),
            )),
            other => other.clone(),
        }
    }

    pub fn n_observations(&self) -> usize {
        match self {
            TaskEnv::Tree { env, .. } => env.n_observations(),
            TaskEnv::Tape(env) => env.n_observations(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            TaskEnv::Tree { env, .. } => env.n_actions(),
            TaskEnv::Tape(env) => env.n_actions(),
        }
    }

    pub fn mdp(&self) -> Option<&Arc<TabularMdp>> {
        match self {
            TaskEnv::Tree { env, .. } => Some(env.mdp()),
            TaskEnv::Tape(_) => None,
        }
    }
}

/// One row of a per-run metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub run_id: String,
    pub algorithm: String,
    pub task: String,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: u64,
    pub avg_reward: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub rows: Vec<MetricRow>,
    pub checkpoint: Checkpoint,
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-{}-s{seed}", cfg.algorithm, cfg.env.task)
}

fn specs(cfg: &ExperimentConfig, env: &TaskEnv, out: usize) -> NetSpec {
    let (n_obs, n_actions) = (env.n_observations(), env.n_actions());
    match cfg.arch {
        ModelArch::Tabular => NetSpec::Tabular { n_obs, out },
        ModelArch::Linear => NetSpec::Linear { n_obs, n_actions, out },
        ModelArch::Lstm => NetSpec::Lstm {
            n_obs,
            n_actions,
            hidden: cfg.hidden,
            out,
        },
    }
}

fn rows_from(cfg: &ExperimentConfig, seed: u64, metrics: &[RunMetrics]) -> Vec<MetricRow> {
    let id = run_id(cfg, seed);
    metrics
        .iter()
        .map(|m| MetricRow {
            run_id: id.clone(),
            algorithm: cfg.algorithm.to_string(),
            task: cfg.env.task.to_string(),
            seed,
            iteration: m.iteration,
            env_steps: m.env_steps,
            avg_reward: m.avg_reward,
            loss: m.loss,
        })
        .collect()
}

fn expert_episodes(cfg: &ExperimentConfig, env: &TaskEnv, seed: u64) -> Result<Vec<Episode>> {
    if !cfg.experts {
        return Ok(Vec::new());
    }
    Ok(experts::generate(env, cfg.expert_count, seed)?
        .into_iter()
        .map(|r| r.episode)
        .collect())
}

fn train_generic<E>(cfg: &ExperimentConfig, mut env: E, task: &TaskEnv, seed: u64, exec: Execution) -> Result<(Vec<RunMetrics>, Checkpoint)>
where
    E: Environment + Clone + Sync,
{
    let mut hp = cfg.hp.clone();
    hp.seed = seed;
    hp.execution = exec;
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_actions = task.n_actions();
    match cfg.algorithm {
        Algorithm::Pcl | Algorithm::A2c => {
            let mut model = PolicyValueModel::new(specs(cfg, task, n_actions), specs(cfg, task, 1), &mut init)?;
            let outcome = if cfg.algorithm == Algorithm::Pcl {
                let experts = expert_episodes(cfg, task, seed)?;
                train_pcl(&mut env, &mut model, &hp, &experts)?
            } else {
                train_a2c(&mut env, &mut model, &hp)?
            };
            Ok((outcome.metrics, model.checkpoint()))
        }
        Algorithm::UnifiedPcl => {
            let mut model = UnifiedQModel::new(specs(cfg, task, n_actions), hp.tau, &mut init)?;
            let experts = expert_episodes(cfg, task, seed)?;
            let outcome = train_unified_pcl(&mut env, &mut model, &hp, &experts)?;
            Ok((outcome.metrics, model.checkpoint()))
        }
        Algorithm::TabularQSoft | Algorithm::TabularQHard => unreachable!("handled by run_tabular_q"),
    }
}

/// Greedy policy of `q` as a policy/value model with `V(s) = max_a Q(s, a)`.
fn greedy_model(q: &QTable) -> PolicyValueModel {
    let rows = (0..q.n_states())
        .map(|s| {
            let (_, a) = hard_max(q.row(s));
            let mut row = vec![0.0; q.n_actions()];
            row[a] = 1.0;
            row
        })
        .collect();
    let values: Vec<f64> = (0..q.n_states()).map(|s| hard_max(q.row(s)).0).collect();
    PolicyValueModel::from_tables(&values, &PolicyTable::from_rows(rows))
}

/// Tabular Q runs report one row: reward of the learned policy and
/// `‖Q − Q*‖_∞` against the exact oracle as the loss.
fn run_tabular_q(cfg: &ExperimentConfig, task: &TaskEnv, seed: u64) -> Result<(Vec<RunMetrics>, Checkpoint)> {
    let Some(mdp) = task.mdp() else {
        bail!("tabular Q-learning needs a tabular task")
    };
    let soft = cfg.algorithm == Algorithm::TabularQSoft;
    let qcfg = TabularQConfig {
        tau: cfg.hp.tau,
        updates: cfg.q_updates,
        omega: cfg.q_omega,
        mode: cfg.q_backup,
        seed,
    };
    let q = train_tabular_q(mdp, &qcfg, soft)?;
    let v_star = if soft {
        optimal_values(mdp, cfg.hp.tau)?
    } else {
        hardmax_value_iteration(mdp, 1e-12, default_max_iters(mdp, 0.0, 1e-12))?.values
    };
    let loss = q.sup_distance(&q_table(mdp, &v_star));
    let env = TabularEnv::new(mdp.clone());
    let (avg_reward, checkpoint) = if soft {
        let model = UnifiedQModel::from_q(&q, cfg.hp.tau)?;
        (evaluate(&model, &env, Q_EVAL_EPISODES, seed)?, model.checkpoint())
    } else {
        let model = greedy_model(&q);
        (evaluate(&model, &env, Q_EVAL_EPISODES, seed)?, model.checkpoint())
    };
    let metrics = vec![RunMetrics {
        iteration: cfg.q_updates,
        env_steps: cfg.q_updates as u64,
        episodes: 0,
        avg_reward,
        loss,
        buffer_size: 0,
    }];
    Ok((metrics, checkpoint))
}

pub fn run_seed(cfg: &ExperimentConfig, task: &TaskEnv, seed: u64, exec: Execution) -> Result<RunResult> {
    let task = &task.for_run(cfg, seed)?;
    let (metrics, checkpoint) = match (cfg.algorithm, task) {
        (Algorithm::TabularQSoft | Algorithm::TabularQHard, _) => run_tabular_q(cfg, task, seed)?,
        (_, TaskEnv::Tree { env, .. }) => train_generic(cfg, env.clone(), task, seed, exec)?,
        (_, TaskEnv::Tape(env)) => train_generic(cfg, env.clone(), task, seed, exec)?,
    };
    let run_id = run_id(cfg, seed);
    Ok(RunResult {
        rows: rows_from(cfg, seed, &metrics),
        run_id,
        checkpoint,
    })
}

/// Runs every seed, in parallel across seeds when `exec` allows it.
pub fn run_all(cfg: &ExperimentConfig, task: &TaskEnv, exec: Execution) -> Result<Vec<RunResult>> {
    let results = exec.map(&cfg.seeds, |&seed| {
        run_seed(cfg, task, seed, Execution::Sequential).with_context(|| format!("run {}", run_id(cfg, seed)))
    });
    results.into_iter().collect()
}

/// Mean and sample standard deviation (`NaN` for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub algorithm: String,
    pub task: String,
    pub iteration: usize,
    pub runs: usize,
    pub env_steps_mean: f64,
    pub avg_reward_mean: f64,
    pub avg_reward_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
}

/// Per-iteration mean and sample std across runs.
pub fn aggregate(results: &[RunResult]) -> Vec<AggregateRow> {
    let mut iterations: Vec<usize> = results.iter().flat_map(|r| r.rows.iter().map(|m| m.iteration)).collect();
    iterations.sort_unstable();
    iterations.dedup();
    iterations
        .into_iter()
        .map(|it| {
            let rows: Vec<&MetricRow> = results
                .iter()
                .filter_map(|r| r.rows.iter().find(|m| m.iteration == it))
                .collect();
            let col = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (steps, _) = mean_std(&col(|r| r.env_steps as f64));
            let (reward_mean, reward_std) = mean_std(&col(|r| r.avg_reward));
            let (loss_mean, loss_std) = mean_std(&col(|r| r.loss));
            AggregateRow {
                algorithm: rows[0].algorithm.clone(),
                task: rows[0].task.clone(),
                iteration: it,
                runs: rows.len(),
                env_steps_mean: steps,
                avg_reward_mean: reward_mean,
                avg_reward_std: reward_std,
                loss_mean,
                loss_std,
            }
        })
        .collect()
}

pub const METRIC_COLUMNS: [&str; 8] = ["run_id", "algorithm", "task", "seed", "iteration", "env_steps", "avg_reward", "loss"];

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(|| format!("create {}", path.display()))?;
    // written explicitly so empty files still carry the header
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const AGGREGATE_COLUMNS: [&str; 9] = [
    "algorithm",
    "task",
    "iteration",
    "runs",
    "env_steps_mean",
    "avg_reward_mean",
    "avg_reward_std",
    "loss_mean",
    "loss_std",
];

/// Writes `runs/<id>.csv`, `checkpoints/<id>.ckpt` and `aggregate.csv` under `dir`.
pub fn write_outputs(dir: &Path, results: &[RunResult]) -> Result<()> {
    fs::create_dir_all(dir.join("runs"))?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    for r in results {
        write_csv(&dir.join("runs").join(format!("{}.csv", r.run_id)), &METRIC_COLUMNS, &r.rows)?;
        let path = dir.join("checkpoints").join(format!("{}.ckpt", r.run_id));
        let f = fs::File::create(&path).with_context(|| format!("create {}", path.display()))?;
        write_checkpoint(BufWriter::new(f), &r.checkpoint)?;
    }
    write_csv(&dir.join("aggregate.csv"), &AGGREGATE_COLUMNS, &aggregate(results))
}

pub fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_csv(path, header, rows)
}
