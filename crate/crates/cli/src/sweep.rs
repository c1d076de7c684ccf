//! Grid sweeps: every point trains every seed, then points are ranked by the
//! mean of their final trailing-average reward.

use std::path::Path;

use anyhow::{Context, Result};
use pcl_core::Execution;
use serde::Serialize;

use crate::config::{ExperimentConfig, GridSpec};
use crate::runner::{mean_std, run_seed, write_outputs, write_table, RunResult, TaskEnv};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lr_policy: f64,
    pub critic_weight: f64,
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub rollout: usize,
}

fn or_base<T: Copy>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

/// Cartesian product in the order lr_policy, critic_weight, tau, gamma, alpha,
/// rollout (last varies fastest).
pub fn expand(grid: &GridSpec, cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let hp = &cfg.hp;
    let mut points = Vec::with_capacity(grid.cardinality());
    for &lr_policy in &or_base(&grid.lr_policy, hp.lr_policy) {
        for &critic_weight in &or_base(&grid.critic_weight, hp.critic_weight) {
            for &tau in &or_base(&grid.tau, hp.tau) {
                for &gamma in &or_base(&grid.gamma, hp.gamma) {
                    for &alpha in &or_base(&grid.alpha, hp.alpha) {
                        for &rollout in &or_base(&grid.rollout, hp.rollout) {
                            points.push(GridPoint {
                                lr_policy,
                                critic_weight,
                                tau,
                                gamma,
                                alpha,
                                rollout,
                            });
                        }
                    }
                }
            }
        }
    }
    points
}

pub fn apply(cfg: &ExperimentConfig, p: &GridPoint) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.hp.lr_policy = p.lr_policy;
    c.hp.critic_weight = p.critic_weight;
    c.hp.tau = p.tau;
    c.hp.gamma = p.gamma;
    c.hp.alpha = p.alpha;
    c.hp.rollout = p.rollout;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub rank: usize,
    pub point: usize,
    pub params: GridPoint,
    pub final_reward_mean: f64,
    pub final_reward_std: f64,
    pub runs: usize,
}

impl Serialize for RankRow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let p = &self.params;
        (
            self.rank,
            self.point,
            p.lr_policy,
            p.critic_weight,
            p.tau,
            p.gamma,
            p.alpha,
            p.rollout,
            self.final_reward_mean,
            self.final_reward_std,
            self.runs,
        )
            .serialize(s)
    }
}

pub const RANK_COLUMNS: [&str; 11] = [
    "rank",
    "point",
    "lr_policy",
    "critic_weight",
    "tau",
    "gamma",
    "alpha",
    "rollout",
    "final_avg_reward_mean",
    "final_avg_reward_std",
    "runs",
];

/// Ranks points by mean final reward (descending, ties by point index).
pub fn rank(points: &[GridPoint], results: &[Vec<RunResult>]) -> Vec<RankRow> {
    let mut rows: Vec<RankRow> = points
        .iter()
        .zip(results)
        .enumerate()
        .map(|(i, (p, runs))| {
            let finals: Vec<f64> = runs.iter().filter_map(|r| r.rows.last().map(|m| m.avg_reward)).collect();
            let (mean, std) = mean_std(&finals);
            RankRow {
                rank: 0,
                point: i,
                params: *p,
                final_reward_mean: mean,
                final_reward_std: std,
                runs: runs.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.final_reward_mean
            .total_cmp(&a.final_reward_mean)
            .then(a.point.cmp(&b.point))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

/// Trains every (point, seed) pair and writes `points/<i>/…` plus `ranking.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, points: &[GridPoint], out: &Path, exec: Execution) -> Result<Vec<RankRow>> {
    let configs: Vec<ExperimentConfig> = points.iter().map(|p| apply(cfg, p)).collect();
    // tasks depend on gamma only through the oracle MDP; build one per point
    let tasks: Vec<TaskEnv> = configs.iter().map(TaskEnv::build).collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes = exec.map(&jobs, |&(i, seed)| {
        run_seed(&configs[i], &tasks[i], seed, Execution::Sequential).with_context(|| format!("grid point {i}, seed {seed}"))
    });
    let mut grouped: Vec<Vec<RunResult>> = vec![Vec::new(); points.len()];
    for ((i, _), r) in jobs.iter().zip(outcomes) {
        grouped[*i].push(r?);
    }
    for (i, runs) in grouped.iter().enumerate() {
        write_outputs(&out.join("points").join(i.to_string()), runs)?;
    }
    let ranking = rank(points, &grouped);
    write_table(&out.join("ranking.csv"), &RANK_COLUMNS, &ranking)?;
    Ok(ranking)
}
