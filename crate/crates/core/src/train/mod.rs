//! Training loops: PCL, Unified PCL, A2C, and tabular Q-learning baselines.
//!
//! One iteration of the consistency learners:
//!
//! 1. roll out a batch of on-policy episodes and apply their summed update;
//! 2. add the episodes to the replay buffer;
//! 3. sample a batch from the buffer and apply its summed update;
//! 4. record metrics.
//!
//! Every random draw comes from a stream seeded by [`Hyperparams::seed`], and
//! per-episode work is merged in a fixed order, so a run is bit-identical
//! under sequential and parallel execution.

mod rollout;
mod tabular_q;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use rollout::{evaluate, evaluate_returns, rollout, rollout_batch, rollout_batch_capped, sample_log_probs};
pub use tabular_q::{train_tabular_q, BackupMode, TabularQConfig};

use crate::losses::{a2c_gradients_with_entropy, pcl_gradients, EpisodeGradients, LossConfig, LossError};
use crate::mdp::{EnvError, Environment, Episode};
use crate::model::{ActorCritic, Gradients, Optimizer, OptimizerKind};
use crate::parallel::Execution;
use crate::replay::{BufferConfig, ReplayBuffer, ReplayError};

/// Trailing window for the reported average reward.
pub const REWARD_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("replay: {0}")]
    Replay(#[from] ReplayError),
    #[error("iteration {iteration}: {source}")]
    Diverged { iteration: usize, source: LossError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Pcl,
    UnifiedPcl,
    A2c,
    TabularQSoft,
    TabularQHard,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Pcl,
        Algorithm::UnifiedPcl,
        Algorithm::A2c,
        Algorithm::TabularQSoft,
        Algorithm::TabularQHard,
    ];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Pcl => "pcl",
            Algorithm::UnifiedPcl => "unified_pcl",
            Algorithm::A2c => "a2c",
            Algorithm::TabularQSoft => "tabular_q_soft",
            Algorithm::TabularQHard => "tabular_q_hard",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected pcl, unified_pcl, a2c, tabular_q_soft or tabular_q_hard)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub tau: f64,
    pub gamma: f64,
    pub rollout: usize,
    pub batch_size: usize,
    /// Policy learning rate `η_π`.
    pub lr_policy: f64,
    /// `η_v = critic_weight·η_π`.
    pub critic_weight: f64,
    /// Replay capacity `B`; zero disables replay.
    pub buffer_capacity: usize,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    /// Metrics are recorded every `eval_period` iterations and at the end.
    pub eval_period: usize,
    pub seed: u64,
    /// Replay batch size as a multiple of `batch_size`.
    pub replay_ratio: f64,
    pub tail_windows: bool,
    /// Global gradient-norm limit for recurrent models.
    pub clip_norm: Option<f64>,
    pub execution: Execution,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            gamma: 1.0,
            rollout: 10,
            batch_size: 10,
            lr_policy: 0.01,
            critic_weight: 1.0,
            buffer_capacity: 10_000,
            alpha: 1.0,
            optimizer: OptimizerKind::Sgd,
            iterations: 1000,
            eval_period: 10,
            seed: 0,
            replay_ratio: 1.0,
            tail_windows: true,
            clip_norm: Some(10.0),
            execution: Execution::default(),
        }
    }
}

impl Hyperparams {
    pub fn lr_value(&self) -> f64 {
        self.critic_weight * self.lr_policy
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            gamma: self.gamma,
            rollout: self.rollout,
            tail_windows: self.tail_windows,
        }
    }

    pub fn replay_batch(&self) -> usize {
        (self.replay_ratio * self.batch_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if self.rollout == 0 || self.batch_size == 0 || self.eval_period == 0 {
            return bad("rollout, batch_size and eval_period must be >= 1".into());
        }
        for (name, v) in [
            ("lr_policy", self.lr_policy),
            ("critic_weight", self.critic_weight),
            ("alpha", self.alpha),
            ("replay_ratio", self.replay_ratio),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub iteration: usize,
    pub env_steps: u64,
    pub episodes: u64,
    /// Mean undiscounted reward of the last [`REWARD_WINDOW`] training episodes.
    pub avg_reward: f64,
    /// Objective of the on-policy batch before its update.
    pub loss: f64,
    pub buffer_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<RunMetrics>,
    pub optimizer: Optimizer,
    pub buffer: Option<ReplayBuffer>,
}

/// Returned by a training hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Update {
    Consistency,
    A2c,
}

/// Update and objective averaged over the episodes of a batch, merged in
/// episode order.
pub fn batch_gradients<M, F>(episodes: &[&Episode], model: &M, exec: Execution, per_episode: F) -> Result<(Gradients, f64), LossError>
where
    M: ActorCritic,
    F: Fn(&Episode, &M) -> Result<EpisodeGradients, LossError> + Sync + Send,
{
    let results = exec.map(episodes, |ep| per_episode(ep, model));
    let mut total = model.zero_gradients();
    let mut objective = 0.0;
    for r in results {
        let g = r?;
        total.merge(&g.grads);
        objective += g.objective;
    }
    if !episodes.is_empty() {
        let w = 1.0 / episodes.len() as f64;
        total.scale(w);
        objective *= w;
    }
    Ok((total, objective))
}

fn apply<M: ActorCritic>(model: &mut M, mut grads: Gradients, opt: &mut Optimizer, hp: &Hyperparams) {
    if model.is_recurrent() {
        if let Some(c) = hp.clip_norm {
            grads.clip_global_norm(c);
        }
    }
    model.apply_update(&grads, opt, hp.lr_policy, hp.lr_value());
}

struct RewardTracker {
    recent: VecDeque<f64>,
    sum: f64,
}

impl RewardTracker {
    fn push(&mut self, r: f64) {
        self.recent.push_back(r);
        self.sum += r;
        if self.recent.len() > REWARD_WINDOW {
            self.sum -= self.recent.pop_front().unwrap();
        }
    }

    fn mean(&self) -> f64 {
        // re-summed so the value does not depend on accumulated rounding
        if self.recent.is_empty() {
            0.0
        } else {
            self.recent.iter().sum::<f64>() / self.recent.len() as f64
        }
    }
}

fn run<E, M, H>(
    update: Update,
    env: &mut E,
    model: &mut M,
    hp: &Hyperparams,
    experts: &[Episode],
    mut hook: H,
) -> Result<TrainOutcome, TrainError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
    H: FnMut(&RunMetrics, &M) -> Control,
{
    hp.validate()?;
    if env.n_actions() != model.n_actions() {
        return Err(TrainError::Config(format!(
            "environment has {} actions, model {}",
            env.n_actions(),
            model.n_actions()
        )));
    }
    let mut cfg = hp.loss_config();
    if let Some(tau) = model.tau() {
        cfg.tau = tau;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut opt = Optimizer::new(hp.optimizer);
    let use_replay = update == Update::Consistency && hp.buffer_capacity > 0;
    let mut buffer = if use_replay {
        Some(ReplayBuffer::new(BufferConfig::new(hp.buffer_capacity, hp.alpha)?))
    } else {
        None
    };
    if let Some(b) = buffer.as_mut() {
        b.seed_experts(experts.to_vec(), &mut rng)?;
    }
    let per_episode = |ep: &Episode, m: &M| match update {
        Update::Consistency => pcl_gradients(ep, m, &cfg),
        Update::A2c => a2c_gradients_with_entropy(ep, m, &LossConfig { tau: 0.0, ..cfg }, hp.tau),
    };
    let mut tracker = RewardTracker {
        recent: VecDeque::new(),
        sum: 0.0,
    };
    let mut metrics = Vec::new();
    let (mut env_steps, mut episodes_seen) = (0u64, 0u64);
    for iteration in 1..=hp.iterations {
        let seeds: Vec<(u64, u64)> = (0..hp.batch_size).map(|_| (rng.random(), rng.random())).collect();
        let (batch, caps): (Vec<Episode>, Vec<Option<f64>>) =
            rollout_batch_capped(env, model, &seeds, hp.execution)?.into_iter().unzip();
        for (ep, cap) in batch.iter().zip(caps) {
            let total = ep.total_reward();
            env.finish_episode(total, cap);
            tracker.push(total);
            env_steps += ep.len() as u64;
        }
        episodes_seen += batch.len() as u64;
        let refs: Vec<&Episode> = batch.iter().collect();
        let (grads, loss) = batch_gradients(&refs, model, hp.execution, per_episode)
            .map_err(|source| TrainError::Diverged { iteration, source })?;
        apply(model, grads, &mut opt, hp);

        if let Some(buf) = buffer.as_mut() {
            for ep in batch {
                buf.insert(ep, false, &mut rng)?;
            }
            let n = hp.replay_batch();
            if n > 0 {
                let replay = buf.sample_batch(n, &mut rng)?;
                let (grads, _) = batch_gradients(&replay, model, hp.execution, per_episode)
                    .map_err(|source| TrainError::Diverged { iteration, source })?;
                apply(model, grads, &mut opt, hp);
            }
        }

        if iteration % hp.eval_period == 0 || iteration == hp.iterations {
            let m = RunMetrics {
                iteration,
                env_steps,
                episodes: episodes_seen,
                avg_reward: tracker.mean(),
                loss,
                buffer_size: buffer.as_ref().map_or(0, ReplayBuffer::len),
            };
            metrics.push(m);
            if hook(&m, model) == Control::Stop {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        metrics,
        optimizer: opt,
        buffer,
    })
}

fn no_hook<M>(_: &RunMetrics, _: &M) -> Control {
    Control::Continue
}

/// PCL with on-policy and replay updates; `experts` are pinned in the buffer.
pub fn train_pcl<E, M>(env: &mut E, model: &mut M, hp: &Hyperparams, experts: &[Episode]) -> Result<TrainOutcome, TrainError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
{
    run(Update::Consistency, env, model, hp, experts, no_hook)
}

/// [`train_pcl`] with a hook called at every metrics record; returning
/// [`Control::Stop`] ends training early.
pub fn train_pcl_with_hook<E, M, H>(env: &mut E, model: &mut M, hp: &Hyperparams, experts: &[Episode], hook: H) -> Result<TrainOutcome, TrainError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
    H: FnMut(&RunMetrics, &M) -> Control,
{
    run(Update::Consistency, env, model, hp, experts, hook)
}

/// Unified PCL; the temperature comes from the model.
pub fn train_unified_pcl<E>(env: &mut E, model: &mut crate::model::UnifiedQModel, hp: &Hyperparams, experts: &[Episode]) -> Result<TrainOutcome, TrainError>
where
    E: Environment + Clone + Sync,
{
    run(Update::Consistency, env, model, hp, experts, no_hook)
}

/// On-policy A2C with a `τ`-weighted entropy bonus; no replay.
pub fn train_a2c<E, M>(env: &mut E, model: &mut M, hp: &Hyperparams) -> Result<TrainOutcome, TrainError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
{
    run(Update::A2c, env, model, hp, &[], no_hook)
}

pub fn train_a2c_with_hook<E, M, H>(env: &mut E, model: &mut M, hp: &Hyperparams, hook: H) -> Result<TrainOutcome, TrainError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
    H: FnMut(&RunMetrics, &M) -> Control,
{
    run(Update::A2c, env, model, hp, &[], hook)
}

/// Fits a model purely from stored episodes: each iteration applies the
/// averaged PCL update of a batch drawn from `buffer`. Returns the objective
/// of each batch.
pub fn fit_replay<M: ActorCritic>(
    model: &mut M,
    buffer: &ReplayBuffer,
    hp: &Hyperparams,
) -> Result<Vec<f64>, TrainError> {
    hp.validate()?;
    let cfg = hp.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut opt = Optimizer::new(hp.optimizer);
    let mut losses = Vec::with_capacity(hp.iterations);
    for iteration in 1..=hp.iterations {
        let batch = buffer.sample_batch(hp.batch_size, &mut rng)?;
        let (grads, loss) = batch_gradients(&batch, model, hp.execution, |ep, m| pcl_gradients(ep, m, &cfg))
            .map_err(|source| TrainError::Diverged { iteration, source })?;
        apply(model, grads, &mut opt, hp);
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{SyntheticTree, TabularEnv, TabularMdp};
    use crate::model::{PolicyValueModel, UnifiedQModel};
    use crate::oracle::{boltzmann_policy, optimal_values, q_table};
    use std::sync::Arc;

    fn tree_env(depth: usize, seed: u64) -> (SyntheticTree, TabularEnv) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = SyntheticTree::generate(depth, &mut rng).unwrap();
        let env = TabularEnv::new(Arc::new(tree.to_mdp(1.0).unwrap()));
        (tree, env)
    }

    fn small_hp() -> Hyperparams {
        Hyperparams {
            tau: 0.5,
            rollout: 3,
            lr_policy: 0.5,
            iterations: 100,
            eval_period: 10,
            buffer_capacity: 100,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn optimum_is_stationary() {
        let (_, mut env) = tree_env(5, 1);
        let mdp = env.mdp().clone();
        let hp = small_hp();
        let v = optimal_values(&mdp, hp.tau).unwrap();
        let mut m = PolicyValueModel::from_tables(&v, &boltzmann_policy(&mdp, &v, hp.tau));
        let start = m.clone();
        train_pcl(&mut env, &mut m, &hp, &[]).unwrap();
        for (a, b) in m.param_groups().iter().zip(start.param_groups()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let mut u = UnifiedQModel::from_q(&q_table(&mdp, &v), hp.tau).unwrap();
        let ustart = u.clone();
        train_unified_pcl(&mut env, &mut u, &hp, &[]).unwrap();
        for (x, y) in u.q.params().iter().zip(ustart.q.params()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn runs_are_reproducible_across_execution_modes() {
        let (_, env) = tree_env(6, 2);
        let mut hp = small_hp();
        let mut outcomes = Vec::new();
        for exec in [Execution::Sequential, Execution::Parallel] {
            hp.execution = exec;
            let mut m = PolicyValueModel::tabular(127, 2);
            let out = train_pcl(&mut env.clone(), &mut m, &hp, &[]).unwrap();
            outcomes.push((out.metrics, m));
        }
        assert_eq!(outcomes[0], outcomes[1]);
        let mut m = PolicyValueModel::tabular(127, 2);
        let again = train_pcl(&mut env.clone(), &mut m, &hp, &[]).unwrap();
        assert_eq!(again.metrics, outcomes[0].0);
    }

    #[test]
    fn pcl_improves_on_small_tree() {
        let (tree, env) = tree_env(6, 3);
        let mut m = PolicyValueModel::tabular(tree.n_nodes(), 2);
        let uniform = evaluate(&m, &env, 2000, 0).unwrap();
        let hp = Hyperparams {
            tau: 0.05,
            iterations: 400,
            ..small_hp()
        };
        let out = train_pcl(&mut env.clone(), &mut m, &hp, &[]).unwrap();
        let after = evaluate(&m, &env, 500, 1).unwrap();
        assert!(after > uniform + 5.0, "{uniform} -> {after}");
        assert_eq!(out.metrics.last().unwrap().iteration, 400);
        assert_eq!(out.metrics.len(), 40);
    }

    #[test]
    fn uniform_evaluation_matches_enumeration() {
        let (tree, env) = tree_env(4, 4);
        let m = PolicyValueModel::tabular(tree.n_nodes(), 2);
        // mean over all 16 paths
        let mut total = 0.0;
        for leaf in 0..16usize {
            let mut v = 0;
            for bit in (0..4).rev() {
                let a = (leaf >> bit) & 1;
                total += tree.edge_reward(v, a);
                v = tree.child(v, a);
            }
        }
        let exact = total / 16.0;
        let n = 40_000;
        let r = evaluate_returns(&m, &env, n, 5, Execution::default()).unwrap();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - exact).abs() < 5.0 * (var / n as f64).sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn oracle_policy_scores_near_optimum() {
        let (_, env) = tree_env(5, 6);
        let mdp = env.mdp().clone();
        let tau = 1e-3;
        let v = optimal_values(&mdp, tau).unwrap();
        let m = PolicyValueModel::from_tables(&v, &boltzmann_policy(&mdp, &v, tau));
        assert!(evaluate(&m, &env, 200, 0).unwrap() >= 19.9);
    }

    #[test]
    fn one_hot_policy_has_zero_variance() {
        let (tree, env) = tree_env(5, 7);
        let mut m = PolicyValueModel::tabular(tree.n_nodes(), 2);
        for s in 0..tree.n_nodes() {
            m.policy.as_tabular_mut().unwrap().row_mut(s).copy_from_slice(&[0.0, f64::NEG_INFINITY]);
        }
        let r = evaluate_returns(&m, &env, 50, 0, Execution::default()).unwrap();
        assert!(r.iter().all(|x| *x == r[0]));
    }

    #[test]
    fn curriculum_advances_during_training() {
        use crate::mdp::{Curriculum, TapeEnv, TaskKind};
        use crate::model::NetSpec;
        let mut env = TapeEnv::new(TaskKind::Copy, 3, Curriculum::new(1, 4));
        let spec = |out| NetSpec::Linear {
            n_obs: env.n_observations(),
            n_actions: env.n_actions(),
            out,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = PolicyValueModel::new(spec(env.n_actions()), spec(1), &mut rng).unwrap();
        let hp = Hyperparams {
            tau: 0.05,
            rollout: 10,
            batch_size: 20,
            lr_policy: 0.005,
            optimizer: OptimizerKind::Adam,
            iterations: 1500,
            eval_period: 100,
            ..Hyperparams::default()
        };
        train_pcl(&mut env, &mut m, &hp, &[]).unwrap();
        assert_eq!(env.curriculum().range(), (1, 4));
    }

    fn bandit() -> TabularEnv {
        let mdp = TabularMdp::new(2, 2, 1.0, vec![false, true], vec![1.0, 0.0, 0.0, 0.0], vec![vec![(1, 1.0)]; 4]).unwrap();
        TabularEnv::new(Arc::new(mdp))
    }

    #[test]
    fn a2c_bandit_concentrates_on_better_arm() {
        let mut probs = Vec::new();
        for tau in [0.5, 0.1, 0.01] {
            let mut m = PolicyValueModel::tabular(2, 2);
            let hp = Hyperparams {
                tau,
                rollout: 1,
                lr_policy: 1.0,
                iterations: 1500,
                ..Hyperparams::default()
            };
            train_a2c(&mut bandit(), &mut m, &hp).unwrap();
            let l = m.policy.as_tabular().unwrap().row(0).to_vec();
            let p0 = 1.0 / (1.0 + (l[1] - l[0]).exp());
            // entropy-regularized optimum: π(0) = 1/(1 + e^{−1/τ})
            let target = 1.0 / (1.0 + (-1.0 / tau).exp());
            assert!((p0 - target).abs() < 0.05, "tau {tau}: {p0} vs {target}");
            probs.push(p0);
        }
        assert!(probs[2] > 0.95);
    }

    #[test]
    fn a2c_with_zero_advantage_moves_only_by_entropy() {
        let mut m = PolicyValueModel::tabular(2, 2);
        m.policy.set_params(&[2.0, 0.0, 0.0, 0.0]);
        let mdp = TabularMdp::new(2, 2, 1.0, vec![false, true], vec![0.0; 4], vec![vec![(1, 1.0)]; 4]).unwrap();
        let mut env = TabularEnv::new(Arc::new(mdp));
        let hp = Hyperparams {
            tau: 0.5,
            rollout: 1,
            lr_policy: 0.1,
            iterations: 200,
            ..Hyperparams::default()
        };
        train_a2c(&mut env, &mut m, &hp).unwrap();
        assert!(m.value.params().iter().all(|v| *v == 0.0));
        let l = m.policy.as_tabular().unwrap().row(0);
        assert!((l[0] - l[1]).abs() < 0.5);
    }

    #[test]
    fn off_policy_replay_fit_reaches_consistency() {
        let (tree, env) = tree_env(4, 8);
        let mdp = env.mdp().clone();
        let uniform = PolicyValueModel::tabular(tree.n_nodes(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(BufferConfig::new(400, 0.0).unwrap());
        for _ in 0..400 {
            let ep = rollout(&mut env.clone(), &uniform, rng.random(), rng.random()).unwrap();
            buf.insert(ep, false, &mut rng).unwrap();
        }
        let tau = 1.0;
        let hp = Hyperparams {
            tau,
            rollout: 1,
            lr_policy: 0.4,
            batch_size: 20,
            iterations: 8000,
            ..Hyperparams::default()
        };
        let mut m = PolicyValueModel::tabular(tree.n_nodes(), 2);
        fit_replay(&mut m, &buf, &hp).unwrap();
        let v = optimal_values(&mdp, tau).unwrap();
        let vt = m.value.params();
        let err = (0..tree.n_nodes()).filter(|&s| !tree.is_leaf(s)).map(|s| (vt[s] - v[s]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn hook_can_stop_early() {
        let (tree, mut env) = tree_env(4, 9);
        let mut m = PolicyValueModel::tabular(tree.n_nodes(), 2);
        let out = train_pcl_with_hook(&mut env, &mut m, &small_hp(), &[], |r, _| {
            if r.iteration >= 30 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert_eq!(out.metrics.last().unwrap().iteration, 30);
    }

    #[test]
    fn experts_stay_pinned() {
        let (tree, mut env) = tree_env(4, 10);
        let mut experts = Vec::new();
        let mut e = env.clone();
        let obs = e.reset(0);
        let mut ep = Episode::new(obs);
        let mut v = 0;
        for a in tree.optimal_actions() {
            let s = e.step(a).unwrap();
            ep.push(a, &s);
            v = tree.child(v, a);
        }
        assert!(tree.is_leaf(v));
        assert!((ep.total_reward() - 20.0).abs() < 1e-9);
        experts.push(ep);
        let mut m = PolicyValueModel::tabular(tree.n_nodes(), 2);
        let hp = Hyperparams {
            buffer_capacity: 20,
            ..small_hp()
        };
        let out = train_pcl(&mut env, &mut m, &hp, &experts).unwrap();
        let buf = out.buffer.unwrap();
        assert_eq!(buf.pinned_count(), 1);
        assert_eq!(buf.len(), 20);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("dqn".parse::<Algorithm>().is_err());
    }
}
