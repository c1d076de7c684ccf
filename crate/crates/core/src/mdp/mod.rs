//! Environments: explicit tabular MDPs, the synthetic decision tree, and the
//! algorithmic tape tasks, all behind one episodic [`Environment`] trait.
//!
//! Observations are plain indices. For tabular environments the index is the
//! state id; for tape tasks it is the symbol under the read head (with one
//! extra token for "outside the grid").

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

mod episode_io;
mod tape;
mod tree;

pub use episode_io::{read_episodes, write_episodes, EpisodeRecord};
pub use tape::{Curriculum, Move, TapeEnv, TapeInstance, TaskKind};
pub use tree::{build_synthetic_tree, SyntheticTree, TREE_OPTIMAL_RETURN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
    #[error("action {action} out of range (n_actions = {n_actions})")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed episode record on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One transition returned by [`Environment::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub observation: usize,
    pub reward: f64,
    /// The episode is over (terminal state or time limit).
    pub done: bool,
    /// The final observation is a true terminal (its value is zero).
    pub terminated: bool,
}

pub trait Environment: Send {
    fn n_actions(&self) -> usize;
    fn n_observations(&self) -> usize;
    /// Starts a new episode. Identical seeds give identical episodes.
    fn reset(&mut self, seed: u64) -> usize;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
    /// Largest undiscounted return achievable in the current episode, if known.
    fn max_episode_reward(&self) -> Option<f64> {
        None
    }
    /// Called by drivers once an episode has finished; used by curricula.
    /// `max_reward` is [`Environment::max_episode_reward`] as reported by the
    /// environment that ran the episode, which may be a clone of `self`.
    fn finish_episode(&mut self, _total_reward: f64, _max_reward: Option<f64>) {}
}

/// A rollout `s_0, a_0, r_0, ..., s_T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub observations: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Whether `observations[T]` is a terminal state.
    pub terminated: bool,
}

impl Episode {
    pub fn new(first_observation: usize) -> Self {
        Self {
            observations: vec![first_observation],
            ..Self::default()
        }
    }

    /// Number of actions taken, `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, action: usize, step: &Step) {
        self.actions.push(action);
        self.rewards.push(step.reward);
        self.observations.push(step.observation);
        self.terminated = step.terminated;
    }

    /// Undiscounted return `Σ r_t`.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.observations.len() != self.actions.len() + 1
            || self.rewards.len() != self.actions.len()
        {
            return Err(EnvError::InvalidConfig(format!(
                "episode lengths disagree: {} observations, {} actions, {} rewards",
                self.observations.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(EnvError::InvalidConfig("non-finite reward".into()));
        }
        Ok(())
    }
}

/// Runs one episode, choosing actions with `policy(observation, step_index)`.
pub fn run_episode<E, P>(env: &mut E, seed: u64, mut policy: P) -> Result<Episode, EnvError>
where
    E: Environment + ?Sized,
    P: FnMut(usize, usize) -> usize,
{
    let obs = env.reset(seed);
    let mut episode = Episode::new(obs);
    loop {
        let t = episode.len();
        let action = policy(*episode.observations.last().unwrap(), t);
        let step = env.step(action)?;
        episode.push(action, &step);
        if step.done {
            break;
        }
    }
    let max = env.max_episode_reward();
    env.finish_episode(episode.total_reward(), max);
    Ok(episode)
}

/// Finite MDP with a sparse (CSR) transition kernel.
///
/// Terminal states absorb with zero reward; stepping them is rejected by
/// [`TabularEnv`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    offsets: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
    start: usize,
}

impl TabularMdp {
    /// Builds an MDP from per-(s, a) successor lists, row index `s * n_actions + a`.
    ///
    /// Rows of terminal states are replaced by a zero-reward self loop.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        terminal: Vec<bool>,
        reward: Vec<f64>,
        transitions: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self, EnvError> {
        let rows = n_states * n_actions;
        if transitions.len() != rows || reward.len() != rows || terminal.len() != n_states {
            return Err(EnvError::InvalidMdp("table sizes disagree".into()));
        }
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut next = Vec::new();
        let mut prob = Vec::new();
        let mut reward = reward;
        offsets.push(0);
        for (row, succ) in transitions.into_iter().enumerate() {
            let s = row / n_actions;
            if terminal[s] {
                next.push(s as u32);
                prob.push(1.0);
                reward[row] = 0.0;
            } else {
                for (ns, p) in succ {
                    if p > 0.0 {
                        next.push(ns as u32);
                        prob.push(p);
                    }
                }
            }
            offsets.push(next.len());
        }
        Self::from_parts(n_states, n_actions, gamma, 0, terminal, reward, offsets, next, prob)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        start: usize,
        terminal: Vec<bool>,
        reward: Vec<f64>,
        offsets: Vec<usize>,
        next: Vec<u32>,
        prob: Vec<f64>,
    ) -> Result<Self, EnvError> {
        if n_states == 0 || n_actions == 0 {
            return Err(EnvError::InvalidMdp("need at least one state and action".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(EnvError::InvalidMdp(format!("discount {gamma} outside [0, 1]")));
        }
        if start >= n_states {
            return Err(EnvError::InvalidMdp("start state out of range".into()));
        }
        let mdp = Self {
            n_states,
            n_actions,
            offsets,
            next,
            prob,
            reward,
            terminal,
            gamma,
            start,
        };
        for row in 0..n_states * n_actions {
            let lo = mdp.offsets[row];
            let hi = mdp.offsets[row + 1];
            if lo == hi {
                return Err(EnvError::InvalidMdp(format!("row {row} has no successors")));
            }
            let total: f64 = mdp.prob[lo..hi].iter().sum();
            if (total - 1.0).abs() > 1e-12 || mdp.prob[lo..hi].iter().any(|p| *p < 0.0) {
                return Err(EnvError::InvalidMdp(format!(
                    "row {row} is not a distribution (sums to {total})"
                )));
            }
            if mdp.next[lo..hi].iter().any(|&s| s as usize >= n_states) {
                return Err(EnvError::InvalidMdp(format!("row {row} has an out-of-range successor")));
            }
            if !mdp.reward[row].is_finite() {
                return Err(EnvError::InvalidMdp(format!("row {row} has a non-finite reward")));
            }
        }
        if gamma >= 1.0 && !mdp.is_acyclic() {
            return Err(EnvError::InvalidMdp(
                "undiscounted MDPs must be acyclic outside terminal states".into(),
            ));
        }
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Successors of `(s, a)` with their probabilities.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = s * self.n_actions + a;
        let (lo, hi) = (self.offsets[row], self.offsets[row + 1]);
        self.next[lo..hi]
            .iter()
            .zip(&self.prob[lo..hi])
            .map(|(&n, &p)| (n as usize, p))
    }

    /// Full transition row of `(s, a)` as a dense vector over next states.
    pub fn transition_row(&self, s: usize, a: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states];
        for (n, p) in self.successors(s, a) {
            row[n] += p;
        }
        row
    }

    /// `E_{s'|s,a} V(s')`.
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.successors(s, a).map(|(n, p)| p * v[n]).sum()
    }

    /// `Q(s, a) = r(s, a) + γ E_{s'|s,a} V(s')` for every action.
    pub fn q_row(&self, s: usize, v: &[f64]) -> Vec<f64> {
        (0..self.n_actions)
            .map(|a| self.reward(s, a) + self.gamma * self.expected_next(s, a, v))
            .collect()
    }

    pub fn is_deterministic(&self) -> bool {
        (0..self.n_states * self.n_actions).all(|row| self.offsets[row + 1] - self.offsets[row] == 1)
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// No cycles among non-terminal states (Kahn's algorithm).
    pub fn is_acyclic(&self) -> bool {
        let n = self.n_states;
        let mut indegree = vec![0usize; n];
        for s in (0..n).filter(|&s| !self.terminal[s]) {
            for a in 0..self.n_actions {
                for (ns, _) in self.successors(s, a) {
                    if !self.terminal[ns] {
                        indegree[ns] += 1;
                    }
                }
            }
        }
        let mut queue: Vec<usize> = (0..n)
            .filter(|&s| !self.terminal[s] && indegree[s] == 0)
            .collect();
        let mut seen = 0;
        while let Some(s) = queue.pop() {
            seen += 1;
            for a in 0..self.n_actions {
                for (ns, _) in self.successors(s, a) {
                    if !self.terminal[ns] {
                        indegree[ns] -= 1;
                        if indegree[ns] == 0 {
                            queue.push(ns);
                        }
                    }
                }
            }
        }
        seen == self.terminal.iter().filter(|t| !**t).count()
    }
}

/// Random MDP with rewards uniform on `[−1, 1]`.
///
/// Each transition row mixes a one-hot successor with a flat-Dirichlet draw:
/// `(1 − stochasticity)·e_j + stochasticity·Dir(1, …, 1)`. No state is
/// terminal, so `gamma` must be below one.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    stochasticity: f64,
    gamma: f64,
    seed: u64,
) -> Result<TabularMdp, EnvError> {
    if !(0.0..=1.0).contains(&stochasticity) {
        return Err(EnvError::InvalidConfig(format!(
            "stochasticity {stochasticity} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = n_states * n_actions;
    let reward: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut transitions = Vec::with_capacity(rows);
    for _ in 0..rows {
        let j = rng.random_range(0..n_states);
        if stochasticity == 0.0 {
            transitions.push(vec![(j, 1.0)]);
            continue;
        }
        let draws: Vec<f64> = (0..n_states).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let mut row: Vec<f64> = draws.iter().map(|d| stochasticity * d / total).collect();
        row[j] += 1.0 - stochasticity;
        let s: f64 = row.iter().sum();
        transitions.push(row.into_iter().map(|p| p / s).enumerate().collect());
    }
    TabularMdp::new(
        n_states,
        n_actions,
        gamma,
        vec![false; n_states],
        reward,
        transitions,
    )
}

/// Episodic wrapper around a [`TabularMdp`], starting at its start state.
///
/// Stochastic successors are drawn from a stream seeded at each reset.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: Arc<TabularMdp>,
    rng: ChaCha8Rng,
    state: usize,
    steps: usize,
    max_steps: Option<usize>,
    active: bool,
}

impl TabularEnv {
    pub fn new(mdp: Arc<TabularMdp>) -> Self {
        let state = mdp.start();
        Self {
            mdp,
            rng: ChaCha8Rng::seed_from_u64(0),
            state,
            steps: 0,
            max_steps: None,
            active: false,
        }
    }

    /// Truncates episodes after `max_steps` actions (needed for cyclic MDPs).
    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = Some(max_steps);
        self
    }

    pub fn mdp(&self) -> &Arc<TabularMdp> {
        &self.mdp
    }
}

impl Environment for TabularEnv {
    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn n_observations(&self) -> usize {
        self.mdp.n_states()
    }

    fn reset(&mut self, seed: u64) -> usize {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.mdp.start();
        self.steps = 0;
        self.active = !self.mdp.is_terminal(self.state);
        self.state
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if !self.active {
            return Err(EnvError::EpisodeDone);
        }
        let n_actions = self.mdp.n_actions();
        if action >= n_actions {
            return Err(EnvError::ActionOutOfRange { action, n_actions });
        }
        let s = self.state;
        let reward = self.mdp.reward(s, action);
        let mut next = None;
        let mut u: f64 = self.rng.random();
        let mut last = s;
        for (ns, p) in self.mdp.successors(s, action) {
            last = ns;
            if u < p {
                next = Some(ns);
                break;
            }
            u -= p;
        }
        self.state = next.unwrap_or(last);
        self.steps += 1;
        let terminated = self.mdp.is_terminal(self.state);
        let truncated = self.max_steps.is_some_and(|m| self.steps >= m);
        let done = terminated || truncated;
        self.active = !done;
        Ok(Step {
            observation: self.state,
            reward,
            done,
            terminated,
        })
    }
}

/// Which environment family a configuration describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    SyntheticTree,
    Tape(TaskKind),
}

impl std::str::FromStr for TaskId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "synthetic_tree" | "SyntheticTree" | "tree" => Ok(TaskId::SyntheticTree),
            other => other.parse().map(TaskId::Tape),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskId::SyntheticTree => f.write_str("synthetic_tree"),
            TaskId::Tape(k) => write!(f, "{k}"),
        }
    }
}

/// Environment configuration: task plus size parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub task: TaskId,
    pub depth: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let sizes = [self.depth, self.min_length, self.max_length, self.vocab];
        if sizes.contains(&0) {
            return Err(EnvError::InvalidConfig("all sizes must be >= 1".into()));
        }
        if self.min_length > self.max_length {
            return Err(EnvError::InvalidConfig(
                "min_length exceeds max_length".into(),
            ));
        }
        Ok(())
    }
}
