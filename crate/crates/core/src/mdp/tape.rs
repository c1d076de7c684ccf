//! Algorithmic tape tasks.
//!
//! The agent reads one cell of a `rows × width` grid at a time. Each action
//! is a (move, write) pair flattened to `move * (base + 1) + w`, where `w = 0`
//! writes nothing and `w = k + 1` emits symbol `k`. A correct emission earns
//! +1; a wrong one earns −0.5 and ends the episode. Emitting the full target
//! ends the episode successfully.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvConfig, EnvError, Environment, Step};

pub const CORRECT_REWARD: f64 = 1.0;
pub const WRONG_REWARD: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    DuplicatedInput,
    RepeatCopy,
    Reverse,
    ReversedAddition,
    ReversedAddition3,
    HardReversedAddition,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Copy,
        TaskKind::DuplicatedInput,
        TaskKind::RepeatCopy,
        TaskKind::Reverse,
        TaskKind::ReversedAddition,
        TaskKind::ReversedAddition3,
        TaskKind::HardReversedAddition,
    ];

    pub fn rows(self) -> usize {
        match self {
            TaskKind::ReversedAddition | TaskKind::HardReversedAddition => 2,
            TaskKind::ReversedAddition3 => 3,
            _ => 1,
        }
    }

    pub fn moves(self) -> &'static [Move] {
        if self.rows() > 1 {
            &[Move::Left, Move::Right, Move::Up, Move::Down]
        } else {
            &[Move::Left, Move::Right]
        }
    }

    pub fn uses_curriculum(self) -> bool {
        self != TaskKind::HardReversedAddition
    }

    fn is_addition(self) -> bool {
        self.rows() > 1
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::DuplicatedInput => "duplicated_input",
            TaskKind::RepeatCopy => "repeat_copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ReversedAddition => "reversed_addition",
            TaskKind::ReversedAddition3 => "reversed_addition3",
            TaskKind::HardReversedAddition => "hard_reversed_addition",
        })
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "copy" => TaskKind::Copy,
            "duplicatedinput" => TaskKind::DuplicatedInput,
            "repeatcopy" => TaskKind::RepeatCopy,
            "reverse" => TaskKind::Reverse,
            "reversedaddition" => TaskKind::ReversedAddition,
            "reversedaddition3" => TaskKind::ReversedAddition3,
            "hardreversedaddition" => TaskKind::HardReversedAddition,
            _ => return Err(EnvError::UnknownTask(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Left,
    Right,
    Up,
    Down,
}

/// One task input together with its target output.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeInstance {
    kind: TaskKind,
    base: usize,
    grid: Vec<Vec<usize>>,
    target: Vec<usize>,
}

impl TapeInstance {
    /// Builds an instance from `length` input symbols per row.
    ///
    /// For `DuplicatedInput` each symbol appears twice on the tape.
    pub fn new(kind: TaskKind, base: usize, rows: Vec<Vec<usize>>) -> Result<Self, EnvError> {
        if base < 2 && kind.is_addition() {
            return Err(EnvError::InvalidConfig("addition needs base >= 2".into()));
        }
        if rows.len() != kind.rows() || rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(EnvError::InvalidConfig(format!(
                "{kind} needs {} equal-length rows",
                kind.rows()
            )));
        }
        if rows[0].is_empty() || rows.iter().flatten().any(|&s| s >= base) {
            return Err(EnvError::InvalidConfig("symbols must be < base and rows non-empty".into()));
        }
        let x = &rows[0];
        let (grid, target) = match kind {
            TaskKind::Copy => (rows.clone(), x.clone()),
            TaskKind::DuplicatedInput => {
                let tape = x.iter().flat_map(|&s| [s, s]).collect();
                (vec![tape], x.clone())
            }
            TaskKind::RepeatCopy => {
                let mut t = x.clone();
                t.extend(x.iter().rev());
                t.extend(x.iter());
                (rows.clone(), t)
            }
            TaskKind::Reverse => (rows.clone(), x.iter().rev().copied().collect()),
            TaskKind::ReversedAddition
            | TaskKind::ReversedAddition3
            | TaskKind::HardReversedAddition => {
                let mut t = Vec::with_capacity(x.len() + 1);
                let mut carry = 0;
                for c in 0..x.len() {
                    let s = rows.iter().map(|r| r[c]).sum::<usize>() + carry;
                    t.push(s % base);
                    carry = s / base;
                }
                while carry > 0 {
                    t.push(carry % base);
                    carry /= base;
                }
                (rows.clone(), t)
            }
        };
        Ok(Self {
            kind,
            base,
            grid,
            target,
        })
    }

    pub fn generate<R: Rng + ?Sized>(
        kind: TaskKind,
        base: usize,
        length: usize,
        rng: &mut R,
    ) -> Result<Self, EnvError> {
        let rows = (0..kind.rows())
            .map(|_| (0..length).map(|_| rng.random_range(0..base)).collect())
            .collect();
        Self::new(kind, base, rows)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn grid(&self) -> &[Vec<usize>] {
        &self.grid
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn width(&self) -> usize {
        self.grid[0].len()
    }

    pub fn cells(&self) -> usize {
        self.grid.len() * self.width()
    }

    /// `max(2·cells + 4, cells + |target| + 4)`.
    pub fn time_limit(&self) -> usize {
        (2 * self.cells() + 4).max(self.cells() + self.target.len() + 4)
    }

    fn action(&self, mv: Move, write: Option<usize>) -> usize {
        let m = self.kind.moves().iter().position(|&x| x == mv).unwrap();
        m * (self.base + 1) + write.map_or(0, |s| s + 1)
    }

    /// Action sequence of a controller that reads the tape and emits the target.
    pub fn expert_plan(&self) -> Vec<usize> {
        let x = &self.grid[0];
        let n = self.width();
        let t = &self.target;
        let mut plan = Vec::new();
        match self.kind {
            TaskKind::Copy => {
                plan.extend(x.iter().map(|&s| self.action(Move::Right, Some(s))));
            }
            TaskKind::DuplicatedInput => {
                for (i, &s) in x.iter().enumerate() {
                    let w = (i % 2 == 0).then_some(s);
                    plan.push(self.action(Move::Right, w));
                }
            }
            TaskKind::Reverse => {
                plan.extend((1..n).map(|_| self.action(Move::Right, None)));
                plan.extend(x.iter().rev().map(|&s| self.action(Move::Left, Some(s))));
            }
            TaskKind::RepeatCopy => {
                plan.extend(x.iter().map(|&s| self.action(Move::Right, Some(s))));
                plan.push(self.action(Move::Left, None));
                plan.extend(x.iter().rev().map(|&s| self.action(Move::Left, Some(s))));
                plan.push(self.action(Move::Right, None));
                plan.extend(x.iter().map(|&s| self.action(Move::Right, Some(s))));
            }
            _ => {
                let rows = self.grid.len();
                for (c, &digit) in t.iter().enumerate().take(n) {
                    let vertical = if c % 2 == 0 { Move::Down } else { Move::Up };
                    plan.extend((1..rows).map(|_| self.action(vertical, None)));
                    plan.push(self.action(Move::Right, Some(digit)));
                }
                plan.extend(t[n..].iter().map(|&d| self.action(Move::Right, Some(d))));
            }
        }
        plan
    }
}

/// Length schedule for a task family.
///
/// Lengths are drawn uniformly from `[min_length, max_length]`. When the
/// mean normalized reward over the last `window` episodes reaches
/// `threshold`, `max_length` grows by one up to `cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    min_length: usize,
    max_length: usize,
    cap: usize,
    enabled: bool,
    window: usize,
    threshold: f64,
    recent: VecDeque<f64>,
}

impl Curriculum {
    pub const WINDOW: usize = 100;
    pub const THRESHOLD: f64 = 0.9;

    pub fn new(min_length: usize, cap: usize) -> Self {
        Self {
            min_length,
            max_length: min_length.min(cap),
            cap,
            enabled: true,
            window: Self::WINDOW,
            threshold: Self::THRESHOLD,
            recent: VecDeque::new(),
        }
    }

    /// A static length range with no schedule.
    pub fn fixed(min_length: usize, max_length: usize) -> Self {
        Self {
            min_length,
            max_length,
            cap: max_length,
            enabled: false,
            window: Self::WINDOW,
            threshold: Self::THRESHOLD,
            recent: VecDeque::new(),
        }
    }

    pub fn range(&self) -> (usize, usize) {
        (self.min_length, self.max_length)
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Applies one schedule decision for the given success rate.
    pub fn update(&mut self, success_rate: f64) -> (usize, usize) {
        if self.enabled && success_rate >= self.threshold && self.max_length < self.cap {
            self.max_length += 1;
            self.recent.clear();
        }
        self.range()
    }

    /// Records one episode's reward divided by its maximum possible reward.
    pub fn record(&mut self, normalized_reward: f64) {
        if !self.enabled {
            return;
        }
        self.recent.push_back(normalized_reward);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        if self.recent.len() == self.window {
            let rate = self.recent.iter().sum::<f64>() / self.window as f64;
            self.update(rate);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min_length..=self.max_length)
    }
}

/// Episodic environment over freshly sampled [`TapeInstance`]s.
#[derive(Debug, Clone)]
pub struct TapeEnv {
    kind: TaskKind,
    base: usize,
    curriculum: Curriculum,
    instance: Option<TapeInstance>,
    row: isize,
    col: isize,
    emitted: usize,
    steps: usize,
    done: bool,
}

impl TapeEnv {
    pub fn new(kind: TaskKind, base: usize, curriculum: Curriculum) -> Self {
        Self {
            kind,
            base,
            curriculum,
            instance: None,
            row: 0,
            col: 0,
            emitted: 0,
            steps: 0,
            done: true,
        }
    }

    /// Curriculum from `min_length` up to `max_length`; the hard addition
    /// variant always uses `max_length`.
    pub fn from_config(config: &EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let kind = match config.task {
            super::TaskId::Tape(kind) => kind,
            other => {
                return Err(EnvError::InvalidConfig(format!("{other} is not a tape task")))
            }
        };
        let curriculum = if kind.uses_curriculum() {
            Curriculum::new(config.min_length, config.max_length)
        } else {
            Curriculum::fixed(config.max_length, config.max_length)
        };
        Ok(Self::new(kind, config.vocab, curriculum))
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn curriculum(&self) -> &Curriculum {
        &self.curriculum
    }

    pub fn curriculum_mut(&mut self) -> &mut Curriculum {
        &mut self.curriculum
    }

    pub fn instance(&self) -> Option<&TapeInstance> {
        self.instance.as_ref()
    }

    pub fn boundary_token(&self) -> usize {
        self.base
    }

    /// Starts an episode on a given instance.
    pub fn reset_with(&mut self, instance: TapeInstance) -> usize {
        self.instance = Some(instance);
        self.row = 0;
        self.col = 0;
        self.emitted = 0;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn observe(&self) -> usize {
        let inst = self.instance.as_ref().expect("reset before observing");
        if self.col < 0 || self.col as usize >= inst.width() {
            self.base
        } else {
            inst.grid[self.row as usize][self.col as usize]
        }
    }
}

impl Environment for TapeEnv {
    fn n_actions(&self) -> usize {
        self.kind.moves().len() * (self.base + 1)
    }

    fn n_observations(&self) -> usize {
        self.base + 1
    }

    fn reset(&mut self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let length = self.curriculum.sample(&mut rng);
        let instance = TapeInstance::generate(self.kind, self.base, length, &mut rng)
            .expect("validated configuration");
        self.reset_with(instance)
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if self.instance.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let n_actions = self.n_actions();
        if action >= n_actions {
            return Err(EnvError::ActionOutOfRange { action, n_actions });
        }
        let inst = self.instance.as_ref().unwrap();
        let mv = self.kind.moves()[action / (self.base + 1)];
        let write = action % (self.base + 1);

        let mut reward = 0.0;
        let mut terminated = false;
        if write > 0 {
            if write - 1 == inst.target[self.emitted] {
                reward = CORRECT_REWARD;
                self.emitted += 1;
                terminated = self.emitted == inst.target.len();
            } else {
                reward = WRONG_REWARD;
                terminated = true;
            }
        }
        let width = inst.width() as isize;
        let rows = inst.grid.len() as isize;
        match mv {
            Move::Left => self.col = (self.col - 1).max(-1),
            Move::Right => self.col = (self.col + 1).min(width),
            Move::Up => self.row = (self.row - 1).max(0),
            Move::Down => self.row = (self.row + 1).min(rows - 1),
        }
        self.steps += 1;
        let truncated = !terminated && self.steps >= inst.time_limit();
        self.done = terminated || truncated;
        Ok(Step {
            observation: self.observe(),
            reward,
            done: self.done,
            terminated,
        })
    }

    fn max_episode_reward(&self) -> Option<f64> {
        self.instance.as_ref().map(|i| i.target.len() as f64)
    }

    fn finish_episode(&mut self, total_reward: f64, max_reward: Option<f64>) {
        if let Some(max) = max_reward.filter(|m| *m > 0.0) {
            self.curriculum.record(total_reward / max);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::run_episode;

    fn run_plan(env: &mut TapeEnv, inst: TapeInstance, plan: &[usize]) -> (f64, bool) {
        env.reset_with(inst);
        let mut total = 0.0;
        for &a in plan {
            let s = env.step(a).unwrap();
            total += s.reward;
            if s.done {
                return (total, s.terminated);
            }
        }
        (total, false)
    }

    /// Exhaustive search over all action sequences up to `horizon`.
    fn best_return(inst: &TapeInstance, n_actions: usize, horizon: usize) -> f64 {
        fn go(env: &TapeEnv, n_actions: usize, left: usize) -> f64 {
            if left == 0 {
                return 0.0;
            }
            let mut best = 0.0f64;
            for a in 0..n_actions {
                let mut e = env.clone();
                let s = e.step(a).unwrap();
                let v = s.reward + if s.done { 0.0 } else { go(&e, n_actions, left - 1) };
                best = best.max(v);
            }
            best
        }
        let mut env = TapeEnv::new(inst.kind(), inst.base, Curriculum::fixed(1, 1));
        env.reset_with(inst.clone());
        go(&env, n_actions, horizon)
    }

    #[test]
    fn copy_ab_optimum_is_two() {
        let inst = TapeInstance::new(TaskKind::Copy, 2, vec![vec![0, 1]]).unwrap();
        let env = TapeEnv::new(TaskKind::Copy, 2, Curriculum::fixed(2, 2));
        assert!((best_return(&inst, env.n_actions(), 4) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn copy_rewards() {
        let mut env = TapeEnv::new(TaskKind::Copy, 2, Curriculum::fixed(2, 2));
        let inst = TapeInstance::new(TaskKind::Copy, 2, vec![vec![0, 1]]).unwrap();
        env.reset_with(inst.clone());
        // write symbol 0 moving right: action = 1 * 3 + 1
        let s = env.step(4).unwrap();
        assert_eq!(s.reward, 1.0);
        assert_eq!(s.observation, 1);
        let s = env.step(4).unwrap();
        assert_eq!(s.reward, -0.5);
        assert!(s.done && s.terminated);
        assert_eq!(env.step(0), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn reverse_and_addition_targets() {
        let r = TapeInstance::new(TaskKind::Reverse, 2, vec![vec![0, 1]]).unwrap();
        assert_eq!(r.target(), &[1, 0]);
        let a = TapeInstance::new(TaskKind::ReversedAddition, 3, vec![vec![1], vec![2]]).unwrap();
        assert_eq!(a.target(), &[0, 1]);
        let a3 =
            TapeInstance::new(TaskKind::ReversedAddition3, 3, vec![vec![2, 2], vec![2, 2], vec![2, 2]])
                .unwrap();
        // 8 + 8 + 8 = 24 = 220 in base 3, little endian 0,2,2
        assert_eq!(a3.target(), &[0, 2, 2]);
        let d = TapeInstance::new(TaskKind::DuplicatedInput, 3, vec![vec![2, 0]]).unwrap();
        assert_eq!(d.grid()[0], vec![2, 2, 0, 0]);
        assert_eq!(d.target(), &[2, 0]);
        let rc = TapeInstance::new(TaskKind::RepeatCopy, 3, vec![vec![1, 2]]).unwrap();
        assert_eq!(rc.target(), &[1, 2, 2, 1, 1, 2]);
    }

    #[test]
    fn expert_plans_solve_every_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in TaskKind::ALL {
            let base = if kind.rows() > 1 { 3 } else { 5 };
            for length in 1..=8 {
                let inst = TapeInstance::generate(kind, base, length, &mut rng).unwrap();
                let want = inst.target().len() as f64;
                assert!(inst.expert_plan().len() <= inst.time_limit(), "{kind}");
                let mut env = TapeEnv::new(kind, base, Curriculum::fixed(length, length));
                let plan = inst.expert_plan();
                let (total, terminated) = run_plan(&mut env, inst, &plan);
                assert_eq!(total, want, "{kind} length {length}");
                assert!(terminated);
            }
        }
    }

    #[test]
    fn time_limit_truncates() {
        let mut env = TapeEnv::new(TaskKind::Copy, 3, Curriculum::fixed(3, 3));
        let ep = run_episode(&mut env, 1, |_, _| 0).unwrap();
        assert_eq!(ep.len(), 2 * 3 + 4);
        assert!(!ep.terminated);
        assert_eq!(ep.total_reward(), 0.0);
        // head parks on the boundary token
        assert_eq!(*ep.observations.last().unwrap(), 3);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut env = TapeEnv::new(TaskKind::Copy, 5, Curriculum::fixed(2, 9));
        let o1 = env.reset(42);
        let t1 = env.instance().unwrap().clone();
        let o2 = env.reset(42);
        assert_eq!(o1, o2);
        assert_eq!(&t1, env.instance().unwrap());
    }

    #[test]
    fn positive_reward_bounded_by_target() {
        let mut env = TapeEnv::new(TaskKind::Reverse, 3, Curriculum::fixed(1, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..200 {
            let ep = run_episode(&mut env, seed, |_, _| rng.random_range(0..8)).unwrap();
            let positive: f64 = ep.rewards.iter().filter(|r| **r > 0.0).sum();
            assert!(positive <= env.max_episode_reward().unwrap());
        }
    }

    #[test]
    fn curriculum_schedule() {
        let mut c = Curriculum::new(2, 10);
        for _ in 0..100 {
            c.record(1.0);
        }
        assert_eq!(c.range(), (2, 3));
        let mut c = Curriculum::new(2, 10);
        for _ in 0..500 {
            c.record(0.0);
        }
        assert_eq!(c.range(), (2, 2));
        assert_eq!(c.update(0.0), (2, 2));
        assert_eq!(c.update(0.95), (2, 3));
        let mut capped = Curriculum::new(3, 3);
        assert_eq!(capped.update(1.0), (3, 3));
    }

    #[test]
    fn hard_addition_ignores_success() {
        let cfg = EnvConfig {
            task: crate::mdp::TaskId::Tape(TaskKind::HardReversedAddition),
            depth: 1,
            min_length: 2,
            max_length: 7,
            vocab: 3,
            seed: 0,
        };
        let mut env = TapeEnv::from_config(&cfg).unwrap();
        for seed in 0..150 {
            env.reset(seed);
            assert_eq!(env.instance().unwrap().width(), 7);
            let max = env.max_episode_reward();
            env.finish_episode(10.0, max);
        }
        assert_eq!(env.curriculum().range(), (7, 7));
    }

    #[test]
    fn unknown_task_rejected() {
        assert_eq!(
            "Sort".parse::<TaskKind>(),
            Err(EnvError::UnknownTask("Sort".into()))
        );
        for k in TaskKind::ALL {
            assert_eq!(k.to_string().parse::<TaskKind>().unwrap(), k);
        }
    }
}
