//! Experiment configuration files.
//!
//! ```toml
//! task = "synthetic_tree"      # or copy, duplicated_input, repeat_copy, reverse,
//!                              # reversed_addition, reversed_addition3, hard_reversed_addition
//! algorithm = "pcl"            # pcl, unified_pcl, a2c, tabular_q_soft, tabular_q_hard
//! seeds = [0, 1, 2]           # or a string such as "0..10" or "1,4,7"
//! experts = false              # pin oracle episodes in the replay buffer
//! expert_count = 10
//! out = "runs/tree"            # optional
//!
//! [env]
//! depth = 20                   # tree depth
//! tree_seed = 0                # pin one tree for every run; by default run
//!                              # seed s trains on the tree drawn from seed s
//! min_length = 2               # tape tasks: curriculum start
//! max_length = 10              # tape tasks: curriculum cap
//! vocab = 5
//!
//! [model]
//! kind = "tabular"             # tabular, linear or lstm
//! hidden = 32
//!
//! [hyperparams]
//! tau = 0.5
//! gamma = 1.0
//! rollout = 3
//! batch_size = 10
//! lr_policy = 0.01
//! critic_weight = 0.1
//! buffer_capacity = 10000
//! alpha = 1.0
//! optimizer = "sgd"
//! iterations = 50000
//! eval_period = 100
//! replay_ratio = 1.0
//! tail_windows = true
//! clip_norm = 10.0
//! q_updates = 200000           # tabular Q only
//! q_omega = 0.6
//! q_backup = "sampled"         # or "expected"
//!
//! [grid]                       # sweep only
//! preset = "tree"              # or "algorithmic"; lists below override it
//! lr_policy = [0.01, 0.05]
//! cap = 1000
//! ```
//!
//! Every error names the offending line.

use std::fmt;
use std::path::PathBuf;

use pcl_core::mdp::{EnvConfig, TaskId};
use pcl_core::model::OptimizerKind;
use pcl_core::train::{Algorithm, BackupMode, Hyperparams};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelArch {
    Tabular,
    Linear,
    Lstm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// For the tree task `env.seed` is the pinned tree seed; it is ignored
    /// when `tree_per_run` is set.
    pub env: EnvConfig,
    pub tree_per_run: bool,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub experts: bool,
    pub expert_count: usize,
    pub out: Option<PathBuf>,
    pub arch: ModelArch,
    pub hidden: usize,
    pub hp: Hyperparams,
    pub q_updates: usize,
    pub q_omega: f64,
    pub q_backup: BackupMode,
    pub grid: GridSpec,
}

/// Value lists for a sweep; empty lists keep the base configuration's value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridSpec {
    pub lr_policy: Vec<f64>,
    pub critic_weight: Vec<f64>,
    pub tau: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rollout: Vec<usize>,
    pub cap: usize,
}

pub const DEFAULT_GRID_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tree,
    Algorithmic,
}

const TAUS_TREE: [f64; 8] = [0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0];
const TAUS_ALGORITHMIC: [f64; 6] = [0.005, 0.01, 0.025, 0.05, 0.1, 0.15];

impl GridSpec {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tree => Self {
                lr_policy: vec![0.01, 0.05, 0.1],
                critic_weight: vec![0.1, 0.5, 1.0],
                tau: TAUS_TREE.to_vec(),
                cap: DEFAULT_GRID_CAP,
                ..Self::default()
            },
            Preset::Algorithmic => Self {
                gamma: vec![0.9, 1.0],
                alpha: vec![0.1, 0.5],
                critic_weight: vec![0.1, 1.0],
                tau: TAUS_ALGORITHMIC.to_vec(),
                cap: DEFAULT_GRID_CAP,
                ..Self::default()
            },
        }
    }

    pub fn cardinality(&self) -> usize {
        [
            self.lr_policy.len(),
            self.critic_weight.len(),
            self.tau.len(),
            self.gamma.len(),
            self.alpha.len(),
            self.rollout.len(),
        ]
        .iter()
        .map(|&n| n.max(1))
        .product()
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawSeeds {
    List(Vec<u64>),
    Spec(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: String,
    algorithm: String,
    #[serde(default)]
    seeds: Option<RawSeeds>,
    #[serde(default)]
    experts: bool,
    #[serde(default)]
    expert_count: Option<usize>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    env: RawEnv,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    hyperparams: RawHyperparams,
    #[serde(default)]
    grid: Option<RawGrid>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnv {
    depth: Option<usize>,
    tree_seed: Option<u64>,
    min_length: Option<usize>,
    max_length: Option<usize>,
    vocab: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<String>,
    hidden: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyperparams {
    tau: Option<f64>,
    gamma: Option<f64>,
    rollout: Option<usize>,
    batch_size: Option<usize>,
    lr_policy: Option<f64>,
    critic_weight: Option<f64>,
    buffer_capacity: Option<usize>,
    alpha: Option<f64>,
    optimizer: Option<String>,
    iterations: Option<usize>,
    eval_period: Option<usize>,
    replay_ratio: Option<f64>,
    tail_windows: Option<bool>,
    clip_norm: Option<f64>,
    q_updates: Option<usize>,
    q_omega: Option<f64>,
    q_backup: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    preset: Option<String>,
    lr_policy: Option<Vec<f64>>,
    critic_weight: Option<Vec<f64>>,
    tau: Option<Vec<f64>>,
    gamma: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    rollout: Option<Vec<usize>>,
    cap: Option<usize>,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = …` inside `[section]` (top level when `section` is empty);
/// falls back to the section header, then to line 1.
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header.unwrap_or(1)
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError {
            line: locate(self.text, section, key),
            msg: msg.into(),
        }
    }

    fn positive(&self, section: &str, key: &str, v: Option<f64>, strict: bool) -> Result<(), ConfigError> {
        if let Some(x) = v {
            let ok = x.is_finite() && if strict { x > 0.0 } else { x >= 0.0 };
            if !ok {
                let rel = if strict { "> 0" } else { ">= 0" };
                return Err(self.err(section, key, format!("`{key}` must be {rel}, got {x}")));
            }
        }
        Ok(())
    }

    fn nonzero(&self, section: &str, key: &str, v: Option<usize>) -> Result<(), ConfigError> {
        if v == Some(0) {
            return Err(self.err(section, key, format!("`{key}` must be >= 1")));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError {
        line: e.span().map_or(1, |s| line_of_offset(text, s.start)),
        msg: e.message().trim().to_string(),
    })?;
    let cx = Ctx { text };

    let task: TaskId = raw
        .task
        .parse()
        .map_err(|e: pcl_core::mdp::EnvError| cx.err("", "task", e.to_string()))?;
    let algorithm: Algorithm = raw.algorithm.parse().map_err(|e: String| cx.err("", "algorithm", e))?;
    let is_tree = task == TaskId::SyntheticTree;
    if !is_tree && matches!(algorithm, Algorithm::TabularQSoft | Algorithm::TabularQHard) {
        return Err(cx.err("", "algorithm", format!("{algorithm} needs a tabular task (synthetic_tree), got {task}")));
    }
    let seeds = match raw.seeds {
        None => vec![0],
        Some(RawSeeds::List(v)) => v,
        Some(RawSeeds::Spec(s)) => parse_seeds(&s).map_err(|e| cx.err("", "seeds", e))?,
    };
    if seeds.is_empty() {
        return Err(cx.err("", "seeds", "`seeds` must not be empty"));
    }
    if raw.experts && algorithm == Algorithm::A2c {
        return Err(cx.err("", "experts", "expert seeding needs a replay buffer; a2c has none"));
    }

    let e = &raw.env;
    for (k, v) in [("depth", e.depth), ("min_length", e.min_length), ("max_length", e.max_length), ("vocab", e.vocab)] {
        cx.nonzero("env", k, v)?;
    }
    let max_length = e.max_length.unwrap_or(10);
    let env = EnvConfig {
        task,
        depth: e.depth.unwrap_or(20),
        min_length: e.min_length.unwrap_or(2.min(max_length)),
        max_length,
        vocab: e.vocab.unwrap_or(5),
        seed: e.tree_seed.unwrap_or(0),
    };
    if is_tree && env.depth > 24 {
        return Err(cx.err("env", "depth", format!("tree depth must be at most 24, got {}", env.depth)));
    }
    if env.min_length > env.max_length {
        return Err(cx.err("env", "min_length", "`min_length` exceeds `max_length`"));
    }

    let arch = match raw.model.kind.as_deref() {
        None if is_tree => ModelArch::Tabular,
        None => ModelArch::Lstm,
        Some("tabular") => ModelArch::Tabular,
        Some("linear") => ModelArch::Linear,
        Some("lstm") => ModelArch::Lstm,
        Some(other) => {
            return Err(cx.err("model", "kind", format!("unknown model kind `{other}` (expected tabular, linear or lstm)")))
        }
    };
    if matches!(algorithm, Algorithm::TabularQSoft | Algorithm::TabularQHard) && arch != ModelArch::Tabular {
        return Err(cx.err("model", "kind", "tabular Q-learning needs model kind `tabular`"));
    }
    cx.nonzero("model", "hidden", raw.model.hidden)?;

    let h = &raw.hyperparams;
    const S: &str = "hyperparams";
    cx.positive(S, "tau", h.tau, false)?;
    cx.positive(S, "lr_policy", h.lr_policy, false)?;
    cx.positive(S, "critic_weight", h.critic_weight, false)?;
    cx.positive(S, "alpha", h.alpha, false)?;
    cx.positive(S, "replay_ratio", h.replay_ratio, false)?;
    cx.positive(S, "clip_norm", h.clip_norm, true)?;
    for (k, v) in [
        ("rollout", h.rollout),
        ("batch_size", h.batch_size),
        ("iterations", h.iterations),
        ("eval_period", h.eval_period),
        ("q_updates", h.q_updates),
    ] {
        cx.nonzero(S, k, v)?;
    }
    if let Some(g) = h.gamma {
        if !(0.0..=1.0).contains(&g) {
            return Err(cx.err(S, "gamma", format!("`gamma` must be in [0, 1], got {g}")));
        }
    }
    if let Some(w) = h.q_omega {
        if !(w > 0.5 && w <= 1.0) {
            return Err(cx.err(S, "q_omega", format!("`q_omega` must be in (0.5, 1], got {w}")));
        }
    }
    let optimizer: OptimizerKind = match &h.optimizer {
        Some(s) => s.parse().map_err(|e: String| cx.err(S, "optimizer", e))?,
        None if is_tree => OptimizerKind::Sgd,
        None => OptimizerKind::Adam,
    };
    let q_backup = match h.q_backup.as_deref() {
        None | Some("sampled") => BackupMode::Sampled,
        Some("expected") => BackupMode::Expected,
        Some(other) => return Err(cx.err(S, "q_backup", format!("unknown backup `{other}` (expected sampled or expected)"))),
    };
    let base = Hyperparams::default();
    let hp = Hyperparams {
        tau: h.tau.unwrap_or(base.tau),
        gamma: h.gamma.unwrap_or(base.gamma),
        rollout: h.rollout.unwrap_or(base.rollout),
        batch_size: h.batch_size.unwrap_or(base.batch_size),
        lr_policy: h.lr_policy.unwrap_or(base.lr_policy),
        critic_weight: h.critic_weight.unwrap_or(base.critic_weight),
        buffer_capacity: h.buffer_capacity.unwrap_or(base.buffer_capacity),
        alpha: h.alpha.unwrap_or(base.alpha),
        optimizer,
        iterations: h.iterations.unwrap_or(base.iterations),
        eval_period: h.eval_period.unwrap_or(base.eval_period),
        seed: 0,
        replay_ratio: h.replay_ratio.unwrap_or(base.replay_ratio),
        tail_windows: h.tail_windows.unwrap_or(base.tail_windows),
        clip_norm: h.clip_norm.or(base.clip_norm),
        execution: base.execution,
    };
    if matches!(algorithm, Algorithm::UnifiedPcl | Algorithm::TabularQSoft) && hp.tau <= 0.0 {
        return Err(cx.err(S, "tau", format!("{algorithm} needs `tau` > 0")));
    }
    if raw.experts && hp.buffer_capacity == 0 {
        return Err(cx.err(S, "buffer_capacity", "expert seeding needs `buffer_capacity` >= 1"));
    }
    let expert_count = raw.expert_count.unwrap_or(10);
    if raw.experts && expert_count >= hp.buffer_capacity {
        return Err(cx.err("", "expert_count", "`expert_count` must be below `buffer_capacity`"));
    }

    let grid = match &raw.grid {
        None => GridSpec {
            cap: DEFAULT_GRID_CAP,
            ..GridSpec::default()
        },
        Some(g) => parse_grid(&cx, g)?,
    };

    Ok(ExperimentConfig {
        env,
        tree_per_run: e.tree_seed.is_none(),
        algorithm,
        seeds,
        experts: raw.experts,
        expert_count,
        out: raw.out,
        arch,
        hidden: raw.model.hidden.unwrap_or(32),
        hp,
        q_updates: h.q_updates.unwrap_or(200_000),
        q_omega: h.q_omega.unwrap_or(0.6),
        q_backup,
        grid,
    })
}

fn parse_grid(cx: &Ctx<'_>, g: &RawGrid) -> Result<GridSpec, ConfigError> {
    let mut spec = match g.preset.as_deref() {
        None => GridSpec::default(),
        Some("tree") => GridSpec::preset(Preset::Tree),
        Some("algorithmic") => GridSpec::preset(Preset::Algorithmic),
        Some(other) => {
            return Err(cx.err("grid", "preset", format!("unknown preset `{other}` (expected tree or algorithmic)")))
        }
    };
    let reals = |key: &str, v: &Option<Vec<f64>>, target: &mut Vec<f64>, check: &dyn Fn(f64) -> bool| {
        if let Some(list) = v {
            if list.is_empty() {
                return Err(cx.err("grid", key, format!("`{key}` must list at least one value")));
            }
            if let Some(bad) = list.iter().find(|x| !check(**x)) {
                return Err(cx.err("grid", key, format!("invalid `{key}` value {bad}")));
            }
            *target = list.clone();
        }
        Ok(())
    };
    let nonneg = |x: f64| x.is_finite() && x >= 0.0;
    reals("lr_policy", &g.lr_policy, &mut spec.lr_policy, &nonneg)?;
    reals("critic_weight", &g.critic_weight, &mut spec.critic_weight, &nonneg)?;
    reals("tau", &g.tau, &mut spec.tau, &nonneg)?;
    reals("gamma", &g.gamma, &mut spec.gamma, &|x| (0.0..=1.0).contains(&x))?;
    reals("alpha", &g.alpha, &mut spec.alpha, &nonneg)?;
    if let Some(list) = &g.rollout {
        if list.is_empty() || list.contains(&0) {
            return Err(cx.err("grid", "rollout", "`rollout` values must be >= 1"));
        }
        spec.rollout = list.clone();
    }
    spec.cap = g.cap.unwrap_or(DEFAULT_GRID_CAP);
    if spec.cardinality() > spec.cap {
        return Err(cx.err(
            "grid",
            "cap",
            format!("grid has {} points, above the cap of {}", spec.cardinality(), spec.cap),
        ));
    }
    Ok(spec)
}

/// Parses `--seeds`: a comma-separated list whose items are numbers or
/// half-open ranges `a..b`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range `{part}`"))?;
            let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range `{part}`"))?;
            if a >= b {
                return Err(format!("empty seed range `{part}`"));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?);
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}
