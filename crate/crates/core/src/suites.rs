//! Randomized property suites behind the `verify` command.
//!
//! Each scope draws `trials` random instances from a seeded stream and
//! reports, per check, the worst value observed against a fixed tolerance.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::losses::{
    a2c_advantage, a2c_gradients, forward_episode, pcl_gradients, pcl_objective, pcl_window_terms,
    soft_consistency, unified_delta_rho, unified_pcl_gradients, windows, LossConfig, LossError, WindowView,
};
use crate::mdp::{random_mdp, run_episode, EnvError, Episode, SyntheticTree, TabularEnv, TabularMdp};
use crate::model::{ActorCritic, Gradients, PolicyValueModel, UnifiedQModel};
use crate::oracle::{
    boltzmann_policy, clamped_policy_residual, default_max_iters, discounted_entropy, hardmax_value_iteration,
    max_one_step_residual, on_policy_backup, on_policy_eval, optimal_values, path_residual, q_table, sup_distance,
    verify_contraction, verify_converse, OracleError, PolicyTable,
};
use crate::parallel::Execution;
use crate::replay::{BufferConfig, ReplayBuffer, ReplayError, UNIFORM_MIX};
use crate::softmax::{entropy, hard_max, soft_indmax, softmax, ProbVector, SoftmaxError};

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Softmax(#[from] SoftmaxError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    SoftmaxCore,
    Contraction,
    Consistency,
    Converse,
    Limits,
    Losses,
    Replay,
    All,
}

impl Scope {
    pub const SUITES: [Scope; 7] = [
        Scope::SoftmaxCore,
        Scope::Contraction,
        Scope::Consistency,
        Scope::Converse,
        Scope::Limits,
        Scope::Losses,
        Scope::Replay,
    ];

    fn name(self) -> &'static str {
        match self {
            Scope::SoftmaxCore => "softmax_core",
            Scope::Contraction => "contraction",
            Scope::Consistency => "consistency",
            Scope::Converse => "converse",
            Scope::Limits => "limits",
            Scope::Losses => "losses",
            Scope::Replay => "replay",
            Scope::All => "all",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scope::SUITES
            .into_iter()
            .chain([Scope::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                format!("unknown scope `{s}` (expected softmax_core, contraction, consistency, converse, limits, losses, replay or all)")
            })
    }
}

/// Direction of a check's tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// The worst (largest) value must not exceed the tolerance.
    AtMost,
    /// The worst (smallest) value must reach the tolerance.
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Scope,
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub instances: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.worst <= self.tolerance,
            Bound::AtLeast => self.worst >= self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub scope: Scope,
    pub trials: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    /// True when every check passes; vacuously true for zero trials.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    /// Plain-text table: suite, check, worst value, tolerance, verdict.
    pub fn render(&self) -> String {
        let mut out = format!("{:<13} {:<38} {:>10} {:>12}  result\n", "suite", "check", "worst", "tolerance");
        for c in &self.checks {
            let cmp = match c.bound {
                Bound::AtMost => "<=",
                Bound::AtLeast => ">=",
            };
            out.push_str(&format!(
                "{:<13} {:<38} {:>10.3e} {} {:>9.1e}  {}\n",
                c.suite.name(),
                c.name,
                c.worst,
                cmp,
                c.tolerance,
                if c.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Accumulates per-trial observations for one suite, in trial order.
struct Tally {
    checks: Vec<Check>,
}

impl Tally {
    fn new(suite: Scope, spec: &[(&'static str, f64, Bound)]) -> Self {
        Self {
            checks: spec
                .iter()
                .map(|&(name, tolerance, bound)| Check {
                    suite,
                    name,
                    worst: match bound {
                        Bound::AtMost => 0.0,
                        Bound::AtLeast => f64::INFINITY,
                    },
                    tolerance,
                    bound,
                    instances: 0,
                })
                .collect(),
        }
    }

    fn absorb(&mut self, trial: Vec<Option<f64>>) {
        for (c, x) in self.checks.iter_mut().zip(trial) {
            let Some(x) = x else { continue };
            c.instances += 1;
            let x = if x.is_nan() {
                match c.bound {
                    Bound::AtMost => f64::INFINITY,
                    Bound::AtLeast => f64::NEG_INFINITY,
                }
            } else {
                x
            };
            c.worst = match c.bound {
                Bound::AtMost => c.worst.max(x),
                Bound::AtLeast => c.worst.min(x),
            };
        }
    }

    fn finish(mut self) -> Vec<Check> {
        // nothing observed: report the neutral value instead of ±inf
        for c in &mut self.checks {
            if c.instances == 0 && c.bound == Bound::AtLeast {
                c.worst = c.tolerance;
            }
        }
        self.checks
    }
}

fn trial_seed(seed: u64, suite: Scope, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(suite as u64 + 1);
    rng.set_word_pos(trial as u128 * 4);
    rng.random()
}

type TrialFn = fn(u64) -> Result<Vec<Option<f64>>, SuiteError>;

fn run_one(suite: Scope, trials: usize, seed: u64, exec: Execution) -> Result<Vec<Check>, SuiteError> {
    let (spec, trial): (&[(&'static str, f64, Bound)], TrialFn) = match suite {
        Scope::SoftmaxCore => (SOFTMAX_CHECKS, softmax_trial),
        Scope::Contraction => (CONTRACTION_CHECKS, contraction_trial),
        Scope::Consistency => (CONSISTENCY_CHECKS, consistency_trial),
        Scope::Converse => (CONVERSE_CHECKS, converse_trial),
        Scope::Limits => (LIMIT_CHECKS, limits_trial),
        Scope::Losses => (LOSS_CHECKS, losses_trial),
        Scope::Replay => (REPLAY_CHECKS, replay_trial),
        Scope::All => unreachable!("expanded by run_suite"),
    };
    let mut tally = Tally::new(suite, spec);
    for r in exec.map_range(trials, |t| trial(trial_seed(seed, suite, t))) {
        tally.absorb(r?);
    }
    Ok(tally.finish())
}

/// Runs `scope` over `trials` random instances.
pub fn run_suite(scope: Scope, trials: usize, seed: u64, exec: Execution) -> Result<SuiteReport, SuiteError> {
    let suites: Vec<Scope> = match scope {
        Scope::All => Scope::SUITES.to_vec(),
        s => vec![s],
    };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(run_one(s, trials, seed, exec)?);
    }
    Ok(SuiteReport {
        scope,
        trials,
        seed,
        checks,
    })
}

// ---------------------------------------------------------------------------
// softmax_core

const SOFTMAX_CHECKS: &[(&str, f64, Bound)] = &[
    ("variational_identity", 1e-10, Bound::AtMost),
    ("variational_maximality", 1e-10, Bound::AtMost),
    ("one_shot_consistency", 1e-10, Bound::AtMost),
    ("translation", 1e-10, Bound::AtMost),
    ("bounds", 1e-10, Bound::AtMost),
    ("sup_norm_contraction", 1e-10, Bound::AtMost),
];

/// Temperatures exercised by the operator suite.
pub const SUITE_TEMPERATURES: [f64; 3] = [0.01, 0.1, 1.0];

/// Random probability vectors compared against `F_τ(q)` per instance.
pub const VARIATIONAL_SAMPLES: usize = 1000;

fn flat_dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Distribution::<f64>::sample(&Exp1, rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let tau = SUITE_TEMPERATURES[rng.random_range(0..SUITE_TEMPERATURES.len())];
    let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    let q: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let f = softmax(&q, tau)?;
    let p = soft_indmax(&q, tau)?;

    let identity = (f - (dot(&p, &q) + tau * entropy(&p))).abs();

    let mut maximality = 0.0f64;
    for _ in 0..VARIATIONAL_SAMPLES {
        let other = ProbVector::new(flat_dirichlet(n, &mut rng))?;
        maximality = maximality.max(dot(&other, &q) + tau * entropy(&other) - f);
    }

    // actions whose probability underflows carry no finite log
    let one_shot = q
        .iter()
        .zip(p.iter())
        .filter(|(_, &pa)| pa >= f64::MIN_POSITIVE)
        .map(|(&qa, &pa)| (f - (qa - tau * pa.ln())).abs())
        .fold(0.0, f64::max);

    let c = rng.random_range(-100.0..100.0);
    let shifted: Vec<f64> = q.iter().map(|x| x + c).collect();
    let shifted_p = soft_indmax(&shifted, tau)?;
    let translation = (softmax(&shifted, tau)? - f - c)
        .abs()
        .max(sup_distance(&shifted_p, &p));

    let (m, _) = hard_max(&q);
    let bounds = (m - f).max(f - m - tau * (n as f64).ln()).max(0.0);

    let q2: Vec<f64> = q.iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect();
    let contraction = ((f - softmax(&q2, tau)?).abs() - sup_distance(&q, &q2)).max(0.0);

    Ok(vec![
        Some(identity),
        Some(maximality.max(0.0)),
        Some(one_shot),
        Some(translation),
        Some(bounds),
        Some(contraction),
    ])
}

// ---------------------------------------------------------------------------
// contraction

const CONTRACTION_CHECKS: &[(&str, f64, Bound)] = &[
    ("softmax_backup_contraction", 1e-12, Bound::AtMost),
    ("fixed_point_start_independence", 1e-8, Bound::AtMost),
    ("geometric_residual_decay", 1e-12, Bound::AtMost),
    ("on_policy_contraction", 1e-10, Bound::AtMost),
];

/// Random stochastic MDP with at most 20 states, 5 actions.
pub fn random_test_mdp<R: Rng + ?Sized>(rng: &mut R, gamma: f64) -> Result<TabularMdp, EnvError> {
    let n = rng.random_range(2..=20);
    let a = rng.random_range(2..=5);
    let stochasticity = rng.random_range(0.2..=1.0);
    random_mdp(n, a, stochasticity, gamma, rng.random())
}

/// Policy with every probability at least `floor`.
fn random_positive_policy<R: Rng + ?Sized>(mdp: &TabularMdp, floor: f64, rng: &mut R) -> PolicyTable {
    let a = mdp.n_actions();
    let rows = (0..mdp.n_states())
        .map(|_| {
            flat_dirichlet(a, rng)
                .into_iter()
                .map(|p| floor + (1.0 - a as f64 * floor) * p)
                .collect()
        })
        .collect();
    PolicyTable::from_rows(rows)
}

fn contraction_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = random_test_mdp(&mut rng, 0.9)?;
    let tau = SUITE_TEMPERATURES[rng.random_range(0..SUITE_TEMPERATURES.len())];
    let report = verify_contraction(&mdp, tau, 20, rng.random())?;

    let pi = random_positive_policy(&mdp, 1e-3, &mut rng);
    let fixed = on_policy_eval(&mdp, &pi, tau)?;
    let mut v: Vec<f64> = (0..mdp.n_states()).map(|_| rng.random_range(-10.0..10.0)).collect();
    let d0 = sup_distance(&v, &fixed);
    let mut excess = 0.0f64;
    let mut shrink = 1.0;
    for _ in 0..10 {
        v = on_policy_backup(&mdp, &pi, tau, &v);
        shrink *= mdp.gamma();
        excess = excess.max(sup_distance(&v, &fixed) - shrink * d0);
    }

    Ok(vec![
        Some(report.worst_excess.max(0.0)),
        Some(report.init_disagreement),
        Some(report.worst_rate_excess.max(0.0)),
        Some(excess),
    ])
}

// ---------------------------------------------------------------------------
// consistency

const CONSISTENCY_CHECKS: &[(&str, f64, Bound)] = &[
    ("one_step_residual_at_optimum", 1e-9, Bound::AtMost),
    ("path_residual_at_optimum", 1e-8, Bound::AtMost),
    ("optimum_dominates_policies", 1e-8, Bound::AtMost),
    ("entropy_decomposition", 1e-8, Bound::AtMost),
];

/// Paths sampled per MDP for the multi-step residual.
pub const PATHS_PER_MDP: usize = 100;

fn sample_successor<R: Rng + ?Sized>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = s;
    for (next, p) in mdp.successors(s, a) {
        acc += p;
        last = next;
        if u < acc {
            return next;
        }
    }
    last
}

fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// Worst one-step and multi-step residuals at the exact optimum of `mdp`.
/// Paths follow `π*` from random start states, with lengths in `2..=10`.
pub fn optimum_residuals<R: Rng + ?Sized>(mdp: &TabularMdp, tau: f64, paths: usize, rng: &mut R) -> Result<(f64, f64), SuiteError> {
    let v = optimal_values(mdp, tau)?;
    let pi = boltzmann_policy(mdp, &v, tau);
    let one_step = max_one_step_residual(mdp, &v, &pi, tau);
    let mut worst = 0.0f64;
    for _ in 0..paths {
        let len = rng.random_range(2..=10);
        let mut states = vec![rng.random_range(0..mdp.n_states())];
        let mut actions = Vec::with_capacity(len);
        for _ in 0..len {
            let s = *states.last().unwrap();
            if mdp.is_terminal(s) {
                break;
            }
            let a = sample_action(pi.row(s), rng);
            actions.push(a);
            states.push(sample_successor(mdp, s, a, rng));
        }
        worst = worst.max(path_residual(mdp, &v, &pi, tau, &states, &actions).abs());
    }
    Ok((one_step, worst))
}

fn consistency_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = random_test_mdp(&mut rng, 0.9)?;
    let tau = SUITE_TEMPERATURES[rng.random_range(0..SUITE_TEMPERATURES.len())];
    let (one_step, path) = optimum_residuals(&mdp, tau, PATHS_PER_MDP, &mut rng)?;

    let v_star = optimal_values(&mdp, tau)?;
    let pi = random_positive_policy(&mdp, 1e-3, &mut rng);
    let v_pi = on_policy_eval(&mdp, &pi, tau)?;
    let dominance = v_pi.iter().zip(&v_star).map(|(p, s)| p - s).fold(0.0, f64::max);

    let reward_only = on_policy_eval(&mdp, &pi, 0.0)?;
    let h = discounted_entropy(&mdp, &pi)?;
    let decomposition = (0..mdp.n_states())
        .map(|s| (v_pi[s] - reward_only[s] - tau * h[s]).abs())
        .fold(0.0, f64::max);

    Ok(vec![Some(one_step), Some(path), Some(dominance), Some(decomposition)])
}

// ---------------------------------------------------------------------------
// converse

const CONVERSE_CHECKS: &[(&str, f64, Bound)] = &[
    ("recovered_value_distance", 1e-4, Bound::AtMost),
    ("recovered_policy_distance", 1e-4, Bound::AtMost),
    ("solver_residual", 1e-8, Bound::AtMost),
    ("injected_error_residual", 1e-4, Bound::AtLeast),
];

/// Tolerance handed to the consistency solver.
pub const CONVERSE_SOLVER_TOL: f64 = 1e-9;

/// Probability mass moved by the injected policy error.
pub const INJECTED_ERROR: f64 = 1e-2;

fn converse_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = random_test_mdp(&mut rng, 0.9)?;
    let tau = [0.1, 1.0][rng.random_range(0..2)];
    let report = verify_converse(&mdp, tau, CONVERSE_SOLVER_TOL, rng.random())?;
    let state = rng.random_range(0..mdp.n_states());
    let injected = clamped_policy_residual(&mdp, tau, state, INJECTED_ERROR)?;
    Ok(vec![
        Some(report.value_distance),
        Some(report.policy_distance),
        Some(report.max_residual),
        Some(injected),
    ])
}

// ---------------------------------------------------------------------------
// limits

const LIMIT_CHECKS: &[(&str, f64, Bound)] = &[
    ("small_tau_value_gap_excess", 0.0, Bound::AtMost),
    ("small_tau_operator_gap_excess", 0.0, Bound::AtMost),
    ("zero_tau_consistency_vs_advantage", 0.0, Bound::AtMost),
    ("unified_one_step_td_form", 1e-12, Bound::AtMost),
];

/// Temperature used for the hard-max limit.
pub const LIMIT_TAU: f64 = 1e-4;

/// `‖V*_τ − V°‖_∞ − τ·log|A|/(1−γ)`; non-positive when the limit bound holds.
pub fn small_tau_gap_excess(mdp: &TabularMdp, tau: f64) -> Result<f64, SuiteError> {
    let soft = optimal_values(mdp, tau)?;
    let hard = hardmax_value_iteration(mdp, 1e-13, 10 * default_max_iters(mdp, 0.0, 1e-13))?.values;
    let bound = tau * (mdp.n_actions() as f64).ln() / (1.0 - mdp.gamma());
    Ok(sup_distance(&soft, &hard) - bound)
}

fn random_episode(mdp: &Arc<TabularMdp>, max_steps: usize, seed: u64) -> Result<Episode, EnvError> {
    let mut env = TabularEnv::new(mdp.clone()).with_max_steps(max_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_actions = mdp.n_actions();
    run_episode(&mut env, seed, |_, _| rng.random_range(0..n_actions))
}

fn scrambled<M: ActorCritic, R: Rng + ?Sized>(mut m: M, scale: f64, rng: &mut R) -> M {
    for g in m.param_groups_mut() {
        g.iter_mut().for_each(|p| *p += rng.random_range(-scale..scale));
    }
    m
}

/// Largest bitwise disagreement (as `|a − b|`) between the zero-temperature
/// consistency error and the advantage over all windows of `ep`.
pub fn zero_tau_identity_gap<M: ActorCritic>(ep: &Episode, model: &M, gamma: f64, rollout: usize) -> f64 {
    let cfg = LossConfig::new(0.0, gamma, rollout);
    let fwd = forward_episode(model, ep);
    windows(ep.len(), &cfg)
        .into_iter()
        .map(|w| {
            let c = soft_consistency(ep, &fwd, w, &cfg);
            let a = a2c_advantage(ep, &fwd, w, &cfg);
            if c.to_bits() == a.to_bits() {
                0.0
            } else {
                (c - a).abs().max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

/// Largest `|C − (r + γV_ρ(s') − Q_ρ(s, a))|` over the one-step windows of `ep`.
pub fn unified_td_gap(ep: &Episode, model: &UnifiedQModel, gamma: f64) -> Result<f64, SuiteError> {
    let q = model
        .q
        .as_tabular()
        .ok_or_else(|| SuiteError::Loss(LossError::Config("unified TD check needs a tabular Q".into())))?;
    let cfg = LossConfig::new(model.temperature(), gamma, 1);
    let fwd = forward_episode(model, ep);
    let mut worst = 0.0f64;
    for w in windows(ep.len(), &cfg) {
        let t = w.start;
        let c = soft_consistency(ep, &fwd, w, &cfg);
        let end = t + 1;
        let v_next = if end == ep.len() && ep.terminated {
            0.0
        } else {
            model.value_of(q.row(ep.observations[end]))
        };
        let td = ep.rewards[t] + gamma * v_next - q.row(ep.observations[t])[ep.actions[t]];
        worst = worst.max((c - td).abs());
    }
    Ok(worst)
}

fn limits_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = Arc::new(random_test_mdp(&mut rng, 0.9)?);
    let value_gap = small_tau_gap_excess(&mdp, LIMIT_TAU)?;

    let n = rng.random_range(1..=8);
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    let op_tau = 1e-6;
    let op_gap = softmax(&q, op_tau)? - hard_max(&q).0 - op_tau * (n as f64).ln();

    let ep = random_episode(&mdp, 12, rng.random())?;
    let m = scrambled(PolicyValueModel::tabular(mdp.n_states(), mdp.n_actions()), 1.0, &mut rng);
    let zero_tau = zero_tau_identity_gap(&ep, &m, mdp.gamma(), rng.random_range(1..=5));

    let tau = SUITE_TEMPERATURES[rng.random_range(0..SUITE_TEMPERATURES.len())];
    let mut u = UnifiedQModel::tabular(mdp.n_states(), mdp.n_actions(), tau).map_err(LossError::from)?;
    u = scrambled(u, 2.0, &mut rng);
    let td = unified_td_gap(&ep, &u, mdp.gamma())?;

    Ok(vec![Some(value_gap.max(0.0)), Some(op_gap.max(0.0)), Some(zero_tau), Some(td)])
}

// ---------------------------------------------------------------------------
// losses

const LOSS_CHECKS: &[(&str, f64, Bound)] = &[
    ("pcl_gradient_vs_finite_difference", GRADIENT_REL_TOL, Bound::AtMost),
    ("unified_gradient_vs_finite_difference", GRADIENT_REL_TOL, Bound::AtMost),
    ("a2c_gradient_vs_finite_difference", GRADIENT_REL_TOL, Bound::AtMost),
    ("zero_error_at_tree_optimum", 1e-9, Bound::AtMost),
    ("multi_step_telescoping", 1e-12, Bound::AtMost),
];

/// Relative tolerance for analytic versus finite-difference gradients.
pub const GRADIENT_REL_TOL: f64 = 1e-5;
/// Absolute tolerance below which gradient entries are not compared relatively.
pub const GRADIENT_ABS_TOL: f64 = 1e-7;
const FD_STEP: f64 = 1e-6;

/// `|a − b|` scaled so that values at most [`GRADIENT_REL_TOL`] pass either
/// the relative or the absolute tolerance.
pub fn gradient_error(a: f64, b: f64) -> f64 {
    let floor = GRADIENT_ABS_TOL / GRADIENT_REL_TOL;
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn central_difference<M: Clone, F: Fn(&M) -> f64>(
    model: &M,
    group: usize,
    index: usize,
    params: impl Fn(&mut M) -> Vec<&mut [f64]>,
    f: F,
) -> f64 {
    let mut plus = model.clone();
    params(&mut plus)[group][index] += FD_STEP;
    let mut minus = model.clone();
    params(&mut minus)[group][index] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

fn flatten(g: &Gradients) -> [Vec<f64>; 2] {
    [g.policy.to_dense(), g.value.to_dense()]
}

/// Worst [`gradient_error`] between the PCL update and the objective gradient:
/// `∇_θ O = −τ·Δθ`, `∇_φ O = −Δφ`.
pub fn pcl_gradient_check<M: ActorCritic>(model: &M, episodes: &[&Episode], cfg: &LossConfig) -> Result<f64, SuiteError> {
    let mut total = model.zero_gradients();
    for ep in episodes {
        total.merge(&pcl_gradients(ep, model, cfg)?.grads);
    }
    let analytic = flatten(&total);
    let scale = [-cfg.tau, -1.0];
    let mut worst = 0.0f64;
    for (g, values) in analytic.iter().enumerate() {
        for (i, x) in values.iter().enumerate() {
            let fd = central_difference(model, g, i, |m| m.param_groups_mut(), |m| pcl_objective(episodes, m, cfg));
            worst = worst.max(gradient_error(scale[g] * x, fd));
        }
    }
    Ok(worst)
}

/// Worst [`gradient_error`] between the A2C update and the gradient of the
/// surrogate `Σ_w A_w·(log π(a_w|s_w) + V(s_w))` with advantages held fixed.
pub fn a2c_gradient_check<M: ActorCritic>(model: &M, ep: &Episode, cfg: &LossConfig) -> Result<f64, SuiteError> {
    let analytic = flatten(&a2c_gradients(ep, model, cfg)?.grads);
    let fwd0 = forward_episode(model, ep);
    let frozen: Vec<(WindowView, f64)> = windows(ep.len(), cfg)
        .into_iter()
        .map(|w| (w, a2c_advantage(ep, &fwd0, w, cfg)))
        .collect();
    let surrogate = |m: &M| {
        let f = forward_episode(m, ep);
        frozen
            .iter()
            .map(|(w, adv)| adv * (f.log_prob(w.start, ep.actions[w.start]) + f.value(w.start)))
            .sum::<f64>()
    };
    let mut worst = 0.0f64;
    for (g, values) in analytic.iter().enumerate() {
        for (i, x) in values.iter().enumerate() {
            let fd = central_difference(model, g, i, |m| m.param_groups_mut(), surrogate);
            worst = worst.max(gradient_error(*x, fd));
        }
    }
    Ok(worst)
}

/// Worst [`gradient_error`] between the combined unified step `Δρ` and the
/// gradient of `Σ_w C_w·[η_π Σ_j γ^j log π + η_v (V(s_i) − γ^{d'} V(s_end))]`
/// with every `C_w` held fixed.
pub fn unified_gradient_check(
    model: &UnifiedQModel,
    ep: &Episode,
    cfg: &LossConfig,
    lr_policy: f64,
    lr_value: f64,
) -> Result<f64, SuiteError> {
    let delta = unified_delta_rho(&unified_pcl_gradients(ep, model, cfg)?.grads, lr_policy, lr_value).to_dense();
    let fwd0 = forward_episode(model, ep);
    let frozen: Vec<_> = windows(ep.len(), cfg)
        .into_iter()
        .map(|w| pcl_window_terms(ep, &fwd0, w, cfg))
        .collect();
    let surrogate = |m: &UnifiedQModel| {
        let f = forward_episode(m, ep);
        frozen
            .iter()
            .map(|t| {
                lr_policy * t.log_prob.iter().map(|l| l.weight * f.log_prob(l.step, l.action)).sum::<f64>()
                    + lr_value * t.value.iter().map(|v| v.weight * f.value(v.step)).sum::<f64>()
            })
            .sum::<f64>()
    };
    let mut worst = 0.0f64;
    for (i, x) in delta.iter().enumerate() {
        let fd = central_difference(model, 0, i, |m| m.param_groups_mut(), surrogate);
        worst = worst.max(gradient_error(*x, fd));
    }
    Ok(worst)
}

fn losses_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let a = rng.random_range(2..=3);
    let gamma: f64 = rng.random_range(0.8..=0.99);
    let mdp = Arc::new(random_mdp(n, a, 0.5, gamma, rng.random())?);
    let tau = rng.random_range(0.05..1.0);
    let cfg = LossConfig::new(tau, gamma, rng.random_range(1..=4));
    let eps: Vec<Episode> = (0..2)
        .map(|_| random_episode(&mdp, rng.random_range(1..=7), rng.random()))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Episode> = eps.iter().collect();
    let m = scrambled(PolicyValueModel::tabular(n, a), 1.0, &mut rng);
    let pcl = pcl_gradient_check(&m, &refs, &cfg)?;

    let u = scrambled(UnifiedQModel::tabular(n, a, tau).map_err(LossError::from)?, 1.0, &mut rng);
    let unified = unified_gradient_check(&u, &eps[0], &cfg, rng.random_range(0.1..1.0), rng.random_range(0.1..1.0))?;

    let a2c = a2c_gradient_check(&m, &eps[1], &LossConfig { tau: 0.0, ..cfg })?;

    let depth = rng.random_range(2..=5);
    let tree = SyntheticTree::generate(depth, &mut rng)?;
    let tree_mdp = Arc::new(tree.to_mdp(1.0)?);
    let v = optimal_values(&tree_mdp, tau)?;
    let opt = PolicyValueModel::from_tables(&v, &boltzmann_policy(&tree_mdp, &v, tau));
    let tree_ep = random_episode(&tree_mdp, depth, rng.random())?;
    let tree_cfg = LossConfig::new(tau, 1.0, rng.random_range(1..=depth));
    let fwd = forward_episode(&opt, &tree_ep);
    let at_optimum = windows(tree_ep.len(), &tree_cfg)
        .into_iter()
        .map(|w| soft_consistency(&tree_ep, &fwd, w, &tree_cfg).abs())
        .fold(0.0, f64::max);
    let unified_opt = UnifiedQModel::from_q(&q_table(&tree_mdp, &v), tau).map_err(LossError::from)?;
    let ufwd = forward_episode(&unified_opt, &tree_ep);
    let at_optimum = windows(tree_ep.len(), &tree_cfg)
        .into_iter()
        .map(|w| soft_consistency(&tree_ep, &ufwd, w, &tree_cfg).abs())
        .fold(at_optimum, f64::max);

    let long_ep = random_episode(&mdp, 10, rng.random())?;
    let fwd = forward_episode(&m, &long_ep);
    let one = LossConfig::new(tau, gamma, 1);
    let long = LossConfig::new(tau, gamma, long_ep.len());
    let whole = soft_consistency(&long_ep, &fwd, WindowView { start: 0, len: long_ep.len() }, &long);
    let sum: f64 = (0..long_ep.len())
        .map(|j| gamma.powi(j as i32) * soft_consistency(&long_ep, &fwd, WindowView { start: j, len: 1 }, &one))
        .sum();
    let telescoping = (whole - sum).abs() / whole.abs().max(1.0);

    Ok(vec![Some(pcl), Some(unified), Some(a2c), Some(at_optimum), Some(telescoping)])
}

// ---------------------------------------------------------------------------
// replay

const REPLAY_CHECKS: &[(&str, f64, Bound)] = &[
    ("probabilities_match_formula", 1e-12, Bound::AtMost),
    ("empirical_total_variation", 0.01, Bound::AtMost),
    ("pinned_entries_lost", 0.0, Bound::AtMost),
];

/// Draws per instance for the empirical distribution check.
pub const SUITE_REPLAY_DRAWS: usize = 200_000;

/// Sampling distribution computed directly from the stated rule
/// `0.1/N + 0.9·exp(αR_i)/Σ_j exp(αR_j)`.
pub fn replay_formula(returns: &[f64], alpha: f64) -> Vec<f64> {
    let n = returns.len() as f64;
    let top = returns.iter().map(|r| alpha * r).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = returns.iter().map(|r| (alpha * r - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| UNIFORM_MIX / n + (1.0 - UNIFORM_MIX) * x / z).collect()
}

/// Total-variation distance between `probs` and the frequencies of `draws` samples.
pub fn empirical_total_variation<R: Rng + ?Sized>(buffer: &ReplayBuffer, draws: usize, rng: &mut R) -> Result<f64, SuiteError> {
    let probs = buffer.probabilities();
    let mut counts = vec![0usize; probs.len()];
    for i in buffer.sample_indices(draws, rng)? {
        counts[i] += 1;
    }
    Ok(0.5 * probs
        .iter()
        .zip(&counts)
        .map(|(p, c)| (p - *c as f64 / draws as f64).abs())
        .sum::<f64>())
}

fn reward_episode(total: f64) -> Episode {
    Episode {
        observations: vec![0, 0],
        actions: vec![0],
        rewards: vec![total],
        terminated: true,
    }
}

fn replay_trial(seed: u64) -> Result<Vec<Option<f64>>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = rng.random_range(2..=16);
    let alpha = rng.random_range(0.0..2.0);
    let mut buf = ReplayBuffer::new(BufferConfig::new(capacity, alpha)?);
    let pinned = rng.random_range(0..capacity);
    let experts: Vec<Episode> = (0..pinned).map(|_| reward_episode(20.0)).collect();
    buf.seed_experts(experts, &mut rng)?;
    for _ in 0..rng.random_range(1..=4 * capacity) {
        buf.insert(reward_episode(rng.random_range(-20.0..20.0)), false, &mut rng)?;
    }
    let returns: Vec<f64> = buf.entries().iter().map(|e| e.total_reward).collect();
    let formula = replay_formula(&returns, alpha);
    let probs = buf.probabilities();
    let formula_gap = sup_distance(&formula, &probs).max((probs.iter().sum::<f64>() - 1.0).abs());
    let tv = empirical_total_variation(&buf, SUITE_REPLAY_DRAWS, &mut rng)?;
    let lost = pinned.abs_diff(buf.pinned_count()) as f64;
    Ok(vec![Some(formula_gap), Some(tv), Some(lost)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::SUITES.into_iter().chain([Scope::All]) {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn zero_trials_pass_vacuously() {
        let r = run_suite(Scope::All, 0, 1, Execution::Sequential).unwrap();
        assert!(r.passed());
        assert!(r.checks.iter().all(|c| c.instances == 0));
    }

    #[test]
    fn every_suite_passes_on_a_few_trials() {
        for s in Scope::SUITES {
            let r = run_suite(s, 3, 7, Execution::default()).unwrap();
            assert!(r.passed(), "{}", r.render());
            assert!(r.checks.iter().all(|c| c.instances == 3));
        }
    }

    #[test]
    fn reports_are_independent_of_execution_mode() {
        let a = run_suite(Scope::Losses, 4, 3, Execution::Sequential).unwrap();
        let b = run_suite(Scope::Losses, 4, 3, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failing_check_is_reported() {
        let mut t = Tally::new(Scope::Limits, &[("x", 1e-3, Bound::AtMost), ("y", 1.0, Bound::AtLeast)]);
        t.absorb(vec![Some(1e-2), Some(0.5)]);
        let checks = t.finish();
        assert!(!checks[0].passed() && !checks[1].passed());
        t = Tally::new(Scope::Limits, &[("nan", 1.0, Bound::AtMost)]);
        t.absorb(vec![Some(f64::NAN)]);
        assert!(!t.finish()[0].passed());
    }

    #[test]
    fn formula_matches_hand_computation() {
        let p = replay_formula(&[0.0, 2f64.ln()], 1.0);
        assert!((p[0] - 0.35).abs() < 1e-15 && (p[1] - 0.65).abs() < 1e-15);
    }

    #[test]
    fn gradient_error_honours_both_tolerances() {
        assert!(gradient_error(1e-9, 5e-8) <= GRADIENT_REL_TOL);
        assert!(gradient_error(1.0, 1.0 + 5e-6) <= GRADIENT_REL_TOL);
        assert!(gradient_error(1.0, 1.0 + 5e-5) > GRADIENT_REL_TOL);
    }
}
