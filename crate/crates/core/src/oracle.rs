//! Exact dynamic programming on [`TabularMdp`]s.
//!
//! Softmax and hard-max value iteration, entropy-regularized on-policy
//! evaluation, discounted entropy, one-step and path consistency residuals,
//! and numerical verifiers for the consistency/optimality equivalence and the
//! contraction of the softmax Bellman operator. Everything handles stochastic
//! transitions; terminal states keep a value of zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::mdp::TabularMdp;
use crate::softmax::{boltzmann, hard_max, log_sum_exp};

/// Default sup-norm tolerance for fixed-point solves.
pub const FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("policy assigns zero probability to action {action} in state {state} while tau > 0")]
    ZeroProbability { state: usize, action: usize },
    #[error("policy table shape does not match the MDP")]
    ShapeMismatch,
}

/// State values, zero at terminal states.
pub type ValueTable = Vec<f64>;

/// Action values `Q(s, a)` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_actions: usize,
    q: Vec<f64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            q: vec![0.0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.q.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    /// `max |Q − other|` over all entries.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        sup_distance(&self.q, &other.q)
    }
}

/// One distribution per state, stored row-major. Rows of terminal states are
/// carried along but never used.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_actions: usize,
    pi: Vec<f64>,
}

impl PolicyTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_actions = rows.first().map_or(0, Vec::len);
        Self {
            n_actions,
            pi: rows.into_iter().flatten().collect(),
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            pi: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Random strictly positive rows (flat Dirichlet draws).
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut pi = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let draws: Vec<f64> = (0..n_actions)
                .map(|_| Distribution::<f64>::sample(&Exp1, rng) + 1e-6)
                .collect();
            let total: f64 = draws.iter().sum();
            pi.extend(draws.iter().map(|d| d / total));
        }
        Self { n_actions, pi }
    }

    pub fn n_states(&self) -> usize {
        self.pi.len() / self.n_actions.max(1)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.pi[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.pi[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.pi[s * self.n_actions + a]
    }

    /// Largest per-state total-variation distance over non-terminal states.
    pub fn max_total_variation(&self, other: &PolicyTable, mdp: &TabularMdp) -> f64 {
        (0..mdp.n_states())
            .filter(|&s| !mdp.is_terminal(s))
            .map(|s| {
                0.5 * self
                    .row(s)
                    .iter()
                    .zip(other.row(s))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// Result of a fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Solve {
    pub values: ValueTable,
    pub iterations: usize,
    /// `‖V_{k+1} − V_k‖_∞` for every sweep.
    pub residuals: Vec<f64>,
}

pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_tau(tau: f64) -> Result<(), OracleError> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(OracleError::InvalidTemperature(tau))
    }
}

/// Iteration budget for a `tol`-accurate fixed point.
///
/// For `γ < 1` this is `⌈log(tol·(1−γ)/r_max) / log γ⌉` plus a margin, where
/// `r_max` bounds one backup's magnitude. Undiscounted (acyclic) MDPs need at
/// most one sweep per state.
pub fn default_max_iters(mdp: &TabularMdp, tau: f64, tol: f64) -> usize {
    let gamma = mdp.gamma();
    if gamma >= 1.0 {
        return mdp.n_states() + 2;
    }
    let r_max = (mdp.max_abs_reward() + tau * (mdp.n_actions() as f64).ln()).max(1e-300);
    let needed = ((tol * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil();
    needed.max(0.0) as usize + 100
}

/// `(B* V)(s) = softmax_τ(Q_V(s, ·))`, zero at terminals.
pub fn softmax_backup(mdp: &TabularMdp, v: &[f64], tau: f64) -> ValueTable {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                log_sum_exp(&mdp.q_row(s, v), tau)
            }
        })
        .collect()
}

/// `(B° V)(s) = max_a Q_V(s, a)`, zero at terminals.
pub fn hardmax_backup(mdp: &TabularMdp, v: &[f64]) -> ValueTable {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                hard_max(&mdp.q_row(s, v)).0
            }
        })
        .collect()
}

/// `(B^π V)(s) = Σ_a π(a|s)[r(s,a) − τ log π(a|s) + γ E V(s')]`.
pub fn on_policy_backup(mdp: &TabularMdp, pi: &PolicyTable, tau: f64, v: &[f64]) -> ValueTable {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                return 0.0;
            }
            let q = mdp.q_row(s, v);
            pi.row(s)
                .iter()
                .zip(&q)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (q - tau * p.ln()))
                .sum()
        })
        .collect()
}

fn iterate<F>(mut v: ValueTable, tol: f64, max_iters: usize, backup: F) -> Result<Solve, OracleError>
where
    F: Fn(&[f64]) -> ValueTable,
{
    let mut residuals = Vec::new();
    for k in 1..=max_iters {
        let next = backup(&v);
        let r = sup_distance(&next, &v);
        residuals.push(r);
        v = next;
        if r <= tol {
            return Ok(Solve {
                values: v,
                iterations: k,
                residuals,
            });
        }
    }
    Err(OracleError::NonConvergence {
        iterations: max_iters,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Softmax value iteration from `V = 0`.
pub fn softmax_value_iteration(
    mdp: &TabularMdp,
    tau: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Solve, OracleError> {
    softmax_value_iteration_from(mdp, tau, vec![0.0; mdp.n_states()], tol, max_iters)
}

/// Softmax value iteration from an arbitrary start (terminal entries are zeroed).
pub fn softmax_value_iteration_from(
    mdp: &TabularMdp,
    tau: f64,
    mut init: ValueTable,
    tol: f64,
    max_iters: usize,
) -> Result<Solve, OracleError> {
    check_tau(tau)?;
    zero_terminals(mdp, &mut init);
    iterate(init, tol, max_iters, |v| softmax_backup(mdp, v, tau))
}

pub fn hardmax_value_iteration(
    mdp: &TabularMdp,
    tol: f64,
    max_iters: usize,
) -> Result<Solve, OracleError> {
    iterate(vec![0.0; mdp.n_states()], tol, max_iters, |v| {
        hardmax_backup(mdp, v)
    })
}

fn zero_terminals(mdp: &TabularMdp, v: &mut [f64]) {
    for (s, x) in v.iter_mut().enumerate() {
        if mdp.is_terminal(s) {
            *x = 0.0;
        }
    }
}

/// Soft-optimal values `V*` at [`FIXED_POINT_TOL`].
pub fn optimal_values(mdp: &TabularMdp, tau: f64) -> Result<ValueTable, OracleError> {
    let max_iters = default_max_iters(mdp, tau, FIXED_POINT_TOL);
    Ok(softmax_value_iteration(mdp, tau, FIXED_POINT_TOL, max_iters)?.values)
}

pub fn q_table(mdp: &TabularMdp, v: &[f64]) -> QTable {
    let mut q = QTable::new(mdp.n_states(), mdp.n_actions());
    for s in 0..mdp.n_states() {
        if !mdp.is_terminal(s) {
            q.row_mut(s).copy_from_slice(&mdp.q_row(s, v));
        }
    }
    q
}

/// `π(·|s) = soft_indmax_τ(Q_V(s, ·))`; terminal rows are uniform.
pub fn boltzmann_policy(mdp: &TabularMdp, v: &[f64], tau: f64) -> PolicyTable {
    let n_actions = mdp.n_actions();
    let mut rows = Vec::with_capacity(mdp.n_states());
    for s in 0..mdp.n_states() {
        if mdp.is_terminal(s) {
            rows.push(vec![1.0 / n_actions as f64; n_actions]);
        } else {
            rows.push(boltzmann(&mdp.q_row(s, v), tau));
        }
    }
    PolicyTable::from_rows(rows)
}

/// One-hot greedy policy, lowest index on ties.
pub fn greedy_policy(mdp: &TabularMdp, v: &[f64]) -> PolicyTable {
    let n_actions = mdp.n_actions();
    let rows = (0..mdp.n_states())
        .map(|s| {
            let mut row = vec![0.0; n_actions];
            let a = if mdp.is_terminal(s) {
                0
            } else {
                hard_max(&mdp.q_row(s, v)).1
            };
            row[a] = 1.0;
            row
        })
        .collect();
    PolicyTable::from_rows(rows)
}

fn check_policy(mdp: &TabularMdp, pi: &PolicyTable, tau: f64) -> Result<(), OracleError> {
    if pi.n_actions() != mdp.n_actions() || pi.n_states() != mdp.n_states() {
        return Err(OracleError::ShapeMismatch);
    }
    if tau > 0.0 {
        for s in (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)) {
            if let Some(a) = pi.row(s).iter().position(|p| *p <= 0.0) {
                return Err(OracleError::ZeroProbability { state: s, action: a });
            }
        }
    }
    Ok(())
}

/// Entropy-regularized value of `π`: the fixed point of `B^π`, solved to 1e-12.
pub fn on_policy_eval(mdp: &TabularMdp, pi: &PolicyTable, tau: f64) -> Result<ValueTable, OracleError> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(OracleError::InvalidTemperature(tau));
    }
    check_policy(mdp, pi, tau)?;
    let tol = 1e-12;
    let max_iters = default_max_iters(mdp, tau, tol);
    Ok(iterate(vec![0.0; mdp.n_states()], tol, max_iters, |v| {
        on_policy_backup(mdp, pi, tau, v)
    })?
    .values)
}

/// `H(s) = Σ_a π(a|s)[−log π(a|s) + γ E H(s')]`.
pub fn discounted_entropy(mdp: &TabularMdp, pi: &PolicyTable) -> Result<ValueTable, OracleError> {
    check_policy(mdp, pi, 0.0)?;
    let tol = 1e-12;
    let max_iters = default_max_iters(mdp, 1.0, tol);
    Ok(iterate(vec![0.0; mdp.n_states()], tol, max_iters, |h| {
        (0..mdp.n_states())
            .map(|s| {
                if mdp.is_terminal(s) {
                    return 0.0;
                }
                (0..mdp.n_actions())
                    .map(|a| {
                        let p = pi.get(s, a);
                        if p <= 0.0 {
                            0.0
                        } else {
                            p * (-p.ln() + mdp.gamma() * mdp.expected_next(s, a, h))
                        }
                    })
                    .sum()
            })
            .collect()
    })?
    .values)
}

/// `E_{s'|s,a}[−V(s) + γV(s') + r(s,a) − τ log π(a|s)]`.
pub fn consistency_residual(
    mdp: &TabularMdp,
    v: &[f64],
    pi: &PolicyTable,
    tau: f64,
    s: usize,
    a: usize,
) -> f64 {
    let log_pi = if tau > 0.0 { tau * pi.get(s, a).ln() } else { 0.0 };
    -v[s] + mdp.gamma() * mdp.expected_next(s, a, v) + mdp.reward(s, a) - log_pi
}

/// Multi-step residual along a realized path `s_1 a_1 … s_t a_t s_{t+1}`:
///
/// `−V(s_1) + γ^t V(s_{t+1}) + Σ_i γ^{i−1}(r_i − τ log π(a_i|s_i))`, with each
/// realized successor value replaced by its exact expectation. On
/// deterministic MDPs the correction terms vanish.
pub fn path_residual(
    mdp: &TabularMdp,
    v: &[f64],
    pi: &PolicyTable,
    tau: f64,
    states: &[usize],
    actions: &[usize],
) -> f64 {
    assert_eq!(states.len(), actions.len() + 1, "path needs one more state than actions");
    let gamma = mdp.gamma();
    let t = actions.len();
    let mut total = -v[states[0]] + gamma.powi(t as i32) * v[states[t]];
    let mut discount = 1.0;
    for (i, (&s, &a)) in states.iter().zip(actions).enumerate() {
        let log_pi = if tau > 0.0 { tau * pi.get(s, a).ln() } else { 0.0 };
        total += discount * (mdp.reward(s, a) - log_pi);
        total += discount * gamma * (mdp.expected_next(s, a, v) - v[states[i + 1]]);
        discount *= gamma;
    }
    total
}

/// Largest `|consistency_residual|` over all non-terminal `(s, a)`.
pub fn max_one_step_residual(mdp: &TabularMdp, v: &[f64], pi: &PolicyTable, tau: f64) -> f64 {
    (0..mdp.n_states())
        .filter(|&s| !mdp.is_terminal(s))
        .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
        .map(|(s, a)| consistency_residual(mdp, v, pi, tau, s, a).abs())
        .fold(0.0, f64::max)
}

/// Output of [`solve_consistency`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySolution {
    pub values: ValueTable,
    pub policy: PolicyTable,
    pub max_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped alternating solve of the one-step consistency equations.
///
/// Each sweep extracts the Boltzmann policy of the current values (rows
/// listed in `clamped` are held fixed), then moves `V` a fraction `damping`
/// toward the regularized on-policy backup. Stops once every residual is
/// below `tol` or the values stop moving.
pub fn solve_consistency(
    mdp: &TabularMdp,
    tau: f64,
    mut values: ValueTable,
    mut policy: PolicyTable,
    clamped: &[usize],
    tol: f64,
    max_iters: usize,
) -> Result<ConsistencySolution, OracleError> {
    check_tau(tau)?;
    const DAMPING: f64 = 0.5;
    zero_terminals(mdp, &mut values);
    let mut is_clamped = vec![false; mdp.n_states()];
    for &s in clamped {
        is_clamped[s] = true;
    }
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for s in (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s) && !is_clamped[s]) {
            let row = boltzmann(&mdp.q_row(s, &values), tau);
            policy.row_mut(s).copy_from_slice(&row);
        }
        let target = on_policy_backup(mdp, &policy, tau, &values);
        let mut moved = 0.0f64;
        for (v, t) in values.iter_mut().zip(&target) {
            let next = (1.0 - DAMPING) * *v + DAMPING * t;
            moved = moved.max((next - *v).abs());
            *v = next;
        }
        residual = max_one_step_residual(mdp, &values, &policy, tau);
        if residual <= tol || moved <= 1e-15 {
            break;
        }
    }
    Ok(ConsistencySolution {
        converged: residual <= tol,
        values,
        policy,
        max_residual: residual,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverseReport {
    pub converged: bool,
    pub iterations: usize,
    pub max_residual: f64,
    /// `‖V − V*‖_∞`.
    pub value_distance: f64,
    /// `max_s TV(π(·|s), π*(·|s))`.
    pub policy_distance: f64,
    /// `10·solver_tol / (1 − γ)`.
    pub bound: f64,
    pub passed: bool,
}

/// Solves the consistency equations from a random start and compares the
/// result to the optimum from softmax value iteration.
pub fn verify_converse(
    mdp: &TabularMdp,
    tau: f64,
    solver_tol: f64,
    seed: u64,
) -> Result<ConverseReport, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_v: ValueTable = (0..mdp.n_states()).map(|_| rng.random_range(-5.0..5.0)).collect();
    let init_pi = PolicyTable::random(mdp.n_states(), mdp.n_actions(), &mut rng);
    verify_converse_from(mdp, tau, solver_tol, init_v, init_pi)
}

pub fn verify_converse_from(
    mdp: &TabularMdp,
    tau: f64,
    solver_tol: f64,
    init_v: ValueTable,
    init_pi: PolicyTable,
) -> Result<ConverseReport, OracleError> {
    let max_iters = 10 * default_max_iters(mdp, tau, solver_tol * 1e-2);
    let sol = solve_consistency(mdp, tau, init_v, init_pi, &[], solver_tol, max_iters)?;
    let v_star = softmax_value_iteration(mdp, tau, 1e-13, 10 * default_max_iters(mdp, tau, 1e-13))?.values;
    let pi_star = boltzmann_policy(mdp, &v_star, tau);
    let value_distance = sup_distance(&sol.values, &v_star);
    let policy_distance = sol.policy.max_total_variation(&pi_star, mdp);
    let bound = 10.0 * solver_tol / (1.0 - mdp.gamma()).max(f64::EPSILON);
    Ok(ConverseReport {
        converged: sol.converged,
        iterations: sol.iterations,
        max_residual: sol.max_residual,
        value_distance,
        policy_distance,
        bound,
        passed: sol.converged && value_distance <= bound && policy_distance <= bound,
    })
}

/// Moves `error` probability mass in state `s` of `π*` away from its most
/// likely action, holds that row fixed, solves the rest, and returns the
/// smallest maximal residual the solver reaches.
pub fn clamped_policy_residual(
    mdp: &TabularMdp,
    tau: f64,
    state: usize,
    error: f64,
) -> Result<f64, OracleError> {
    let v_star = optimal_values(mdp, tau)?;
    let mut pi = boltzmann_policy(mdp, &v_star, tau);
    let row = pi.row_mut(state);
    let (_, hi) = hard_max(row);
    let lo = (hi + 1) % row.len();
    let moved = error.min(row[hi]);
    row[hi] -= moved;
    row[lo] += moved;
    let sol = solve_consistency(
        mdp,
        tau,
        v_star,
        pi,
        &[state],
        0.0,
        10 * default_max_iters(mdp, tau, 1e-14),
    )?;
    Ok(sol.max_residual)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub trials: usize,
    /// Largest `‖B*V1 − B*V2‖ − γ‖V1 − V2‖` observed.
    pub worst_excess: f64,
    /// Distance between value iteration results from two random starts.
    pub init_disagreement: f64,
    /// Largest `r_{k+1} − γ r_k` over the sweeps of value iteration.
    pub worst_rate_excess: f64,
    pub passed: bool,
}

/// Checks `‖B*V1 − B*V2‖_∞ ≤ γ‖V1 − V2‖_∞` on random pairs, start-independence
/// of the fixed point, and geometric decay of value iteration residuals.
pub fn verify_contraction(
    mdp: &TabularMdp,
    tau: f64,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport, OracleError> {
    check_tau(tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = mdp.gamma();
    let random_v = |rng: &mut ChaCha8Rng| -> ValueTable {
        (0..mdp.n_states())
            .map(|s| if mdp.is_terminal(s) { 0.0 } else { rng.random_range(-10.0..10.0) })
            .collect()
    };
    let mut worst_excess = 0.0f64;
    for _ in 0..trials {
        let v1 = random_v(&mut rng);
        let v2 = random_v(&mut rng);
        let lhs = sup_distance(&softmax_backup(mdp, &v1, tau), &softmax_backup(mdp, &v2, tau));
        worst_excess = worst_excess.max(lhs - gamma * sup_distance(&v1, &v2));
    }
    let max_iters = default_max_iters(mdp, tau, FIXED_POINT_TOL) + 200;
    let a = softmax_value_iteration_from(mdp, tau, random_v(&mut rng), FIXED_POINT_TOL, max_iters)?;
    let b = softmax_value_iteration_from(mdp, tau, random_v(&mut rng), FIXED_POINT_TOL, max_iters)?;
    let init_disagreement = sup_distance(&a.values, &b.values);
    let worst_rate_excess = a
        .residuals
        .windows(2)
        .chain(b.residuals.windows(2))
        .map(|w| w[1] - gamma * w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let passed = worst_excess <= 1e-12 && init_disagreement <= 1e-8 && worst_rate_excess <= 1e-12;
    Ok(ContractionReport {
        trials,
        worst_excess,
        init_disagreement,
        worst_rate_excess,
        passed,
    })
}
