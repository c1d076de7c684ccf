//! Soft consistency error and the PCL, Unified PCL and A2C update rules.
//!
//! All updates are returned as ascent directions: applying `params += η·Δ`
//! decreases the squared consistency objective. The policy part of the PCL
//! rule carries no `τ` factor, so `∇_θ O = −τ·Δθ` while `∇_φ O = −Δφ`.

use thiserror::Error;

use crate::mdp::Episode;
use crate::model::{episode_inputs, ActorCritic, Forward, GradBuffer, Gradients, LogProbTerm, ModelError, UnifiedQModel, ValueTerm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("non-finite consistency error in window starting at step {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    /// Window length `d`.
    pub rollout: usize,
    /// Include the shorter windows ending at the last state. With `false`
    /// only windows starting at `t ≤ T − d` are used.
    pub tail_windows: bool,
}

impl LossConfig {
    pub fn new(tau: f64, gamma: f64, rollout: usize) -> Self {
        Self {
            tau,
            gamma,
            rollout,
            tail_windows: true,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(LossError::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LossError::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if self.rollout == 0 {
            return Err(LossError::Config("rollout must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sub-trajectory `s_start … s_{start+len}` of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowView {
    pub start: usize,
    pub len: usize,
}

/// Windows used for an episode of `steps` actions.
pub fn windows(steps: usize, cfg: &LossConfig) -> Vec<WindowView> {
    let d = cfg.rollout;
    (0..steps)
        .map(|start| WindowView {
            start,
            len: d.min(steps - start),
        })
        .filter(|w| cfg.tail_windows || w.len == d)
        .collect()
}

/// `V` at the window's end: zero if that is the terminal state.
fn end_value(ep: &Episode, fwd: &Forward, end: usize) -> f64 {
    if end == ep.len() && ep.terminated {
        0.0
    } else {
        fwd.value(end)
    }
}

fn window_error(ep: &Episode, fwd: &Forward, w: WindowView, gamma: f64, tau: f64) -> f64 {
    let mut discount = 1.0;
    let mut path = 0.0;
    for j in 0..w.len {
        let t = w.start + j;
        let entropy = if tau == 0.0 { 0.0 } else { tau * fwd.log_prob(t, ep.actions[t]) };
        path += discount * (ep.rewards[t] - entropy);
        discount *= gamma;
    }
    -fwd.value(w.start) + discount * end_value(ep, fwd, w.start + w.len) + path
}

/// `C = −V(s_i) + γ^{d'} V(s_{i+d'}) + Σ_j γ^j (r_{i+j} − τ log π(a_{i+j}|s_{i+j}))`.
pub fn soft_consistency(ep: &Episode, fwd: &Forward, w: WindowView, cfg: &LossConfig) -> f64 {
    window_error(ep, fwd, w, cfg.gamma, cfg.tau)
}

/// `A = −V(s_i) + γ^{d'} V(s_{i+d'}) + Σ_j γ^j r_{i+j}`; the same arithmetic
/// as [`soft_consistency`] with `τ = 0`.
pub fn a2c_advantage(ep: &Episode, fwd: &Forward, w: WindowView, cfg: &LossConfig) -> f64 {
    window_error(ep, fwd, w, cfg.gamma, 0.0)
}

pub fn forward_episode<M: ActorCritic>(model: &M, ep: &Episode) -> Forward {
    model.forward(&episode_inputs(&ep.observations, &ep.actions))
}

/// `Σ ½C²` over the windows of every episode.
pub fn pcl_objective<M: ActorCritic>(episodes: &[&Episode], model: &M, cfg: &LossConfig) -> f64 {
    episodes
        .iter()
        .map(|ep| {
            let fwd = forward_episode(model, ep);
            windows(ep.len(), cfg)
                .into_iter()
                .map(|w| 0.5 * soft_consistency(ep, &fwd, w, cfg).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// One window's contribution to the PCL update.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTerms {
    pub window: WindowView,
    pub error: f64,
    /// `C·γ^j` on `log π(a_{i+j}|s_{i+j})`, in order of `j`.
    pub log_prob: Vec<LogProbTerm>,
    /// `+C` at `s_i` and `−C·γ^{d'}` at the end state unless it is terminal.
    pub value: Vec<ValueTerm>,
}

pub fn pcl_window_terms(ep: &Episode, fwd: &Forward, w: WindowView, cfg: &LossConfig) -> WindowTerms {
    let c = soft_consistency(ep, fwd, w, cfg);
    let mut log_prob = Vec::with_capacity(w.len);
    let mut discount = 1.0;
    for j in 0..w.len {
        let t = w.start + j;
        log_prob.push(LogProbTerm {
            step: t,
            action: ep.actions[t],
            weight: c * discount,
        });
        discount *= cfg.gamma;
    }
    let mut value = vec![ValueTerm { step: w.start, weight: c }];
    let end = w.start + w.len;
    if !(end == ep.len() && ep.terminated) {
        value.push(ValueTerm {
            step: end,
            weight: -c * discount,
        });
    }
    WindowTerms {
        window: w,
        error: c,
        log_prob,
        value,
    }
}

/// Summed update for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeGradients {
    pub grads: Gradients,
    /// `Σ ½C²` (or `Σ ½A²` for A2C) over the episode's windows.
    pub objective: f64,
    pub windows: usize,
    pub max_abs_error: f64,
}

fn finish<M: ActorCritic>(
    model: &M,
    ep: &Episode,
    fwd: &Forward,
    lp: Vec<LogProbTerm>,
    vt: Vec<ValueTerm>,
    errors: &[(usize, f64)],
) -> Result<EpisodeGradients, LossError> {
    if let Some(&(start, _)) = errors.iter().find(|(_, c)| !c.is_finite()) {
        return Err(LossError::NonFinite(start));
    }
    let mut grads = model.zero_gradients();
    let inputs = episode_inputs(&ep.observations, &ep.actions);
    model.backward(&inputs, fwd, &lp, &vt, &mut grads)?;
    Ok(EpisodeGradients {
        grads,
        objective: errors.iter().map(|(_, c)| 0.5 * c * c).sum(),
        windows: errors.len(),
        max_abs_error: errors.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max),
    })
}

/// `Δθ = Σ_windows C·Σ_j γ^j ∇log π`, `Δφ = Σ_windows C·(∇V(s_i) − γ^{d'}∇V(s_{i+d'}))`.
pub fn pcl_gradients<M: ActorCritic>(ep: &Episode, model: &M, cfg: &LossConfig) -> Result<EpisodeGradients, LossError> {
    cfg.validate()?;
    let fwd = forward_episode(model, ep);
    let mut lp = Vec::new();
    let mut vt = Vec::new();
    let mut errors = Vec::new();
    for w in windows(ep.len(), cfg) {
        let terms = pcl_window_terms(ep, &fwd, w, cfg);
        errors.push((w.start, terms.error));
        lp.extend(terms.log_prob);
        vt.extend(terms.value);
    }
    finish(model, ep, &fwd, lp, vt, &errors)
}

/// PCL update for the unified parameterization. The temperature always
/// comes from the model. `grads.policy` holds the log-probability part of
/// `Δρ` and `grads.value` the value part; see [`unified_delta_rho`].
pub fn unified_pcl_gradients(ep: &Episode, model: &UnifiedQModel, cfg: &LossConfig) -> Result<EpisodeGradients, LossError> {
    let cfg = LossConfig {
        tau: model.temperature(),
        ..*cfg
    };
    pcl_gradients(ep, model, &cfg)
}

/// `Δρ = η_π·(policy part) + η_v·(value part)`.
pub fn unified_delta_rho(grads: &Gradients, lr_policy: f64, lr_value: f64) -> GradBuffer {
    let mut out = grads.policy.zeros_like();
    out.merge_scaled(&grads.policy, lr_policy);
    out.merge_scaled(&grads.value, lr_value);
    out
}

/// `Δθ = Σ_i A_i ∇log π(a_i|s_i)`, `Δφ = Σ_i A_i ∇V(s_i)`, one window per
/// start step.
pub fn a2c_gradients<M: ActorCritic>(ep: &Episode, model: &M, cfg: &LossConfig) -> Result<EpisodeGradients, LossError> {
    a2c_gradients_with_entropy(ep, model, cfg, 0.0)
}

/// A2C update plus the gradient of `β·Σ_t H(π(·|s_t))` over visited states.
///
/// `∇H = −Σ_a π_a log π_a ∇log π_a`, so the bonus is expressed as extra
/// weighted log-probability terms.
pub fn a2c_gradients_with_entropy<M: ActorCritic>(
    ep: &Episode,
    model: &M,
    cfg: &LossConfig,
    entropy_weight: f64,
) -> Result<EpisodeGradients, LossError> {
    cfg.validate()?;
    let fwd = forward_episode(model, ep);
    let mut lp = Vec::new();
    let mut vt = Vec::new();
    let mut errors = Vec::new();
    for w in windows(ep.len(), cfg) {
        let a = a2c_advantage(ep, &fwd, w, cfg);
        errors.push((w.start, a));
        lp.push(LogProbTerm {
            step: w.start,
            action: ep.actions[w.start],
            weight: a,
        });
        vt.push(ValueTerm { step: w.start, weight: a });
    }
    if entropy_weight != 0.0 {
        for t in 0..ep.len() {
            for (action, l) in fwd.log_probs_at(t).iter().enumerate() {
                let p = l.exp();
                if p > 0.0 {
                    lp.push(LogProbTerm {
                        step: t,
                        action,
                        weight: -entropy_weight * p * l,
                    });
                }
            }
        }
    }
    finish(model, ep, &fwd, lp, vt, &errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_mdp, run_episode, SyntheticTree, TabularEnv, TabularMdp};
    use crate::model::{NetSpec, PolicyValueModel};
    use crate::oracle::{boltzmann_policy, optimal_values, q_table};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_episode(mdp: &Arc<TabularMdp>, seed: u64, max_steps: usize) -> Episode {
        let mut env = TabularEnv::new(mdp.clone()).with_max_steps(max_steps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_episode(&mut env, seed, |_, _| rng.random_range(0..mdp.n_actions())).unwrap()
    }

    fn scrambled_tabular(n_states: usize, n_actions: usize, seed: u64) -> PolicyValueModel {
        let mut m = PolicyValueModel::tabular(n_states, n_actions);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in m.param_groups_mut() {
            g.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        }
        m
    }

    /// Direct evaluation of the consistency error from raw tables.
    fn direct_c(m: &PolicyValueModel, ep: &Episode, start: usize, len: usize, tau: f64, gamma: f64) -> f64 {
        let logits = |s: usize| m.policy.as_tabular().unwrap().row(s).to_vec();
        let v = |s: usize| m.value.as_tabular().unwrap().row(s)[0];
        let log_pi = |s: usize, a: usize| {
            let l = logits(s);
            let z: f64 = l.iter().map(|x| x.exp()).sum();
            l[a] - z.ln()
        };
        let end = start + len;
        let v_end = if end == ep.len() && ep.terminated { 0.0 } else { v(ep.observations[end]) };
        let mut total = -v(ep.observations[start]) + gamma.powi(len as i32) * v_end;
        for j in 0..len {
            let t = start + j;
            total += gamma.powi(j as i32) * (ep.rewards[t] - tau * log_pi(ep.observations[t], ep.actions[t]));
        }
        total
    }

    #[test]
    fn window_enumeration() {
        let mut cfg = LossConfig::new(0.1, 1.0, 3);
        let w = windows(5, &cfg);
        assert_eq!(w.len(), 5);
        assert_eq!(w[3], WindowView { start: 3, len: 2 });
        cfg.tail_windows = false;
        assert_eq!(windows(5, &cfg).len(), 3);
        assert!(windows(2, &cfg).is_empty());
    }

    #[test]
    fn consistency_matches_direct_formula() {
        let mdp = Arc::new(random_mdp(6, 3, 0.4, 0.9, 1).unwrap());
        let m = scrambled_tabular(6, 3, 2);
        let ep = random_episode(&mdp, 3, 9);
        let cfg = LossConfig::new(0.35, 0.9, 2);
        let fwd = forward_episode(&m, &ep);
        for w in windows(ep.len(), &cfg) {
            let c = soft_consistency(&ep, &fwd, w, &cfg);
            assert!((c - direct_c(&m, &ep, w.start, w.len, 0.35, 0.9)).abs() < 1e-12);
            let a = a2c_advantage(&ep, &fwd, w, &cfg);
            assert!((a - direct_c(&m, &ep, w.start, w.len, 0.0, 0.9)).abs() < 1e-12);
            let zero = LossConfig { tau: 0.0, ..cfg };
            assert_eq!(soft_consistency(&ep, &fwd, w, &zero).to_bits(), a.to_bits());
        }
    }

    #[test]
    fn zero_at_tree_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = SyntheticTree::generate(5, &mut rng).unwrap();
        let mdp = Arc::new(tree.to_mdp(1.0).unwrap());
        let tau = 0.2;
        let v = optimal_values(&mdp, tau).unwrap();
        let m = PolicyValueModel::from_tables(&v, &boltzmann_policy(&mdp, &v, tau));
        for seed in 0..20 {
            let ep = random_episode(&mdp, seed, 100);
            for d in 1..=5 {
                let cfg = LossConfig::new(tau, 1.0, d);
                let g = pcl_gradients(&ep, &m, &cfg).unwrap();
                assert!(g.max_abs_error <= 1e-9, "d={d}: {}", g.max_abs_error);
            }
        }
    }

    #[test]
    fn single_window_value_update_structure() {
        let mdp = Arc::new(random_mdp(5, 2, 0.0, 0.8, 7).unwrap());
        let m = scrambled_tabular(5, 2, 8);
        let ep = random_episode(&mdp, 1, 1);
        let cfg = LossConfig::new(0.1, 0.8, 1);
        let g = pcl_gradients(&ep, &m, &cfg).unwrap();
        let c = soft_consistency(&ep, &forward_episode(&m, &ep), WindowView { start: 0, len: 1 }, &cfg);
        let (s0, s1) = (ep.observations[0], ep.observations[1]);
        let dphi = g.grads.value.to_dense();
        for s in 0..5 {
            let expect = if s == s0 && s == s1 {
                c - 0.8 * c
            } else if s == s0 {
                c
            } else if s == s1 {
                -0.8 * c
            } else {
                0.0
            };
            assert!((dphi[s] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_error_gives_zero_update() {
        // a deterministic chain whose values equal the returns with tau = 0
        let mdp = TabularMdp::new(3, 1, 0.5, vec![false, false, true], vec![1.0, 2.0, 0.0], vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![(2, 1.0)]]).unwrap();
        let mdp = Arc::new(mdp);
        let mut m = PolicyValueModel::tabular(3, 1);
        m.value.set_params(&[2.0, 2.0, 0.0]);
        let ep = random_episode(&mdp, 0, 10);
        for d in 1..=2 {
            let cfg = LossConfig::new(0.0, 0.5, d);
            assert!(pcl_gradients(&ep, &m, &cfg).unwrap().grads.is_zero());
            assert!(a2c_gradients(&ep, &m, &cfg).unwrap().grads.is_zero());
        }
    }

    fn flat(g: &Gradients) -> (Vec<f64>, Vec<f64>) {
        (g.policy.to_dense(), g.value.to_dense())
    }

    fn fd_objective<M: ActorCritic>(m: &M, episodes: &[&Episode], cfg: &LossConfig) -> Vec<Vec<f64>> {
        let eps = 1e-6;
        let groups: Vec<usize> = m.param_groups().iter().map(|g| g.len()).collect();
        groups
            .iter()
            .enumerate()
            .map(|(gi, &n)| {
                (0..n)
                    .map(|i| {
                        let mut p = m.clone();
                        p.param_groups_mut()[gi][i] += eps;
                        let mut q = m.clone();
                        q.param_groups_mut()[gi][i] -= eps;
                        (pcl_objective(episodes, &p, cfg) - pcl_objective(episodes, &q, cfg)) / (2.0 * eps)
                    })
                    .collect()
            })
            .collect()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= 1e-7 || (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn pcl_update_is_negative_objective_gradient() {
        let mdp = Arc::new(random_mdp(5, 3, 0.5, 0.9, 11).unwrap());
        let m = scrambled_tabular(5, 3, 12);
        let eps: Vec<Episode> = (0..3).map(|s| random_episode(&mdp, 20 + s, 6)).collect();
        let refs: Vec<&Episode> = eps.iter().collect();
        let tau = 0.3;
        let cfg = LossConfig::new(tau, 0.9, 3);
        let mut total = m.zero_gradients();
        for ep in &eps {
            total.merge(&pcl_gradients(ep, &m, &cfg).unwrap().grads);
        }
        let (dtheta, dphi) = flat(&total);
        let fd = fd_objective(&m, &refs, &cfg);
        for (i, x) in dtheta.iter().enumerate() {
            assert!(close(-tau * x, fd[0][i], 1e-5), "theta {i}: {} vs {}", -tau * x, fd[0][i]);
        }
        for (i, x) in dphi.iter().enumerate() {
            assert!(close(-x, fd[1][i], 1e-5), "phi {i}");
        }
    }

    #[test]
    fn recurrent_pcl_update_matches_finite_differences() {
        let mdp = Arc::new(random_mdp(4, 2, 0.5, 0.95, 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = PolicyValueModel::lstm(4, 2, 8, &mut rng);
        for g in m.param_groups_mut() {
            g.iter_mut().for_each(|p| *p += rng.random_range(-0.3..0.3));
        }
        let ep = random_episode(&mdp, 5, 7);
        let tau = 0.5;
        let cfg = LossConfig::new(tau, 0.95, 4);
        let (dtheta, dphi) = flat(&pcl_gradients(&ep, &m, &cfg).unwrap().grads);
        let fd = fd_objective(&m, &[&ep], &cfg);
        for (i, x) in dtheta.iter().enumerate() {
            assert!(close(-tau * x, fd[0][i], 1e-5), "theta {i}");
        }
        for (i, x) in dphi.iter().enumerate() {
            assert!(close(-x, fd[1][i], 1e-5), "phi {i}");
        }
    }

    #[test]
    fn unified_matches_frozen_weight_objective() {
        let mdp = Arc::new(random_mdp(5, 3, 0.5, 0.9, 13).unwrap());
        let tau = 0.4;
        let mut m = UnifiedQModel::tabular(5, 3, tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.q.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        let ep = random_episode(&mdp, 2, 6);
        let cfg = LossConfig::new(tau, 0.9, 2);
        let (lr_pi, lr_v) = (0.7, 0.2);
        let delta = unified_delta_rho(&unified_pcl_gradients(&ep, &m, &cfg).unwrap().grads, lr_pi, lr_v).to_dense();
        // C held fixed: L(ρ) = Σ_w C_w [η_π Σ_j γ^j log π + η_v (V(s_i) − γ^{d'} V(s_end))]
        let fwd0 = forward_episode(&m, &ep);
        let frozen: Vec<WindowTerms> = windows(ep.len(), &cfg).into_iter().map(|w| pcl_window_terms(&ep, &fwd0, w, &cfg)).collect();
        let objective = |m: &UnifiedQModel| {
            let f = forward_episode(m, &ep);
            frozen
                .iter()
                .map(|t| {
                    lr_pi * t.log_prob.iter().map(|l| l.weight * f.log_prob(l.step, l.action)).sum::<f64>()
                        + lr_v * t.value.iter().map(|v| v.weight * f.value(v.step)).sum::<f64>()
                })
                .sum::<f64>()
        };
        for i in 0..delta.len() {
            let mut p = m.clone();
            p.q.params_mut()[i] += 1e-6;
            let mut q = m.clone();
            q.q.params_mut()[i] -= 1e-6;
            let fd = (objective(&p) - objective(&q)) / 2e-6;
            assert!(close(delta[i], fd, 1e-5), "rho {i}: {} vs {fd}", delta[i]);
        }
    }

    #[test]
    fn unified_one_step_is_soft_q_error() {
        let mdp = Arc::new(random_mdp(6, 3, 0.5, 0.9, 17).unwrap());
        let tau = 0.25;
        let mut m = UnifiedQModel::tabular(6, 3, tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        m.q.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-2.0..2.0));
        let ep = random_episode(&mdp, 4, 12);
        let cfg = LossConfig::new(tau, 0.9, 1);
        let fwd = forward_episode(&m, &ep);
        let q = m.q.as_tabular().unwrap();
        for w in windows(ep.len(), &cfg) {
            let t = w.start;
            let c = soft_consistency(&ep, &fwd, w, &cfg);
            let v_next = m.value_of(q.row(ep.observations[t + 1]));
            let td = ep.rewards[t] + 0.9 * v_next - q.row(ep.observations[t])[ep.actions[t]];
            assert!((c - td).abs() < 1e-12);
        }
    }

    #[test]
    fn unified_at_q_star_is_stationary() {
        let mdp = Arc::new(random_mdp(6, 2, 0.0, 0.9, 19).unwrap());
        let tau = 0.3;
        let v = optimal_values(&mdp, tau).unwrap();
        let m = UnifiedQModel::from_q(&q_table(&mdp, &v), tau).unwrap();
        let ep = random_episode(&mdp, 1, 15);
        let g = unified_pcl_gradients(&ep, &m, &LossConfig::new(tau, 0.9, 3)).unwrap();
        assert!(g.max_abs_error < 1e-9);
        assert!(unified_delta_rho(&g.grads, 1.0, 1.0).to_dense().iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn a2c_gradient_structure() {
        let mdp = Arc::new(random_mdp(5, 3, 0.5, 0.9, 23).unwrap());
        let m = scrambled_tabular(5, 3, 24);
        let ep = random_episode(&mdp, 6, 1);
        let cfg = LossConfig::new(0.0, 0.9, 4);
        let g = a2c_gradients(&ep, &m, &cfg).unwrap();
        let s = ep.observations[0];
        let dtheta = g.grads.policy.to_dense();
        for (i, x) in dtheta.iter().enumerate() {
            if i / 3 != s {
                assert_eq!(*x, 0.0);
            }
        }
        assert!(dtheta[s * 3..s * 3 + 3].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn pcl_first_terms_equal_a2c_at_zero_tau() {
        let mdp = Arc::new(random_mdp(6, 3, 0.5, 0.9, 29).unwrap());
        let m = scrambled_tabular(6, 3, 30);
        let ep = random_episode(&mdp, 7, 10);
        let cfg = LossConfig::new(0.0, 0.9, 3);
        let fwd = forward_episode(&m, &ep);
        let firsts: Vec<LogProbTerm> = windows(ep.len(), &cfg)
            .into_iter()
            .map(|w| pcl_window_terms(&ep, &fwd, w, &cfg).log_prob[0])
            .collect();
        let mut g = m.zero_gradients();
        let inputs = episode_inputs(&ep.observations, &ep.actions);
        m.backward(&inputs, &fwd, &firsts, &[], &mut g).unwrap();
        let a2c = a2c_gradients(&ep, &m, &cfg).unwrap();
        assert_eq!(g.policy.to_dense(), a2c.grads.policy.to_dense());
    }

    #[test]
    fn multi_step_error_telescopes() {
        let mdp = Arc::new(random_mdp(6, 2, 0.0, 0.9, 31).unwrap());
        let m = scrambled_tabular(6, 2, 32);
        let ep = random_episode(&mdp, 8, 9);
        let tau = 0.6;
        let fwd = forward_episode(&m, &ep);
        let long = LossConfig::new(tau, 0.9, 5);
        let one = LossConfig::new(tau, 0.9, 1);
        let c = soft_consistency(&ep, &fwd, WindowView { start: 2, len: 5 }, &long);
        let sum: f64 = (0..5)
            .map(|j| 0.9f64.powi(j as i32) * soft_consistency(&ep, &fwd, WindowView { start: 2 + j, len: 1 }, &one))
            .sum();
        assert!((c - sum).abs() < 1e-12);
    }

    #[test]
    fn entropy_bonus_alone_moves_policy_toward_uniform() {
        let mut m = PolicyValueModel::tabular(2, 2);
        m.policy.set_params(&[1.0, -1.0, 0.0, 0.0]);
        let mdp = TabularMdp::new(2, 2, 0.9, vec![false, true], vec![0.0; 4], vec![vec![(1, 1.0)]; 4]).unwrap();
        let ep = random_episode(&Arc::new(mdp), 0, 5);
        let cfg = LossConfig::new(0.0, 0.9, 1);
        let g = a2c_gradients_with_entropy(&ep, &m, &cfg, 0.5).unwrap();
        let d = g.grads.policy.to_dense();
        assert!(g.grads.value.is_zero());
        assert!(d[0] < 0.0 && d[1] > 0.0);
        assert!((d[0] + d[1]).abs() < 1e-15);
    }

    #[test]
    fn linear_model_pcl_finite_differences() {
        let mdp = Arc::new(random_mdp(4, 2, 0.3, 0.9, 37).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let spec = NetSpec::Linear { n_obs: 4, n_actions: 2, out: 2 };
        let mut m = PolicyValueModel::new(spec, spec.with_out(1), &mut rng).unwrap();
        for g in m.param_groups_mut() {
            g.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        }
        let ep = random_episode(&mdp, 9, 6);
        let tau = 0.2;
        let cfg = LossConfig::new(tau, 0.9, 2);
        let (dtheta, dphi) = flat(&pcl_gradients(&ep, &m, &cfg).unwrap().grads);
        let fd = fd_objective(&m, &[&ep], &cfg);
        for (i, x) in dtheta.iter().enumerate() {
            assert!(close(-tau * x, fd[0][i], 1e-5));
        }
        for (i, x) in dphi.iter().enumerate() {
            assert!(close(-x, fd[1][i], 1e-5));
        }
    }
}
