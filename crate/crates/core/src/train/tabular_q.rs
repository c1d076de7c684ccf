//! Asynchronous one-step Q backups on a known tabular MDP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::mdp::TabularMdp;
use crate::oracle::QTable;
use crate::softmax::{hard_max, log_sum_exp};

/// How the successor term of a backup is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackupMode {
    /// One successor drawn from `P(·|s, a)`.
    #[default]
    Sampled,
    /// Exact expectation over successors.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularQConfig {
    pub tau: f64,
    /// Number of single-pair backups.
    pub updates: usize,
    /// Step size `η = 1/n^ω` for the `n`-th visit of a pair (so `η = 1` on the
    /// first visit).
    pub omega: f64,
    pub mode: BackupMode,
    pub seed: u64,
}

impl Default for TabularQConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            updates: 200_000,
            omega: 0.6,
            mode: BackupMode::Sampled,
            seed: 0,
        }
    }
}

/// Learns Q by backing up uniformly sampled non-terminal `(s, a)` pairs with
/// `Q(s,a) ← Q(s,a) + η (r + γ·backup(Q(s',·)) − Q(s,a))`, where the backup is
/// `F_τ` when `soft` and `max` otherwise.
pub fn train_tabular_q(mdp: &TabularMdp, cfg: &TabularQConfig, soft: bool) -> Result<QTable, TrainError> {
    if soft && !(cfg.tau.is_finite() && cfg.tau > 0.0) {
        return Err(TrainError::Config(format!("soft backups need tau > 0, got {}", cfg.tau)));
    }
    if !(cfg.omega > 0.5 && cfg.omega <= 1.0) {
        return Err(TrainError::Config(format!("omega must be in (0.5, 1], got {}", cfg.omega)));
    }
    let n_actions = mdp.n_actions();
    let pairs: Vec<(usize, usize)> = (0..mdp.n_states())
        .filter(|&s| !mdp.is_terminal(s))
        .flat_map(|s| (0..n_actions).map(move |a| (s, a)))
        .collect();
    let mut q = QTable::new(mdp.n_states(), n_actions);
    if pairs.is_empty() {
        return Ok(q);
    }
    let mut visits = vec![0u64; mdp.n_states() * n_actions];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backup = |q: &QTable, s: usize| -> f64 {
        if mdp.is_terminal(s) {
            0.0
        } else if soft {
            log_sum_exp(q.row(s), cfg.tau)
        } else {
            hard_max(q.row(s)).0
        }
    };
    for _ in 0..cfg.updates {
        let (s, a) = pairs[rng.random_range(0..pairs.len())];
        let next = match cfg.mode {
            BackupMode::Sampled => {
                let mut u: f64 = rng.random();
                let mut chosen = None;
                let mut last = s;
                for (ns, p) in mdp.successors(s, a) {
                    last = ns;
                    if u < p {
                        chosen = Some(ns);
                        break;
                    }
                    u -= p;
                }
                backup(&q, chosen.unwrap_or(last))
            }
            BackupMode::Expected => mdp.successors(s, a).map(|(ns, p)| p * backup(&q, ns)).sum(),
        };
        let target = mdp.reward(s, a) + mdp.gamma() * next;
        let k = s * n_actions + a;
        visits[k] += 1;
        let eta = (visits[k] as f64).powf(-cfg.omega);
        let row = q.row_mut(s);
        row[a] += eta * (target - row[a]);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_mdp;
    use crate::oracle::{hardmax_value_iteration, optimal_values, q_table};

    #[test]
    fn zero_discount_learns_rewards() {
        let mdp = random_mdp(5, 3, 0.5, 0.0, 1).unwrap();
        let q = train_tabular_q(&mdp, &TabularQConfig { updates: 2000, ..Default::default() }, true).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                assert_eq!(q.get(s, a), mdp.reward(s, a));
            }
        }
    }

    #[test]
    fn soft_and_hard_converge_on_deterministic_mdp() {
        let mdp = random_mdp(10, 3, 0.0, 0.9, 2).unwrap();
        let cfg = TabularQConfig { tau: 0.2, updates: 600_000, ..Default::default() };
        let q = train_tabular_q(&mdp, &cfg, true).unwrap();
        let q_star = q_table(&mdp, &optimal_values(&mdp, 0.2).unwrap());
        assert!(q.sup_distance(&q_star) <= 1e-3, "{}", q.sup_distance(&q_star));
        let qh = train_tabular_q(&mdp, &cfg, false).unwrap();
        let vh = hardmax_value_iteration(&mdp, 1e-12, 10_000).unwrap().values;
        assert!(qh.sup_distance(&q_table(&mdp, &vh)) <= 1e-3);
    }

    #[test]
    fn expected_backups_converge_on_stochastic_mdp() {
        let mdp = random_mdp(10, 3, 0.6, 0.9, 3).unwrap();
        let cfg = TabularQConfig {
            tau: 0.5,
            updates: 600_000,
            mode: BackupMode::Expected,
            ..Default::default()
        };
        let q = train_tabular_q(&mdp, &cfg, true).unwrap();
        let q_star = q_table(&mdp, &optimal_values(&mdp, 0.5).unwrap());
        assert!(q.sup_distance(&q_star) <= 1e-3);
    }

    #[test]
    fn rejects_bad_config() {
        let mdp = random_mdp(3, 2, 0.0, 0.9, 0).unwrap();
        assert!(train_tabular_q(&mdp, &TabularQConfig { tau: 0.0, ..Default::default() }, true).is_err());
        assert!(train_tabular_q(&mdp, &TabularQConfig { tau: 0.0, updates: 10, ..Default::default() }, false).is_ok());
    }
}
