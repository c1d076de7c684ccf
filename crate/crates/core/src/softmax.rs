//! Log-sum-exp kernels.
//!
//! `softmax` is the temperature-scaled log-sum-exp `τ·log Σ_a exp(q_a/τ)` and
//! `soft_indmax` is its gradient, the Boltzmann distribution over the scores.
//! Every evaluation subtracts `max(q)` first, so tiny temperatures never
//! overflow. A temperature of zero is only meaningful for [`hard_max`].

use std::ops::Deref;

use thiserror::Error;

/// Tolerance used when validating that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SoftmaxError {
    #[error("score vector is empty")]
    Empty,
    #[error("score vector contains a non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("temperature must be > 0 for the softmax operator (got {0}); use hard_max for the zero-temperature limit")]
    NonPositiveTemperature(f64),
    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),
    #[error("not a probability vector: {0}")]
    NotOnSimplex(String),
}

/// Non-negative entropy temperature τ.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, SoftmaxError> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(SoftmaxError::InvalidTemperature(tau));
        }
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

/// A distribution over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, SoftmaxError> {
        if probs.is_empty() {
            return Err(SoftmaxError::Empty);
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(SoftmaxError::NotOnSimplex(format!(
                "entry {i} is {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(SoftmaxError::NotOnSimplex(format!("entries sum to {total}")));
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs at least one outcome");
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut p = vec![0.0; n];
        p[index] = 1.0;
        Self(p)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Total-variation distance `½ Σ |p_a − q_a|`.
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self
            .0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_scores(q: &[f64]) -> Result<(), SoftmaxError> {
    if q.is_empty() {
        return Err(SoftmaxError::Empty);
    }
    if let Some(i) = q.iter().position(|x| !x.is_finite()) {
        return Err(SoftmaxError::NonFinite(i));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<(), SoftmaxError> {
    if tau.is_nan() || tau <= 0.0 || tau.is_infinite() {
        return Err(SoftmaxError::NonPositiveTemperature(tau));
    }
    Ok(())
}

/// Temperature-scaled log-sum-exp `τ·log Σ_a exp(q_a/τ)`.
pub fn softmax(q: &[f64], tau: f64) -> Result<f64, SoftmaxError> {
    check_scores(q)?;
    check_tau(tau)?;
    Ok(log_sum_exp(q, tau))
}

/// Boltzmann distribution `exp((q − softmax(q))/τ)`.
pub fn soft_indmax(q: &[f64], tau: f64) -> Result<ProbVector, SoftmaxError> {
    check_scores(q)?;
    check_tau(tau)?;
    Ok(ProbVector(boltzmann(q, tau)))
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(p)
}

/// Maximum and the lowest index attaining it.
///
/// # Panics
///
/// If `q` is empty.
pub fn hard_max(q: &[f64]) -> (f64, usize) {
    assert!(!q.is_empty(), "hard_max of an empty score vector");
    let mut best = 0;
    for (i, &x) in q.iter().enumerate().skip(1) {
        if x > q[best] {
            best = i;
        }
    }
    (q[best], best)
}

// Unchecked kernels for hot loops: callers guarantee non-empty, finite
// scores and a positive temperature.

#[inline]
pub(crate) fn log_sum_exp(q: &[f64], tau: f64) -> f64 {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q.iter().map(|&x| ((x - m) / tau).exp()).sum();
    m + tau * s.ln()
}

#[inline]
pub(crate) fn boltzmann(q: &[f64], tau: f64) -> Vec<f64> {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = q.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let s: f64 = p.iter().sum();
    for x in &mut p {
        *x /= s;
    }
    p
}

/// Log-probabilities of the Boltzmann distribution, `(q − softmax(q))/τ`.
#[inline]
pub(crate) fn log_boltzmann(q: &[f64], tau: f64) -> Vec<f64> {
    let lse = log_sum_exp(q, tau);
    q.iter().map(|&x| (x - lse) / tau).collect()
}

#[inline]
pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_pair_is_ln2() {
        let v = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn single_action_is_identity() {
        for tau in [1e-6, 0.3, 7.0] {
            assert_eq!(softmax(&[2.5], tau).unwrap(), 2.5);
        }
    }

    #[test]
    fn extended_precision_oracle() {
        // Oracle: exp evaluated via a Taylor series summed in order, then
        // logarithm by Newton iteration on exp; no shared code with the
        // kernel. Frozen value cross-checked to ~1e-15.
        fn exp_series(x: f64) -> f64 {
            // range reduce by halving, square back up
            let mut k = 0;
            let mut y = x;
            while y.abs() > 1e-3 {
                y /= 2.0;
                k += 1;
            }
            let mut term = 1.0;
            let mut sum = 1.0;
            for n in 1..30 {
                term *= y / n as f64;
                sum += term;
            }
            for _ in 0..k {
                sum *= sum;
            }
            sum
        }
        fn ln_newton(s: f64) -> f64 {
            let mut y = 0.0;
            for _ in 0..200 {
                let e = exp_series(y);
                y -= 1.0 - s / e;
            }
            y
        }
        let q = [1.0, 0.3, -0.2];
        let tau = 0.5;
        let s: f64 = q.iter().map(|x| exp_series(x / tau)).sum();
        let oracle = tau * ln_newton(s);
        let got = softmax(&q, tau).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        // 0.5·ln(e² + e^0.6 + e^-0.4)
        assert!((got - 1.145_331_905_286_159_6).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(softmax(&[], 1.0), Err(SoftmaxError::Empty));
        assert!(matches!(
            softmax(&[1.0], 0.0),
            Err(SoftmaxError::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            soft_indmax(&[1.0, f64::NAN], 1.0),
            Err(SoftmaxError::NonFinite(1))
        ));
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(0.0).unwrap().is_zero());
    }

    #[test]
    fn indmax_examples() {
        let p = soft_indmax(&[4.0, 4.0, 4.0], 0.3).unwrap();
        for x in p.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = soft_indmax(&[std::f64::consts::LN_2, 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn indmax_is_gradient_of_softmax() {
        let q = [0.4, -1.3, 2.2, 0.9];
        let tau = 0.7;
        let h = 1e-6;
        let p = soft_indmax(&q, tau).unwrap();
        for i in 0..q.len() {
            let mut up = q;
            let mut dn = q;
            up[i] += h;
            dn[i] -= h;
            let fd = (softmax(&up, tau).unwrap() - softmax(&dn, tau).unwrap()) / (2.0 * h);
            assert!((fd - p[i]).abs() < 1e-8, "{i}: {fd} vs {}", p[i]);
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&ProbVector::uniform(7)) - 7f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&ProbVector::one_hot(4, 2)), 0.0);
        let p = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        // -(0.2 ln 0.2 + 0.3 ln 0.3 + 0.5 ln 0.5)
        assert!((entropy(&p) - 1.029_653_014_064_573_5).abs() < 1e-14);
    }

    #[test]
    fn hard_max_ties_take_lowest_index() {
        assert_eq!(hard_max(&[1.0, 3.0, 3.0]), (3.0, 1));
        assert_eq!(hard_max(&[-5.0]), (-5.0, 0));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.25; 4]).is_ok());
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..20.0, 1..9)
    }

    proptest! {
        #[test]
        fn small_tau_approaches_hard_max(q in scores()) {
            let tau = 1e-6;
            let gap = softmax(&q, tau).unwrap() - hard_max(&q).0;
            prop_assert!(gap >= 0.0);
            prop_assert!(gap <= tau * (q.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn translation(q in scores(), c in -50.0f64..50.0, tau in 0.01f64..3.0) {
            let shifted: Vec<f64> = q.iter().map(|x| x + c).collect();
            let a = softmax(&q, tau).unwrap();
            let b = softmax(&shifted, tau).unwrap();
            prop_assert!((b - a - c).abs() < 1e-10);
            let pa = soft_indmax(&q, tau).unwrap();
            let pb = soft_indmax(&shifted, tau).unwrap();
            for (x, y) in pa.iter().zip(pb.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn variational_form(q in scores(), tau in 0.01f64..3.0) {
            let p = soft_indmax(&q, tau).unwrap();
            let f = softmax(&q, tau).unwrap();
            let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            prop_assert!((f - (dot + tau * entropy(&p))).abs() < 1e-10);
        }

        #[test]
        fn indmax_on_simplex(q in scores(), tau in 1e-3f64..3.0) {
            let p = soft_indmax(&q, tau).unwrap();
            prop_assert!(ProbVector::new(p.into_inner()).is_ok());
        }
    }
}
