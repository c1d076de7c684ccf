//! Parametric policies and value functions with analytic gradients.
//!
//! Two model families share the [`ActorCritic`] interface consumed by the
//! losses:
//!
//! - [`PolicyValueModel`]: a policy net producing logits and a separate value
//!   net.
//! - [`UnifiedQModel`]: a single Q net from which `V = τ log Σ exp(Q/τ)` and
//!   `log π = (Q − V)/τ` are derived.
//!
//! Each can sit on a tabular, linear or recurrent [`Net`].

mod checkpoint;
mod grad;
mod lstm;
mod net;
mod optim;

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, ModelKind};
pub use grad::{GradBuffer, Gradients};
pub use lstm::{LstmNet, LstmTrace, FORGET_BIAS, INIT_SCALE};
pub use net::{episode_inputs, LinearNet, Net, NetSpec, NetTrace, StepInput, TabularNet};
pub use optim::{AdamState, Optimizer, OptimizerKind};

use crate::oracle::{PolicyTable, QTable};
use crate::softmax::{boltzmann, log_boltzmann, log_sum_exp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
}

/// `w·∇ log π(action | step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbTerm {
    pub step: usize,
    pub action: usize,
    pub weight: f64,
}

/// `u·∇ V(step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueTerm {
    pub step: usize,
    pub weight: f64,
}

/// Per-step outputs of a model over one episode prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    n_actions: usize,
    /// Row-major `steps × n_actions`.
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    traces: Vec<NetTrace>,
}

impl Forward {
    pub fn steps(&self) -> usize {
        self.values.len()
    }

    pub fn log_probs_at(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.n_actions..(t + 1) * self.n_actions]
    }

    pub fn log_prob(&self, t: usize, a: usize) -> f64 {
        self.log_probs[t * self.n_actions + a]
    }

    pub fn value(&self, t: usize) -> f64 {
        self.values[t]
    }
}

/// Interface shared by every trainable model.
pub trait ActorCritic: Clone + Send + Sync {
    fn n_actions(&self) -> usize;

    /// Entropy temperature baked into the parameterization (unified only).
    fn tau(&self) -> Option<f64> {
        None
    }

    fn initial_carry(&self) -> Vec<f64>;

    /// Log-probabilities of the next action, advancing the recurrent carry.
    fn policy_step(&self, carry: &mut Vec<f64>, input: StepInput) -> Vec<f64>;

    /// Outputs at every step of `inputs`.
    fn forward(&self, inputs: &[StepInput]) -> Forward;

    /// Accumulates `Σ w·∇log π + Σ u·∇V` into `grads`.
    fn backward(
        &self,
        inputs: &[StepInput],
        fwd: &Forward,
        log_prob_terms: &[LogProbTerm],
        value_terms: &[ValueTerm],
        grads: &mut Gradients,
    ) -> Result<(), ModelError>;

    fn zero_gradients(&self) -> Gradients;

    /// Flat parameter groups in a fixed order.
    fn param_groups(&self) -> Vec<&[f64]>;

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]>;

    /// `params += lr·Δ`, the value part scaled by `lr_value`.
    fn apply_update(&mut self, grads: &Gradients, opt: &mut Optimizer, lr_policy: f64, lr_value: f64);

    /// Whether gradient clipping is customary for this architecture.
    fn is_recurrent(&self) -> bool;

    fn checkpoint(&self) -> Checkpoint;
}

fn check_terms(lp: &[LogProbTerm], v: &[ValueTerm]) -> Result<(), ModelError> {
    if lp.iter().all(|t| t.weight.is_finite()) && v.iter().all(|t| t.weight.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite("loss weight"))
    }
}

/// `d_logits[t] += w·(e_a − π_t)` for a softmax over `logits / scale`, with
/// the factor `1/scale` applied.
fn log_prob_output_grads(fwd: &Forward, terms: &[LogProbTerm], scale: f64) -> Vec<f64> {
    let n = fwd.n_actions;
    let mut d = vec![0.0; fwd.steps() * n];
    for term in terms {
        if term.weight == 0.0 {
            continue;
        }
        let w = term.weight / scale;
        let row = &mut d[term.step * n..(term.step + 1) * n];
        for (k, lp) in fwd.log_probs_at(term.step).iter().enumerate() {
            row[k] -= w * lp.exp();
        }
        row[term.action] += w;
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueModel {
    pub policy: Net,
    pub value: Net,
}

impl PolicyValueModel {
    pub fn new<R: Rng + ?Sized>(policy: NetSpec, value: NetSpec, rng: &mut R) -> Result<Self, ModelError> {
        if value.out_dim() != 1 || policy.out_dim() == 0 {
            return Err(ModelError::Invalid("value net needs one output, policy at least one".into()));
        }
        Ok(Self {
            policy: policy.build(rng),
            value: value.build(rng),
        })
    }

    /// Zero logits (uniform policy) and zero values.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        Self {
            policy: Net::Tabular(TabularNet::zeros(n_states, n_actions)),
            value: Net::Tabular(TabularNet::zeros(n_states, 1)),
        }
    }

    pub fn lstm<R: Rng + ?Sized>(n_obs: usize, n_actions: usize, hidden: usize, rng: &mut R) -> Self {
        let spec = NetSpec::Lstm { n_obs, n_actions, hidden, out: n_actions };
        Self::new(spec, spec.with_out(1), rng).expect("valid recurrent shapes")
    }

    /// Tabular model with logits `log π` and the given values.
    pub fn from_tables(values: &[f64], policy: &PolicyTable) -> Self {
        let mut m = Self::tabular(values.len(), policy.n_actions());
        let pt = m.policy.as_tabular_mut().expect("tabular");
        for s in 0..values.len() {
            for (x, p) in pt.row_mut(s).iter_mut().zip(policy.row(s)) {
                *x = p.ln();
            }
        }
        m.value.set_params(values);
        m
    }
}

impl ActorCritic for PolicyValueModel {
    fn n_actions(&self) -> usize {
        self.policy.out_dim()
    }

    fn initial_carry(&self) -> Vec<f64> {
        self.policy.initial_carry()
    }

    fn policy_step(&self, carry: &mut Vec<f64>, input: StepInput) -> Vec<f64> {
        let mut logits = vec![0.0; self.n_actions()];
        self.policy.step(carry, input, &mut logits);
        log_boltzmann(&logits, 1.0)
    }

    fn forward(&self, inputs: &[StepInput]) -> Forward {
        let n = self.n_actions();
        let (logits, pt) = self.policy.forward(inputs);
        let (values, vt) = self.value.forward(inputs);
        let log_probs = logits.chunks(n).flat_map(|row| log_boltzmann(row, 1.0)).collect();
        Forward {
            n_actions: n,
            log_probs,
            values,
            traces: vec![pt, vt],
        }
    }

    fn backward(
        &self,
        inputs: &[StepInput],
        fwd: &Forward,
        log_prob_terms: &[LogProbTerm],
        value_terms: &[ValueTerm],
        grads: &mut Gradients,
    ) -> Result<(), ModelError> {
        check_terms(log_prob_terms, value_terms)?;
        if log_prob_terms.iter().any(|t| t.weight != 0.0) {
            let d = log_prob_output_grads(fwd, log_prob_terms, 1.0);
            self.policy.backward(inputs, &fwd.traces[0], &d, &mut grads.policy);
        }
        if value_terms.iter().any(|t| t.weight != 0.0) {
            let mut d = vec![0.0; fwd.steps()];
            for t in value_terms {
                d[t.step] += t.weight;
            }
            self.value.backward(inputs, &fwd.traces[1], &d, &mut grads.value);
        }
        if grads.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite("gradient"))
        }
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            policy: self.policy.new_grad(),
            value: self.value.new_grad(),
        }
    }

    fn param_groups(&self) -> Vec<&[f64]> {
        vec![self.policy.params(), self.value.params()]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.policy.params_mut(), self.value.params_mut()]
    }

    fn apply_update(&mut self, grads: &Gradients, opt: &mut Optimizer, lr_policy: f64, lr_value: f64) {
        opt.step(0, self.policy.params_mut(), &grads.policy, lr_policy);
        opt.step(1, self.value.params_mut(), &grads.value, lr_value);
    }

    fn is_recurrent(&self) -> bool {
        matches!(self.policy, Net::Lstm(_)) || matches!(self.value, Net::Lstm(_))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::PolicyValue,
            tau: None,
            nets: vec![
                ("policy".into(), self.policy.spec(), self.policy.params().to_vec()),
                ("value".into(), self.value.spec(), self.value.params().to_vec()),
            ],
            optimizer: None,
        }
    }
}

/// Policy and value derived from one action-value net at temperature `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedQModel {
    pub q: Net,
    tau: f64,
}

impl UnifiedQModel {
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, tau: f64, rng: &mut R) -> Result<Self, ModelError> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(ModelError::Invalid(format!("unified model needs tau > 0, got {tau}")));
        }
        Ok(Self { q: spec.build(rng), tau })
    }

    pub fn tabular(n_states: usize, n_actions: usize, tau: f64) -> Result<Self, ModelError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::new(NetSpec::Tabular { n_obs: n_states, out: n_actions }, tau, &mut rng)
    }

    pub fn from_q(q: &QTable, tau: f64) -> Result<Self, ModelError> {
        let mut m = Self::tabular(q.n_states(), q.n_actions(), tau)?;
        m.q.set_params(q.as_slice());
        Ok(m)
    }

    pub fn temperature(&self) -> f64 {
        self.tau
    }

    /// `V_ρ(s) = F_τ(Q_ρ(s, ·))` for one row of Q.
    pub fn value_of(&self, q_row: &[f64]) -> f64 {
        log_sum_exp(q_row, self.tau)
    }

    /// `π_ρ(·|s) = f_τ(Q_ρ(s, ·))` for one row of Q.
    pub fn policy_of(&self, q_row: &[f64]) -> Vec<f64> {
        boltzmann(q_row, self.tau)
    }
}

impl ActorCritic for UnifiedQModel {
    fn n_actions(&self) -> usize {
        self.q.out_dim()
    }

    fn tau(&self) -> Option<f64> {
        Some(self.tau)
    }

    fn initial_carry(&self) -> Vec<f64> {
        self.q.initial_carry()
    }

    fn policy_step(&self, carry: &mut Vec<f64>, input: StepInput) -> Vec<f64> {
        let mut q = vec![0.0; self.n_actions()];
        self.q.step(carry, input, &mut q);
        log_boltzmann(&q, self.tau)
    }

    fn forward(&self, inputs: &[StepInput]) -> Forward {
        let n = self.n_actions();
        let (q, trace) = self.q.forward(inputs);
        let mut log_probs = Vec::with_capacity(q.len());
        let mut values = Vec::with_capacity(inputs.len());
        for row in q.chunks(n) {
            let v = log_sum_exp(row, self.tau);
            values.push(v);
            log_probs.extend(row.iter().map(|x| (x - v) / self.tau));
        }
        Forward {
            n_actions: n,
            log_probs,
            values,
            traces: vec![trace],
        }
    }

    fn backward(
        &self,
        inputs: &[StepInput],
        fwd: &Forward,
        log_prob_terms: &[LogProbTerm],
        value_terms: &[ValueTerm],
        grads: &mut Gradients,
    ) -> Result<(), ModelError> {
        check_terms(log_prob_terms, value_terms)?;
        if log_prob_terms.iter().any(|t| t.weight != 0.0) {
            let d = log_prob_output_grads(fwd, log_prob_terms, self.tau);
            self.q.backward(inputs, &fwd.traces[0], &d, &mut grads.policy);
        }
        if value_terms.iter().any(|t| t.weight != 0.0) {
            let n = self.n_actions();
            let mut d = vec![0.0; fwd.steps() * n];
            for t in value_terms {
                for (k, lp) in fwd.log_probs_at(t.step).iter().enumerate() {
                    d[t.step * n + k] += t.weight * lp.exp();
                }
            }
            self.q.backward(inputs, &fwd.traces[0], &d, &mut grads.value);
        }
        if grads.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite("gradient"))
        }
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            policy: self.q.new_grad(),
            value: self.q.new_grad(),
        }
    }

    fn param_groups(&self) -> Vec<&[f64]> {
        vec![self.q.params()]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.q.params_mut()]
    }

    /// `ρ += η_π·Δρ_π + η_v·Δρ_v`. The two parts are combined before the
    /// optimizer sees them, so Adam keeps a single set of moments for `ρ`.
    fn apply_update(&mut self, grads: &Gradients, opt: &mut Optimizer, lr_policy: f64, lr_value: f64) {
        if lr_policy > 0.0 {
            let mut combined = grads.policy.clone();
            combined.merge_scaled(&grads.value, lr_value / lr_policy);
            opt.step(0, self.q.params_mut(), &combined, lr_policy);
        } else {
            opt.step(0, self.q.params_mut(), &grads.value, lr_value);
        }
    }

    fn is_recurrent(&self) -> bool {
        matches!(self.q, Net::Lstm(_))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Unified,
            tau: Some(self.tau),
            nets: vec![("q".into(), self.q.spec(), self.q.params().to_vec())],
            optimizer: None,
        }
    }
}

impl TryFrom<&Checkpoint> for PolicyValueModel {
    type Error = ModelError;

    fn try_from(cp: &Checkpoint) -> Result<Self, ModelError> {
        if cp.kind != ModelKind::PolicyValue {
            return Err(ModelError::Invalid("checkpoint holds a unified model".into()));
        }
        Ok(Self {
            policy: cp.net("policy")?,
            value: cp.net("value")?,
        })
    }
}

impl TryFrom<&Checkpoint> for UnifiedQModel {
    type Error = ModelError;

    fn try_from(cp: &Checkpoint) -> Result<Self, ModelError> {
        if cp.kind != ModelKind::Unified {
            return Err(ModelError::Invalid("checkpoint holds a policy/value model".into()));
        }
        let tau = cp.tau.ok_or_else(|| ModelError::Invalid("unified checkpoint without tau".into()))?;
        Ok(Self { q: cp.net("q")?, tau })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_mdp;
    use crate::oracle::{boltzmann_policy, optimal_values, q_table};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scramble<M: ActorCritic>(m: &mut M, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in m.param_groups_mut() {
            for p in g.iter_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
        }
    }

    /// Central-difference check of `Σ w·log π + Σ u·V`.
    fn check_fd<M: ActorCritic>(m: &M, inputs: &[StepInput], lp: &[LogProbTerm], vt: &[ValueTerm]) {
        let objective = |m: &M| {
            let f = m.forward(inputs);
            lp.iter().map(|t| t.weight * f.log_prob(t.step, t.action)).sum::<f64>()
                + vt.iter().map(|t| t.weight * f.value(t.step)).sum::<f64>()
        };
        let fwd = m.forward(inputs);
        let mut g = m.zero_gradients();
        m.backward(inputs, &fwd, lp, vt, &mut g).unwrap();
        let mut total: Vec<Vec<f64>> = if m.param_groups().len() == 2 {
            vec![g.policy.to_dense(), g.value.to_dense()]
        } else {
            let mut p = g.policy.to_dense();
            for (a, b) in p.iter_mut().zip(g.value.to_dense()) {
                *a += b;
            }
            vec![p]
        };
        let eps = 1e-5;
        for gi in 0..total.len() {
            for i in 0..total[gi].len() {
                let mut plus = m.clone();
                plus.param_groups_mut()[gi][i] += eps;
                let mut minus = m.clone();
                minus.param_groups_mut()[gi][i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = std::mem::take(&mut total[gi][i]);
                let err = (fd - a).abs();
                assert!(err <= 1e-7 || err <= 1e-5 * fd.abs().max(a.abs()), "group {gi} param {i}: {fd} vs {a}");
            }
        }
    }

    fn terms() -> (Vec<LogProbTerm>, Vec<ValueTerm>) {
        (
            vec![
                LogProbTerm { step: 0, action: 1, weight: 0.7 },
                LogProbTerm { step: 2, action: 0, weight: -1.3 },
                LogProbTerm { step: 2, action: 2, weight: 0.4 },
            ],
            vec![ValueTerm { step: 0, weight: 1.1 }, ValueTerm { step: 3, weight: -0.6 }],
        )
    }

    #[test]
    fn tabular_zero_logits_uniform() {
        let m = PolicyValueModel::tabular(4, 3);
        let f = m.forward(&episode_inputs(&[1, 2], &[0]));
        for lp in f.log_probs_at(0) {
            assert!((lp.exp() - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(f.value(1), 0.0);
    }

    #[test]
    fn tabular_log_prob_gradient_is_one_hot_minus_pi() {
        let mut m = PolicyValueModel::tabular(3, 3);
        scramble(&mut m, 1);
        let inputs = episode_inputs(&[2], &[]);
        let f = m.forward(&inputs);
        let mut g = m.zero_gradients();
        m.backward(&inputs, &f, &[LogProbTerm { step: 0, action: 1, weight: 1.0 }], &[], &mut g)
            .unwrap();
        let d = g.policy.to_dense();
        for a in 0..3 {
            let expect = f64::from(a == 1) - f.log_prob(0, a).exp();
            assert!((d[6 + a] - expect).abs() < 1e-15);
        }
        assert!(d[..6].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_weights_leave_gradients_untouched() {
        let m = PolicyValueModel::tabular(3, 2);
        let inputs = episode_inputs(&[0, 1], &[1]);
        let f = m.forward(&inputs);
        let mut g = m.zero_gradients();
        m.backward(&inputs, &f, &[LogProbTerm { step: 0, action: 1, weight: 0.0 }], &[ValueTerm { step: 1, weight: 0.0 }], &mut g)
            .unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn nan_weight_is_an_error() {
        let m = PolicyValueModel::tabular(3, 2);
        let inputs = episode_inputs(&[0], &[]);
        let f = m.forward(&inputs);
        let mut g = m.zero_gradients();
        let r = m.backward(&inputs, &f, &[LogProbTerm { step: 0, action: 0, weight: f64::NAN }], &[], &mut g);
        assert!(r.is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inputs = episode_inputs(&[0, 3, 1, 2], &[2, 0, 1]);
        let (lp, vt) = terms();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        let mut tab = PolicyValueModel::tabular(4, 3);
        scramble(&mut tab, 2);
        check_fd(&tab, &inputs, &lp, &vt);

        let spec = NetSpec::Linear { n_obs: 4, n_actions: 3, out: 3 };
        let mut lin = PolicyValueModel::new(spec, spec.with_out(1), &mut rng).unwrap();
        scramble(&mut lin, 3);
        check_fd(&lin, &inputs, &lp, &vt);

        let mut rnn = PolicyValueModel::lstm(4, 3, 8, &mut rng);
        scramble(&mut rnn, 4);
        check_fd(&rnn, &inputs, &lp, &vt);

        let mut uq = UnifiedQModel::tabular(4, 3, 0.7).unwrap();
        scramble(&mut uq, 5);
        check_fd(&uq, &inputs, &lp, &vt);

        let spec = NetSpec::Lstm { n_obs: 4, n_actions: 3, hidden: 8, out: 3 };
        let mut uq_rnn = UnifiedQModel::new(spec, 0.3, &mut rng).unwrap();
        scramble(&mut uq_rnn, 6);
        check_fd(&uq_rnn, &inputs, &lp, &vt);
    }

    #[test]
    fn unified_identities() {
        let m = UnifiedQModel::tabular(1, 2, 1.0).unwrap();
        let f = m.forward(&episode_inputs(&[0], &[]));
        assert!((f.value(0) - 2f64.ln()).abs() < 1e-15);

        let mdp = random_mdp(6, 3, 0.5, 0.9, 4).unwrap();
        let tau = 0.4;
        let v = optimal_values(&mdp, tau).unwrap();
        let q = q_table(&mdp, &v);
        let m = UnifiedQModel::from_q(&q, tau).unwrap();
        let pi = boltzmann_policy(&mdp, &v, tau);
        let obs: Vec<usize> = (0..6).collect();
        let f = m.forward(&episode_inputs(&obs, &[0; 5]));
        for s in 0..6 {
            assert!((f.value(s) - v[s]).abs() < 1e-10);
            assert!((f.value(s) - m.value_of(q.row(s))).abs() < 1e-12);
            for a in 0..3 {
                assert!((f.log_prob(s, a).exp() - pi.get(s, a)).abs() < 1e-12);
                let direct = (q.get(s, a) - m.value_of(q.row(s))) / tau;
                assert!((f.log_prob(s, a) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recurrent_outputs_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = PolicyValueModel::lstm(5, 4, 6, &mut rng);
        let inputs = episode_inputs(&[1, 4, 0], &[3, 2]);
        assert_eq!(m.forward(&inputs), m.forward(&inputs));
        let mut carry = m.initial_carry();
        let lp0 = m.policy_step(&mut carry, inputs[0]);
        let sum: f64 = lp0.iter().map(|x| x.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert_eq!(lp0, m.forward(&inputs).log_probs_at(0));
    }

    #[test]
    fn unified_update_scales_parts() {
        let mut m = UnifiedQModel::tabular(1, 2, 1.0).unwrap();
        let g = Gradients {
            policy: GradBuffer::Dense(vec![1.0, 0.0]),
            value: GradBuffer::Dense(vec![0.0, 1.0]),
        };
        m.apply_update(&g, &mut Optimizer::sgd(), 0.1, 0.05);
        assert_eq!(m.q.params()[0], 0.1);
        assert!((m.q.params()[1] - 0.05).abs() < 1e-17);
    }
}
