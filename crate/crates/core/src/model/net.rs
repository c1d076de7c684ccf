//! Function approximators mapping an observation sequence to per-step outputs.

use rand::Rng;

use super::grad::GradBuffer;
use super::lstm::{LstmNet, LstmTrace};

/// What the network sees at one step: the current observation and the
/// previous action (`None` at the first step).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInput {
    pub obs: usize,
    pub prev_action: Option<usize>,
}

/// Builds the step inputs for an episode with `observations.len() ==
/// actions.len() + 1`.
pub fn episode_inputs(observations: &[usize], actions: &[usize]) -> Vec<StepInput> {
    observations
        .iter()
        .enumerate()
        .map(|(t, &obs)| StepInput {
            obs,
            prev_action: if t == 0 { None } else { actions.get(t - 1).copied() },
        })
        .collect()
}

/// Architecture descriptor; enough to rebuild a network of the same shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetSpec {
    /// One output row per observation.
    Tabular { n_obs: usize, out: usize },
    /// Affine map of one-hot(observation) ⊕ one-hot(previous action).
    Linear { n_obs: usize, n_actions: usize, out: usize },
    Lstm { n_obs: usize, n_actions: usize, hidden: usize, out: usize },
}

impl NetSpec {
    pub fn out_dim(&self) -> usize {
        match *self {
            NetSpec::Tabular { out, .. } | NetSpec::Linear { out, .. } | NetSpec::Lstm { out, .. } => out,
        }
    }

    pub fn with_out(self, out: usize) -> Self {
        match self {
            NetSpec::Tabular { n_obs, .. } => NetSpec::Tabular { n_obs, out },
            NetSpec::Linear { n_obs, n_actions, .. } => NetSpec::Linear { n_obs, n_actions, out },
            NetSpec::Lstm { n_obs, n_actions, hidden, .. } => NetSpec::Lstm { n_obs, n_actions, hidden, out },
        }
    }

    /// Tabular and linear nets start at zero; recurrent nets draw their
    /// weights from `rng`.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Net {
        match *self {
            NetSpec::Tabular { n_obs, out } => Net::Tabular(TabularNet::zeros(n_obs, out)),
            NetSpec::Linear { n_obs, n_actions, out } => Net::Linear(LinearNet::zeros(n_obs, n_actions, out)),
            NetSpec::Lstm { n_obs, n_actions, hidden, out } => {
                Net::Lstm(LstmNet::init(n_obs, n_actions, hidden, out, rng))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularNet {
    n_obs: usize,
    out: usize,
    params: Vec<f64>,
}

impl TabularNet {
    pub fn zeros(n_obs: usize, out: usize) -> Self {
        Self {
            n_obs,
            out,
            params: vec![0.0; n_obs * out],
        }
    }

    pub fn row(&self, obs: usize) -> &[f64] {
        &self.params[obs * self.out..(obs + 1) * self.out]
    }

    pub fn row_mut(&mut self, obs: usize) -> &mut [f64] {
        &mut self.params[obs * self.out..(obs + 1) * self.out]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearNet {
    n_obs: usize,
    n_actions: usize,
    out: usize,
    /// Input-major weights `(n_obs + n_actions + 1) × out`, then `out` biases.
    params: Vec<f64>,
}

impl LinearNet {
    pub fn zeros(n_obs: usize, n_actions: usize, out: usize) -> Self {
        let inputs = n_obs + n_actions + 1;
        Self {
            n_obs,
            n_actions,
            out,
            params: vec![0.0; (inputs + 1) * out],
        }
    }

    fn active(&self, input: StepInput) -> [usize; 2] {
        [input.obs, self.n_obs + input.prev_action.unwrap_or(self.n_actions)]
    }

    fn bias_offset(&self) -> usize {
        (self.n_obs + self.n_actions + 1) * self.out
    }

    fn eval(&self, input: StepInput, y: &mut [f64]) {
        let b = self.bias_offset();
        y.copy_from_slice(&self.params[b..b + self.out]);
        for j in self.active(input) {
            for (k, yk) in y.iter_mut().enumerate() {
                *yk += self.params[j * self.out + k];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    Tabular(TabularNet),
    Linear(LinearNet),
    Lstm(LstmNet),
}

/// Intermediate values kept by [`Net::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum NetTrace {
    Stateless,
    Lstm(LstmTrace),
}

impl Net {
    pub fn spec(&self) -> NetSpec {
        match self {
            Net::Tabular(n) => NetSpec::Tabular { n_obs: n.n_obs, out: n.out },
            Net::Linear(n) => NetSpec::Linear {
                n_obs: n.n_obs,
                n_actions: n.n_actions,
                out: n.out,
            },
            Net::Lstm(n) => n.spec(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.spec().out_dim()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Net::Tabular(n) => &n.params,
            Net::Linear(n) => &n.params,
            Net::Lstm(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Net::Tabular(n) => &mut n.params,
            Net::Linear(n) => &mut n.params,
            Net::Lstm(n) => n.params_mut(),
        }
    }

    /// A zero gradient of the right shape; tabular nets use sparse storage.
    pub fn new_grad(&self) -> GradBuffer {
        match self {
            Net::Tabular(n) => GradBuffer::sparse(n.params.len()),
            _ => GradBuffer::dense(self.params().len()),
        }
    }

    /// Recurrent state for incremental evaluation; empty for stateless nets.
    pub fn initial_carry(&self) -> Vec<f64> {
        match self {
            Net::Lstm(n) => n.initial_carry(),
            _ => Vec::new(),
        }
    }

    /// Evaluates one step, advancing `carry`.
    pub fn step(&self, carry: &mut Vec<f64>, input: StepInput, out: &mut [f64]) {
        match self {
            Net::Tabular(n) => out.copy_from_slice(n.row(input.obs)),
            Net::Linear(n) => n.eval(input, out),
            Net::Lstm(n) => n.step(carry, input, out),
        }
    }

    /// Outputs for every step, row-major `inputs.len() × out_dim`.
    pub fn forward(&self, inputs: &[StepInput]) -> (Vec<f64>, NetTrace) {
        match self {
            Net::Lstm(n) => {
                let (y, trace) = n.forward(inputs);
                (y, NetTrace::Lstm(trace))
            }
            _ => {
                let out = self.out_dim();
                let mut y = vec![0.0; inputs.len() * out];
                let mut carry = Vec::new();
                for (t, &input) in inputs.iter().enumerate() {
                    self.step(&mut carry, input, &mut y[t * out..(t + 1) * out]);
                }
                (y, NetTrace::Stateless)
            }
        }
    }

    /// Accumulates `Σ_t d_out[t]·∂y_t/∂params` into `grad`.
    pub fn backward(&self, inputs: &[StepInput], trace: &NetTrace, d_out: &[f64], grad: &mut GradBuffer) {
        let out = self.out_dim();
        match (self, trace) {
            (Net::Tabular(n), _) => {
                for (t, input) in inputs.iter().enumerate() {
                    for k in 0..out {
                        let d = d_out[t * out + k];
                        if d != 0.0 {
                            grad.add(input.obs * n.out + k, d);
                        }
                    }
                }
            }
            (Net::Linear(n), _) => {
                let b = n.bias_offset();
                for (t, &input) in inputs.iter().enumerate() {
                    let dy = &d_out[t * out..(t + 1) * out];
                    if dy.iter().all(|d| *d == 0.0) {
                        continue;
                    }
                    for j in n.active(input) {
                        for (k, d) in dy.iter().enumerate() {
                            grad.add(j * out + k, *d);
                        }
                    }
                    for (k, d) in dy.iter().enumerate() {
                        grad.add(b + k, *d);
                    }
                }
            }
            (Net::Lstm(n), NetTrace::Lstm(tr)) => n.backward(inputs, tr, d_out, grad.dense_mut()),
            (Net::Lstm(_), NetTrace::Stateless) => panic!("recurrent backward needs a recurrent trace"),
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularNet> {
        match self {
            Net::Tabular(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_tabular_mut(&mut self) -> Option<&mut TabularNet> {
        match self {
            Net::Tabular(n) => Some(n),
            _ => None,
        }
    }

    /// Replaces all parameters; the length must match.
    pub fn set_params(&mut self, values: &[f64]) {
        self.params_mut().copy_from_slice(values);
    }
}
