//! Gradient-ascent optimizers.
//!
//! Updates follow the sign convention of the PCL update rules: the stored
//! gradients are ascent directions and parameters move by `+lr·Δ`.

use std::fmt;
use std::str::FromStr;

use super::grad::GradBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups: Vec::new(),
        }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    /// Applies one update to parameter group `group`.
    pub fn step(&mut self, group: usize, params: &mut [f64], grad: &GradBuffer, lr: f64) {
        debug_assert!(lr >= 0.0);
        assert_eq!(params.len(), grad.len(), "gradient shape mismatch");
        match self.kind {
            OptimizerKind::Sgd => grad.for_each(|i, g| params[i] += lr * g),
            OptimizerKind::Adam => {
                if self.groups.len() <= group {
                    self.groups.resize_with(group + 1, AdamState::default);
                }
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let st = &mut self.groups[group];
                if st.m.len() != params.len() {
                    st.m = vec![0.0; params.len()];
                    st.v = vec![0.0; params.len()];
                    st.t = 0;
                }
                st.t += 1;
                let c1 = 1.0 - b1.powi(st.t as i32);
                let c2 = 1.0 - b2.powi(st.t as i32);
                let g = grad.to_dense();
                for i in 0..params.len() {
                    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                    params[i] += lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_scalar_step() {
        let mut p = [0.0];
        Optimizer::sgd().step(0, &mut p, &GradBuffer::Dense(vec![1.0]), 0.1);
        assert_eq!(p[0], 0.1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for mut opt in [Optimizer::sgd(), Optimizer::adam()] {
            let mut p = [0.3, -1.2];
            opt.step(0, &mut p, &GradBuffer::dense(2), 0.5);
            assert_eq!(p, [0.3, -1.2]);
        }
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        for scale in [1e-6, 1.0, 1e6] {
            let mut opt = Optimizer::adam();
            let mut p = [0.0, 0.0];
            opt.step(0, &mut p, &GradBuffer::Dense(vec![3.0 * scale, -0.5 * scale]), 0.01);
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expect = |g: f64| 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expect(3.0 * scale)).abs() < 1e-15);
            assert!((p[1] - expect(-0.5 * scale)).abs() < 1e-15);
            if scale >= 1.0 {
                assert!((p[0] - 0.01).abs() < 1e-9 && (p[1] + 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parse_kind() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
