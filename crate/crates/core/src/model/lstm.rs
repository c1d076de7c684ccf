//! Single-layer LSTM with a linear read-out and hand-written BPTT.
//!
//! Inputs are one-hot observation ⊕ one-hot previous action (with an extra
//! "none" slot for the first step), so the input projection reduces to
//! adding two weight rows. Gate order is input, forget, cell, output.

use rand::Rng;

use super::net::{NetSpec, StepInput};

pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNet {
    n_obs: usize,
    n_actions: usize,
    hidden: usize,
    out: usize,
    params: Vec<f64>,
}

/// Per-step activations saved for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    /// Post-nonlinearity gates, `T × 4H`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmNet {
    pub fn init<R: Rng + ?Sized>(n_obs: usize, n_actions: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let mut net = Self {
            n_obs,
            n_actions,
            hidden,
            out,
            params: Vec::new(),
        };
        let n = net.by_offset() + out;
        net.params = (0..n).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect();
        let (b, h) = (net.b_offset(), hidden);
        for r in 0..4 * h {
            net.params[b + r] = if (h..2 * h).contains(&r) { FORGET_BIAS } else { 0.0 };
        }
        let by = net.by_offset();
        net.params[by..].iter_mut().for_each(|x| *x = 0.0);
        net
    }

    pub fn spec(&self) -> NetSpec {
        NetSpec::Lstm {
            n_obs: self.n_obs,
            n_actions: self.n_actions,
            hidden: self.hidden,
            out: self.out,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_inputs(&self) -> usize {
        self.n_obs + self.n_actions + 1
    }

    fn wh_offset(&self) -> usize {
        self.n_inputs() * 4 * self.hidden
    }

    fn b_offset(&self) -> usize {
        self.wh_offset() + self.hidden * 4 * self.hidden
    }

    fn wy_offset(&self) -> usize {
        self.b_offset() + 4 * self.hidden
    }

    fn by_offset(&self) -> usize {
        self.wy_offset() + self.hidden * self.out
    }

    fn active(&self, input: StepInput) -> [usize; 2] {
        assert!(input.obs < self.n_obs, "observation {} out of range", input.obs);
        [input.obs, self.n_obs + input.prev_action.unwrap_or(self.n_actions)]
    }

    pub fn initial_carry(&self) -> Vec<f64> {
        vec![0.0; 2 * self.hidden]
    }

    /// Computes activated gates into `gates` (len 4H) from the input and `h_prev`.
    fn gates(&self, input: StepInput, h_prev: &[f64], gates: &mut [f64]) {
        let h4 = 4 * self.hidden;
        let p = &self.params;
        let b = self.b_offset();
        gates.copy_from_slice(&p[b..b + h4]);
        for j in self.active(input) {
            for (z, w) in gates.iter_mut().zip(&p[j * h4..(j + 1) * h4]) {
                *z += w;
            }
        }
        let wh = self.wh_offset();
        for (k, &hk) in h_prev.iter().enumerate() {
            if hk != 0.0 {
                let row = &p[wh + k * h4..wh + (k + 1) * h4];
                for (z, w) in gates.iter_mut().zip(row) {
                    *z += hk * w;
                }
            }
        }
        let h = self.hidden;
        for (r, z) in gates.iter_mut().enumerate() {
            *z = if (2 * h..3 * h).contains(&r) { z.tanh() } else { sigmoid(*z) };
        }
    }

    fn readout(&self, h: &[f64], y: &mut [f64]) {
        let (wy, by) = (self.wy_offset(), self.by_offset());
        y.copy_from_slice(&self.params[by..by + self.out]);
        for (k, &hk) in h.iter().enumerate() {
            let row = &self.params[wy + k * self.out..wy + (k + 1) * self.out];
            for (yo, w) in y.iter_mut().zip(row) {
                *yo += hk * w;
            }
        }
    }

    pub fn step(&self, carry: &mut Vec<f64>, input: StepInput, out: &mut [f64]) {
        let hd = self.hidden;
        let mut g = vec![0.0; 4 * hd];
        self.gates(input, &carry[..hd], &mut g);
        let (h, c) = carry.split_at_mut(hd);
        for k in 0..hd {
            c[k] = g[hd + k] * c[k] + g[k] * g[2 * hd + k];
            h[k] = g[3 * hd + k] * c[k].tanh();
        }
        self.readout(h, out);
    }

    pub fn forward(&self, inputs: &[StepInput]) -> (Vec<f64>, LstmTrace) {
        let (hd, t_len) = (self.hidden, inputs.len());
        let mut tr = LstmTrace {
            gates: vec![0.0; t_len * 4 * hd],
            c: vec![0.0; t_len * hd],
            tanh_c: vec![0.0; t_len * hd],
            h: vec![0.0; t_len * hd],
        };
        let mut y = vec![0.0; t_len * self.out];
        let zeros = vec![0.0; hd];
        for (t, &input) in inputs.iter().enumerate() {
            let (h_prev, c_prev) = if t == 0 {
                (zeros.as_slice(), zeros.as_slice())
            } else {
                (&tr.h[(t - 1) * hd..t * hd], &tr.c[(t - 1) * hd..t * hd])
            };
            let mut g = vec![0.0; 4 * hd];
            self.gates(input, h_prev, &mut g);
            let mut c = vec![0.0; hd];
            let mut tc = vec![0.0; hd];
            let mut h = vec![0.0; hd];
            for k in 0..hd {
                c[k] = g[hd + k] * c_prev[k] + g[k] * g[2 * hd + k];
                tc[k] = c[k].tanh();
                h[k] = g[3 * hd + k] * tc[k];
            }
            self.readout(&h, &mut y[t * self.out..(t + 1) * self.out]);
            tr.gates[t * 4 * hd..(t + 1) * 4 * hd].copy_from_slice(&g);
            tr.c[t * hd..(t + 1) * hd].copy_from_slice(&c);
            tr.tanh_c[t * hd..(t + 1) * hd].copy_from_slice(&tc);
            tr.h[t * hd..(t + 1) * hd].copy_from_slice(&h);
        }
        (y, tr)
    }

    /// Backpropagation through time; `grad` is parameter-shaped.
    pub fn backward(&self, inputs: &[StepInput], tr: &LstmTrace, d_out: &[f64], grad: &mut [f64]) {
        let (hd, out, h4) = (self.hidden, self.out, 4 * self.hidden);
        let p = &self.params;
        let (wh, b, wy, by) = (self.wh_offset(), self.b_offset(), self.wy_offset(), self.by_offset());
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut dz = vec![0.0; h4];
        let zeros = vec![0.0; hd];
        for t in (0..inputs.len()).rev() {
            let dy = &d_out[t * out..(t + 1) * out];
            let h = &tr.h[t * hd..(t + 1) * hd];
            let mut dh = dh_next.clone();
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[by + o] += d;
                for k in 0..hd {
                    grad[wy + k * out + o] += d * h[k];
                    dh[k] += d * p[wy + k * out + o];
                }
            }
            let g = &tr.gates[t * h4..(t + 1) * h4];
            let tc = &tr.tanh_c[t * hd..(t + 1) * hd];
            let (h_prev, c_prev) = if t == 0 {
                (zeros.as_slice(), zeros.as_slice())
            } else {
                (&tr.h[(t - 1) * hd..t * hd], &tr.c[(t - 1) * hd..t * hd])
            };
            for k in 0..hd {
                let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let dc = dh[k] * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
                dz[k] = dc * gg * i * (1.0 - i);
                dz[hd + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * hd + k] = dc * i * (1.0 - gg * gg);
                dz[3 * hd + k] = dh[k] * tc[k] * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            for j in self.active(inputs[t]) {
                for (gr, d) in grad[j * h4..(j + 1) * h4].iter_mut().zip(&dz) {
                    *gr += d;
                }
            }
            for (gr, d) in grad[b..b + h4].iter_mut().zip(&dz) {
                *gr += d;
            }
            for k in 0..hd {
                let row = wh + k * h4;
                let mut acc = 0.0;
                for r in 0..h4 {
                    grad[row + r] += h_prev[k] * dz[r];
                    acc += p[row + r] * dz[r];
                }
                dh_next[k] = acc;
            }
        }
    }
}
