//! Text checkpoints: architecture, parameters and optimizer state.
//!
//! ```text
//! pcl-checkpoint 1
//! model policy_value
//! net policy lstm 4 3 32 3
//! params policy 5 1e-1 -2.5e-2 ...
//! optimizer adam 9e-1 9.99e-1 1e-8
//! adam 0 12 <n> m... v...
//! end
//! ```
//!
//! Floats are written in shortest round-trip exponent form, so a save/load
//! cycle reproduces every bit.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{Net, NetSpec};
use super::optim::{AdamState, Optimizer, OptimizerKind};
use super::ModelError;

const MAGIC: &str = "pcl-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PolicyValue,
    Unified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tau: Option<f64>,
    /// `(name, architecture, parameters)` per network.
    pub nets: Vec<(String, NetSpec, Vec<f64>)>,
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn with_optimizer(mut self, opt: &Optimizer) -> Self {
        self.optimizer = Some(opt.clone());
        self
    }

    /// Rebuilds the named network.
    pub fn net(&self, name: &str) -> Result<Net, ModelError> {
        let (_, spec, params) = self
            .nets
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| ModelError::Invalid(format!("checkpoint has no `{name}` net")))?;
        let mut net = spec.build(&mut ChaCha8Rng::seed_from_u64(0));
        if net.params().len() != params.len() {
            return Err(ModelError::Invalid(format!(
                "`{name}` expects {} parameters, checkpoint has {}",
                net.params().len(),
                params.len()
            )));
        }
        net.set_params(params);
        Ok(net)
    }
}

fn floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!(" {x:e}")).collect()
}

fn spec_fields(spec: &NetSpec) -> String {
    match *spec {
        NetSpec::Tabular { n_obs, out } => format!("tabular {n_obs} {out}"),
        NetSpec::Linear { n_obs, n_actions, out } => format!("linear {n_obs} {n_actions} {out}"),
        NetSpec::Lstm { n_obs, n_actions, hidden, out } => format!("lstm {n_obs} {n_actions} {hidden} {out}"),
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, cp: &Checkpoint) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    match cp.kind {
        ModelKind::PolicyValue => writeln!(w, "model policy_value")?,
        ModelKind::Unified => writeln!(w, "model unified {:e}", cp.tau.unwrap_or(f64::NAN))?,
    }
    for (name, spec, _) in &cp.nets {
        writeln!(w, "net {name} {}", spec_fields(spec))?;
    }
    for (name, _, params) in &cp.nets {
        writeln!(w, "params {name} {}{}", params.len(), floats(params))?;
    }
    if let Some(opt) = &cp.optimizer {
        writeln!(w, "optimizer {} {:e} {:e} {:e}", opt.kind, opt.beta1, opt.beta2, opt.eps)?;
        for (i, g) in opt.groups.iter().enumerate() {
            writeln!(w, "adam {i} {} {}{}{}", g.t, g.m.len(), floats(&g.m), floats(&g.v))?;
        }
    }
    writeln!(w, "end")
}

struct Line<'a> {
    no: usize,
    fields: Vec<&'a str>,
}

impl Line<'_> {
    fn err(&self, msg: impl Into<String>) -> ModelError {
        ModelError::Checkpoint {
            line: self.no,
            msg: msg.into(),
        }
    }

    fn get(&self, i: usize) -> Result<&str, ModelError> {
        self.fields.get(i).copied().ok_or_else(|| self.err("line too short"))
    }

    fn parse<T: std::str::FromStr>(&self, i: usize) -> Result<T, ModelError> {
        let f = self.get(i)?;
        f.parse().map_err(|_| self.err(format!("cannot parse `{f}`")))
    }

    fn floats(&self, from: usize, n: usize) -> Result<Vec<f64>, ModelError> {
        if self.fields.len() < from + n {
            return Err(self.err(format!("expected {n} values")));
        }
        (from..from + n).map(|i| self.parse(i)).collect()
    }
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint, ModelError> {
    let text: Vec<String> = input
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| ModelError::Checkpoint { line: 0, msg: e.to_string() })?;
    let mut lines = text.iter().enumerate().map(|(i, l)| Line {
        no: i + 1,
        fields: l.split_whitespace().collect(),
    });
    let first = lines.next().ok_or(ModelError::Checkpoint { line: 1, msg: "empty checkpoint".into() })?;
    if first.fields.join(" ") != MAGIC {
        return Err(first.err("not a checkpoint file"));
    }
    let mut kind = None;
    let mut tau = None;
    let mut specs: Vec<(String, NetSpec)> = Vec::new();
    let mut nets = Vec::new();
    let mut optimizer: Option<Optimizer> = None;
    let mut ended = false;
    for line in lines {
        if line.fields.is_empty() {
            continue;
        }
        if ended {
            return Err(line.err("content after `end`"));
        }
        match line.get(0)? {
            "model" => match line.get(1)? {
                "policy_value" => kind = Some(ModelKind::PolicyValue),
                "unified" => {
                    kind = Some(ModelKind::Unified);
                    tau = Some(line.parse(2)?);
                }
                other => return Err(line.err(format!("unknown model kind `{other}`"))),
            },
            "net" => {
                let name = line.get(1)?.to_string();
                let spec = match line.get(2)? {
                    "tabular" => NetSpec::Tabular { n_obs: line.parse(3)?, out: line.parse(4)? },
                    "linear" => NetSpec::Linear {
                        n_obs: line.parse(3)?,
                        n_actions: line.parse(4)?,
                        out: line.parse(5)?,
                    },
                    "lstm" => NetSpec::Lstm {
                        n_obs: line.parse(3)?,
                        n_actions: line.parse(4)?,
                        hidden: line.parse(5)?,
                        out: line.parse(6)?,
                    },
                    other => return Err(line.err(format!("unknown architecture `{other}`"))),
                };
                specs.push((name, spec));
            }
            "params" => {
                let name = line.get(1)?;
                let spec = specs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, s)| *s)
                    .ok_or_else(|| line.err(format!("params for undeclared net `{name}`")))?;
                let n: usize = line.parse(2)?;
                nets.push((name.to_string(), spec, line.floats(3, n)?));
            }
            "optimizer" => {
                let kind: OptimizerKind = line.get(1)?.parse().map_err(|e: String| line.err(e))?;
                let mut opt = Optimizer::new(kind);
                opt.beta1 = line.parse(2)?;
                opt.beta2 = line.parse(3)?;
                opt.eps = line.parse(4)?;
                optimizer = Some(opt);
            }
            "adam" => {
                let opt = optimizer.as_mut().ok_or_else(|| line.err("adam state before optimizer line"))?;
                let group: usize = line.parse(1)?;
                let t: u64 = line.parse(2)?;
                let n: usize = line.parse(3)?;
                if group != opt.groups.len() {
                    return Err(line.err("adam groups out of order"));
                }
                opt.groups.push(AdamState {
                    t,
                    m: line.floats(4, n)?,
                    v: line.floats(4 + n, n)?,
                });
            }
            "end" => ended = true,
            other => return Err(line.err(format!("unknown record `{other}`"))),
        }
    }
    if !ended {
        return Err(ModelError::Checkpoint {
            line: text.len(),
            msg: "truncated checkpoint (no `end`)".into(),
        });
    }
    let kind = kind.ok_or(ModelError::Checkpoint { line: 0, msg: "missing model line".into() })?;
    if nets.len() != specs.len() {
        return Err(ModelError::Checkpoint { line: 0, msg: "net without params".into() });
    }
    Ok(Checkpoint { kind, tau, nets, optimizer })
}
