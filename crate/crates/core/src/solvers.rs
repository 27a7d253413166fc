//! Deterministic few-step samplers for the probability-flow ODE
//! `dx/dt = (x - D(x, t)) / t`.
//!
//! Every supported update is linear in the current denoiser output and a
//! short history of detached tensors, so a step is represented by a
//! [`Plan`] of scalar coefficients. The same plan drives plain tensor
//! sampling and the on-tape step used during distillation.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::denoiser::Denoiser;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    /// First-order Euler step in `t` (deterministic DDIM).
    Ddim,
    /// Improved pseudo-numerical multistep (Adams-Bashforth up to order 4).
    Ipndm,
    /// Third-order multistep DPM-Solver++ in log-SNR time.
    DpmPp3m,
}

impl SolverKind {
    /// Number of past entries the solver keeps.
    pub fn history_len(self) -> usize {
        match self {
            Self::Ddim => 0,
            Self::Ipndm => 3,
            Self::DpmPp3m => 2,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ddim => "ddim",
            Self::Ipndm => "ipndm",
            Self::DpmPp3m => "dpmpp3m",
        })
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" | "euler" => Ok(Self::Ddim),
            "ipndm" => Ok(Self::Ipndm),
            "dpmpp3m" | "dpm++3m" | "dpmpp-3m" => Ok(Self::DpmPp3m),
            other => Err(invalid(format!("unknown solver `{other}`"))),
        }
    }
}

/// Something that maps `(x, t)` to a clean estimate. `step` is the index of
/// the solver step being taken, which lets step-specific conditioning be
/// looked up.
pub trait Model {
    fn denoise(&self, x: &Tensor, t: f64, step: usize) -> Result<Tensor>;
}

impl<F> Model for F
where
    F: Fn(&Tensor, f64, usize) -> Result<Tensor>,
{
    fn denoise(&self, x: &Tensor, t: f64, step: usize) -> Result<Tensor> {
        self(x, t, step)
    }
}

impl Model for Denoiser {
    fn denoise(&self, x: &Tensor, t: f64, _step: usize) -> Result<Tensor> {
        self.forward(x, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    t: f64,
}

/// Detached multistep history, most recent entry first.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    kind: SolverKind,
    history: VecDeque<Entry>,
}

/// `x_next = cx * x + cd * D + sum_j ch[j] * history[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub cx: f64,
    pub cd: f64,
    pub ch: Vec<f64>,
}

const AB: [&[f64]; 4] = [
    &[1.0],
    &[1.5, -0.5],
    &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
];

impl SolverState {
    pub fn new(kind: SolverKind) -> Self {
        Self {
            kind,
            history: VecDeque::new(),
        }
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Coefficients for the step from `t` to `t_next`.
    pub fn plan(&self, t: f64, t_next: f64) -> Result<Plan> {
        if !(t > t_next && t_next > 0.0 && t.is_finite()) {
            return Err(invalid(format!("step must go from t to a smaller positive t, got {t} -> {t_next}")));
        }
        Ok(match self.kind {
            SolverKind::Ddim => {
                let r = t_next / t;
                Plan { cx: r, cd: 1.0 - r, ch: vec![] }
            }
            SolverKind::Ipndm => {
                let c = AB[self.history.len().min(3)];
                let dt = t_next - t;
                Plan {
                    cx: 1.0 + dt * c[0] / t,
                    cd: -dt * c[0] / t,
                    ch: c[1..].iter().map(|v| dt * v).collect(),
                }
            }
            SolverKind::DpmPp3m => self.dpm_plan(t, t_next),
        })
    }

    fn dpm_plan(&self, t: f64, t_next: f64) -> Plan {
        let h = (t / t_next).ln();
        let e = t_next / t;
        let base = -(-h).exp_m1();
        let phi2 = (-h).exp_m1() / h + 1.0;
        match self.history.len() {
            0 => Plan { cx: e, cd: base, ch: vec![] },
            1 => {
                let r = (self.history[0].t / t).ln() / h;
                Plan {
                    cx: e,
                    cd: base + phi2 / r,
                    ch: vec![-phi2 / r],
                }
            }
            _ => {
                let h1 = (self.history[0].t / t).ln();
                let h2 = (self.history[1].t / self.history[0].t).ln();
                let (r0, r1) = (h1 / h, h2 / h);
                let phi3 = phi2 / h - 0.5;
                let w = r0 / (r0 + r1);
                let q = 1.0 / (r0 + r1);
                let a = phi2 * (1.0 + w) - phi3 * q;
                let b = -phi2 * w + phi3 * q;
                Plan {
                    cx: e,
                    cd: base + a / r0,
                    ch: vec![-a / r0 + b / r1, -b / r1],
                }
            }
        }
    }

    /// Records the denoiser output of the step just planned at `(x, t)`.
    pub fn push(&mut self, x: &Tensor, d: &Tensor, t: f64) -> Result<()> {
        let value = match self.kind {
            SolverKind::Ddim => return Ok(()),
            SolverKind::Ipndm => {
                let mut v = x.sub(d)?;
                v.data_mut().iter_mut().for_each(|a| *a /= t);
                v
            }
            SolverKind::DpmPp3m => d.clone(),
        };
        self.history.push_front(Entry { value, t });
        self.history.truncate(self.kind.history_len());
        Ok(())
    }

    /// History restricted to a subset of batch rows.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let history = self
            .history
            .iter()
            .map(|e| {
                Ok(Entry {
                    value: e.value.select_rows(idx)?,
                    t: e.t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: self.kind,
            history,
        })
    }

    pub fn apply(&self, plan: &Plan, x: &Tensor, d: &Tensor) -> Result<Tensor> {
        if x.shape() != d.shape() {
            return Err(Error::Shape {
                op: "solver step",
                lhs: x.shape().to_vec(),
                rhs: d.shape().to_vec(),
            });
        }
        let mut out: Vec<f64> = x
            .data()
            .iter()
            .zip(d.data())
            .map(|(a, b)| plan.cx * a + plan.cd * b)
            .collect();
        for (c, e) in plan.ch.iter().zip(&self.history) {
            if e.value.shape() != x.shape() {
                return Err(invalid("history batch does not match the state"));
            }
            for (o, h) in out.iter_mut().zip(e.value.data()) {
                *o += c * h;
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// The same update with `d` living on a tape.
    pub fn apply_on_tape(&self, tape: &mut Tape, plan: &Plan, x: &Tensor, d: Var) -> Result<Var> {
        let mut rest: Vec<f64> = x.data().iter().map(|a| plan.cx * a).collect();
        for (c, e) in plan.ch.iter().zip(&self.history) {
            if e.value.shape() != x.shape() {
                return Err(invalid("history batch does not match the state"));
            }
            for (o, h) in rest.iter_mut().zip(e.value.data()) {
                *o += c * h;
            }
        }
        let rest = tape.constant(Tensor::new(x.shape().to_vec(), rest)?);
        let scaled = tape.scale(d, plan.cd)?;
        tape.add(scaled, rest)
    }
}

/// One solver step: evaluates the model, advances `x`, and updates the
/// history.
pub fn step(
    model: &dyn Model,
    state: &mut SolverState,
    x: &Tensor,
    t: f64,
    t_next: f64,
    index: usize,
) -> Result<Tensor> {
    let plan = state.plan(t, t_next)?;
    let d = model.denoise(x, t, index)?;
    let next = state.apply(&plan, x, &d)?;
    state.push(x, &d, t)?;
    Ok(next)
}

pub fn ddim_step(model: &dyn Model, x: &Tensor, t: f64, t_next: f64, index: usize) -> Result<Tensor> {
    step(model, &mut SolverState::new(SolverKind::Ddim), x, t, t_next, index)
}

pub fn ipndm_step(
    model: &dyn Model,
    state: &mut SolverState,
    x: &Tensor,
    t: f64,
    t_next: f64,
    index: usize,
) -> Result<Tensor> {
    debug_assert_eq!(state.kind, SolverKind::Ipndm);
    step(model, state, x, t, t_next, index)
}

pub fn dpmpp3m_step(
    model: &dyn Model,
    state: &mut SolverState,
    x: &Tensor,
    t: f64,
    t_next: f64,
    index: usize,
) -> Result<Tensor> {
    debug_assert_eq!(state.kind, SolverKind::DpmPp3m);
    step(model, state, x, t, t_next, index)
}

/// States along a sampling run; `states[i]` is the state at `times[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trajectory is never empty")
    }

    /// Keeps only the states at indices `0, k, 2k, ...`.
    pub fn subsample(&self, k: usize) -> Result<Self> {
        if k == 0 || (self.times.len() - 1) % k != 0 {
            return Err(invalid(format!(
                "cannot subsample {} intervals by {k}",
                self.times.len() - 1
            )));
        }
        Ok(Self {
            times: self.times.iter().step_by(k).copied().collect(),
            states: self.states.iter().step_by(k).cloned().collect(),
        })
    }
}

/// Integrates from `x_t` at `schedule.times()[0]` to the last time.
pub fn sample(
    model: &dyn Model,
    kind: SolverKind,
    schedule: &Schedule,
    x_t: &Tensor,
) -> Result<Trajectory> {
    let times = schedule.times();
    let mut state = SolverState::new(kind);
    let mut states = Vec::with_capacity(times.len());
    states.push(x_t.clone());
    for i in 0..schedule.intervals() {
        let next = step(model, &mut state, &states[i], times[i], times[i + 1], i)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("state after step {i}")));
        }
        states.push(next);
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
    })
}

/// Initial states `sigma_max * z` for the given seed indices, one row per
/// index. A row depends only on `(global, index)`, so subsets of a seed
/// range reproduce the matching rows of the full set.
pub fn latents(global: u64, indices: &[u64], dim: usize, sigma_max: f64) -> Result<Tensor> {
    if indices.is_empty() || dim == 0 {
        return Err(invalid("need at least one latent of positive dimension"));
    }
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        let mut r = rng::stream(global, "latent", i);
        for _ in 0..dim {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push(sigma_max * z);
        }
    }
    Tensor::matrix(indices.len(), dim, data)
}

/// Latents for seed indices `0..n`.
pub fn latent_range(global: u64, n: usize, dim: usize, sigma_max: f64) -> Result<Tensor> {
    let idx: Vec<u64> = (0..n as u64).collect();
    latents(global, &idx, dim, sigma_max)
}
