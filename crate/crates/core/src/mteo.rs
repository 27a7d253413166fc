//! Multi-layer time embedding optimization.
//!
//! A bank holds, for every solver step of a student schedule, replacement
//! conditioning for the frozen backbone. Training is stage-wise: step `i`
//! is fitted so that one solver step from the student's own state lands on
//! the teacher state, then every training trajectory is advanced with the
//! finalized parameters before step `i + 1` starts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{adam_step, AdamState, Tape, Tensor, Var};
use crate::denoiser::{Denoiser, FilmParams, LayerCond, LayerOverride};
use crate::error::{invalid, Error, Result};
use crate::fingerprint;
use crate::rng;
use crate::schedule::Schedule;
use crate::solvers::{sample, step, Model, SolverKind, SolverState, Trajectory};
use crate::teacher::TeacherSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One embedding per step and layer.
    Multi,
    /// One embedding per step shared by all layers.
    Single,
    /// Direct per-layer `(alpha, beta)` per step.
    Deep,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Multi => "multi",
            Self::Single => "single",
            Self::Deep => "deep",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" | "multi-layer" => Ok(Self::Multi),
            "single" => Ok(Self::Single),
            "deep" => Ok(Self::Deep),
            other => Err(invalid(format!("unknown bank variant `{other}`"))),
        }
    }
}

/// Trainable state of one solver step, stored as a flat list of tensors:
/// `L` embeddings (multi), one embedding (single), or `alpha_0, beta_0,
/// alpha_1, ...` (deep).
#[derive(Clone, Debug, PartialEq)]
pub struct StepParams(pub Vec<Tensor>);

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub variant: Variant,
    pub steps: Vec<StepParams>,
    pub n_layers: usize,
    pub schedule_fp: String,
    pub backbone_fp: String,
}

/// Builds a bank whose every entry reproduces the vanilla conditioning at
/// the step's time.
pub fn init_bank(net: &Denoiser, schedule: &Schedule, variant: Variant) -> Result<EmbeddingBank> {
    let l = net.n_layers();
    let steps = schedule.times()[..schedule.intervals()]
        .iter()
        .map(|&t| {
            let e = net.embed_time(t)?;
            Ok(StepParams(match variant {
                Variant::Multi => vec![e; l],
                Variant::Single => vec![e],
                Variant::Deep => {
                    let mut v = Vec::with_capacity(2 * l);
                    for layer in 0..l {
                        let p = net.film_params(layer, &e)?;
                        v.push(p.alpha);
                        v.push(p.beta);
                    }
                    v
                }
            }))
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingBank {
        variant,
        steps,
        n_layers: l,
        schedule_fp: schedule.fingerprint(),
        backbone_fp: net.fingerprint(),
    })
}

impl EmbeddingBank {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn param_count(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| s.0.iter())
            .map(Tensor::numel)
            .sum()
    }

    /// Digest of the parameter values of step `i`.
    pub fn step_digest(&self, i: usize) -> String {
        fingerprint::of_f64s(self.steps[i].0.iter().flat_map(|t| t.data().iter().copied()))
    }

    /// Digest of all parameter values and the variant.
    pub fn fingerprint(&self) -> String {
        let mut bytes = self.variant.to_string().into_bytes();
        for s in &self.steps {
            for t in &s.0 {
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fingerprint::of_bytes(&bytes)
    }

    /// Errors unless the bank was built for `schedule` and `net`.
    pub fn check(&self, schedule: &Schedule, net: &Denoiser) -> Result<()> {
        if self.schedule_fp != schedule.fingerprint() {
            return Err(Error::Fingerprint {
                what: "bank schedule",
                expected: schedule.fingerprint(),
                found: self.schedule_fp.clone(),
            });
        }
        if self.backbone_fp != net.fingerprint() {
            return Err(Error::Fingerprint {
                what: "bank backbone",
                expected: net.fingerprint(),
                found: self.backbone_fp.clone(),
            });
        }
        if self.n_steps() != schedule.intervals() {
            return Err(invalid(format!(
                "bank has {} steps, schedule has {} intervals",
                self.n_steps(),
                schedule.intervals()
            )));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.variant {
            Variant::Multi => self.n_layers,
            Variant::Single => 1,
            Variant::Deep => 2 * self.n_layers,
        };
        for (i, s) in self.steps.iter().enumerate() {
            if s.0.len() != want {
                return Err(invalid(format!(
                    "step {i} holds {} tensors, a {} bank needs {want}",
                    s.0.len(),
                    self.variant
                )));
            }
            if s.0.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite(format!("bank step {i}")));
            }
        }
        Ok(())
    }

    /// Value-level override for step `i`.
    pub fn override_for(&self, i: usize) -> LayerOverride {
        let p = &self.steps[i].0;
        match self.variant {
            Variant::Single => LayerOverride::broadcast(&p[0], self.n_layers),
            Variant::Multi => {
                let mut ov = LayerOverride::disabled(self.n_layers);
                for (l, e) in p.iter().enumerate() {
                    ov.set_embedding(l, e.clone());
                }
                ov
            }
            Variant::Deep => {
                let mut ov = LayerOverride::disabled(self.n_layers);
                for l in 0..self.n_layers {
                    ov.set_film(
                        l,
                        FilmParams {
                            alpha: p[2 * l].clone(),
                            beta: p[2 * l + 1].clone(),
                        },
                    );
                }
                ov
            }
        }
    }

    /// Records step `i` on `tape` as trainable leaves.
    fn conds_on_tape(&self, tape: &mut Tape, i: usize) -> (Vec<LayerCond>, Vec<Var>) {
        let leaves: Vec<Var> = self.steps[i].0.iter().map(|t| tape.param(t.clone())).collect();
        let conds = match self.variant {
            Variant::Single => vec![LayerCond::Embedding(leaves[0]); self.n_layers],
            Variant::Multi => leaves.iter().map(|&v| LayerCond::Embedding(v)).collect(),
            Variant::Deep => leaves
                .chunks(2)
                .map(|ab| LayerCond::Film {
                    alpha: ab[0],
                    beta: ab[1],
                })
                .collect(),
        };
        (conds, leaves)
    }
}

/// The backbone with bank conditioning at selected solver steps.
///
/// `route[j]` names the bank step used at solver step `j`; `None` means
/// vanilla conditioning.
pub struct BankModel<'a> {
    net: &'a Denoiser,
    bank: &'a EmbeddingBank,
    route: Vec<Option<usize>>,
}

impl<'a> BankModel<'a> {
    pub fn new(net: &'a Denoiser, bank: &'a EmbeddingBank) -> Self {
        Self {
            net,
            bank,
            route: (0..bank.n_steps()).map(Some).collect(),
        }
    }

    /// Bank active only on steps where `mask[i]` is true.
    pub fn masked(net: &'a Denoiser, bank: &'a EmbeddingBank, mask: &[bool]) -> Result<Self> {
        if mask.len() != bank.n_steps() {
            return Err(invalid(format!(
                "mask covers {} steps, bank has {}",
                mask.len(),
                bank.n_steps()
            )));
        }
        Ok(Self {
            net,
            bank,
            route: mask.iter().enumerate().map(|(i, &m)| m.then_some(i)).collect(),
        })
    }

    /// Bank applied on a `k`-times refined schedule at the solver steps
    /// that start at student times.
    pub fn refined(net: &'a Denoiser, bank: &'a EmbeddingBank, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("refinement factor must be >= 1"));
        }
        Ok(Self {
            net,
            bank,
            route: (0..bank.n_steps() * k)
                .map(|j| (j % k == 0).then_some(j / k))
                .collect(),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.route.len()
    }
}

impl Model for BankModel<'_> {
    fn denoise(&self, x: &Tensor, t: f64, step: usize) -> Result<Tensor> {
        match self.route.get(step) {
            Some(Some(i)) => self.net.forward_with_overrides(x, t, &self.bank.override_for(*i)),
            Some(None) => self.net.forward(x, t),
            None => Err(invalid(format!(
                "solver step {step} beyond the {} routed steps",
                self.route.len()
            ))),
        }
    }
}

/// Samples with `bank` on `schedule`, optionally restricted to `mask`.
pub fn sample_with_bank(
    net: &Denoiser,
    kind: SolverKind,
    schedule: &Schedule,
    x_t: &Tensor,
    bank: Option<&EmbeddingBank>,
    mask: Option<&[bool]>,
) -> Result<Trajectory> {
    match bank {
        None => sample(net, kind, schedule, x_t),
        Some(b) => {
            if b.n_steps() != schedule.intervals() {
                return Err(invalid(format!(
                    "bank has {} steps, schedule has {} intervals",
                    b.n_steps(),
                    schedule.intervals()
                )));
            }
            let m = match mask {
                Some(m) => BankModel::masked(net, b, m)?,
                None => BankModel::new(net, b),
            };
            sample(&m, kind, schedule, x_t)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LPrevMode {
    /// Reference loss follows the previous epoch.
    Rolling,
    /// Reference loss stays at the first epoch's value.
    FrozenInitial,
}

impl fmt::Display for LPrevMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rolling => "rolling",
            Self::FrozenInitial => "frozen-initial",
        })
    }
}

impl FromStr for LPrevMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rolling" => Ok(Self::Rolling),
            "frozen-initial" | "frozen" => Ok(Self::FrozenInitial),
            other => Err(invalid(format!("unknown L_prev mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MteoConfig {
    pub lr: f64,
    pub lr_min: f64,
    /// Relative-improvement threshold of the first step.
    pub eps: f64,
    /// Threshold reached at the last early-stopped step.
    pub eps_min: f64,
    pub patience: usize,
    pub e_max: usize,
    pub batch: usize,
    pub lprev: LPrevMode,
    pub seed: u64,
}

impl Default for MteoConfig {
    fn default() -> Self {
        Self {
            lr: 2e-2,
            lr_min: 1e-3,
            eps: 0.01,
            eps_min: 1e-3,
            patience: 10,
            e_max: 300,
            batch: 64,
            lprev: LPrevMode::Rolling,
            seed: 0,
        }
    }
}

impl MteoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr.is_finite() && self.lr_min.is_finite()) {
            return Err(invalid("learning rates must be finite and non-negative"));
        }
        if !(self.eps_min > 0.0 && self.eps_min <= self.eps) {
            return Err(invalid("need 0 < eps_min <= eps"));
        }
        if self.patience < 1 || self.e_max < 1 || self.batch < 1 {
            return Err(invalid("patience, e_max, and batch must be >= 1"));
        }
        Ok(())
    }

    /// Threshold for step `i` of `n_steps`: geometric from `eps` to `eps_min`.
    pub fn eps_at(&self, i: usize, n_steps: usize) -> f64 {
        if n_steps < 2 {
            return self.eps;
        }
        let frac = i as f64 / (n_steps - 1) as f64;
        self.eps * (self.eps_min / self.eps).powf(frac)
    }

    /// Learning rate at `epoch`: linear from `lr` to `lr_min`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.e_max < 2 {
            return self.lr;
        }
        let frac = epoch as f64 / (self.e_max - 1) as f64;
        self.lr + (self.lr_min - self.lr) * frac
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    Budget,
    ForcedFull,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Threshold => "threshold",
            Self::Budget => "budget",
            Self::ForcedFull => "forced-full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean of the pre-update mini-batch losses, per epoch.
    pub losses: Vec<f64>,
    /// Full training-set loss before the step was trained.
    pub initial_loss: f64,
    /// Full training-set loss with the finalized parameters.
    pub final_loss: f64,
    pub epochs: usize,
    pub stop: StopReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepReport>,
    pub wall_time: f64,
}

impl TrainReport {
    /// Rows of `(step, epoch, loss)`.
    pub fn loss_rows(&self) -> Vec<(usize, usize, f64)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.losses.iter().enumerate().map(move |(e, &l)| (i, e, l)))
            .collect()
    }
}

fn mean_sq_dist(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.sq_norm() / a.rows() as f64)
}

/// Batch loss of one solver step with step-`i` parameters on the tape.
/// Returns the loss value and the gradients of the step's parameters.
#[allow(clippy::too_many_arguments)]
fn step_loss_and_grad(
    net: &Denoiser,
    bank: &EmbeddingBank,
    i: usize,
    state: &SolverState,
    x: &Tensor,
    target: &Tensor,
    t: f64,
    t_next: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let w = net.bind(&mut tape, false);
    let (conds, leaves) = bank.conds_on_tape(&mut tape, i);
    let xv = tape.constant(x.clone());
    let d = net.denoise_on_tape(&mut tape, &w, xv, t, Some(&conds), None)?;
    let plan = state.plan(t, t_next)?;
    let xn = state.apply_on_tape(&mut tape, &plan, x, d)?;
    let tv = tape.constant(target.clone());
    let diff = tape.sub(xn, tv)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / x.rows() as f64)?;
    let value = tape.value(loss)?.item()?;
    tape.backward(loss)?;
    let grads = leaves
        .iter()
        .map(|&v| {
            Ok(match tape.grad(v)? {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(v)?.shape()),
            })
        })
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

/// Fits step `i` of `bank` from the student states `x`, then advances `x`
/// and `state` by one step with the finalized parameters. Only
/// `bank.steps[i]` is modified.
fn train_stage(
    bank: &mut EmbeddingBank,
    i: usize,
    x: &mut Tensor,
    state: &mut SolverState,
    teachers: &TeacherSet,
    net: &Denoiser,
    cfg: &MteoConfig,
) -> Result<StepReport> {
    let times = teachers.student.times();
    let n_steps = teachers.student.intervals();
    let (t, t_next) = (times[i], times[i + 1]);
    let target = &teachers.states[i + 1];
    let last = i + 1 == n_steps;
    let eps = cfg.eps_at(i, n_steps);
    let names: Vec<String> = (0..bank.steps[i].0.len()).map(|j| format!("step {i} tensor {j}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();

    let initial_loss = {
        let model = BankModel::new(net, bank);
        let mut s = state.clone();
        mean_sq_dist(&step(&model, &mut s, x, t, t_next, i)?, target)?
    };

    let mut adam = AdamState::for_params(cfg.lr, &bank.steps[i].0);
    let mut order: Vec<usize> = (0..teachers.n_seeds()).collect();
    let mut losses = Vec::new();
    let mut l_prev = f64::NAN;
    let mut c = 0usize;
    let mut stop = if last { StopReason::ForcedFull } else { StopReason::Budget };

    for epoch in 0..cfg.e_max {
        order.shuffle(&mut rng::stream(cfg.seed, &format!("mteo-shuffle-{i}"), epoch as u64));
        adam.lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch) {
            let xb = x.select_rows(idx)?;
            let tb = target.select_rows(idx)?;
            let sb = state.select_rows(idx)?;
            let (lv, grads) = step_loss_and_grad(net, bank, i, &sb, &xb, &tb, t, t_next)?;
            if !lv.is_finite() {
                return Err(Error::Diverged { step: i, epoch });
            }
            adam_step(&mut bank.steps[i].0, &grads, &names, &mut adam).map_err(|e| match e {
                Error::NonFiniteGrad(_) => Error::Diverged { step: i, epoch },
                other => other,
            })?;
            sum += lv;
            batches += 1;
        }
        let l_cur = sum / batches as f64;
        losses.push(l_cur);
        if epoch == 0 {
            l_prev = l_cur;
            continue;
        }
        let rel = (l_prev - l_cur) / l_prev;
        if rel < eps {
            c += 1;
        } else {
            c = 0;
        }
        if cfg.lprev == LPrevMode::Rolling {
            l_prev = l_cur;
        }
        if !last && c >= cfg.patience {
            stop = StopReason::Threshold;
            break;
        }
    }

    let model = BankModel::new(net, bank);
    let x_next = step(&model, state, x, t, t_next, i)?;
    let final_loss = mean_sq_dist(&x_next, target)?;
    *x = x_next;
    Ok(StepReport {
        epochs: losses.len(),
        losses,
        initial_loss,
        final_loss,
        stop,
    })
}

/// Stage-wise distillation of `bank` against `teachers`.
pub fn train(
    bank: &EmbeddingBank,
    teachers: &TeacherSet,
    net: &Denoiser,
    kind: SolverKind,
    cfg: &MteoConfig,
) -> Result<(EmbeddingBank, TrainReport)> {
    cfg.validate()?;
    teachers.validate()?;
    teachers.check(&teachers.student, net)?;
    bank.check(&teachers.student, net)?;
    let start = Instant::now();
    let n_steps = teachers.student.intervals();
    let mut bank = bank.clone();
    let mut x = teachers.latents().clone();
    let mut state = SolverState::new(kind);
    let mut reports = Vec::with_capacity(n_steps);

    for i in 0..n_steps {
        reports.push(train_stage(&mut bank, i, &mut x, &mut state, teachers, net, cfg)?);
    }

    Ok((
        bank,
        TrainReport {
            steps: reports,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}

/// [`train`] starting from a fresh single-embedding bank.
pub fn train_single(
    teachers: &TeacherSet,
    net: &Denoiser,
    kind: SolverKind,
    cfg: &MteoConfig,
) -> Result<(EmbeddingBank, TrainReport)> {
    train(&init_bank(net, &teachers.student, Variant::Single)?, teachers, net, kind, cfg)
}

/// [`train`] starting from a fresh direct-FiLM bank.
pub fn train_deep(
    teachers: &TeacherSet,
    net: &Denoiser,
    kind: SolverKind,
    cfg: &MteoConfig,
) -> Result<(EmbeddingBank, TrainReport)> {
    train(&init_bank(net, &teachers.student, Variant::Deep)?, teachers, net, kind, cfg)
}

/// Per-step trajectory loss `mean_seeds |x_{i+1} - xhat_{i+1}|^2` of a full
/// student rollout from the teacher latents.
pub fn trajectory_losses(
    net: &Denoiser,
    bank: Option<&EmbeddingBank>,
    teachers: &TeacherSet,
    kind: SolverKind,
) -> Result<Vec<f64>> {
    let tr = sample_with_bank(net, kind, &teachers.student, teachers.latents(), bank, None)?;
    tr.states[1..]
        .iter()
        .zip(&teachers.states[1..])
        .map(|(a, b)| mean_sq_dist(a, b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NetConfig;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::solvers::latent_range;
    use crate::teacher::gen_teachers;

    fn setup() -> (Denoiser, Schedule, TeacherSet) {
        let cfg = NetConfig {
            n_blocks: 3,
            hidden: 16,
            emb_dim: 8,
            n_fourier: 4,
            ..Default::default()
        };
        let net = Denoiser::new(cfg, 11).unwrap();
        let s = make_schedule(ScheduleKind::Polynomial, 4, 0.002, 80.0, 7.0).unwrap();
        let t = gen_teachers(&net, &s, 4, SolverKind::Ipndm, 1, 0, 24).unwrap();
        (net, s, t)
    }

    fn quick() -> MteoConfig {
        MteoConfig {
            e_max: 6,
            patience: 2,
            batch: 8,
            ..Default::default()
        }
    }

    #[test]
    fn parameter_counts() {
        let net = Denoiser::new(NetConfig::default(), 0).unwrap();
        let s = make_schedule(ScheduleKind::Polynomial, 5, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(init_bank(&net, &s, Variant::Multi).unwrap().param_count(), 4 * 6 * 32);
        assert_eq!(init_bank(&net, &s, Variant::Single).unwrap().param_count(), 4 * 32);
        assert_eq!(init_bank(&net, &s, Variant::Deep).unwrap().param_count(), 4 * 6 * 2 * 64);
    }

    #[test]
    fn fresh_banks_reproduce_vanilla_bitwise() {
        let (net, s, _) = setup();
        let x = latent_range(2, 10, 2, 80.0).unwrap();
        for kind in [SolverKind::Ddim, SolverKind::Ipndm, SolverKind::DpmPp3m] {
            let plain = sample(&net, kind, &s, &x).unwrap();
            for v in [Variant::Multi, Variant::Single, Variant::Deep] {
                let b = init_bank(&net, &s, v).unwrap();
                let tr = sample_with_bank(&net, kind, &s, &x, Some(&b), None).unwrap();
                assert!(tr.states.iter().zip(&plain.states).all(|(a, b)| a.bit_eq(b)), "{kind} {v}");
            }
        }
    }

    #[test]
    fn empty_mask_is_vanilla() {
        let (net, s, _) = setup();
        let mut b = init_bank(&net, &s, Variant::Multi).unwrap();
        b.steps[0].0[1].data_mut()[0] += 1.0;
        let x = latent_range(2, 5, 2, 80.0).unwrap();
        let plain = sample(&net, SolverKind::Ddim, &s, &x).unwrap();
        let masked = sample_with_bank(&net, SolverKind::Ddim, &s, &x, Some(&b), Some(&[false; 3])).unwrap();
        assert_eq!(plain, masked);
        let on = sample_with_bank(&net, SolverKind::Ddim, &s, &x, Some(&b), None).unwrap();
        assert_ne!(plain.states[1], on.states[1]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (net, s, _) = setup();
        let b = init_bank(&net, &s, Variant::Multi).unwrap();
        let other = make_schedule(ScheduleKind::Polynomial, 6, 0.002, 80.0, 7.0).unwrap();
        let x = latent_range(2, 5, 2, 80.0).unwrap();
        assert!(sample_with_bank(&net, SolverKind::Ddim, &other, &x, Some(&b), None).is_err());
        assert!(b.check(&other, &net).is_err());
    }

    #[test]
    fn zero_lr_keeps_bank_and_losses() {
        let (net, _, t) = setup();
        let cfg = MteoConfig {
            lr: 0.0,
            lr_min: 0.0,
            ..quick()
        };
        let b = init_bank(&net, &t.student, Variant::Multi).unwrap();
        let (out, rep) = train(&b, &t, &net, SolverKind::Ddim, &cfg).unwrap();
        assert_eq!(out, b);
        for s in &rep.steps {
            assert!(s.losses.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * w[0].abs()));
            assert_eq!(s.initial_loss, s.final_loss);
        }
    }

    #[test]
    fn budget_of_one_epoch() {
        let (net, _, t) = setup();
        let cfg = MteoConfig { e_max: 1, ..quick() };
        let b = init_bank(&net, &t.student, Variant::Multi).unwrap();
        let (_, rep) = train(&b, &t, &net, SolverKind::Ddim, &cfg).unwrap();
        assert!(rep.steps.iter().all(|s| s.epochs == 1));
        assert_eq!(rep.steps.last().unwrap().stop, StopReason::ForcedFull);
    }

    #[test]
    fn final_step_runs_full_budget_and_others_are_bounded() {
        let (net, _, t) = setup();
        let cfg = quick();
        for v in [Variant::Multi, Variant::Single, Variant::Deep] {
            let b = init_bank(&net, &t.student, v).unwrap();
            let (_, rep) = train(&b, &t, &net, SolverKind::Ipndm, &cfg).unwrap();
            assert_eq!(rep.steps.last().unwrap().epochs, cfg.e_max);
            assert!(rep.steps.iter().all(|s| s.epochs <= cfg.e_max));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (net, _, t) = setup();
        let b = init_bank(&net, &t.student, Variant::Multi).unwrap();
        let (a, _) = train(&b, &t, &net, SolverKind::DpmPp3m, &quick()).unwrap();
        let (c, _) = train(&b, &t, &net, SolverKind::DpmPp3m, &quick()).unwrap();
        assert_eq!(a.fingerprint(), c.fingerprint());
        assert!(a.steps.iter().zip(&c.steps).all(|(p, q)| p.0.iter().zip(&q.0).all(|(x, y)| x.bit_eq(y))));
    }

    #[test]
    fn stages_touch_only_their_own_step() {
        let (net, _, t) = setup();
        let b = init_bank(&net, &t.student, Variant::Multi).unwrap();
        let mut x = t.latents().clone();
        let mut state = SolverState::new(SolverKind::Ipndm);
        let mut bank = b.clone();
        for i in 0..b.n_steps() {
            let before: Vec<String> = (0..b.n_steps()).map(|j| bank.step_digest(j)).collect();
            train_stage(&mut bank, i, &mut x, &mut state, &t, &net, &quick()).unwrap();
            for (j, d) in before.iter().enumerate() {
                assert_eq!(j == i, &bank.step_digest(j) != d, "stage {i} vs step {j}");
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let (net, _, t) = setup();
        let other = Denoiser::new(net.config().clone(), 12).unwrap();
        let b = init_bank(&net, &t.student, Variant::Multi).unwrap();
        let err = train(&b, &t, &other, SolverKind::Ddim, &quick()).unwrap_err();
        assert!(matches!(err, Error::Fingerprint { .. }), "{err}");
    }

    #[test]
    fn thresholds_and_lr_schedule() {
        let cfg = MteoConfig::default();
        assert_eq!(cfg.eps_at(0, 3), 0.01);
        assert!((cfg.eps_at(2, 3) - 1e-3).abs() < 1e-15);
        assert!((cfg.eps_at(1, 3) - 0.01f64.sqrt() * 0.001f64.sqrt()).abs() < 1e-15);
        assert_eq!(cfg.lr_at(0), 2e-2);
        assert!((cfg.lr_at(299) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(MteoConfig { eps_min: 0.1, ..Default::default() }.validate().is_err());
        assert!(MteoConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(MteoConfig { e_max: 0, ..Default::default() }.validate().is_err());
        assert!(MteoConfig::default().validate().is_ok());
    }
}
