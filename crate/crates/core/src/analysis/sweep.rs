//! Conditioning-time sweeps and layer-wise feature trajectories.

use crate::analysis::pca::{pca, PcaResult};
use crate::autodiff::Tensor;
use crate::denoiser::{Denoiser, LayerOverride};
use crate::error::{invalid, Result};
use crate::schedule::{make_schedule, ScheduleKind};
use crate::solvers::{SolverKind, SolverState, Trajectory};
use crate::teacher::TeacherSet;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub step: usize,
    /// Layer whose conditioning was swept, `None` for the whole network.
    pub layer: Option<usize>,
    pub t_cur: f64,
    pub t_next: f64,
    pub grid: Vec<f64>,
    /// Mean over seeds of the L2 distance at each grid value.
    pub distances: Vec<f64>,
    pub tau_star: f64,
    /// Whether `tau_star` lies strictly inside `(t_next, t_cur)`.
    pub interior: bool,
    /// Argmin per seed.
    pub per_seed_tau: Vec<f64>,
}

impl SweepResult {
    fn strictly_inside(&self, tau: f64) -> bool {
        let tol = 1e-9;
        tau < self.t_cur * (1.0 - tol) && tau > self.t_next * (1.0 + tol)
    }

    /// Fraction of seeds whose own argmin is strictly inside the interval.
    pub fn interior_fraction(&self) -> f64 {
        let n = self.per_seed_tau.iter().filter(|&&t| self.strictly_inside(t)).count();
        n as f64 / self.per_seed_tau.len() as f64
    }

    /// `|tau - t_cur| / (t_cur - t_next)` for every seed.
    pub fn normalized_offsets(&self) -> Vec<f64> {
        self.per_seed_tau
            .iter()
            .map(|t| (t - self.t_cur).abs() / (self.t_cur - self.t_next))
            .collect()
    }

    /// Index of `tau_star` in the grid.
    pub fn argmin(&self) -> usize {
        self.grid.iter().position(|&g| g == self.tau_star).expect("tau_star is a grid value")
    }
}

/// The dense polynomial (rho = 7) grid used for sweeps.
pub fn sweep_grid(n: usize, sigma_min: f64, sigma_max: f64) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![sigma_max]);
    }
    Ok(make_schedule(ScheduleKind::Polynomial, n, sigma_min, sigma_max, 7.0)?
        .times()
        .to_vec())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid("empty sweep grid"));
    }
    if grid.iter().any(|&g| !(g > 0.0 && g.is_finite())) || grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(invalid("sweep grid must be positive and strictly decreasing"));
    }
    Ok(())
}

fn check_step(teachers: &TeacherSet, step: usize) -> Result<(f64, f64)> {
    teachers.validate()?;
    let t = teachers.student.times();
    if step + 1 >= t.len() {
        return Err(invalid(format!("step {step} out of range")));
    }
    Ok((t[step], t[step + 1]))
}

fn per_row_dist(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    Ok(a.sub(b)?.row_norms())
}

fn summarize(
    step: usize,
    layer: Option<usize>,
    t_cur: f64,
    t_next: f64,
    grid: &[f64],
    per_tau: Vec<Vec<f64>>,
) -> SweepResult {
    let n_seeds = per_tau[0].len();
    let distances: Vec<f64> = per_tau.iter().map(|d| d.iter().sum::<f64>() / n_seeds as f64).collect();
    let argmin = |v: &mut dyn Iterator<Item = f64>| -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, d) in v.enumerate() {
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    };
    let star = argmin(&mut distances.iter().copied());
    let per_seed_tau = (0..n_seeds)
        .map(|s| grid[argmin(&mut per_tau.iter().map(|d| d[s]))])
        .collect();
    let mut r = SweepResult {
        step,
        layer,
        t_cur,
        t_next,
        grid: grid.to_vec(),
        distances,
        tau_star: grid[star],
        interior: false,
        per_seed_tau,
    };
    r.interior = r.strictly_inside(r.tau_star);
    r
}

/// Sweeps the conditioning time of one Euler step.
///
/// From the teacher state at `t_cur`, each `tau` takes the step
/// `t_cur -> t_next` with the denoiser evaluated at `tau` and measures the
/// L2 distance to the teacher state at `t_next`. At `tau = t_cur` this is
/// exactly the plain one-step error.
pub fn time_sweep(net: &Denoiser, teachers: &TeacherSet, step: usize, grid: &[f64]) -> Result<SweepResult> {
    check_grid(grid)?;
    let (t_cur, t_next) = check_step(teachers, step)?;
    let x = &teachers.states[step];
    let target = &teachers.states[step + 1];
    let state = SolverState::new(SolverKind::Ddim);
    let plan = state.plan(t_cur, t_next)?;
    let per_tau = grid
        .iter()
        .map(|&tau| {
            let d = net.forward(x, tau)?;
            per_row_dist(&state.apply(&plan, x, &d)?, target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(step, None, t_cur, t_next, grid, per_tau))
}

/// Sweeps the conditioning time of a single layer.
///
/// Only block `layer` sees `e(tau)`; every other block and the
/// preconditioning stay at `t_cur`. The resulting Euler step lands at
/// `x(tau)`, and the distance is between block `layer`'s post-FiLM features
/// at `(x(tau), t_next)` and at the teacher state `(xhat, t_next)`.
pub fn layer_time_sweep(
    net: &Denoiser,
    teachers: &TeacherSet,
    step: usize,
    layer: usize,
    grid: &[f64],
) -> Result<SweepResult> {
    check_grid(grid)?;
    if layer >= net.n_layers() {
        return Err(invalid(format!("layer {layer} out of range for {} blocks", net.n_layers())));
    }
    let (t_cur, t_next) = check_step(teachers, step)?;
    let x = &teachers.states[step];
    let reference = net.capture_features(&teachers.states[step + 1], t_next, None)?;
    let reference = &reference.layers[layer].post;
    let state = SolverState::new(SolverKind::Ddim);
    let plan = state.plan(t_cur, t_next)?;
    let per_tau = grid
        .iter()
        .map(|&tau| {
            let mut ov = LayerOverride::disabled(net.n_layers());
            ov.set_embedding(layer, net.embed_time(tau)?);
            let d = net.forward_with_overrides(x, t_cur, &ov)?;
            let x_next = state.apply(&plan, x, &d)?;
            let feat = net.capture_features(&x_next, t_next, None)?;
            per_row_dist(&feat.layers[layer].post, reference)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(step, Some(layer), t_cur, t_next, grid, per_tau))
}

/// Per-layer PCA of pre-FiLM feature trajectories.
///
/// For every seed the features of block `l` along the trajectory form a
/// point set with one point per time; the explained-variance ratios of the
/// per-seed PCAs are averaged. Returns one result per block.
pub fn feature_trajectory_pca(net: &Denoiser, traj: &Trajectory) -> Result<Vec<PcaResult>> {
    if traj.states.len() < 2 {
        return Err(invalid("feature trajectory needs at least two states"));
    }
    let n_layers = net.n_layers();
    let n_seeds = traj.states[0].rows();
    let h = net.config().hidden;
    let t_len = traj.times.len();
    // per layer, per seed: t_len x h features
    let mut feats = vec![vec![Vec::with_capacity(t_len * h); n_seeds]; n_layers];
    for (x, &t) in traj.states.iter().zip(&traj.times) {
        let cap = net.capture_features(x, t, None)?;
        for (l, lf) in cap.layers.iter().enumerate() {
            for (s, buf) in feats[l].iter_mut().enumerate() {
                buf.extend_from_slice(lf.pre.row(s));
            }
        }
    }
    feats
        .into_iter()
        .map(|per_seed| {
            let results = per_seed
                .into_iter()
                .map(|data| pca(&Tensor::matrix(t_len, h, data)?))
                .collect::<Result<Vec<_>>>()?;
            PcaResult::average(&results)
        })
        .collect()
}
