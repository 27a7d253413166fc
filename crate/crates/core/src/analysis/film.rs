//! FiLM capacity probes: how far a per-channel affine map can move student
//! features onto teacher features.

use crate::autodiff::Tensor;
use crate::denoiser::{film, Denoiser, FilmParams, LayerOverride};
use crate::error::{invalid, Error, Result};
use crate::teacher::TeacherSet;

/// Adam settings for the L1 fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iters: 500, lr: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilmFit {
    /// Mean absolute error of the initial parameters.
    pub pre_l1: f64,
    /// Mean absolute error after fitting; never above `pre_l1`.
    pub post_l1: f64,
    pub params: FilmParams,
}

fn l1(target: &Tensor, features: &Tensor, p: &FilmParams) -> Result<f64> {
    let m = film(features, p)?;
    Ok(target.sub(&m)?.data().iter().map(|r| r.abs()).sum::<f64>() / target.numel() as f64)
}

/// Per-channel least-squares `(alpha, beta)`. Constant channels keep
/// `fallback`'s scale and take the mean residual as shift.
fn least_squares(target: &Tensor, s: &Tensor, fallback: &FilmParams) -> Result<FilmParams> {
    let (b, c) = (s.rows(), s.cols());
    let mut alpha = vec![0.0; c];
    let mut beta = vec![0.0; c];
    for ch in 0..c {
        let sc: Vec<f64> = (0..b).map(|r| s.data()[r * c + ch]).collect();
        let yc: Vec<f64> = (0..b).map(|r| target.data()[r * c + ch]).collect();
        let sm = sc.iter().sum::<f64>() / b as f64;
        let ym = yc.iter().sum::<f64>() / b as f64;
        let sxx: f64 = sc.iter().map(|v| (v - sm) * (v - sm)).sum();
        let sxy: f64 = sc.iter().zip(&yc).map(|(v, y)| (v - sm) * (y - ym)).sum();
        alpha[ch] = if sxx > 1e-12 * b as f64 { sxy / sxx } else { fallback.alpha.data()[ch] };
        beta[ch] = ym - alpha[ch] * sm;
    }
    Ok(FilmParams {
        alpha: Tensor::vector(alpha),
        beta: Tensor::vector(beta),
    })
}

/// Fits `(alpha, beta)` minimizing `mean |target - (alpha ⊙ s + beta)|`.
///
/// Starts from the better of `init` and the least-squares solution, runs
/// Adam on the L1 objective and returns the best iterate, so
/// `post_l1 <= pre_l1` always holds.
pub fn film_capacity(target: &Tensor, student: &Tensor, init: &FilmParams, cfg: FitConfig) -> Result<FilmFit> {
    if target.shape() != student.shape() || target.rank() != 2 {
        return Err(Error::Shape {
            op: "film_capacity",
            lhs: target.shape().to_vec(),
            rhs: student.shape().to_vec(),
        });
    }
    let (b, c) = (student.rows(), student.cols());
    if b == 0 {
        return Err(invalid("film_capacity needs at least one row"));
    }
    let pre_l1 = l1(target, student, init)?;
    let ls = least_squares(target, student, init)?;
    let ls_l1 = l1(target, student, &ls)?;
    let (mut p, mut cur) = if ls_l1 < pre_l1 { (ls, ls_l1) } else { (init.clone(), pre_l1) };
    let mut best = (cur, p.clone());

    let mut params = vec![p.alpha.clone(), p.beta.clone()];
    let mut adam = crate::AdamState::for_params(cfg.lr, &params);
    for it in 0..cfg.iters {
        let (a, bt) = (params[0].data(), params[1].data());
        let mut ga = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for r in 0..b {
            for ch in 0..c {
                let s = student.data()[r * c + ch];
                let resid = a[ch] * s + bt[ch] - target.data()[r * c + ch];
                let sg = resid.signum() * (resid != 0.0) as u8 as f64;
                ga[ch] += sg * s;
                gb[ch] += sg;
            }
        }
        let n = (b * c) as f64;
        let grads = [
            Tensor::vector(ga.into_iter().map(|g| g / n).collect()),
            Tensor::vector(gb.into_iter().map(|g| g / n).collect()),
        ];
        adam.lr = cfg.lr * (1.0 - it as f64 / cfg.iters as f64);
        crate::adam_step(&mut params, &grads, &["alpha", "beta"], &mut adam)?;
        p = FilmParams {
            alpha: params[0].clone(),
            beta: params[1].clone(),
        };
        cur = l1(target, student, &p)?;
        if cur < best.0 {
            best = (cur, p.clone());
        }
    }
    Ok(FilmFit {
        pre_l1,
        post_l1: best.0,
        params: best.1,
    })
}

/// One probe cell: block `layer`, teacher conditioning time `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmProbeRow {
    pub layer: usize,
    pub tau: f64,
    pub pre_l1: f64,
    pub post_l1: f64,
}

/// Mean and population variance of the pre/post distances of a probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilmSummary {
    pub pre_mean: f64,
    pub pre_var: f64,
    pub post_mean: f64,
    pub post_var: f64,
}

pub fn summarize(rows: &[FilmProbeRow]) -> Result<FilmSummary> {
    if rows.is_empty() {
        return Err(invalid("empty film probe"));
    }
    let stats = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
    };
    let (pre_mean, pre_var) = stats(rows.iter().map(|r| r.pre_l1).collect());
    let (post_mean, post_var) = stats(rows.iter().map(|r| r.post_l1).collect());
    Ok(FilmSummary {
        pre_mean,
        pre_var,
        post_mean,
        post_var,
    })
}

/// Runs the capacity probe for every block and every grid value strictly
/// inside `(t_next, t_cur)` of `step`.
///
/// The teacher feature is block `l`'s post-FiLM activation of the network
/// conditioned at `tau` on the teacher state at `t_cur`; the student feature
/// is the pre-FiLM activation conditioned at `t_cur`. The fit starts from
/// the vanilla `(alpha, beta)` at `t_cur`.
pub fn film_probe(
    net: &Denoiser,
    teachers: &TeacherSet,
    step: usize,
    grid: &[f64],
    cfg: FitConfig,
) -> Result<Vec<FilmProbeRow>> {
    teachers.validate()?;
    let t = teachers.student.times();
    if step + 1 >= t.len() {
        return Err(invalid(format!("step {step} out of range")));
    }
    let (t_cur, t_next) = (t[step], t[step + 1]);
    let x = &teachers.states[step];
    let student = net.capture_features(x, t_cur, None)?;
    let e = net.embed_time(t_cur)?;
    let inits = (0..net.n_layers())
        .map(|l| net.film_params(l, &e))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &tau in grid.iter().filter(|&&g| g < t_cur && g > t_next) {
        let teacher = net.capture_features(x, tau, None::<&LayerOverride>)?;
        for l in 0..net.n_layers() {
            let fit = film_capacity(&teacher.layers[l].post, &student.layers[l].pre, &inits[l], cfg)?;
            rows.push(FilmProbeRow {
                layer: l,
                tau,
                pre_l1: fit.pre_l1,
                post_l1: fit.post_l1,
            });
        }
    }
    if rows.is_empty() {
        return Err(invalid("no grid value lies inside the probed interval"));
    }
    Ok(rows)
}
