//! Gaussian-mixture ground truth, its exact posterior-mean denoiser, and
//! EDM-style pretraining of the backbone.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{adam_step, AdamState, Tape, Tensor};
use crate::denoiser::{precond, Denoiser, NetConfig, NoiseLevel};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

/// Isotropic Gaussian mixture with a shared component std.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl Default for GmmSpec {
    /// Eight modes on a circle of radius 8, std 0.5, uniform weights.
    fn default() -> Self {
        Self::ring(8, 8.0, 0.5)
    }
}

impl GmmSpec {
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            means,
            std,
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.weights.len() != k {
            return Err(invalid("mixture needs matching non-empty means and weights"));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(invalid("mixture means must share a positive dimension"));
        }
        if !(self.std > 0.0) {
            return Err(invalid("mixture std must be positive"));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(invalid("mixture weights must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (mu, w) in self.means.iter().zip(&self.weights) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }
}

pub fn sample_gmm_with(spec: &GmmSpec, n: usize, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = spec.weights.len() - 1;
        for (j, w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        for mu in &spec.means[k] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + spec.std * z);
        }
    }
    Tensor::matrix(n, d, data)
}

/// `n` i.i.d. mixture draws from the stream keyed by `seed`.
pub fn sample_gmm(spec: &GmmSpec, n: usize, seed: u64) -> Result<Tensor> {
    sample_gmm_with(spec, n, &mut rng::stream(seed, "gmm", 0))
}

/// Exact `E[x0 | x0 + sigma * n = x]` for the mixture.
pub fn analytic_denoiser(spec: &GmmSpec, x: &Tensor, sigma: f64) -> Result<Tensor> {
    spec.validate()?;
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    let d = spec.dim();
    if x.cols() != d || x.rank() != 2 {
        return Err(Error::Shape {
            op: "analytic_denoiser",
            lhs: x.shape().to_vec(),
            rhs: vec![x.rows(), d],
        });
    }
    let s2 = spec.std * spec.std;
    let v = s2 + sigma * sigma;
    let k = spec.means.len();
    let mut out = Vec::with_capacity(x.numel());
    let mut logits = vec![0.0; k];
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (j, mu) in spec.means.iter().enumerate() {
            let dist2: f64 = xi.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            logits[j] = spec.weights[j].ln() - dist2 / (2.0 * v);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let mut post_mu = vec![0.0; d];
        for (j, mu) in spec.means.iter().enumerate() {
            let w = (logits[j] - mx).exp() / z;
            for (a, b) in post_mu.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        for (xa, ma) in xi.iter().zip(&post_mu) {
            out.push((s2 * xa + sigma * sigma * ma) / v);
        }
    }
    Tensor::matrix(x.rows(), d, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBackboneConfig {
    pub n_samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Mean of `ln sigma` during training.
    pub p_mean: f64,
    /// Std of `ln sigma` during training.
    pub p_std: f64,
    pub seed: u64,
}

impl Default for TrainBackboneConfig {
    fn default() -> Self {
        Self {
            n_samples: 65_536,
            epochs: 60,
            batch: 256,
            lr: 2e-3,
            p_mean: 0.5f64.ln(),
            p_std: 1.2,
            seed: 0,
        }
    }
}

impl TrainBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.batch == 0 {
            return Err(invalid("sample and batch counts must be positive"));
        }
        if !(self.lr > 0.0) || !(self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(invalid("lr and p_std must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct BackboneReport {
    /// Loss of the untrained network on the first mini-batch.
    pub initial_loss: f64,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub const SIGMA_MIN: f64 = 0.002;
pub const SIGMA_MAX: f64 = 80.0;

/// One mini-batch of noisy training pairs: scaled inputs, per-sample noise
/// levels, and the raw-network regression target
/// `(x0 - c_skip x) / c_out`. Regressing `F` onto that target with unit
/// weight is the same objective as `lambda(sigma) |D - x0|^2`.
fn edm_batch(
    x0: &Tensor,
    sigma_data: f64,
    p_mean: f64,
    p_std: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (b, d) = (x0.rows(), x0.cols());
    let mut x_in = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * d);
    let mut sigmas = Vec::with_capacity(b);
    for i in 0..b {
        let z: f64 = rng.sample(StandardNormal);
        let sigma = (p_mean + p_std * z).exp().clamp(SIGMA_MIN, SIGMA_MAX);
        let (c_skip, c_out, c_in) = precond(sigma, sigma_data);
        for &a in x0.row(i) {
            let n: f64 = rng.sample(StandardNormal);
            let x = a + sigma * n;
            x_in.push(c_in * x);
            target.push((a - c_skip * x) / c_out);
        }
        sigmas.push(sigma);
    }
    Ok((
        Tensor::matrix(b, d, x_in)?,
        sigmas,
        Tensor::matrix(b, d, target)?,
    ))
}

/// Trains a fresh backbone on mixture samples with EDM loss weighting and
/// log-normal noise levels. The learning rate follows a cosine decay to
/// 5% of `cfg.lr`.
pub fn train_backbone(
    spec: &GmmSpec,
    net: NetConfig,
    cfg: &TrainBackboneConfig,
) -> Result<(Denoiser, BackboneReport)> {
    cfg.validate()?;
    if net.data_dim != spec.dim() {
        return Err(invalid("network data_dim does not match the mixture"));
    }
    let mut model = Denoiser::new(net, cfg.seed)?;
    let data = sample_gmm_with(spec, cfg.n_samples, &mut rng::stream(cfg.seed, "backbone-data", 0))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let shapes: Vec<Vec<usize>> = model
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = AdamState::new(cfg.lr, shapes.iter().map(Vec::as_slice));
    let mut report = BackboneReport::default();
    let per_epoch = cfg.n_samples.div_ceil(cfg.batch);
    let total_iters = (per_epoch * cfg.epochs).max(1);
    let sigma_data = model.config().sigma_data;
    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    let mut iter = 0usize;

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, "backbone-epoch", epoch as u64);
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let x0 = data.select_rows(chunk)?;
            let (x_in, sigmas, target) =
                edm_batch(&x0, sigma_data, cfg.p_mean, cfg.p_std, &mut r)?;
            let mut tape = Tape::new();
            let w = model.bind(&mut tape, true);
            let xv = tape.constant(x_in);
            let f = model.network_on_tape(&mut tape, &w, xv, NoiseLevel::PerSample(&sigmas), None, None)?;
            let tv = tape.constant(target);
            let diff = tape.sub(f, tv)?;
            let sq = tape.square(diff)?;
            let mean = tape.mean(sq)?;
            let loss = tape.scale(mean, x0.cols() as f64)?;
            let lv = tape.value(loss)?.item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { step: 0, epoch });
            }
            if epoch == 0 && bi == 0 {
                report.initial_loss = lv;
            }
            sum += lv;
            tape.backward(loss)?;
            let grads = w
                .vars()
                .into_iter()
                .map(|v| {
                    tape.grad(v)
                        .map(|g| g.cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).unwrap().shape())))
                })
                .collect::<Result<Vec<_>>>()?;
            let progress = iter as f64 / total_iters as f64;
            adam.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let mut params: Vec<Tensor> = model.params_mut().into_iter().map(|p| std::mem::replace(p, Tensor::scalar(0.0))).collect();
            let res = adam_step(&mut params, &grads, &name_refs, &mut adam);
            for (slot, p) in model.params_mut().into_iter().zip(params) {
                *slot = p;
            }
            res.map_err(|_| Error::Diverged { step: 0, epoch })?;
            iter += 1;
        }
        report.epoch_losses.push(sum / per_epoch as f64);
    }
    Ok((model, report))
}

/// Mean EDM-weighted loss of `model` on fresh noisy pairs at a fixed
/// noise level.
pub fn edm_loss_at(model: &Denoiser, x0: &Tensor, sigma: f64, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "edm-loss", sigma.to_bits());
    let d = x0.cols();
    let mut noisy = Vec::with_capacity(x0.numel());
    for &a in x0.data() {
        let n: f64 = r.sample(StandardNormal);
        noisy.push(a + sigma * n);
    }
    let noisy = Tensor::matrix(x0.rows(), d, noisy)?;
    let den = model.forward(&noisy, sigma)?;
    let sd = model.config().sigma_data;
    let lambda = (sigma * sigma + sd * sd) / (sigma * sd).powi(2);
    Ok(lambda * den.sub(x0)?.sq_norm() / x0.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_mixture_collapses() {
        let spec = GmmSpec {
            means: vec![vec![1.5, -2.0]],
            std: 1e-300,
            weights: vec![1.0],
        };
        let x = sample_gmm(&spec, 50, 3).unwrap();
        for i in 0..50 {
            assert_eq!(x.row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = GmmSpec::default();
        assert_eq!(sample_gmm(&spec, 100, 9).unwrap(), sample_gmm(&spec, 100, 9).unwrap());
        assert_ne!(sample_gmm(&spec, 100, 9).unwrap(), sample_gmm(&spec, 100, 10).unwrap());
    }

    #[test]
    fn empirical_mean_within_three_standard_errors() {
        let spec = GmmSpec::default();
        let n = 100_000;
        let x = sample_gmm(&spec, n, 1).unwrap();
        // per-coordinate variance: between-mode 32 plus within-mode 0.25
        let se = (32.25f64 / n as f64).sqrt();
        for c in 0..2 {
            let m: f64 = (0..n).map(|i| x.row(i)[c]).sum::<f64>() / n as f64;
            assert!(m.abs() < 3.0 * se, "coord {c}: {m} vs {se}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = GmmSpec::default();
        spec.weights[0] = 0.5;
        assert!(sample_gmm(&spec, 10, 0).is_err());
        let mut spec = GmmSpec::default();
        spec.std = 0.0;
        assert!(sample_gmm(&spec, 10, 0).is_err());
        assert!(sample_gmm(&GmmSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn single_gaussian_posterior_mean() {
        let spec = GmmSpec {
            means: vec![vec![0.0, 0.0]],
            std: 1.0,
            weights: vec![1.0],
        };
        let x = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let d = analytic_denoiser(&spec, &x, 1.0).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0]);
    }

    #[test]
    fn small_noise_returns_input_and_large_noise_the_mean() {
        let spec = GmmSpec::default();
        let x = Tensor::matrix(2, 2, vec![7.9, 0.2, -3.0, 5.0]).unwrap();
        let d = analytic_denoiser(&spec, &x, 1e-6).unwrap();
        for (a, b) in d.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let one = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let d = analytic_denoiser(&spec, &one, 80.0).unwrap();
        // mode-mean tilt is about R^2 x / (2 sigma^2) = 0.005
        assert!(d.data().iter().all(|v| v.abs() < 1e-2), "{:?}", d.data());
    }

    #[test]
    fn finite_far_from_every_mode() {
        let spec = GmmSpec::default();
        let x = Tensor::matrix(2, 2, vec![1e6, -1e6, 3e4, 0.0]).unwrap();
        for sigma in [0.002, 1.0, 80.0] {
            assert!(analytic_denoiser(&spec, &x, sigma).unwrap().is_finite());
        }
    }

    #[test]
    fn single_mode_shrinks_monotonically_toward_mean() {
        let spec = GmmSpec {
            means: vec![vec![1.0, -1.0]],
            std: 0.5,
            weights: vec![1.0],
        };
        let x = Tensor::matrix(1, 2, vec![4.0, 3.0]).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let sigma = 0.002 * (40000f64).powf(k as f64 / 59.0);
            let d = analytic_denoiser(&spec, &x, sigma).unwrap();
            let dist = ((d.data()[0] - 1.0).powi(2) + (d.data()[1] + 1.0).powi(2)).sqrt();
            assert!(dist <= prev);
            prev = dist;
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainBackboneConfig {
            epochs: 0,
            n_samples: 64,
            ..Default::default()
        };
        let (net, report) = train_backbone(&GmmSpec::default(), NetConfig::default(), &cfg).unwrap();
        assert_eq!(net, Denoiser::new(NetConfig::default(), cfg.seed).unwrap());
        assert!(report.epoch_losses.is_empty());
    }
}
