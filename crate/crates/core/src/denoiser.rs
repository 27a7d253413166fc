//! FiLM-conditioned MLP denoiser with EDM preconditioning.
//!
//! Pipeline for a noise level `t`:
//! `c_noise = ln(t) / 4` → sinusoidal features → two-layer embedding MLP →
//! `e(t)`. Each residual block projects `e(t)` through its own affine map
//! into per-channel `(alpha, beta)` and applies
//! `h ← h + W_out · silu(alpha ⊙ (W_in · h) + beta)`.
//! Per-layer overrides replace `e(t)` (or the projected `(alpha, beta)`)
//! for individual blocks, which is the hook used by the embedding bank.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::fingerprint;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub data_dim: usize,
    pub n_blocks: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub n_fourier: usize,
    pub sigma_data: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            n_blocks: 6,
            hidden: 64,
            emb_dim: 32,
            n_fourier: 16,
            sigma_data: 0.5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.data_dim,
            self.n_blocks,
            self.hidden,
            self.emb_dim,
            self.n_fourier,
        ];
        if counts.contains(&0) || !(self.sigma_data > 0.0) {
            return Err(invalid(format!("net config must be positive: {self:?}")));
        }
        if self.emb_dim % 2 != 0 {
            return Err(invalid("embedding dimension must be even"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Affine {
    fn init(rng: &mut rng::Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAffine {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundAffine {
            weight: leaf(tape, &self.weight),
            bias: leaf(tape, &self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub input: Affine,
    /// Maps the embedding to `[alpha | beta]`, width `2 * hidden`.
    pub film: Affine,
    pub output: Affine,
}

/// Per-channel FiLM scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub alpha: Tensor,
    pub beta: Tensor,
}

/// `alpha ⊙ features + beta`, broadcast over the batch.
pub fn film(features: &Tensor, params: &FilmParams) -> Result<Tensor> {
    let c = features.cols();
    if params.alpha.numel() != c || params.beta.numel() != c {
        return Err(Error::Shape {
            op: "film",
            lhs: features.shape().to_vec(),
            rhs: params.alpha.shape().to_vec(),
        });
    }
    let (a, b) = (params.alpha.data(), params.beta.data());
    let data = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, s)| a[i % c] * s + b[i % c])
        .collect();
    Tensor::new(features.shape().to_vec(), data)
}

/// How one block receives its time conditioning during a tape forward.
#[derive(Clone, Copy, Debug)]
pub enum LayerCond {
    Vanilla,
    Embedding(Var),
    Film { alpha: Var, beta: Var },
}

/// Value-level override for one block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OverrideSlot {
    pub enabled: bool,
    pub embedding: Option<Tensor>,
    pub film: Option<FilmParams>,
}

/// Per-layer replacements for the shared time embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOverride {
    pub slots: Vec<OverrideSlot>,
}

impl LayerOverride {
    /// All layers disabled.
    pub fn disabled(n_layers: usize) -> Self {
        Self {
            slots: vec![OverrideSlot::default(); n_layers],
        }
    }

    /// The same embedding on every layer.
    pub fn broadcast(embedding: &Tensor, n_layers: usize) -> Self {
        Self {
            slots: (0..n_layers)
                .map(|_| OverrideSlot {
                    enabled: true,
                    embedding: Some(embedding.clone()),
                    film: None,
                })
                .collect(),
        }
    }

    pub fn set_embedding(&mut self, layer: usize, e: Tensor) {
        self.slots[layer] = OverrideSlot {
            enabled: true,
            embedding: Some(e),
            film: None,
        };
    }

    pub fn set_film(&mut self, layer: usize, p: FilmParams) {
        self.slots[layer] = OverrideSlot {
            enabled: true,
            embedding: None,
            film: Some(p),
        };
    }

    /// Records the override contents on `tape` and returns per-layer
    /// conditioning. With `trainable`, the returned `Vec<Var>` lists the
    /// created parameter leaves in layer order.
    pub fn to_conds(&self, tape: &mut Tape, trainable: bool) -> Result<(Vec<LayerCond>, Vec<Var>)> {
        let mut conds = Vec::with_capacity(self.slots.len());
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            leaves.push(v);
            v
        };
        for (l, slot) in self.slots.iter().enumerate() {
            if slot.embedding.is_some() && slot.film.is_some() {
                return Err(invalid(format!(
                    "layer {l}: embedding and FiLM override are mutually exclusive"
                )));
            }
            let cond = match (slot.enabled, &slot.embedding, &slot.film) {
                (false, _, _) | (true, None, None) => LayerCond::Vanilla,
                (true, Some(e), None) => LayerCond::Embedding(leaf(tape, e)),
                (true, None, Some(p)) => LayerCond::Film {
                    alpha: leaf(tape, &p.alpha),
                    beta: leaf(tape, &p.beta),
                },
                (true, Some(_), Some(_)) => unreachable!(),
            };
            conds.push(cond);
        }
        Ok((conds, leaves))
    }
}

struct BoundAffine {
    weight: Var,
    bias: Var,
}

/// Denoiser weights recorded on one tape.
pub struct BoundWeights {
    freqs: Var,
    embed: [BoundAffine; 2],
    input: BoundAffine,
    blocks: Vec<[BoundAffine; 3]>,
    head: BoundAffine,
}

impl BoundWeights {
    /// Leaves in the same order as [`Denoiser::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut push = |a: &BoundAffine| {
            out.push(a.weight);
            out.push(a.bias);
        };
        self.embed.iter().for_each(&mut push);
        push(&self.input);
        for b in &self.blocks {
            b.iter().for_each(&mut push);
        }
        push(&self.head);
        out
    }
}

/// Pre- and post-FiLM activations of one block.
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    pub pre: Tensor,
    pub post: Tensor,
}

#[derive(Clone, Debug)]
pub struct Captured {
    pub layers: Vec<LayerFeatures>,
    pub output: Tensor,
}

/// Noise-level input of a raw network pass.
#[derive(Clone, Copy, Debug)]
pub enum NoiseLevel<'a> {
    Shared(f64),
    PerSample(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: NetConfig,
    freqs: Tensor,
    pub embed: [Affine; 2],
    pub input: Affine,
    pub blocks: Vec<Block>,
    pub head: Affine,
}

/// EDM preconditioning coefficients `(c_skip, c_out, c_in)`.
pub fn precond(t: f64, sigma_data: f64) -> (f64, f64, f64) {
    let sd2 = sigma_data * sigma_data;
    let r = (t * t + sd2).sqrt();
    (sd2 / (t * t + sd2), t * sigma_data / r, 1.0 / r)
}

/// Frequencies of the sinusoidal encoding: wavelengths log-spaced in
/// [1, 1000], i.e. frequencies from 1 down to 1e-3.
fn fourier_freqs(n: usize) -> Tensor {
    let f = (0..n)
        .map(|j| {
            if n == 1 {
                1.0
            } else {
                1000f64.powf(-(j as f64) / (n - 1) as f64)
            }
        })
        .collect();
    Tensor::matrix(1, n, f).expect("sized")
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid(format!("noise level must be positive and finite, got {t}")));
    }
    Ok(())
}

impl Denoiser {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "backbone-init", 0);
        let (h, d) = (config.hidden, config.emb_dim);
        let embed = [
            Affine::init(&mut r, 2 * config.n_fourier, d, 1.0),
            Affine::init(&mut r, d, d, 1.0),
        ];
        let input = Affine::init(&mut r, config.data_dim, h, 1.0);
        let blocks = (0..config.n_blocks)
            .map(|_| {
                let mut film = Affine::init(&mut r, d, 2 * h, 0.5);
                // start close to identity modulation
                for v in &mut film.bias.data_mut()[..h] {
                    *v = 1.0;
                }
                Block {
                    input: Affine::init(&mut r, h, h, 1.0),
                    film,
                    output: Affine::init(&mut r, h, h, 0.3),
                }
            })
            .collect();
        let head = Affine::init(&mut r, h, config.data_dim, 1.0);
        Ok(Self {
            freqs: fourier_freqs(config.n_fourier),
            config,
            embed,
            input,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Every weight tensor with a stable name, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut layers: Vec<(String, &Affine)> = vec![
            ("embed.0".into(), &self.embed[0]),
            ("embed.1".into(), &self.embed[1]),
            ("input".into(), &self.input),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            layers.push((format!("block.{l}.input"), &b.input));
            layers.push((format!("block.{l}.film"), &b.film));
            layers.push((format!("block.{l}.output"), &b.output));
        }
        layers.push(("head".into(), &self.head));
        layers
            .into_iter()
            .flat_map(|(name, a)| [(format!("{name}.weight"), &a.weight), (format!("{name}.bias"), &a.bias)])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let [e0, e1] = &mut self.embed;
        for a in [e0, e1, &mut self.input] {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        for b in &mut self.blocks {
            for a in [&mut b.input, &mut b.film, &mut b.output] {
                out.push(&mut a.weight);
                out.push(&mut a.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Rebuilds a denoiser from tensors listed in [`Self::named_params`]
    /// order.
    pub fn from_params(config: NetConfig, params: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let slots = net.params_mut();
        if slots.len() != params.len() {
            return Err(invalid(format!(
                "expected {} weight tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "from_params",
                    lhs: slot.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            *slot = p;
        }
        Ok(net)
    }

    /// Digest of all weight values.
    pub fn fingerprint(&self) -> String {
        fingerprint::of_f64s(
            self.named_params()
                .into_iter()
                .flat_map(|(_, t)| t.data().to_vec()),
        )
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundWeights {
        BoundWeights {
            freqs: tape.constant(self.freqs.clone()),
            embed: [
                self.embed[0].bind(tape, trainable),
                self.embed[1].bind(tape, trainable),
            ],
            input: self.input.bind(tape, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    [
                        b.input.bind(tape, trainable),
                        b.film.bind(tape, trainable),
                        b.output.bind(tape, trainable),
                    ]
                })
                .collect(),
            head: self.head.bind(tape, trainable),
        }
    }

    /// `e(t)` for a `[B, 1]` column of noise levels; returns `[B, d]`.
    pub fn embed_on_tape(&self, tape: &mut Tape, w: &BoundWeights, sigma: Var) -> Result<Var> {
        let b = tape.value(sigma)?.rows();
        let f = self.config.n_fourier;
        let ln = tape.log(sigma)?;
        let c = tape.scale(ln, 0.25)?;
        let phase = tape.matmul(c, w.freqs)?;
        let phase = tape.reshape(phase, &[b, f, 1])?;
        let s = tape.sin(phase)?;
        let co = tape.cos(phase)?;
        let feat = tape.concat(&[s, co], 2)?;
        let feat = tape.reshape(feat, &[b, 2 * f])?;
        let h = tape.affine(feat, w.embed[0].weight, w.embed[0].bias)?;
        let h = tape.silu(h)?;
        tape.affine(h, w.embed[1].weight, w.embed[1].bias)
    }

    fn sigma_column(&self, tape: &mut Tape, level: NoiseLevel<'_>) -> Result<Var> {
        let col = match level {
            NoiseLevel::Shared(t) => {
                check_time(t)?;
                Tensor::matrix(1, 1, vec![t])?
            }
            NoiseLevel::PerSample(ts) => {
                ts.iter().try_for_each(|&t| check_time(t))?;
                Tensor::matrix(ts.len(), 1, ts.to_vec())?
            }
        };
        Ok(tape.constant(col))
    }

    /// Block `layer`'s `(alpha, beta)` produced from an embedding.
    fn film_from_embedding(
        &self,
        tape: &mut Tape,
        w: &BoundWeights,
        layer: usize,
        e: Var,
    ) -> Result<(Var, Var)> {
        let h = self.config.hidden;
        let f = &w.blocks[layer][1];
        let ab = tape.affine(e, f.weight, f.bias)?;
        let axis = tape.value(ab)?.rank() - 1;
        Ok((tape.slice(ab, axis, 0, h)?, tape.slice(ab, axis, h, h)?))
    }

    /// Raw network `F(x_in, e)`. `x_in` is already scaled by `c_in`.
    #[allow(clippy::too_many_arguments)]
    pub fn network_on_tape(
        &self,
        tape: &mut Tape,
        w: &BoundWeights,
        x_in: Var,
        level: NoiseLevel<'_>,
        conds: Option<&[LayerCond]>,
        mut capture: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<Var> {
        let n = self.n_layers();
        if let Some(c) = conds {
            if c.len() != n {
                return Err(invalid(format!("{} layer conditions for {n} blocks", c.len())));
            }
        }
        // the shared embedding is only computed when some layer needs it
        let needs_vanilla = conds.is_none_or(|c| c.iter().any(|c| matches!(c, LayerCond::Vanilla)));
        let vanilla = if needs_vanilla {
            let sigma = self.sigma_column(tape, level)?;
            Some(self.embed_on_tape(tape, w, sigma)?)
        } else {
            None
        };
        let mut h = tape.affine(x_in, w.input.weight, w.input.bias)?;
        for l in 0..n {
            let cond = conds.map_or(LayerCond::Vanilla, |c| c[l]);
            let (alpha, beta) = match cond {
                LayerCond::Vanilla => {
                    let e = vanilla.expect("computed above");
                    self.film_from_embedding(tape, w, l, e)?
                }
                LayerCond::Embedding(phi) => self.film_from_embedding(tape, w, l, phi)?,
                LayerCond::Film { alpha, beta } => (alpha, beta),
            };
            let [inp, _, out] = &w.blocks[l];
            let s = tape.affine(h, inp.weight, inp.bias)?;
            let scaled = tape.mul(s, alpha)?;
            let m = tape.add(scaled, beta)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push((s, m));
            }
            let a = tape.silu(m)?;
            let r = tape.affine(a, out.weight, out.bias)?;
            h = tape.add(h, r)?;
        }
        tape.affine(h, w.head.weight, w.head.bias)
    }

    /// Preconditioned `D(x, t)` on a tape for a shared noise level.
    pub fn denoise_on_tape(
        &self,
        tape: &mut Tape,
        w: &BoundWeights,
        x: Var,
        t: f64,
        conds: Option<&[LayerCond]>,
        capture: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<Var> {
        check_time(t)?;
        check_finite(tape.value(x)?, "denoiser input")?;
        let (c_skip, c_out, c_in) = precond(t, self.config.sigma_data);
        let x_in = tape.scale(x, c_in)?;
        let f = self.network_on_tape(tape, w, x_in, NoiseLevel::Shared(t), conds, capture)?;
        let skip = tape.scale(x, c_skip)?;
        let out = tape.scale(f, c_out)?;
        tape.add(skip, out)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.data_dim {
            return Err(Error::Shape {
                op: "denoiser",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.config.data_dim],
            });
        }
        check_finite(x, "denoiser input")
    }

    /// `e(t)` as a `[d]` vector.
    pub fn embed_time(&self, t: f64) -> Result<Tensor> {
        check_time(t)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let s = tape.constant(Tensor::matrix(1, 1, vec![t])?);
        let e = self.embed_on_tape(&mut tape, &w, s)?;
        tape.value(e)?.clone().reshape(vec![self.config.emb_dim])
    }

    /// The FiLM parameters block `layer` derives from `embedding`.
    pub fn film_params(&self, layer: usize, embedding: &Tensor) -> Result<FilmParams> {
        if layer >= self.n_layers() {
            return Err(invalid(format!("layer {layer} out of range")));
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let e = tape.constant(embedding.clone());
        let (a, b) = self.film_from_embedding(&mut tape, &w, layer, e)?;
        Ok(FilmParams {
            alpha: tape.value(a)?.clone(),
            beta: tape.value(b)?.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.run(x, t, None, false).map(|c| c.output)
    }

    pub fn forward_with_overrides(&self, x: &Tensor, t: f64, ov: &LayerOverride) -> Result<Tensor> {
        self.run(x, t, Some(ov), false).map(|c| c.output)
    }

    pub fn capture_features(&self, x: &Tensor, t: f64, ov: Option<&LayerOverride>) -> Result<Captured> {
        self.run(x, t, ov, true)
    }

    fn run(&self, x: &Tensor, t: f64, ov: Option<&LayerOverride>, capture: bool) -> Result<Captured> {
        self.check_batch(x)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let conds = match ov {
            Some(ov) => {
                if ov.slots.len() != self.n_layers() {
                    return Err(invalid("override layer count mismatch"));
                }
                Some(ov.to_conds(&mut tape, false)?.0)
            }
            None => None,
        };
        let xv = tape.constant(x.clone());
        let mut cap = Vec::new();
        let out = self.denoise_on_tape(
            &mut tape,
            &w,
            xv,
            t,
            conds.as_deref(),
            capture.then_some(&mut cap),
        )?;
        let layers = cap
            .into_iter()
            .map(|(pre, post)| {
                Ok(LayerFeatures {
                    pre: tape.value(pre)?.clone(),
                    post: tape.value(post)?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Captured {
            layers,
            output: tape.value(out)?.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            n_blocks: 3,
            hidden: 8,
            emb_dim: 6,
            n_fourier: 4,
            ..NetConfig::default()
        }
    }

    fn batch() -> Tensor {
        Tensor::matrix(3, 2, vec![0.5, -1.0, 3.0, 2.0, -7.0, 0.1]).unwrap()
    }

    #[test]
    fn fourier_features_at_unit_noise() {
        let net = Denoiser::new(small(), 1).unwrap();
        let mut tape = Tape::new();
        let w = net.bind(&mut tape, false);
        let s = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let ln = tape.log(s).unwrap();
        let c = tape.scale(ln, 0.25).unwrap();
        let phase = tape.matmul(c, w.freqs).unwrap();
        let phase = tape.reshape(phase, &[1, 4, 1]).unwrap();
        let sn = tape.sin(phase).unwrap();
        let cs = tape.cos(phase).unwrap();
        let feat = tape.concat(&[sn, cs], 2).unwrap();
        assert_eq!(
            tape.value(feat).unwrap().data(),
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn embedding_is_deterministic_and_checks_time() {
        let net = Denoiser::new(small(), 1).unwrap();
        let a = net.embed_time(3.7).unwrap();
        assert!(a.bit_eq(&net.embed_time(3.7).unwrap()));
        assert_eq!(a.shape(), &[6]);
        assert!(net.embed_time(0.0).is_err());
        assert!(net.embed_time(-1.0).is_err());
    }

    #[test]
    fn film_identity_constant_and_composition() {
        let s = batch();
        let id = FilmParams {
            alpha: Tensor::ones(&[2]),
            beta: Tensor::zeros(&[2]),
        };
        assert!(film(&s, &id).unwrap().bit_eq(&s));
        let b = Tensor::vector(vec![0.25, -4.0]);
        let out = film(
            &s,
            &FilmParams {
                alpha: Tensor::zeros(&[2]),
                beta: b.clone(),
            },
        )
        .unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), b.data());
        }
        let p = FilmParams {
            alpha: Tensor::vector(vec![1.5, -0.3]),
            beta: Tensor::vector(vec![0.7, 2.0]),
        };
        let twice = film(&film(&s, &p).unwrap(), &p).unwrap();
        let composed = FilmParams {
            alpha: p.alpha.map(|a| a * a),
            beta: Tensor::vector(vec![1.5 * 0.7 + 0.7, -0.3 * 2.0 + 2.0]),
        };
        let once = film(&s, &composed).unwrap();
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = FilmParams {
            alpha: Tensor::ones(&[3]),
            beta: Tensor::zeros(&[3]),
        };
        assert!(film(&s, &bad).is_err());
    }

    #[test]
    fn overrides_reproduce_vanilla_bitwise() {
        let net = Denoiser::new(small(), 2).unwrap();
        let x = batch();
        for t in [0.002, 0.3, 5.0, 80.0] {
            let plain = net.forward(&x, t).unwrap();
            let e = net.embed_time(t).unwrap();
            let bc = net
                .forward_with_overrides(&x, t, &LayerOverride::broadcast(&e, 3))
                .unwrap();
            assert!(plain.bit_eq(&bc));
            let off = net
                .forward_with_overrides(&x, t, &LayerOverride::disabled(3))
                .unwrap();
            assert!(plain.bit_eq(&off));
            let mut direct = LayerOverride::disabled(3);
            for l in 0..3 {
                direct.set_film(l, net.film_params(l, &e).unwrap());
            }
            assert!(plain.bit_eq(&net.forward_with_overrides(&x, t, &direct).unwrap()));
        }
    }

    #[test]
    fn conflicting_override_is_rejected() {
        let net = Denoiser::new(small(), 2).unwrap();
        let e = net.embed_time(1.0).unwrap();
        let mut ov = LayerOverride::broadcast(&e, 3);
        ov.slots[1].film = Some(net.film_params(1, &e).unwrap());
        assert!(net.forward_with_overrides(&batch(), 1.0, &ov).is_err());
    }

    #[test]
    fn zero_network_reduces_to_skip() {
        let mut net = Denoiser::new(small(), 3).unwrap();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = batch();
        let t = 1e4;
        let out = net.forward(&x, t).unwrap();
        let (c_skip, _, _) = precond(t, 0.5);
        for (o, xi) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, c_skip * xi);
            assert!(o.abs() < 1e-7);
        }
    }

    #[test]
    fn capture_matches_forward_and_recomputes() {
        let net = Denoiser::new(small(), 4).unwrap();
        let x = batch();
        let cap = net.capture_features(&x, 2.0, None).unwrap();
        assert!(cap.output.bit_eq(&net.forward(&x, 2.0).unwrap()));
        assert_eq!(cap.layers.len(), 3);
        let e = net.embed_time(2.0).unwrap();
        for (l, f) in cap.layers.iter().enumerate() {
            let p = net.film_params(l, &e).unwrap();
            let re = film(&f.pre, &p).unwrap();
            for (a, b) in re.data().iter().zip(f.post.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Denoiser::new(small(), 4).unwrap();
        let bad = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(net.forward(&bad, 1.0), Err(Error::NonFinite(_))));
        assert!(net.forward(&batch(), 0.0).is_err());
        let wrong = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(net.forward(&wrong, 1.0).is_err());
    }

    #[test]
    fn params_round_trip_through_from_params() {
        let net = Denoiser::new(small(), 9).unwrap();
        let ps: Vec<Tensor> = net.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let back = Denoiser::from_params(small(), ps).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.fingerprint(), net.fingerprint());
    }
}
