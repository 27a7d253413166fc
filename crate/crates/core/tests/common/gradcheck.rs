//! Central finite-difference oracle for tape gradients.

use mteo_core::denoiser::{precond, Denoiser, LayerCond, NetConfig, NoiseLevel};
use mteo_core::rng::{stream, Rng};
use mteo_core::solvers::{SolverKind, SolverState};
use mteo_core::{Result, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Builds a scalar loss from parameter values, returning the loss and the
/// leaves standing for `params` (in order).
pub type LossFn = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>>;

pub struct Case {
    pub name: String,
    pub params: Vec<Tensor>,
    pub loss: LossFn,
    /// At most this many coordinates per parameter are probed.
    pub probes: usize,
}

pub struct Outcome {
    pub name: String,
    pub rel_err: f64,
}

fn randn(r: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

trait Jitter {
    fn add_noise(&self, r: &mut Rng) -> Tensor;
}

impl Jitter for Tensor {
    fn add_noise(&self, r: &mut Rng) -> Tensor {
        let data = self.data().iter().map(|v| v + 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(self.shape().to_vec(), data).unwrap()
    }
}

fn value(loss: &LossFn, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let (l, _) = loss(&mut tape, params).unwrap();
    tape.value(l).unwrap().item().unwrap()
}

/// `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` over the probed coordinates.
pub fn check(case: &Case, r: &mut Rng) -> Outcome {
    let mut tape = Tape::new();
    let (l, leaves) = (case.loss)(&mut tape, &case.params).unwrap();
    tape.backward(l).unwrap();
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (p, leaf) in leaves.iter().enumerate() {
        let n = case.params[p].numel();
        let analytic = match tape.grad(*leaf).unwrap() {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let idx: Vec<usize> = if n <= case.probes {
            (0..n).collect()
        } else {
            (0..case.probes).map(|_| r.random_range(0..n)).collect()
        };
        for i in idx {
            let x = case.params[p].data()[i];
            let h = 1e-5 * x.abs().max(1.0);
            let mut plus = case.params.clone();
            plus[p].data_mut()[i] = x + h;
            let mut minus = case.params.clone();
            minus[p].data_mut()[i] = x - h;
            let fd = (value(&case.loss, &plus) - value(&case.loss, &minus)) / (2.0 * h);
            diff += (analytic[i] - fd).powi(2);
            na += analytic[i].powi(2);
            nn += fd.powi(2);
        }
    }
    let denom = na.sqrt().max(nn.sqrt()).max(1e-10);
    Outcome {
        name: case.name.clone(),
        rel_err: diff.sqrt() / denom,
    }
}

/// Contracts `out` with fixed random weights so every output entry matters.
fn contract(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn leaves(tape: &mut Tape, ps: &[Tensor]) -> Vec<Var> {
    ps.iter().map(|p| tape.param(p.clone())).collect()
}

fn unary_case(name: &str, r: &mut Rng, f: fn(&mut Tape, Var) -> Result<Var>, positive: bool) -> Case {
    let shape = [r.random_range(1..5), r.random_range(1..5)];
    let x = if positive { uniform(r, &shape, 0.3, 3.0) } else { randn(r, &shape, 1.5) };
    let w = randn(r, &shape, 1.0);
    Case {
        name: name.into(),
        params: vec![x],
        probes: 32,
        loss: Box::new(move |t, ps| {
            let v = leaves(t, ps);
            let y = f(t, v[0])?;
            Ok((contract(t, y, &w)?, v))
        }),
    }
}

fn binary_case(name: &str, r: &mut Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let (b, c) = (r.random_range(1..5), r.random_range(1..5));
    // same shape, broadcast rhs row, broadcast scalar lhs
    let (sa, sb): (Vec<usize>, Vec<usize>) = match r.random_range(0..3) {
        0 => (vec![b, c], vec![b, c]),
        1 => (vec![b, c], vec![c]),
        _ => (vec![1], vec![b, c]),
    };
    let out_shape = if sa.iter().product::<usize>() >= sb.iter().product::<usize>() { sa.clone() } else { sb.clone() };
    let params = vec![randn(r, &sa, 1.0), randn(r, &sb, 1.0)];
    let w = randn(r, &out_shape, 1.0);
    Case {
        name: format!("{name}{sa:?}{sb:?}"),
        params,
        probes: 32,
        loss: Box::new(move |t, ps| {
            let v = leaves(t, ps);
            let y = f(t, v[0], v[1])?;
            Ok((contract(t, y, &w)?, v))
        }),
    }
}

fn primitive(kind: usize, r: &mut Rng) -> Case {
    match kind {
        0 => binary_case("add", r, |t, a, b| t.add(a, b)),
        1 => binary_case("sub", r, |t, a, b| t.sub(a, b)),
        2 => binary_case("mul", r, |t, a, b| t.mul(a, b)),
        3 => unary_case("sin", r, |t, a| t.sin(a), false),
        4 => unary_case("cos", r, |t, a| t.cos(a), false),
        5 => unary_case("exp", r, |t, a| t.exp(a), false),
        6 => unary_case("log", r, |t, a| t.log(a), true),
        7 => unary_case("silu", r, |t, a| t.silu(a), false),
        8 => unary_case("square", r, |t, a| t.square(a), false),
        9 => unary_case("mean", r, |t, a| t.mean(a), false),
        10 => {
            let c = r.random_range(-3.0..3.0);
            let shape = [r.random_range(1..4), r.random_range(1..4)];
            let params = vec![randn(r, &shape, 1.0)];
            let w = randn(r, &shape, 1.0);
            Case {
                name: "scale".into(),
                params,
                probes: 16,
                loss: Box::new(move |t, ps| {
                    let v = leaves(t, ps);
                    let y = t.scale(v[0], c)?;
                    Ok((contract(t, y, &w)?, v))
                }),
            }
        }
        11 => {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            let params = vec![randn(r, &[m, k], 1.0), randn(r, &[k, n], 1.0)];
            let w = randn(r, &[m, n], 1.0);
            Case {
                name: "matmul".into(),
                params,
                probes: 32,
                loss: Box::new(move |t, ps| {
                    let v = leaves(t, ps);
                    let y = t.matmul(v[0], v[1])?;
                    Ok((contract(t, y, &w)?, v))
                }),
            }
        }
        12 => {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            let vector = r.random_bool(0.3);
            let xs: Vec<usize> = if vector { vec![k] } else { vec![m, k] };
            let os: Vec<usize> = if vector { vec![n] } else { vec![m, n] };
            let params = vec![randn(r, &xs, 1.0), randn(r, &[k, n], 1.0), randn(r, &[n], 1.0)];
            let w = randn(r, &os, 1.0);
            Case {
                name: format!("affine{xs:?}"),
                params,
                probes: 32,
                loss: Box::new(move |t, ps| {
                    let v = leaves(t, ps);
                    let y = t.affine(v[0], v[1], v[2])?;
                    Ok((contract(t, y, &w)?, v))
                }),
            }
        }
        13 => {
            let axis = r.random_range(0..2);
            let (b, c1, c2) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            let (s1, s2, so) = if axis == 1 {
                (vec![b, c1], vec![b, c2], vec![b, c1 + c2])
            } else {
                (vec![c1, b], vec![c2, b], vec![c1 + c2, b])
            };
            let params = vec![randn(r, &s1, 1.0), randn(r, &s2, 1.0)];
            let w = randn(r, &so, 1.0);
            Case {
                name: format!("concat{axis}"),
                params,
                probes: 32,
                loss: Box::new(move |t, ps| {
                    let v = leaves(t, ps);
                    let y = t.concat(&v, axis)?;
                    Ok((contract(t, y, &w)?, v))
                }),
            }
        }
        14 => {
            let axis = r.random_range(0..2);
            let shape = [r.random_range(2..5), r.random_range(2..5)];
            let start = r.random_range(0..shape[axis] - 1);
            let len = r.random_range(1..shape[axis] - start + 1);
            let mut so = shape.to_vec();
            so[axis] = len;
            let params = vec![randn(r, &shape, 1.0)];
            let w = randn(r, &so, 1.0);
            Case {
                name: format!("slice{axis}"),
                params,
                probes: 32,
                loss: Box::new(move |t, ps| {
                    let v = leaves(t, ps);
                    let y = t.slice(v[0], axis, start, len)?;
                    Ok((contract(t, y, &w)?, v))
                }),
            }
        }
        _ => {
            let (a, b) = (r.random_range(1..4), r.random_range(1..4));
            let params = vec![randn(r, &[a, b], 1.0)];
            let w = randn(r, &[b, a], 1.0);
            Case {
                name: "reshape-sum".into(),
                params,
                probes: 16,
                loss: Box::new(move |t, ps| {
                    let v = leaves(t, ps);
                    let y = t.reshape(v[0], &[b, a])?;
                    let sq = t.square(y)?;
                    let s = t.sum(sq)?;
                    let c = contract(t, y, &w)?;
                    Ok((t.add(s, c)?, v))
                }),
            }
        }
    }
}

fn tiny_net(r: &mut Rng) -> Denoiser {
    let cfg = NetConfig {
        n_blocks: 2,
        hidden: 6,
        emb_dim: 4,
        n_fourier: 3,
        ..Default::default()
    };
    Denoiser::new(cfg, r.random()).unwrap()
}

fn composite(kind: usize, r: &mut Rng) -> Case {
    let net = tiny_net(r);
    let cfg = net.config().clone();
    let b = r.random_range(2..5);
    let x = randn(r, &[b, 2], 2.0);
    let t = (r.random_range(-2.0f64..3.0)).exp();
    match kind {
        // EDM training loss against the weights, per-sample noise levels
        0 => {
            let sig: Vec<f64> = (0..b).map(|_| r.random_range(-2.0f64..3.0).exp()).collect();
            let x0 = randn(r, &[b, 2], 1.0);
            let params = net.named_params().into_iter().map(|(_, p)| p.clone()).collect();
            Case {
                name: "edm-loss".into(),
                params,
                probes: 6,
                loss: Box::new(move |tape, ps| {
                    let n = Denoiser::from_params(cfg.clone(), ps.to_vec())?;
                    let w = n.bind(tape, true);
                    let c_in: Vec<f64> = sig.iter().map(|&s| precond(s, 0.5).2).collect();
                    let mut scaled = x.clone();
                    for (i, c) in c_in.iter().enumerate() {
                        scaled.data_mut()[2 * i] *= c;
                        scaled.data_mut()[2 * i + 1] *= c;
                    }
                    let xin = tape.constant(scaled);
                    let f = n.network_on_tape(tape, &w, xin, NoiseLevel::PerSample(&sig), None, None)?;
                    let tgt = tape.constant(x0.clone());
                    let d = tape.sub(f, tgt)?;
                    let sq = tape.square(d)?;
                    Ok((tape.mean(sq)?, w.vars()))
                }),
            }
        }
        // one solver step with per-layer embeddings as leaves
        1 | 2 => {
            let e = net.embed_time(t).unwrap();
            let params: Vec<Tensor> = (0..net.n_layers())
                .map(|_| e.add_noise(r))
                .collect();
            let target = randn(r, &[b, 2], 1.0);
            let solver = if kind == 1 { SolverKind::Ddim } else { SolverKind::DpmPp3m };
            let t_next = t * r.random_range(0.2..0.9);
            // warm history for the multistep solver
            let mut state = SolverState::new(solver);
            if kind == 2 {
                let d_prev = net.forward(&x, t * 1.7).unwrap();
                state.push(&x, &d_prev, t * 1.7).unwrap();
            }
            Case {
                name: format!("mteo-step-{solver}"),
                params,
                probes: 8,
                loss: Box::new(move |tape, ps| {
                    let w = net.bind(tape, false);
                    let phi = leaves(tape, ps);
                    let conds: Vec<LayerCond> = phi.iter().map(|&p| LayerCond::Embedding(p)).collect();
                    let xv = tape.constant(x.clone());
                    let d = net.denoise_on_tape(tape, &w, xv, t, Some(&conds), None)?;
                    let plan = state.plan(t, t_next)?;
                    let xn = state.apply_on_tape(tape, &plan, &x, d)?;
                    let tg = tape.constant(target.clone());
                    let diff = tape.sub(xn, tg)?;
                    let sq = tape.square(diff)?;
                    Ok((tape.mean(sq)?, phi))
                }),
            }
        }
        // direct FiLM parameters
        _ => {
            let h = cfg.hidden;
            let params: Vec<Tensor> = (0..2 * net.n_layers())
                .map(|i| if i % 2 == 0 { uniform(r, &[h], 0.5, 1.5) } else { randn(r, &[h], 0.3) })
                .collect();
            let w_out = randn(r, &[b, 2], 1.0);
            Case {
                name: "film-direct".into(),
                params,
                probes: 8,
                loss: Box::new(move |tape, ps| {
                    let w = net.bind(tape, false);
                    let v = leaves(tape, ps);
                    let conds: Vec<LayerCond> = v
                        .chunks(2)
                        .map(|ab| LayerCond::Film { alpha: ab[0], beta: ab[1] })
                        .collect();
                    let xv = tape.constant(x.clone());
                    let d = net.denoise_on_tape(tape, &w, xv, t, Some(&conds), None)?;
                    Ok((contract(tape, d, &w_out)?, v))
                }),
            }
        }
    }
}

pub const N_PRIMITIVES: usize = 16;
pub const N_COMPOSITES: usize = 4;

/// `n` randomized cases cycling through every primitive and composite.
pub fn suite(n: usize, seed: u64) -> Vec<Outcome> {
    let mut r = stream(seed, "gradcheck", 0);
    (0..n)
        .map(|i| {
            let k = i % (N_PRIMITIVES + N_COMPOSITES);
            let case = if k < N_PRIMITIVES { primitive(k, &mut r) } else { composite(k - N_PRIMITIVES, &mut r) };
            check(&case, &mut r)
        })
        .collect()
}
