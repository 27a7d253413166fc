use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mteo_core::analysis::{energy_distance, EnergyReference};
use mteo_core::denoiser::{Denoiser, LayerOverride, NetConfig};
use mteo_core::solvers::{latent_range, step, SolverKind, SolverState};
use mteo_core::Tape;

const BATCH: usize = 256;

fn net() -> Denoiser {
    Denoiser::new(NetConfig::default(), 0).unwrap()
}

fn forward(c: &mut Criterion) {
    let net = net();
    let x = latent_range(0, BATCH, 2, 10.0).unwrap();
    c.bench_function("denoiser forward 256", |b| b.iter(|| net.forward(black_box(&x), 2.5).unwrap()));
}

fn solver_steps(c: &mut Criterion) {
    let net = net();
    let x = latent_range(0, BATCH, 2, 80.0).unwrap();
    let times = [80.0, 20.0, 5.0, 1.0, 0.2];
    for kind in [SolverKind::Ddim, SolverKind::Ipndm, SolverKind::DpmPp3m] {
        c.bench_function(&format!("{kind} 4 steps 256"), |b| {
            b.iter(|| {
                let mut state = SolverState::new(kind);
                let mut x = x.clone();
                for i in 0..4 {
                    x = step(&net, &mut state, &x, times[i], times[i + 1], i).unwrap();
                }
                x
            })
        });
    }
}

fn mteo_step_loss(c: &mut Criterion) {
    let net = net();
    let x = latent_range(0, BATCH, 2, 5.0).unwrap();
    let target = latent_range(1, BATCH, 2, 1.0).unwrap();
    let (t, t_next) = (5.0, 1.0);
    let ov = LayerOverride::broadcast(&net.embed_time(t).unwrap(), net.n_layers());
    let state = SolverState::new(SolverKind::Ddim);
    c.bench_function("mteo step loss and gradient 256", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let w = net.bind(&mut tape, false);
            let (conds, leaves) = ov.to_conds(&mut tape, true).unwrap();
            let xv = tape.constant(x.clone());
            let d = net.denoise_on_tape(&mut tape, &w, xv, t, Some(&conds), None).unwrap();
            let plan = state.plan(t, t_next).unwrap();
            let xn = state.apply_on_tape(&mut tape, &plan, &x, d).unwrap();
            let tv = tape.constant(target.clone());
            let diff = tape.sub(xn, tv).unwrap();
            let sq = tape.square(diff).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(leaves[0]).unwrap().cloned()
        })
    });
}

fn energy(c: &mut Criterion) {
    let a = latent_range(0, 1024, 2, 1.0).unwrap();
    let r = latent_range(1, 4096, 2, 1.0).unwrap();
    c.bench_function("energy distance 1024x1024", |b| {
        b.iter(|| energy_distance(black_box(&a), &r.select_rows(&(0..1024).collect::<Vec<_>>()).unwrap()).unwrap())
    });
    let reference = EnergyReference::new(&r).unwrap();
    c.bench_function("energy distance 1024 vs cached 4096", |b| {
        b.iter(|| reference.distance(black_box(&a)).unwrap())
    });
}

criterion_group!(benches, forward, solver_steps, mteo_step_loss, energy);
criterion_main!(benches);
