//! `analyze` subcommands. Each writes one or two CSV tables.

use mteo_core::analysis::{
    embedding_pca, feature_trajectory_pca, film, film_probe, gain_drop, layer_time_sweep, noise_floor,
    step_transfer, sweep_grid, time_sweep, EnergyReference, FitConfig, PcaResult,
};
use mteo_core::csv_row;
use mteo_core::io::Csv;
use mteo_core::solvers::sample;
use mteo_core::{make_schedule, Result};

use crate::context::{Artifact, Ctx};
use crate::pipeline::{endpoint_metric, endpoints};
use crate::Analysis;

pub fn run(ctx: &mut Ctx, what: Analysis) -> Result<()> {
    match what {
        Analysis::Sweep => sweep(ctx),
        Analysis::LayerSweep => layer_sweep(ctx),
        Analysis::FeaturePca => feature_pca(ctx),
        Analysis::Film => film_cmd(ctx),
        Analysis::EmbPca => emb_pca(ctx),
        Analysis::GainDrop => gain_drop_cmd(ctx),
        Analysis::StepTransfer => transfer(ctx),
    }
}

fn grid(ctx: &Ctx) -> Result<Vec<f64>> {
    let s = &ctx.cfg.schedule;
    sweep_grid(ctx.cfg.analysis.grid_points, s.sigma_min, s.sigma_max)
}

fn sweep(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let heldout = ctx.teachers(Artifact::Heldout, &net)?;
    let grid = grid(ctx)?;
    let mut curve = Csv::new(&["step", "tau", "distance"]);
    let mut summary = Csv::new(&[
        "step",
        "t_cur",
        "t_next",
        "tau_star",
        "interior",
        "interior_fraction",
        "baseline",
        "best",
    ]);
    for step in 0..heldout.student.intervals() {
        let r = time_sweep(&net, &heldout, step, &grid)?;
        for (tau, d) in r.grid.iter().zip(&r.distances) {
            curve.push(csv_row![step, *tau, *d])?;
        }
        // the plain step error is the sweep at tau = t_cur
        let baseline = time_sweep(&net, &heldout, step, &[r.t_cur])?.distances[0];
        summary.push(csv_row![
            step,
            r.t_cur,
            r.t_next,
            r.tau_star,
            r.interior,
            r.interior_fraction(),
            baseline,
            r.distances[r.argmin()]
        ])?;
    }
    ctx.write_csv("sweep.csv", &curve)?;
    ctx.write_csv("sweep_summary.csv", &summary)
}

fn layer_sweep(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let heldout = ctx.teachers(Artifact::Heldout, &net)?;
    let step = ctx.cfg.analysis_step(&heldout.student)?;
    let grid = grid(ctx)?;
    let mut curve = Csv::new(&["layer", "tau", "distance"]);
    let mut summary = Csv::new(&["layer", "step", "tau_star", "grid_index", "interior"]);
    for layer in 0..net.n_layers() {
        let r = layer_time_sweep(&net, &heldout, step, layer, &grid)?;
        for (tau, d) in r.grid.iter().zip(&r.distances) {
            curve.push(csv_row![layer, *tau, *d])?;
        }
        summary.push(csv_row![layer, step, r.tau_star, r.argmin(), r.interior])?;
    }
    ctx.write_csv("layer_sweep.csv", &curve)?;
    ctx.write_csv("layer_sweep_summary.csv", &summary)
}

fn pca_rows(csv: &mut Csv, label: &str, r: &PcaResult) -> Result<()> {
    for (i, (ratio, cum)) in r.ratios.iter().zip(&r.cumulative).enumerate() {
        csv.push(csv_row![label, i + 1, *ratio, *cum])?;
    }
    Ok(())
}

fn feature_pca(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let heldout = ctx.teachers(Artifact::Heldout, &net)?;
    let s = &ctx.cfg.schedule;
    let dense = make_schedule(s.kind, ctx.cfg.analysis.dense_steps, s.sigma_min, s.sigma_max, s.rho)?;
    let traj = sample(&net, ctx.cfg.teacher.kind, &dense, heldout.latents())?;
    let table = feature_trajectory_pca(&net, &traj)?;
    let mut csv = Csv::new(&["layer", "component", "ratio", "cumulative"]);
    let mut summary = Csv::new(&["layer", "pc1", "pc1_2", "pc1_5", "components_90"]);
    for (l, r) in table.iter().enumerate() {
        pca_rows(&mut csv, &l.to_string(), r)?;
        let cum = |k: usize| r.cumulative[k.min(r.cumulative.len()) - 1];
        summary.push(csv_row![l, cum(1), cum(2), cum(5), r.components_for(0.9)])?;
    }
    ctx.write_csv("feature_pca.csv", &csv)?;
    ctx.write_csv("feature_pca_summary.csv", &summary)
}

fn film_cmd(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let heldout = ctx.teachers(Artifact::Heldout, &net)?;
    let step = ctx.cfg.analysis_step(&heldout.student)?;
    let rows = film_probe(&net, &heldout, step, &grid(ctx)?, FitConfig::default())?;
    let mut csv = Csv::new(&["layer", "tau", "pre_l1", "post_l1"]);
    for r in &rows {
        csv.push(csv_row![r.layer, r.tau, r.pre_l1, r.post_l1])?;
    }
    let s = film::summarize(&rows)?;
    let mut summary = Csv::new(&["step", "pre_mean", "pre_var", "post_mean", "post_var"]);
    summary.push(csv_row![step, s.pre_mean, s.pre_var, s.post_mean, s.post_var])?;
    ctx.write_csv("film.csv", &csv)?;
    ctx.write_csv("film_summary.csv", &summary)
}

fn emb_pca(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let bank = ctx.bank(&net)?;
    let r = embedding_pca(&net, &grid(ctx)?, bank.as_ref())?;
    let mut csv = Csv::new(&["arm", "component", "ratio", "cumulative"]);
    pca_rows(&mut csv, "vanilla", &r.vanilla)?;
    pca_rows(&mut csv, "vanilla_film", &r.vanilla_film)?;
    if let Some(m) = &r.mte {
        pca_rows(&mut csv, "mte", m)?;
    }
    if let Some(m) = &r.mte_film {
        pca_rows(&mut csv, "mte_film", m)?;
    }
    ctx.write_csv("emb_pca.csv", &csv)
}

fn gain_drop_cmd(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let bank = ctx.require_bank(&net)?;
    let student = ctx.student()?;
    let n = bank.n_steps();
    let mut subsets: Vec<Vec<usize>> = vec![vec![]];
    subsets.extend((0..n).map(|i| vec![i]));
    subsets.push((0..n).collect());
    let x = ctx.eval_latents(0)?;
    let mut metric = endpoint_metric(ctx)?;
    let results = gain_drop(&net, &bank, ctx.cfg.solver, &student, &x, &subsets, &mut metric)?;

    // seed-to-seed spread of the full-bank metric
    let reference = EnergyReference::new(&ctx.reference()?)?;
    let reps = (0..ctx.cfg.eval.repeats)
        .map(|rep| reference.distance(&endpoints(ctx, &net, Some(&bank), &ctx.eval_latents(rep)?)?))
        .collect::<Result<Vec<_>>>()?;
    let delta = 2.0 * noise_floor(&reps)?;

    let mut csv = Csv::new(&["subset", "m_empty", "m_subset", "m_complement", "m_all", "gain", "drop", "delta"]);
    for r in &results {
        let label = if r.subset.is_empty() {
            "none".to_string()
        } else {
            r.subset.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
        };
        csv.push(csv_row![label, r.m_empty, r.m_subset, r.m_complement, r.m_all, r.gain, r.drop, delta])?;
    }
    ctx.write_csv("gain_drop.csv", &csv)
}

fn transfer(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let bank = ctx.require_bank(&net)?;
    let student = ctx.student()?;
    let x = ctx.eval_latents(0)?;
    let mut metric = endpoint_metric(ctx)?;
    let mut csv = Csv::new(&["k", "with_bank", "vanilla"]);
    let mut ks = vec![1];
    if ctx.cfg.analysis.transfer_k > 1 {
        ks.push(ctx.cfg.analysis.transfer_k);
    }
    for k in ks {
        let r = step_transfer(&net, &bank, &student, k, ctx.cfg.solver, &x, &mut metric)?;
        csv.push(csv_row![r.k, r.with_bank, r.vanilla])?;
    }
    ctx.write_csv("step_transfer.csv", &csv)
}
