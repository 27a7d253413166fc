//! Training, teacher generation, sampling and evaluation commands.

use mteo_core::analysis::{noise_floor, sliced_wasserstein, EnergyReference};
use mteo_core::csv_row;
use mteo_core::data::train_backbone as fit_backbone;
use mteo_core::io::artifacts::{backbone_to_container, bank_to_container, teachers_to_container};
use mteo_core::io::Csv;
use mteo_core::mteo::{init_bank, sample_with_bank, train, trajectory_losses, EmbeddingBank};
use mteo_core::teacher::gen_teachers as integrate_teachers;
use mteo_core::denoiser::Denoiser;
use mteo_core::{Result, Tensor};

use crate::context::{Artifact, Ctx};

pub fn train_backbone(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let (net, report) = fit_backbone(&cfg.gmm(), cfg.net.clone(), &cfg.backbone)?;
    ctx.write_artifact(Artifact::Backbone, &backbone_to_container(&net))?;
    let mut csv = Csv::new(&["epoch", "loss"]);
    csv.push(csv_row!["init", report.initial_loss])?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push(csv_row![e.to_string(), *l])?;
    }
    ctx.write_csv("backbone_loss.csv", &csv)?;
    ctx.note("backbone", net.fingerprint());
    Ok(())
}

pub fn gen_teachers(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let student = ctx.student()?;
    let t = ctx.cfg.teacher.clone();
    let seed = ctx.cfg.seed;
    let train = integrate_teachers(&net, &student, t.k, t.kind, seed, t.seed_lo, t.seed_hi)?;
    let heldout = integrate_teachers(&net, &student, t.k, t.kind, seed, t.heldout_lo, t.heldout_hi)?;
    ctx.write_artifact(Artifact::Teachers, &teachers_to_container(&train))?;
    ctx.write_artifact(Artifact::Heldout, &teachers_to_container(&heldout))?;
    ctx.note("schedule", student.fingerprint());
    Ok(())
}

pub fn train_mteo(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let teachers = ctx.teachers(Artifact::Teachers, &net)?;
    let heldout = ctx.teachers(Artifact::Heldout, &net)?;
    let (kind, variant) = (ctx.cfg.solver, ctx.cfg.variant);
    let fresh = init_bank(&net, &teachers.student, variant)?;
    let (bank, report) = train(&fresh, &teachers, &net, kind, &ctx.cfg.mteo)?;
    ctx.write_artifact(Artifact::Bank, &bank_to_container(&bank))?;

    let mut curve = Csv::new(&["step", "epoch", "loss"]);
    for (i, e, l) in report.loss_rows() {
        curve.push(csv_row![i, e, l])?;
    }
    ctx.write_csv("mteo_loss.csv", &curve)?;

    let before = trajectory_losses(&net, Some(&fresh), &heldout, kind)?;
    let after = trajectory_losses(&net, Some(&bank), &heldout, kind)?;
    let t = teachers.student.times();
    let mut steps = Csv::new(&[
        "step",
        "t_cur",
        "t_next",
        "initial_loss",
        "final_loss",
        "epochs",
        "stop",
        "heldout_fresh",
        "heldout_trained",
    ]);
    for (i, s) in report.steps.iter().enumerate() {
        steps.push(csv_row![
            i,
            t[i],
            t[i + 1],
            s.initial_loss,
            s.final_loss,
            s.epochs,
            s.stop.to_string(),
            before[i],
            after[i]
        ])?;
    }
    ctx.write_csv("mteo_steps.csv", &steps)?;
    ctx.note("bank", bank.fingerprint());
    ctx.note("train_time_s", format!("{:.3}", report.wall_time));
    Ok(())
}

pub fn endpoints(ctx: &Ctx, net: &Denoiser, bank: Option<&EmbeddingBank>, x: &Tensor) -> Result<Tensor> {
    let student = ctx.student()?;
    Ok(sample_with_bank(net, ctx.cfg.solver, &student, x, bank, None)?.last().clone())
}

pub fn sample(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let bank = ctx.bank(&net)?;
    let x = endpoints(ctx, &net, bank.as_ref(), &ctx.eval_latents(0)?)?;
    let mut csv = Csv::new(&["index", "x", "y"]);
    for i in 0..x.rows() {
        let r = x.row(i);
        csv.push(csv_row![i, r[0], r[1]])?;
    }
    ctx.write_csv("samples.csv", &csv)?;
    ctx.note("arm", if bank.is_some() { "bank" } else { "vanilla" });
    Ok(())
}

pub fn eval(ctx: &mut Ctx) -> Result<()> {
    let net = ctx.backbone()?;
    let bank = ctx.bank(&net)?;
    let reference = ctx.reference()?;
    let energy = EnergyReference::new(&reference)?;
    let e = ctx.cfg.eval.clone();
    let mut arms: Vec<(&str, Option<&EmbeddingBank>)> = vec![("vanilla", None)];
    if let Some(b) = &bank {
        arms.push(("bank", Some(b)));
    }
    let mut rows = Csv::new(&["arm", "repeat", "energy_distance", "sliced_w1"]);
    let mut summary = Csv::new(&["arm", "energy_mean", "energy_std", "sliced_w1_mean"]);
    for (name, b) in arms {
        let mut eds = Vec::new();
        let mut sws = Vec::new();
        for rep in 0..e.repeats {
            let x = endpoints(ctx, &net, b, &ctx.eval_latents(rep)?)?;
            let ed = energy.distance(&x)?;
            let sw = sliced_wasserstein(&x, &reference, e.n_proj, ctx.cfg.seed)?;
            rows.push(csv_row![name, rep, ed, sw])?;
            eds.push(ed);
            sws.push(sw);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        summary.push(csv_row![name, mean(&eds), noise_floor(&eds)?, mean(&sws)])?;
    }
    ctx.write_csv("eval.csv", &rows)?;
    ctx.write_csv("eval_summary.csv", &summary)?;
    Ok(())
}

/// Endpoint metric used by the ablations: energy distance to the
/// evaluation reference.
pub fn endpoint_metric(ctx: &Ctx) -> Result<impl FnMut(&Tensor) -> Result<f64>> {
    let reference = EnergyReference::new(&ctx.reference()?)?;
    Ok(move |x: &Tensor| reference.distance(x))
}
