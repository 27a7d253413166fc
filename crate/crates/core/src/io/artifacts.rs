//! Container encodings of the pipeline artifacts.

use crate::autodiff::Tensor;
use crate::denoiser::{Denoiser, NetConfig};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::mteo::{EmbeddingBank, StepParams, Variant};
use crate::schedule::{Schedule, ScheduleKind};
use crate::solvers::SolverKind;
use crate::teacher::TeacherSet;

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    let found = c.meta("artifact")?;
    if found != kind {
        return Err(Error::Format(format!("expected a {kind} artifact, found {found}")));
    }
    Ok(())
}

fn put_schedule(c: &mut Container, prefix: &str, s: &Schedule) {
    c.set_meta(&format!("{prefix}.kind"), s.kind());
    c.set_meta(&format!("{prefix}.rho"), format!("{:?}", s.rho()));
    c.set_meta(&format!("{prefix}.fingerprint"), s.fingerprint());
    c.push(&format!("{prefix}.times"), Tensor::vector(s.times().to_vec()));
}

fn get_schedule(c: &Container, prefix: &str) -> Result<Schedule> {
    let kind: ScheduleKind = c.meta(&format!("{prefix}.kind"))?.parse()?;
    let rho: f64 = c.meta_parse(&format!("{prefix}.rho"))?;
    let times = c.tensor(&format!("{prefix}.times"))?.data().to_vec();
    let s = Schedule::from_times(kind, rho, times)?;
    let stored = c.meta(&format!("{prefix}.fingerprint"))?;
    if stored != s.fingerprint() {
        return Err(Error::Fingerprint {
            what: "stored schedule",
            expected: stored.to_string(),
            found: s.fingerprint(),
        });
    }
    Ok(s)
}

pub fn backbone_to_container(net: &Denoiser) -> Container {
    let mut c = Container::new();
    let cfg = net.config();
    c.set_meta("artifact", "backbone");
    c.set_meta("data_dim", cfg.data_dim);
    c.set_meta("n_blocks", cfg.n_blocks);
    c.set_meta("hidden", cfg.hidden);
    c.set_meta("emb_dim", cfg.emb_dim);
    c.set_meta("n_fourier", cfg.n_fourier);
    c.set_meta("sigma_data", format!("{:?}", cfg.sigma_data));
    c.set_meta("fingerprint", net.fingerprint());
    for (name, t) in net.named_params() {
        c.push(&name, t.clone());
    }
    c
}

pub fn backbone_from_container(c: &Container) -> Result<Denoiser> {
    expect_kind(c, "backbone")?;
    let cfg = NetConfig {
        data_dim: c.meta_parse("data_dim")?,
        n_blocks: c.meta_parse("n_blocks")?,
        hidden: c.meta_parse("hidden")?,
        emb_dim: c.meta_parse("emb_dim")?,
        n_fourier: c.meta_parse("n_fourier")?,
        sigma_data: c.meta_parse("sigma_data")?,
    };
    let template = Denoiser::new(cfg.clone(), 0)?;
    let params = template
        .named_params()
        .iter()
        .map(|(n, _)| c.tensor(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    let net = Denoiser::from_params(cfg, params)?;
    let stored = c.meta("fingerprint")?;
    if stored != net.fingerprint() {
        return Err(Error::Fingerprint {
            what: "stored backbone",
            expected: stored.to_string(),
            found: net.fingerprint(),
        });
    }
    Ok(net)
}

pub fn teachers_to_container(t: &TeacherSet) -> Container {
    let mut c = Container::new();
    c.set_meta("artifact", "teachers");
    c.set_meta("k", t.k);
    c.set_meta("kind", t.kind);
    c.set_meta("global_seed", t.global_seed);
    c.set_meta("seed_lo", t.seed_lo);
    c.set_meta("seed_hi", t.seed_hi);
    c.set_meta("backbone", &t.backbone);
    put_schedule(&mut c, "student", &t.student);
    for (i, s) in t.states.iter().enumerate() {
        c.push(&format!("state.{i}"), s.clone());
    }
    c
}

pub fn teachers_from_container(c: &Container) -> Result<TeacherSet> {
    expect_kind(c, "teachers")?;
    let student = get_schedule(c, "student")?;
    let states = (0..student.len())
        .map(|i| c.tensor(&format!("state.{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let kind: SolverKind = c.meta("kind")?.parse()?;
    let t = TeacherSet {
        student,
        k: c.meta_parse("k")?,
        kind,
        global_seed: c.meta_parse("global_seed")?,
        seed_lo: c.meta_parse("seed_lo")?,
        seed_hi: c.meta_parse("seed_hi")?,
        states,
        backbone: c.meta("backbone")?.to_string(),
    };
    t.validate()?;
    Ok(t)
}

pub fn bank_to_container(b: &EmbeddingBank) -> Container {
    let mut c = Container::new();
    c.set_meta("artifact", "bank");
    c.set_meta("variant", b.variant);
    c.set_meta("n_layers", b.n_layers);
    c.set_meta("n_steps", b.n_steps());
    c.set_meta("schedule", &b.schedule_fp);
    c.set_meta("backbone", &b.backbone_fp);
    for (i, s) in b.steps.iter().enumerate() {
        for (j, t) in s.0.iter().enumerate() {
            c.push(&format!("step.{i}.{j}"), t.clone());
        }
    }
    c
}

pub fn bank_from_container(c: &Container) -> Result<EmbeddingBank> {
    expect_kind(c, "bank")?;
    let variant: Variant = c.meta("variant")?.parse()?;
    let n_layers: usize = c.meta_parse("n_layers")?;
    let n_steps: usize = c.meta_parse("n_steps")?;
    let per_step = match variant {
        Variant::Multi => n_layers,
        Variant::Single => 1,
        Variant::Deep => 2 * n_layers,
    };
    let steps = (0..n_steps)
        .map(|i| {
            (0..per_step)
                .map(|j| c.tensor(&format!("step.{i}.{j}")).cloned())
                .collect::<Result<Vec<_>>>()
                .map(StepParams)
        })
        .collect::<Result<Vec<_>>>()?;
    let b = EmbeddingBank {
        variant,
        steps,
        n_layers,
        schedule_fp: c.meta("schedule")?.to_string(),
        backbone_fp: c.meta("backbone")?.to_string(),
    };
    b.validate()?;
    Ok(b)
}
