//! Per-run state: resolved config, artifact paths, and the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mteo_core::data::sample_gmm_with;
use mteo_core::denoiser::Denoiser;
use mteo_core::fingerprint;
use mteo_core::io::artifacts::{
    backbone_from_container, bank_from_container, teachers_from_container,
};
use mteo_core::io::config::RunConfig;
use mteo_core::io::{read_file, write_atomic, Container, Csv};
use mteo_core::mteo::EmbeddingBank;
use mteo_core::rng::stream;
use mteo_core::solvers::latents;
use mteo_core::teacher::TeacherSet;
use mteo_core::{Result, Schedule, Tensor};

/// Latent indices for evaluation start here, far above any teacher seed.
const EVAL_SEED_BASE: u64 = 1 << 32;

#[derive(Clone, Copy)]
pub enum Artifact {
    Backbone,
    Teachers,
    Heldout,
    Bank,
}

impl Artifact {
    fn file(self) -> &'static str {
        match self {
            Artifact::Backbone => "backbone.bin",
            Artifact::Teachers => "teachers.bin",
            Artifact::Heldout => "heldout.bin",
            Artifact::Bank => "bank.bin",
        }
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    command: &'static str,
    start: Instant,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
    notes: Vec<(String, String)>,
}

impl Ctx {
    pub fn new(
        command: &'static str,
        config: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: PathBuf,
    ) -> Result<Self> {
        let mut cfg = RunConfig::load(config, overrides)?;
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        Ok(Self {
            cfg,
            out,
            command,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        })
    }

    /// Configured path, or the default file name inside the output directory.
    pub fn path(&self, a: Artifact) -> PathBuf {
        let p = &self.cfg.paths;
        let configured = match a {
            Artifact::Backbone => &p.backbone,
            Artifact::Teachers => &p.teachers,
            Artifact::Heldout => &p.heldout,
            Artifact::Bank => &p.bank,
        };
        if configured.is_empty() {
            self.out.join(a.file())
        } else {
            PathBuf::from(configured)
        }
    }

    fn read(&mut self, a: Artifact) -> Result<Container> {
        let path = self.path(a);
        let bytes = read_file(&path)?;
        self.inputs.push((path.display().to_string(), fingerprint::of_bytes(&bytes)));
        Container::from_bytes(&bytes)
    }

    pub fn backbone(&mut self) -> Result<Denoiser> {
        let c = self.read(Artifact::Backbone)?;
        backbone_from_container(&c)
    }

    pub fn student(&self) -> Result<Schedule> {
        self.cfg.student_schedule()
    }

    /// Teacher set checked against the configured schedule and `net`.
    pub fn teachers(&mut self, a: Artifact, net: &Denoiser) -> Result<TeacherSet> {
        let c = self.read(a)?;
        let t = teachers_from_container(&c)?;
        t.check(&self.student()?, net)?;
        Ok(t)
    }

    /// The bank, if one is configured or present in the output directory.
    /// An explicitly configured bank must exist.
    pub fn bank(&mut self, net: &Denoiser) -> Result<Option<EmbeddingBank>> {
        if self.cfg.paths.bank.is_empty() && !self.path(Artifact::Bank).exists() {
            return Ok(None);
        }
        let c = self.read(Artifact::Bank)?;
        let b = bank_from_container(&c)?;
        b.check(&self.student()?, net)?;
        Ok(Some(b))
    }

    /// Like [`Ctx::bank`] but required.
    pub fn require_bank(&mut self, net: &Denoiser) -> Result<EmbeddingBank> {
        let path = self.path(Artifact::Bank);
        self.bank(net)?
            .ok_or_else(|| mteo_core::Error::Missing(path.display().to_string()))
    }

    pub fn write_artifact(&mut self, a: Artifact, c: &Container) -> Result<()> {
        let path = self.path(a);
        let bytes = c.to_bytes();
        write_atomic(&path, &bytes)?;
        self.outputs.push((path.display().to_string(), fingerprint::of_bytes(&bytes)));
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, csv: &Csv) -> Result<()> {
        let path = self.out.join(name);
        let text = csv.render();
        write_atomic(&path, text.as_bytes())?;
        self.outputs.push((path.display().to_string(), fingerprint::of_bytes(text.as_bytes())));
        Ok(())
    }

    /// Extra key/value recorded in the manifest's `[run]` section.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.into(), value.to_string()));
    }

    /// Exact mixture draws used as the evaluation reference.
    pub fn reference(&self) -> Result<Tensor> {
        let mut r = stream(self.cfg.seed, "eval-reference", 0);
        sample_gmm_with(&self.cfg.gmm(), self.cfg.eval.n_ref, &mut r)
    }

    /// Latents for evaluation repeat `rep`.
    pub fn eval_latents(&self, rep: usize) -> Result<Tensor> {
        let n = self.cfg.eval.n_samples as u64;
        let lo = EVAL_SEED_BASE + rep as u64 * n;
        let idx: Vec<u64> = (lo..lo + n).collect();
        latents(self.cfg.seed, &idx, self.cfg.net.data_dim, self.cfg.schedule.sigma_max)
    }

    /// Writes `manifest.<command>.txt` with the config snapshot, inputs,
    /// outputs and wall time.
    pub fn finish(self) -> Result<()> {
        let mut m = String::new();
        m.push_str("[run]\n");
        m.push_str(&format!("command = {}\n", self.command));
        m.push_str(&format!("seed = {}\n", self.cfg.seed));
        m.push_str(&format!("wall_time_s = {:.3}\n", self.start.elapsed().as_secs_f64()));
        for (k, v) in &self.notes {
            m.push_str(&format!("{k} = {v}\n"));
        }
        for (title, list) in [("inputs", &self.inputs), ("outputs", &self.outputs)] {
            m.push_str(&format!("\n[{title}]\n"));
            for (p, d) in list {
                m.push_str(&format!("{p} = {d}\n"));
            }
        }
        for line in self.cfg.render().lines() {
            m.push('\n');
            match line.strip_prefix('[') {
                Some(sec) => m.push_str(&format!("[config.{sec}")),
                None => m.push_str(line),
            }
        }
        m.push('\n');
        let path = self.out.join(format!("manifest.{}.txt", self.command));
        write_atomic(&path, m.as_bytes())
    }
}
