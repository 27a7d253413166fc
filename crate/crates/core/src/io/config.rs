//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every key must be known; overrides use `section.key=value`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{GmmSpec, TrainBackboneConfig};
use crate::denoiser::NetConfig;
use crate::error::{Error, Result};
use crate::mteo::{MteoConfig, Variant};
use crate::schedule::{make_schedule, Schedule, ScheduleKind};
use crate::solvers::SolverKind;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parsed `[section] key = value` text, before typing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    entries: BTreeMap<(String, String), String>,
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = n + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|s| valid_ident(s))
                    .ok_or_else(|| cfg_err(format!("line {lineno}: malformed section header `{line}`")))?;
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {lineno}: expected `key = value`, got `{line}`")))?;
            let sec = section
                .clone()
                .ok_or_else(|| cfg_err(format!("line {lineno}: key outside any section")))?;
            let key = k.trim();
            if !valid_ident(key) {
                return Err(cfg_err(format!("line {lineno}: invalid key `{key}`")));
            }
            if doc
                .entries
                .insert((sec.clone(), key.to_string()), v.trim().to_string())
                .is_some()
            {
                return Err(cfg_err(format!("line {lineno}: duplicate key `{sec}.{key}`")));
            }
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| cfg_err(format!("{}: not utf-8", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("override `{spec}` is not section.key=value")))?;
        let (sec, key) = path
            .trim()
            .split_once('.')
            .filter(|(s, k)| valid_ident(s) && valid_ident(k))
            .ok_or_else(|| cfg_err(format!("override `{spec}` is not section.key=value")))?;
        self.entries
            .insert((sec.to_string(), key.to_string()), value.trim().to_string());
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.entries
            .iter()
            .map(|((s, k), v)| (s.as_str(), k.as_str(), v.as_str()))
    }
}

fn parse_value<T: FromStr>(sec: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| cfg_err(format!("`{sec}.{key}`: cannot parse `{v}`")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    /// Number of time points, i.e. intervals + 1.
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSection {
    pub k: usize,
    pub kind: SolverKind,
    pub seed_lo: u64,
    pub seed_hi: u64,
    pub heldout_lo: u64,
    pub heldout_hi: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// Generated samples per metric evaluation.
    pub n_samples: usize,
    /// Exact mixture draws used as the reference set.
    pub n_ref: usize,
    pub n_proj: usize,
    /// Independent sample sets used to estimate the metric noise floor.
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSection {
    pub grid_points: usize,
    pub dense_steps: usize,
    /// Step index to analyse, or `largest` for the widest interval.
    pub step: String,
    pub transfer_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsSection {
    pub backbone: String,
    pub teachers: String,
    pub heldout: String,
    pub bank: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub net: NetConfig,
    pub backbone: TrainBackboneConfig,
    pub schedule: ScheduleSection,
    pub solver: SolverKind,
    pub teacher: TeacherSection,
    pub mteo: MteoConfig,
    pub variant: Variant,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection {
                modes: 8,
                radius: 8.0,
                std: 0.5,
            },
            net: NetConfig::default(),
            backbone: TrainBackboneConfig {
                epochs: 30,
                ..Default::default()
            },
            schedule: ScheduleSection {
                kind: ScheduleKind::Polynomial,
                steps: 5,
                sigma_min: 0.002,
                sigma_max: 80.0,
                rho: 7.0,
            },
            solver: SolverKind::Ddim,
            teacher: TeacherSection {
                k: 5,
                kind: SolverKind::Ipndm,
                seed_lo: 50000,
                seed_hi: 50256,
                heldout_lo: 60000,
                heldout_hi: 60064,
            },
            mteo: MteoConfig::default(),
            variant: Variant::Multi,
            eval: EvalSection {
                n_samples: 4096,
                n_ref: 4096,
                n_proj: 64,
                repeats: 5,
            },
            analysis: AnalysisSection {
                grid_points: 121,
                dense_steps: 61,
                step: "largest".into(),
                transfer_k: 3,
            },
            paths: PathsSection {
                backbone: String::new(),
                teachers: String::new(),
                heldout: String::new(),
                bank: String::new(),
            },
        }
    }
}

/// Generates both directions of the key mapping from one field list so
/// parsing and rendering cannot drift apart.
macro_rules! fields {
    ($($sec:literal . $key:literal => $($field:ident).+ ;)*) => {
        impl RunConfig {
            fn assign(&mut self, sec: &str, key: &str, v: &str) -> Result<()> {
                match (sec, key) {
                    $(($sec, $key) => self.$($field).+ = parse_value($sec, $key, v)?,)*
                    _ => return Err(cfg_err(format!("unknown key `{sec}.{key}`"))),
                }
                Ok(())
            }

            /// `(section, key, value)` for every setting, in file order.
            pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
                vec![$(($sec, $key, render(&self.$($field).+)),)*]
            }
        }
    };
}

fn render<T: Display>(v: &T) -> String {
    v.to_string()
}

fields! {
    "run"."seed" => seed;
    "data"."modes" => data.modes;
    "data"."radius" => data.radius;
    "data"."std" => data.std;
    "net"."data_dim" => net.data_dim;
    "net"."n_blocks" => net.n_blocks;
    "net"."hidden" => net.hidden;
    "net"."emb_dim" => net.emb_dim;
    "net"."n_fourier" => net.n_fourier;
    "net"."sigma_data" => net.sigma_data;
    "backbone"."n_samples" => backbone.n_samples;
    "backbone"."epochs" => backbone.epochs;
    "backbone"."batch" => backbone.batch;
    "backbone"."lr" => backbone.lr;
    "backbone"."p_mean" => backbone.p_mean;
    "backbone"."p_std" => backbone.p_std;
    "schedule"."kind" => schedule.kind;
    "schedule"."steps" => schedule.steps;
    "schedule"."sigma_min" => schedule.sigma_min;
    "schedule"."sigma_max" => schedule.sigma_max;
    "schedule"."rho" => schedule.rho;
    "solver"."kind" => solver;
    "teacher"."k" => teacher.k;
    "teacher"."kind" => teacher.kind;
    "teacher"."seed_lo" => teacher.seed_lo;
    "teacher"."seed_hi" => teacher.seed_hi;
    "teacher"."heldout_lo" => teacher.heldout_lo;
    "teacher"."heldout_hi" => teacher.heldout_hi;
    "mteo"."variant" => variant;
    "mteo"."lr" => mteo.lr;
    "mteo"."lr_min" => mteo.lr_min;
    "mteo"."eps" => mteo.eps;
    "mteo"."eps_min" => mteo.eps_min;
    "mteo"."patience" => mteo.patience;
    "mteo"."e_max" => mteo.e_max;
    "mteo"."batch" => mteo.batch;
    "mteo"."lprev" => mteo.lprev;
    "eval"."n_samples" => eval.n_samples;
    "eval"."n_ref" => eval.n_ref;
    "eval"."n_proj" => eval.n_proj;
    "eval"."repeats" => eval.repeats;
    "analysis"."grid_points" => analysis.grid_points;
    "analysis"."dense_steps" => analysis.dense_steps;
    "analysis"."step" => analysis.step;
    "analysis"."transfer_k" => analysis.transfer_k;
    "paths"."backbone" => paths.backbone;
    "paths"."teachers" => paths.teachers;
    "paths"."heldout" => paths.heldout;
    "paths"."bank" => paths.bank;
}

impl RunConfig {
    /// Defaults overlaid with every entry of `doc`.
    pub fn from_document(doc: &Document) -> Result<Self> {
        let mut cfg = Self::default();
        for (s, k, v) in doc.entries() {
            cfg.assign(s, k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    fn finish(&mut self) -> Result<()> {
        self.backbone.seed = self.seed;
        self.mteo.seed = self.seed;
        self.validate()
    }

    /// Replaces the global seed and every stream derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.backbone.seed = seed;
        self.mteo.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| cfg_err(e.to_string());
        self.gmm().validate().map_err(wrap)?;
        self.net.validate().map_err(wrap)?;
        if self.net.data_dim != 2 {
            return Err(cfg_err("net.data_dim must be 2 for the planar mixture"));
        }
        self.backbone.validate().map_err(wrap)?;
        self.student_schedule().map_err(wrap)?;
        self.mteo.validate().map_err(wrap)?;
        if self.teacher.k < 1 {
            return Err(cfg_err("teacher.k must be >= 1"));
        }
        if self.teacher.seed_hi <= self.teacher.seed_lo || self.teacher.heldout_hi <= self.teacher.heldout_lo {
            return Err(cfg_err("teacher seed ranges must be non-empty"));
        }
        let t = &self.teacher;
        if t.seed_lo < t.heldout_hi && t.heldout_lo < t.seed_hi {
            return Err(cfg_err("training and held-out seed ranges overlap"));
        }
        if self.eval.n_samples < 2 || self.eval.n_ref < 2 || self.eval.n_proj < 1 || self.eval.repeats < 2 {
            return Err(cfg_err("eval needs n_samples, n_ref >= 2, n_proj >= 1, repeats >= 2"));
        }
        if self.analysis.grid_points < 2 || self.analysis.dense_steps < 2 || self.analysis.transfer_k < 1 {
            return Err(cfg_err("analysis grid, dense schedule, and transfer factor are too small"));
        }
        if self.analysis.step != "largest" && self.analysis.step.parse::<usize>().is_err() {
            return Err(cfg_err("analysis.step must be `largest` or a step index"));
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => Document::read(p)?,
            None => Document::default(),
        };
        for o in overrides {
            doc.set(o)?;
        }
        Self::from_document(&doc)
    }

    /// Canonical text form listing every setting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (s, k, v) in self.entries() {
            if s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                current = s;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn gmm(&self) -> GmmSpec {
        GmmSpec::ring(self.data.modes, self.data.radius, self.data.std)
    }

    pub fn student_schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        make_schedule(s.kind, s.steps, s.sigma_min, s.sigma_max, s.rho)
    }

    /// Resolved step index for analyses on `schedule`.
    pub fn analysis_step(&self, schedule: &Schedule) -> Result<usize> {
        if self.analysis.step == "largest" {
            return Ok(largest_interval(schedule));
        }
        let i: usize = parse_value("analysis", "step", &self.analysis.step)?;
        if i >= schedule.intervals() {
            return Err(cfg_err(format!("analysis.step {i} out of range")));
        }
        Ok(i)
    }
}

/// Index of the widest interval `t_i - t_{i+1}`.
pub fn largest_interval(schedule: &Schedule) -> usize {
    let t = schedule.times();
    (0..schedule.intervals())
        .max_by(|&a, &b| (t[a] - t[a + 1]).total_cmp(&(t[b] - t[b + 1])))
        .expect("at least one interval")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = Document::parse("# top\n[mteo]\n lr = 0.5 \n; alt comment\n\n[schedule]\nsteps=7\n").unwrap();
        let cfg = RunConfig::from_document(&doc).unwrap();
        assert_eq!(cfg.mteo.lr, 0.5);
        assert_eq!(cfg.schedule.steps, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = Document::parse("[mteo]\nlearning_rate = 1\n").unwrap();
        let err = RunConfig::from_document(&doc).unwrap_err().to_string();
        assert!(err.contains("mteo.learning_rate"), "{err}");
        let doc = Document::parse("[nope]\nlr = 1\n").unwrap();
        assert!(RunConfig::from_document(&doc).is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(Document::parse("lr = 1\n").is_err());
        assert!(Document::parse("[mteo\n").is_err());
        assert!(Document::parse("[mteo]\njunk\n").is_err());
        assert!(Document::parse("[mteo]\nlr=1\nlr=2\n").is_err());
        let doc = Document::parse("[mteo]\nlr = fast\n").unwrap();
        assert!(RunConfig::from_document(&doc).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut doc = Document::parse("[mteo]\nlr = 0.5\n").unwrap();
        doc.set("mteo.lr=0.25").unwrap();
        doc.set("solver.kind = ipndm").unwrap();
        let cfg = RunConfig::from_document(&doc).unwrap();
        assert_eq!(cfg.mteo.lr, 0.25);
        assert_eq!(cfg.solver, SolverKind::Ipndm);
        assert!(doc.set("mteo_lr=1").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut doc = Document::default();
        doc.set("mteo.lprev=frozen-initial").unwrap();
        doc.set("schedule.kind=logsnr").unwrap();
        doc.set("run.seed=17").unwrap();
        let cfg = RunConfig::from_document(&doc).unwrap();
        let again = RunConfig::from_document(&Document::parse(&cfg.render()).unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.mteo.seed, 17);
    }

    #[test]
    fn defaults_carry_the_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.mteo.eps, c.mteo.patience, c.mteo.e_max, c.mteo.batch), (0.01, 10, 300, 64));
        assert_eq!((c.teacher.seed_lo, c.teacher.seed_hi), (50000, 50256));
        assert_eq!(c.student_schedule().unwrap().intervals(), 4);
        assert_eq!(c.student_schedule().unwrap().refine(c.teacher.k).unwrap().intervals(), 20);
    }

    #[test]
    fn validation_catches_overlap_and_bad_values() {
        let mut doc = Document::default();
        doc.set("teacher.heldout_lo=50100").unwrap();
        doc.set("teacher.heldout_hi=50200").unwrap();
        assert!(RunConfig::from_document(&doc).is_err());
        let mut doc = Document::default();
        doc.set("analysis.step=wide").unwrap();
        assert!(RunConfig::from_document(&doc).is_err());
    }

    #[test]
    fn largest_interval_of_polynomial_schedule_is_first() {
        let s = RunConfig::default().student_schedule().unwrap();
        assert_eq!(largest_interval(&s), 0);
    }
}
