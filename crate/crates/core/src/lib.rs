//! Multi-layer time embedding optimization (MTEO) for few-step diffusion
//! sampling on synthetic 2-D data.
//!
//! The crate bundles everything needed to run the method end to end:
//! a small reverse-mode autodiff engine, a FiLM-conditioned MLP denoiser
//! with EDM preconditioning, deterministic ODE samplers, teacher trajectory
//! generation, stage-wise distillation of per-step per-layer embeddings,
//! and the diagnostic analyses built on top of them.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fingerprint;
pub mod io;
pub mod mteo;
pub mod rng;
pub mod denoiser;
pub mod schedule;
pub mod solvers;
pub mod teacher;

pub use autodiff::{adam_step, AdamState, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use schedule::{make_schedule, Schedule, ScheduleKind};
