//! High-NFE reference trajectories recorded at student times.

use crate::autodiff::Tensor;
use crate::denoiser::Denoiser;
use crate::error::{invalid, Error, Result};
use crate::schedule::Schedule;
use crate::solvers::{latents, sample, Model, SolverKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSet {
    pub student: Schedule,
    pub k: usize,
    pub kind: SolverKind,
    pub global_seed: u64,
    /// First seed index (inclusive).
    pub seed_lo: u64,
    /// Last seed index (exclusive).
    pub seed_hi: u64,
    /// `states[i]` holds one row per seed at `student.times()[i]`.
    pub states: Vec<Tensor>,
    /// Fingerprint of the backbone that produced the states.
    pub backbone: String,
}

impl TeacherSet {
    pub fn n_seeds(&self) -> usize {
        (self.seed_hi - self.seed_lo) as usize
    }

    pub fn seeds(&self) -> Vec<u64> {
        (self.seed_lo..self.seed_hi).collect()
    }

    /// Initial states, identical to what a student sampler starts from.
    pub fn latents(&self) -> &Tensor {
        &self.states[0]
    }

    /// Endpoint samples.
    pub fn endpoints(&self) -> &Tensor {
        self.states.last().expect("at least two states")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed_hi <= self.seed_lo {
            return Err(invalid("empty teacher seed range"));
        }
        if self.states.len() != self.student.len() {
            return Err(invalid(format!(
                "{} teacher states for a {}-point schedule",
                self.states.len(),
                self.student.len()
            )));
        }
        let n = self.n_seeds();
        if self.states.iter().any(|s| s.rank() != 2 || s.rows() != n) {
            return Err(invalid("teacher state batch does not match the seed range"));
        }
        Ok(())
    }

    /// Errors unless the set was produced for `schedule` by `net`.
    pub fn check(&self, schedule: &Schedule, net: &Denoiser) -> Result<()> {
        let (want, have) = (schedule.fingerprint(), self.student.fingerprint());
        if want != have {
            return Err(Error::Fingerprint {
                what: "teacher schedule",
                expected: want,
                found: have,
            });
        }
        let (want, have) = (net.fingerprint(), self.backbone.clone());
        if want != have {
            return Err(Error::Fingerprint {
                what: "teacher backbone",
                expected: want,
                found: have,
            });
        }
        Ok(())
    }

    /// The same records restricted to the first `n` seeds.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_seeds() {
            return Err(invalid(format!("cannot take {n} of {} seeds", self.n_seeds())));
        }
        let idx: Vec<usize> = (0..n).collect();
        Ok(Self {
            seed_hi: self.seed_lo + n as u64,
            states: self
                .states
                .iter()
                .map(|s| s.select_rows(&idx))
                .collect::<Result<_>>()?,
            ..self.clone()
        })
    }
}

/// Integrates every seed on `student.refine(k)` with `net` and records the
/// states at the student times.
pub fn gen_teachers(
    net: &Denoiser,
    student: &Schedule,
    k: usize,
    kind: SolverKind,
    global_seed: u64,
    seed_lo: u64,
    seed_hi: u64,
) -> Result<TeacherSet> {
    let mut set = gen_teachers_with(net, net.config().data_dim, student, k, kind, global_seed, seed_lo, seed_hi)?;
    set.backbone = net.fingerprint();
    Ok(set)
}

/// [`gen_teachers`] for an arbitrary model. The backbone fingerprint is
/// left empty.
#[allow(clippy::too_many_arguments)]
pub fn gen_teachers_with(
    model: &dyn Model,
    dim: usize,
    student: &Schedule,
    k: usize,
    kind: SolverKind,
    global_seed: u64,
    seed_lo: u64,
    seed_hi: u64,
) -> Result<TeacherSet> {
    if seed_hi <= seed_lo {
        return Err(invalid(format!("empty seed range {seed_lo}..{seed_hi}")));
    }
    let fine = student.refine(k)?;
    let seeds: Vec<u64> = (seed_lo..seed_hi).collect();
    let x_t = latents(global_seed, &seeds, dim, student.sigma_max())?;
    let traj = sample(model, kind, &fine, &x_t)?.subsample(k)?;
    debug_assert!(traj.times.iter().zip(student.times()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let set = TeacherSet {
        student: student.clone(),
        k,
        kind,
        global_seed,
        seed_lo,
        seed_hi,
        states: traj.states,
        backbone: String::new(),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NetConfig;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn setup() -> (Denoiser, Schedule) {
        let net = Denoiser::new(NetConfig::default(), 4).unwrap();
        let s = make_schedule(ScheduleKind::Polynomial, 5, 0.002, 80.0, 7.0).unwrap();
        (net, s)
    }

    #[test]
    fn k_one_ddim_is_the_student_rollout() {
        let (net, s) = setup();
        let set = gen_teachers(&net, &s, 1, SolverKind::Ddim, 3, 10, 20).unwrap();
        let x = latents(3, &set.seeds(), 2, 80.0).unwrap();
        let tr = sample(&net, SolverKind::Ddim, &s, &x).unwrap();
        assert_eq!(set.states, tr.states);
    }

    #[test]
    fn shape_and_fingerprints() {
        let (net, s) = setup();
        let set = gen_teachers(&net, &s, 5, SolverKind::Ipndm, 3, 0, 8).unwrap();
        assert_eq!(set.states.len(), 5);
        assert_eq!(set.states[0].shape(), &[8, 2]);
        set.check(&s, &net).unwrap();
        let other = make_schedule(ScheduleKind::LogSnr, 5, 0.002, 80.0, 7.0).unwrap();
        let err = set.check(&other, &net).unwrap_err().to_string();
        assert!(err.contains(&s.fingerprint()) && err.contains(&other.fingerprint()), "{err}");
    }

    #[test]
    fn head_keeps_leading_seeds() {
        let (net, s) = setup();
        let set = gen_teachers(&net, &s, 2, SolverKind::Ddim, 3, 5, 11).unwrap();
        let h = set.head(2).unwrap();
        let direct = gen_teachers(&net, &s, 2, SolverKind::Ddim, 3, 5, 7).unwrap();
        assert_eq!(h, direct);
        assert!(set.head(7).is_err());
    }

    #[test]
    fn empty_range_is_rejected() {
        let (net, s) = setup();
        assert!(gen_teachers(&net, &s, 2, SolverKind::Ddim, 3, 5, 5).is_err());
    }
}
