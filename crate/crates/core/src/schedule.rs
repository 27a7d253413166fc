//! Noise-level discretizations for the sampling ODE.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::fingerprint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Karras-style: uniform in `sigma^(1/rho)`.
    Polynomial,
    /// Uniform in `ln sigma`.
    LogSnr,
    /// Uniform in `sigma`.
    SigmaUniform,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Polynomial => "polynomial",
            Self::LogSnr => "logsnr",
            Self::SigmaUniform => "sigma-uniform",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polynomial" | "poly" => Ok(Self::Polynomial),
            "logsnr" => Ok(Self::LogSnr),
            "sigma-uniform" | "uniform" => Ok(Self::SigmaUniform),
            other => Err(invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
    kind: ScheduleKind,
    rho: f64,
    sigma_min: f64,
    sigma_max: f64,
}

impl ScheduleKind {
    fn warp(self, sigma: f64, rho: f64) -> f64 {
        match self {
            Self::Polynomial if rho == 1.0 => sigma,
            Self::Polynomial => sigma.powf(1.0 / rho),
            Self::LogSnr => sigma.ln(),
            Self::SigmaUniform => sigma,
        }
    }

    fn unwarp(self, u: f64, rho: f64) -> f64 {
        match self {
            Self::Polynomial if rho == 1.0 => u,
            Self::Polynomial => u.powf(rho),
            Self::LogSnr => u.exp(),
            Self::SigmaUniform => u,
        }
    }
}

/// Builds an `n`-point schedule from `sigma_max` down to `sigma_min`.
///
/// Endpoints are pinned exactly; interior points are evenly spaced in the
/// kind's warp coordinate. `rho` only matters for [`ScheduleKind::Polynomial`].
pub fn make_schedule(
    kind: ScheduleKind,
    n: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
) -> Result<Schedule> {
    if n < 2 {
        return Err(invalid(format!("schedule needs at least 2 points, got {n}")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(invalid(format!(
            "need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid(format!("rho must be positive, got {rho}")));
    }
    let (u0, u1) = (kind.warp(sigma_max, rho), kind.warp(sigma_min, rho));
    let last = (n - 1) as f64;
    let mut times: Vec<f64> = (0..n)
        .map(|i| kind.unwarp(u0 + (i as f64 / last) * (u1 - u0), rho))
        .collect();
    times[0] = sigma_max;
    times[n - 1] = sigma_min;
    let s = Schedule {
        times,
        kind,
        rho,
        sigma_min,
        sigma_max,
    };
    s.validate()?;
    Ok(s)
}

impl Schedule {
    /// Wraps an explicit list of times (e.g. read back from disk).
    pub fn from_times(kind: ScheduleKind, rho: f64, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("schedule needs at least 2 points"));
        }
        let s = Self {
            sigma_max: times[0],
            sigma_min: times[times.len() - 1],
            times,
            kind,
            rho,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.times.iter().all(|&t| t > 0.0 && t.is_finite())
            && self.times.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(invalid("schedule times must be positive and strictly decreasing"));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of solver intervals, `len() - 1`.
    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// Splits every interval into `k` equal pieces in warp space. The
    /// original times are copied verbatim, so they survive bit-for-bit at
    /// indices `0, k, 2k, ...`.
    pub fn refine(&self, k: usize) -> Result<Schedule> {
        if k < 1 {
            return Err(invalid("refinement factor must be >= 1"));
        }
        let mut times = Vec::with_capacity(self.intervals() * k + 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            let (u0, u1) = (self.kind.warp(w[0], self.rho), self.kind.warp(w[1], self.rho));
            for j in 1..k {
                times.push(self.kind.unwarp(u0 + (j as f64 / k as f64) * (u1 - u0), self.rho));
            }
        }
        times.push(self.sigma_min);
        let s = Schedule {
            times,
            ..self.clone()
        };
        s.validate()?;
        Ok(s)
    }

    /// Hex digest of the time values.
    pub fn fingerprint(&self) -> String {
        fingerprint::of_f64s(self.times.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_points_are_the_endpoints() {
        for kind in [ScheduleKind::Polynomial, ScheduleKind::LogSnr, ScheduleKind::SigmaUniform] {
            let s = make_schedule(kind, 2, 0.002, 80.0, 7.0).unwrap();
            assert_eq!(s.times(), &[80.0, 0.002]);
        }
    }

    #[test]
    fn logsnr_midpoint_is_geometric_mean() {
        let s = make_schedule(ScheduleKind::LogSnr, 3, 0.002, 80.0, 7.0).unwrap();
        assert!((s.times()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn karras_interior_point() {
        let s = make_schedule(ScheduleKind::Polynomial, 5, 0.002, 80.0, 7.0).unwrap();
        // closed form evaluated independently
        let (a, b) = (80f64.powf(1.0 / 7.0), 0.002f64.powf(1.0 / 7.0));
        let expect = (a + 0.5 * (b - a)).powi(7);
        assert!((s.times()[2] - expect).abs() < 1e-12);
        assert!((s.times()[2] - 2.52).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_schedule(ScheduleKind::Polynomial, 1, 0.002, 80.0, 7.0).is_err());
        assert!(make_schedule(ScheduleKind::Polynomial, 5, 0.0, 80.0, 7.0).is_err());
        assert!(make_schedule(ScheduleKind::Polynomial, 5, 80.0, 0.002, 7.0).is_err());
        assert!(make_schedule(ScheduleKind::Polynomial, 5, 0.002, 80.0, 0.0).is_err());
        let s = make_schedule(ScheduleKind::LogSnr, 3, 0.002, 80.0, 1.0).unwrap();
        assert!(s.refine(0).is_err());
    }

    #[test]
    fn refine_identity_and_counts() {
        let s = make_schedule(ScheduleKind::Polynomial, 5, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.refine(1).unwrap(), s);
        let r = s.refine(5).unwrap();
        assert_eq!(r.intervals(), 20);
        for (i, t) in s.times().iter().enumerate() {
            assert_eq!(r.times()[5 * i].to_bits(), t.to_bits());
        }
    }

    #[test]
    fn refine_logsnr_inserts_geometric_means() {
        let s = Schedule::from_times(ScheduleKind::LogSnr, 1.0, vec![80.0, 0.4, 0.002]).unwrap();
        let r = s.refine(2).unwrap();
        assert_eq!(r.len(), 5);
        assert!(((r.times()[1] - (80.0f64 * 0.4).sqrt()) / r.times()[1]).abs() < 1e-12);
        assert!(((r.times()[3] - (0.4f64 * 0.002).sqrt()) / r.times()[3]).abs() < 1e-12);
    }

    #[test]
    fn rho_one_polynomial_is_sigma_uniform() {
        for n in [2, 3, 7, 40] {
            let p = make_schedule(ScheduleKind::Polynomial, n, 0.002, 80.0, 1.0).unwrap();
            let u = make_schedule(ScheduleKind::SigmaUniform, n, 0.002, 80.0, 1.0).unwrap();
            assert_eq!(p.times(), u.times());
        }
    }

    fn kind_strategy() -> impl Strategy<Value = ScheduleKind> {
        prop_oneof![
            Just(ScheduleKind::Polynomial),
            Just(ScheduleKind::LogSnr),
            Just(ScheduleKind::SigmaUniform)
        ]
    }

    proptest! {
        #[test]
        fn strictly_decreasing(kind in kind_strategy(), n in 2usize..300, rho in 0.5f64..10.0,
                               lo in 1e-4f64..1.0, ratio in 1.5f64..1e4) {
            let s = make_schedule(kind, n, lo, lo * ratio, rho).unwrap();
            prop_assert!(s.times().windows(2).all(|w| w[0] > w[1]));
            prop_assert_eq!(s.times()[0], lo * ratio);
            prop_assert_eq!(s.times()[n - 1], lo);
        }

        #[test]
        fn refinement_keeps_student_times(kind in kind_strategy(), n in 2usize..12,
                                          k in 1usize..8, rho in 1.0f64..8.0) {
            let s = make_schedule(kind, n, 0.002, 80.0, rho).unwrap();
            let r = s.refine(k).unwrap();
            prop_assert_eq!(r.len(), (n - 1) * k + 1);
            for (i, t) in s.times().iter().enumerate() {
                prop_assert_eq!(r.times()[k * i].to_bits(), t.to_bits());
            }
        }
    }
}
