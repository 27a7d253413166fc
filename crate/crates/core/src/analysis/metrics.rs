//! Two-sample distances between point clouds.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "two-sample metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of `|a_i - b_j|` over all pairs, summed row by row in a fixed
/// order.
fn mean_cross(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut s = 0.0;
        for j in 0..b.rows() {
            s += dist(ai, b.row(j));
        }
        total += s;
    }
    total / (a.rows() as f64 * b.rows() as f64)
}

/// Mean of `|a_i - a_j|` over all ordered pairs including `i == j`.
/// Shares the cross-term loop so that identical sets cancel exactly.
fn mean_within(a: &Tensor) -> f64 {
    mean_cross(a, a)
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|` between the two
/// empirical distributions. Every expectation averages over all index
/// pairs, so the value is the squared energy distance between the empirical
/// measures: zero for identical sets and never negative. The operands are
/// put in a canonical order first, so swapping them gives the same bits.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let key = |t: &Tensor| (t.rows(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let (a, b) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    EnergyReference::new(b)?.distance(a)
}

/// A reference set with its within-set term cached, for repeated
/// comparisons against the same draws.
#[derive(Clone, Debug)]
pub struct EnergyReference {
    points: Tensor,
    within: f64,
}

impl EnergyReference {
    pub fn new(points: &Tensor) -> Result<Self> {
        if points.rank() != 2 {
            return Err(invalid("reference set must be a matrix of points"));
        }
        Ok(Self {
            within: mean_within(points),
            points: points.clone(),
        })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn distance(&self, a: &Tensor) -> Result<f64> {
        check_pair(a, &self.points)?;
        let v = 2.0 * mean_cross(a, &self.points) - mean_within(a) - self.within;
        // symmetric rounding can leave a tiny negative residue
        Ok(v.max(0.0))
    }
}

/// 1-Wasserstein distance between two sorted samples on the line.
fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / na;
    }
    // integrate |F_a - F_b| over the merged breakpoints
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    total
}

/// Mean 1-D Wasserstein-1 distance over `n_proj` random unit directions.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    if n_proj == 0 {
        return Err(invalid("need at least one projection"));
    }
    let d = a.cols();
    let mut r = rng::stream(seed, "sliced-w1", 0);
    let project = |t: &Tensor, dir: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = (0..t.rows())
            .map(|i| t.row(i).iter().zip(dir).map(|(x, u)| x * u).sum())
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += w1_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(total / n_proj as f64)
}
