//! Principal component analysis via the eigen-decomposition of the sample
//! covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Explained-variance ratios, descending.
    pub ratios: Vec<f64>,
    /// Running sums of `ratios`.
    pub cumulative: Vec<f64>,
}

impl PcaResult {
    pub fn from_ratios(ratios: Vec<f64>) -> Self {
        let cumulative = ratios
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        Self { ratios, cumulative }
    }

    pub fn n_components(&self) -> usize {
        self.ratios.len()
    }

    /// Cumulative ratio of the first `k` components (clamped to the count).
    pub fn top(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.cumulative[k.min(self.cumulative.len()) - 1]
    }

    /// Smallest number of components whose cumulative ratio reaches `frac`.
    pub fn components_for(&self, frac: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| c >= frac - 1e-12)
            .map_or(self.cumulative.len(), |i| i + 1)
    }

    /// Element-wise mean of several results with equal component counts.
    pub fn average(results: &[PcaResult]) -> Result<Self> {
        let first = results.first().ok_or_else(|| invalid("nothing to average"))?;
        let k = first.n_components();
        if results.iter().any(|r| r.n_components() != k) {
            return Err(invalid("component counts differ"));
        }
        let ratios = (0..k)
            .map(|j| results.iter().map(|r| r.ratios[j]).sum::<f64>() / results.len() as f64)
            .collect();
        Ok(Self::from_ratios(ratios))
    }
}

/// PCA of the rows of `points` (`[n, p]`, `n >= 2`).
pub fn pca(points: &Tensor) -> Result<PcaResult> {
    if points.rank() != 2 {
        return Err(invalid("pca needs a matrix of points"));
    }
    if points.rows() < 2 {
        return Err(Error::ZeroVariance);
    }
    let (n, p) = (points.rows(), points.cols());
    let mut centered = DMatrix::from_row_slice(n, p, points.data());
    for j in 0..p {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(PcaResult::from_ratios(eig.into_iter().map(|l| l / trace).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Cyclic Jacobi rotations on a small symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn collinear_points_have_one_component() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, -2.0]]).unwrap();
        let r = pca(&t).unwrap();
        assert!((r.ratios[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.components_for(0.9), 1);
    }

    #[test]
    fn isotropic_cloud_splits_evenly() {
        let mut rng = crate::rng::stream(0, "test", 0);
        let data: Vec<f64> = (0..40_000).map(|_| rng.sample(StandardNormal)).collect();
        let r = pca(&Tensor::matrix(20_000, 2, data).unwrap()).unwrap();
        assert!((r.ratios[0] - 0.5).abs() < 0.05 && (r.ratios[1] - 0.5).abs() < 0.05);
    }

    #[test]
    fn matches_jacobi_on_five_points() {
        let rows = vec![
            vec![1.0, 2.0, 0.5],
            vec![-0.3, 1.1, 2.0],
            vec![0.7, -1.5, 0.2],
            vec![2.2, 0.4, -1.0],
            vec![-1.0, 0.0, 0.3],
        ];
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..3)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        let trace: f64 = (0..3).map(|i| cov[i][i]).sum();
        let ev = jacobi_eigenvalues(cov);
        let r = pca(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (a, b) in r.ratios.iter().zip(&ev) {
            assert!((a - b / trace).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_points_are_rejected() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca(&t), Err(Error::ZeroVariance)));
        assert!(matches!(pca(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()), Err(Error::ZeroVariance)));
    }

    #[test]
    fn cumulative_ends_at_one() {
        let mut rng = crate::rng::stream(1, "test", 0);
        let data: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
        let r = pca(&Tensor::matrix(10, 6, data).unwrap()).unwrap();
        assert!(r.cumulative.windows(2).all(|w| w[0] <= w[1]));
        assert!((r.cumulative.last().unwrap() - 1.0).abs() < 1e-9);
        assert!(r.ratios.iter().all(|&x| x >= 0.0));
    }
}
