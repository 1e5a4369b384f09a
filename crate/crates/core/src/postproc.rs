//! PCA with whitening for descriptor compression.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::vlad::l2;

/// Whitening regularizer, relative to the largest eigenvalue.
pub const DEFAULT_EPS: f64 = 1e-9;

/// Eigenvalues below this fraction of the largest count as zero for rank.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    /// `out_dim x in_dim`, row `r` is the `r`-th principal axis divided by
    /// `sqrt(eigenvalue_r + eps)`.
    pub projection: Vec<f64>,
    /// Retained spectrum, nonincreasing.
    pub eigenvalues: Vec<f64>,
}

/// Fits PCA-whitening on `samples`, keeping `out_dim` components.
///
/// Uses the `d x d` covariance when there are more samples than dimensions
/// and the `n x n` Gram matrix otherwise. Axis signs are fixed so that the
/// largest-magnitude component of each axis is positive.
pub fn fit_pca<S: AsRef<[f64]>>(samples: &[S], out_dim: usize, eps_rel: f64) -> Result<PcaModel> {
    let n = samples.len();
    let dim = samples.first().map_or(0, |s| s.as_ref().len());
    if dim == 0 || out_dim == 0 || out_dim > dim {
        return Err(Error::Contract(format!(
            "cannot reduce {dim} dimensions to {out_dim}"
        )));
    }
    if samples.iter().any(|s| s.as_ref().len() != dim) {
        return Err(Error::Contract("samples differ in dimension".into()));
    }
    if n <= out_dim {
        return Err(Error::RankDeficient {
            requested: out_dim,
            achievable: n.saturating_sub(1),
        });
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        mean.iter_mut().zip(s.as_ref()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| samples[i].as_ref()[j] - mean[j]);

    let (values, axes): (Vec<f64>, Vec<Vec<f64>>) = if n > dim {
        let cov = (x.transpose() * &x) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .map(|&i| {
                (
                    eig.eigenvalues[i].max(0.0),
                    eig.eigenvectors.column(i).iter().copied().collect(),
                )
            })
            .unzip()
    } else {
        let gram = (&x * x.transpose()) / n as f64;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .map(|&i| {
                let lambda = eig.eigenvalues[i].max(0.0);
                let v = x.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                let axis = if norm > 0.0 {
                    v.iter().map(|a| a / norm).collect()
                } else {
                    vec![0.0; dim]
                };
                (lambda, axis)
            })
            .unzip()
    };

    let top = values.first().copied().unwrap_or(0.0);
    let rank = values
        .iter()
        .filter(|&&l| l > RANK_TOL * top && top > 0.0)
        .count();
    if rank < out_dim {
        return Err(Error::RankDeficient {
            requested: out_dim,
            achievable: rank,
        });
    }
    let eps = eps_rel * top;
    let mut projection = Vec::with_capacity(out_dim * dim);
    for (lambda, mut axis) in values.iter().zip(axes).take(out_dim) {
        let lead = axis
            .iter()
            .copied()
            .fold(0.0f64, |b, a| if a.abs() > b.abs() { a } else { b });
        if lead < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        let s = 1.0 / (lambda + eps).sqrt();
        projection.extend(axis.iter().map(|a| a * s));
    }
    Ok(PcaModel {
        in_dim: dim,
        out_dim,
        mean,
        projection,
        eigenvalues: values[..out_dim].to_vec(),
    })
}

impl PcaModel {
    /// Whitened projection of `x - mean`, without renormalization.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Contract(format!(
                "descriptor has dimension {}, PCA expects {}",
                x.len(),
                self.in_dim
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .projection
            .chunks_exact(self.in_dim)
            .map(|row| row.iter().zip(&centered).map(|(r, c)| r * c).sum())
            .collect())
    }

    /// Projection followed by L2 renormalization.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.project(x)?;
        let n = l2(&y);
        if n == 0.0 {
            return Err(Error::ZeroDescriptor);
        }
        y.iter_mut().for_each(|v| *v /= n);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| {
                        rows.iter()
                            .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                            .sum::<f64>()
                            / n
                    })
                    .collect()
            })
            .collect()
    }

    /// Cyclic Jacobi eigenvalue iteration, independent of nalgebra.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-22 {
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
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn correlated(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d)
                    .enumerate()
                    .map(|(i, _)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * (1.0 + i as f64 * 0.3)
                    })
                    .collect();
                (0..d)
                    .map(|j| (0..d).map(|k| mix[j][k] * z[k]).sum::<f64>() + 0.5)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn white_data_stays_white() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..20000)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let pca = fit_pca(&rows, 3, DEFAULT_EPS).unwrap();
        let proj: Vec<Vec<f64>> = rows.iter().map(|r| pca.project(r).unwrap()).collect();
        let c = covariance(&proj);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[i][j] - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn line_data() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let pca = fit_pca(&rows, 1, DEFAULT_EPS).unwrap();
        assert!(pca.projection.iter().all(|v| v.is_finite()));
        assert!(pca.projection[1] > 0.0);
        match fit_pca(&rows, 2, DEFAULT_EPS) {
            Err(Error::RankDeficient {
                requested: 2,
                achievable: 1,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_descriptors_whiten_to_identity() {
        let rows = correlated(600, 128, 2);
        let pca = fit_pca(&rows, 16, DEFAULT_EPS).unwrap();
        let proj: Vec<Vec<f64>> = rows.iter().map(|r| pca.project(r).unwrap()).collect();
        let c = covariance(&proj);
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[i][j] - want).abs() < 1e-3, "({i},{j}) {}", c[i][j]);
            }
        }
        let oracle = jacobi_eigenvalues(covariance(&rows));
        for (a, b) in pca.eigenvalues.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
        for w in pca.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let y = pca.apply(&rows[0]).unwrap();
        assert_eq!(y.len(), 16);
        assert!((l2(&y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let rows = correlated(40, 60, 3);
        let gram = fit_pca(&rows, 10, DEFAULT_EPS).unwrap();
        let oracle = jacobi_eigenvalues(covariance(&rows));
        for (a, b) in gram.eigenvalues.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
        let proj: Vec<Vec<f64>> = rows.iter().map(|r| gram.project(r).unwrap()).collect();
        let c = covariance(&proj);
        for i in 0..10 {
            assert!((c[i][i] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mean_vector_projects_to_zero() {
        let rows = correlated(50, 4, 4);
        let pca = fit_pca(&rows, 2, DEFAULT_EPS).unwrap();
        assert!(matches!(
            pca.apply(&pca.mean.clone()),
            Err(Error::ZeroDescriptor)
        ));
        assert!(matches!(pca.apply(&[0.0; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn projection_preserves_order_along_an_axis() {
        let rows = correlated(300, 5, 5);
        let pca = fit_pca(&rows, 3, DEFAULT_EPS).unwrap();
        let axis: Vec<f64> = pca.projection[..5].to_vec();
        let mut prev = f64::NEG_INFINITY;
        for t in [-3.0, -1.0, 0.5, 2.0, 7.0] {
            let x: Vec<f64> = pca.mean.iter().zip(&axis).map(|(m, a)| m + t * a).collect();
            let y = pca.project(&x).unwrap()[0];
            assert!(y > prev);
            prev = y;
        }
    }
}
