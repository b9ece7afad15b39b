use serde::{Deserialize, Serialize};

use super::linalg::{jacobi_eigen, mean_and_cov};
use crate::error::{Error, Result};

/// Principal-component projection fitted on centred data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `m×p`, orthonormal columns.
    pub components: Vec<f64>,
    pub dim: usize,
    pub p: usize,
    /// Top-`p` covariance eigenvalues, non-increasing.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

pub fn pca_fit(rows: &[Vec<f64>], p: usize) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 rows, got {n}")));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Data("rows have differing dimensions".into()));
    }
    if p == 0 || p > n.min(m) {
        return Err(Error::Dimension {
            op: "pca_fit",
            lhs: vec![p],
            rhs: vec![n, m],
        });
    }
    let (mean, cov) = mean_and_cov(rows);
    let (values, vectors) = jacobi_eigen(&cov, m)?;
    let mut components = vec![0.0; m * p];
    for r in 0..m {
        components[r * p..(r + 1) * p].copy_from_slice(&vectors[r * m..r * m + p]);
    }
    Ok(PcaModel {
        mean,
        components,
        dim: m,
        p,
        explained_variance: values[..p].iter().map(|v| v.max(0.0)).collect(),
        total_variance: values.iter().map(|v| v.max(0.0)).sum(),
    })
}

impl PcaModel {
    pub fn transform_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                op: "pca_transform",
                lhs: vec![x.len()],
                rhs: vec![self.dim],
            });
        }
        let mut out = vec![0.0; self.p];
        for (r, (xi, mi)) in x.iter().zip(&self.mean).enumerate() {
            let c = xi - mi;
            for (o, w) in out.iter_mut().zip(&self.components[r * self.p..(r + 1) * self.p]) {
                *o += c * w;
            }
        }
        Ok(out)
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.transform_one(r)).collect()
    }

    /// Maps reduced coordinates back to the input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                self.mean[r]
                    + self.components[r * self.p..(r + 1) * self.p]
                        .iter()
                        .zip(z)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Fraction of total variance captured by the kept components.
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }
}

/// Canonical projection with `pca_transform` naming.
pub fn pca_transform(model: &PcaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    model.transform(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gauss_rows(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..m).map(|_| g.sample(&mut rng)).collect()).collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn line_in_three_dimensions() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.3 - 2.0;
                vec![1.0 + 2.0 * t, -0.5 + t, 3.0 - 0.5 * t]
            })
            .collect();
        let model = pca_fit(&rows, 1).unwrap();
        for r in &rows {
            let back = model.reconstruct(&model.transform_one(r).unwrap());
            assert!(dist(r, &back) <= 1e-10);
        }
    }

    #[test]
    fn full_rank_preserves_distances() {
        let rows = gauss_rows(15, 5, 1);
        let model = pca_fit(&rows, 5).unwrap();
        let z = model.transform(&rows).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                assert!((dist(&rows[i], &rows[j]) - dist(&z[i], &z[j])).abs() <= 1e-8);
            }
        }
        let c = &model.components;
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..5).map(|r| c[r * 5 + a] * c[r * 5 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() <= 1e-8);
            }
        }
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn planted_plane_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Normal::new(0.0, 1.0).unwrap();
        let m = 8;
        let u: Vec<f64> = (0..m).map(|_| g.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..m).map(|_| g.sample(&mut rng)).collect();
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let (a, b) = (3.0 * g.sample(&mut rng), 2.0 * g.sample(&mut rng));
                (0..m).map(|i| a * u[i] + b * v[i] + 0.01 * g.sample(&mut rng)).collect()
            })
            .collect();
        let model = pca_fit(&rows, 2).unwrap();

        let (_, cov) = mean_and_cov(&rows);
        let mut eig: Vec<f64> = DMatrix::from_row_slice(m, m, &cov)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let oracle_ratio = (eig[0] + eig[1]) / eig.iter().sum::<f64>();
        assert!(oracle_ratio >= 0.99);
        assert!((model.explained_ratio() - oracle_ratio).abs() < 1e-10);
        assert!((model.explained_variance[0] - eig[0]).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_sizes() {
        let rows = gauss_rows(3, 4, 3);
        assert!(matches!(pca_fit(&rows, 4), Err(Error::Dimension { .. })));
        assert!(pca_fit(&rows[..1], 1).is_err());
        let model = pca_fit(&rows, 2).unwrap();
        assert!(model.transform_one(&[0.0; 3]).is_err());
    }
}
