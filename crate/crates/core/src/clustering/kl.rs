use super::gmm::{Factored, GaussianComponent};
use super::linalg::chol_solve;
use crate::error::{Error, Result};

/// `D_KL(N0 ‖ N1)` for multivariate normals of equal dimension.
pub fn kl_gauss(g0: &GaussianComponent, g1: &GaussianComponent) -> Result<f64> {
    let n = g0.dim();
    if g1.dim() != n {
        return Err(Error::Dimension {
            op: "kl_gauss",
            lhs: vec![n],
            rhs: vec![g1.dim()],
        });
    }
    let f1 = Factored::new(g1)?;
    let f0 = Factored::new(g0)?;
    // tr(Σ1⁻¹ Σ0) column by column
    let mut tr = 0.0;
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| g0.cov[i * n + j]).collect();
        tr += chol_solve(&f1.chol, n, &col)[j];
    }
    let quad = f1.mahalanobis(&g1.mean, &g0.mean);
    Ok(0.5 * (tr + f1.logdet - f0.logdet) + 0.5 * (quad - n as f64))
}

/// `½ (D_KL(0‖1) + D_KL(1‖0))`.
pub fn sym_kl(g0: &GaussianComponent, g1: &GaussianComponent) -> Result<f64> {
    let a = kl_gauss(g0, g1)?;
    let b = kl_gauss(g1, g0)?;
    Ok(0.5 * (a + b))
}
