//! Closed-form divergences between full-covariance Gaussians.

use hieradapt::clustering::{kl_gauss, sym_kl, GaussianComponent};

fn gauss(mean: &[f64], cov: &[f64]) -> GaussianComponent {
    GaussianComponent {
        weight: 1.0,
        mean: mean.to_vec(),
        cov: cov.to_vec(),
    }
}

fn main() -> hieradapt::Result<()> {
    let a = gauss(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
    let b = gauss(&[1.0, -0.5], &[2.0, 0.3, 0.3, 0.5]);
    println!("KL(a||b) = {:.6}", kl_gauss(&a, &b)?);
    println!("KL(b||a) = {:.6}", kl_gauss(&b, &a)?);
    println!("symmetric = {:.6}", sym_kl(&a, &b)?);
    println!("KL(a||a) = {:e}", kl_gauss(&a, &a)?);
    Ok(())
}
