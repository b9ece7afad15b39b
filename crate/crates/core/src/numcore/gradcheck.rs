use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst relative error between backward gradients and central differences
/// `(f(p+eps) - f(p-eps)) / 2eps` over every coordinate of `param`.
///
/// `f` rebuilds the scalar loss on a fresh tape from the recorded parameter.
pub fn finite_diff_check<F>(f: F, param: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = (0..param.numel()).map(|i| (0, i)).collect();
    finite_diff_check_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(param),
        eps,
        &coords,
    )
}

/// Multi-tensor variant restricted to `(tensor, element)` coordinates.
pub fn finite_diff_check_multi<F>(f: F, params: &[Tensor], eps: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    for &(t, i) in coords {
        let bound = params.get(t).map(Tensor::numel).ok_or(Error::Index {
            what: "parameter list",
            index: t,
            bound: params.len(),
        })?;
        if i >= bound {
            return Err(Error::Index {
                what: "parameter tensor",
                index: i,
                bound,
            });
        }
    }

    let eval = |ps: &[Tensor]| -> Result<(f64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::Contract("finite-difference target must be scalar".into()));
        }
        let value = v[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        Ok((value, tape, vars, loss))
    };

    let (_, mut tape, vars, loss) = eval(params)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut shifted = params.to_vec();
    for &(t, i) in coords {
        let analytic = tape.grad(vars[t]).map_or(0.0, |g| g[i]);
        let orig = params[t].data()[i];
        shifted[t].data_mut()[i] = orig + eps;
        let (up, ..) = eval(&shifted)?;
        shifted[t].data_mut()[i] = orig - eps;
        let (down, ..) = eval(&shifted)?;
        shifted[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
