use super::{Tape, Tensor, Value};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences of step `step`. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over coordinates.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Value<'t>) -> Result<Value<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let y = f(&tape, x)?;
    y.backward()?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| Tensor::zeros(&[point.len()]))
        .into_data();

    let eval = |p: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(p));
        Ok(f(&tape, x)?.item())
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.to_vec();
        plus[i] += step;
        let mut minus = point.to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &[1.0, 2.0, 3.0], 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|_, x| Ok(x.sum()), &[1.0], 0.0).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        // d/dx sqrt-like blowup: 1/x at 0 gives inf
        let res = grad_check(|t, x| Ok(t.scalar(1.0).div(x)?.sum()), &[0.0], 1e-6);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
