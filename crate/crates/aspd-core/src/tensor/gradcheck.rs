//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Compares analytic gradients of a scalar-valued tensor function against
/// central finite differences and returns the maximum relative error
/// `|analytic - fd| / max(1, |fd|)` over all elements of `theta`.
///
/// `f` receives a tape and the (tracked or constant) parameter tensor and
/// must produce a scalar. Evaluate at generic points; kinks of relu or
/// max-pool argmax switches are excluded by construction of the test data,
/// not handled here.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract("grad_check: eps must be positive".into()));
    }
    let tape = Tape::new();
    let tracked = tape.param(theta);
    let loss = f(&tape, &tracked)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(
            "grad_check: function must be scalar-valued".into(),
        ));
    }
    let analytic = tape.backward(&loss)?.get(&tracked)?;

    let eval = |values: &[f64]| -> Result<f64> {
        let t = Tensor::new(theta.shape().to_vec(), values.to_vec())?;
        let tape = Tape::new();
        let out = f(&tape, &tape.constant(&t))?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite evaluation".into()));
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let base = theta.data().to_vec();
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        let plus = eval(&work)?;
        work[i] = base[i] - eps;
        let minus = eval(&work)?;
        work[i] = base[i];
        let fd = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
