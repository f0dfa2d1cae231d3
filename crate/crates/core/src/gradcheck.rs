//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of the scalar built by `f` with central
/// differences at step `h`, returning the maximum relative error over all
/// coordinates of `x`.
///
/// `f` receives a fresh tape and the leaf holding `x`; it must be
/// deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.param(x.clone());
        let out = f(&mut tape, leaf)?;
        check_finite(tape.scalar_value(out))?;
        tape.backward(out)?.take(leaf)
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param(probe.clone());
        let out = f(&mut tape, leaf)?;
        let v = tape.scalar_value(out);
        check_finite(v)?;
        Ok(v)
    };

    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("function value {v} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, 7.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let x = Tensor::scalar(0.0);
        let err = grad_check(
            |t, x| {
                let l = t.log_clamped(x, 0.0);
                Ok(t.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
