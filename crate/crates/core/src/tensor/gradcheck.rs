use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `point` with the five-point central
/// difference (error O(eps^4)) and returns the worst per-coordinate relative
/// error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.var(point.clone());
    let loss = f(&tape, x)?;
    let analytic = tape.backward(loss)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        let v = f(&tape, x)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check"))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let at = |offset: f64| -> Result<f64> {
            let mut p = point.clone();
            p.data_mut()[i] += offset;
            eval(p)
        };
        let near = at(eps)? - at(-eps)?;
        let far = at(2.0 * eps)? - at(-2.0 * eps)?;
        let numeric = (8.0 * near - far) / (12.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_at_unit_point() {
        let p = Tensor::from_vec(vec![1.0, -1.0]);
        let err = grad_check(|_, z| z.square()?.sum(), &p, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tanh_at_origin() {
        let p = Tensor::zeros(vec![4]);
        let err = grad_check(|_, z| z.tanh()?.sum(), &p, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
