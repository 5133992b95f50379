use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences, returning `max_i |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = f(&mut tape, xv)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Precondition(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let grads = tape.backward(out)?;
        grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(probe);
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        // dyadic inputs and step keep every difference exactly representable
        let x = Tensor::from_f64(vec![1, 4], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        let err = grad_check(|t, v| t.mean(v).and_then(|m| t.scale(m, 4.0)), &x, 0.125).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let sq = t.mul(v, v)?;
            let m = t.mean(sq)?;
            t.scale(m, 2.0)
        };
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = f(&mut tape, xv).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-6);
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        assert!(grad_check(|t, v| t.scale(v, 1.0), &x, 1e-4).is_err());
    }
}
