use super::{Tape, Var};
use crate::ctensor::CTensor;
use crate::error::{Error, Result};

fn real_value(v: &Var) -> Result<f64> {
    let (re, im) = v.value().item()?;
    if im != 0.0 && im.abs() > 1e-12 * re.abs() {
        return Err(Error::NonRealLoss(im));
    }
    Ok(re)
}

/// Compares the tape gradient of a real scalar function against central
/// differences.
///
/// Each real degree of freedom of `z0` (every `x` and every `y`) is moved by
/// `±h` separately; the quotient uses the step actually representable at
/// that point, `(z + h) − (z − h)`, rather than `2h`. Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)` over elements, where both
/// sides are complex gradients in the `∂/∂x + j ∂/∂y` convention.
pub fn finite_diff_check(f: impl Fn(&Var) -> Result<Var>, z0: &CTensor, h: f64) -> Result<f64> {
    Ok(finite_diff_check_many(|vs| f(&vs[0]), std::slice::from_ref(z0), h)?[0])
}

/// As [`finite_diff_check`], over several inputs at once; one error per input.
pub fn finite_diff_check_many(f: impl Fn(&[Var]) -> Result<Var>, inputs: &[CTensor], h: f64) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves)?;
    real_value(&loss)?;
    loss.backward()?;

    let eval = |which: usize, t: CTensor| -> Result<f64> {
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| Var::constant(if i == which { t.clone() } else { x.clone() }))
            .collect();
        real_value(&f(&vars)?)
    };

    let mut worst = Vec::with_capacity(inputs.len());
    for (which, (z0, leaf)) in inputs.iter().zip(&leaves).enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| CTensor::zeros(z0.shape()));
        let (mut re, mut im) = (z0.re().to_vec(), z0.im().to_vec());
        let mut err: f64 = 0.0;
        for i in 0..z0.numel() {
            let mut partial = |plane: usize| -> Result<f64> {
                let buf = if plane == 0 { &mut re } else { &mut im };
                let orig = buf[i];
                buf[i] = orig + h;
                let plus = CTensor::with_dtype(z0.shape(), re.clone(), im.clone(), z0.dtype())?;
                let buf = if plane == 0 { &mut re } else { &mut im };
                buf[i] = orig - h;
                let minus = CTensor::with_dtype(z0.shape(), re.clone(), im.clone(), z0.dtype())?;
                let buf = if plane == 0 { &mut re } else { &mut im };
                buf[i] = orig;
                let step = (orig + h) - (orig - h);
                Ok((eval(which, plus)? - eval(which, minus)?) / step)
            };
            let nx = partial(0)?;
            let ny = partial(1)?;
            let (ax, ay) = (analytic.re()[i], analytic.im()[i]);
            let diff = (ax - nx).hypot(ay - ny);
            err = err.max(diff / nx.hypot(ny).max(1.0));
        }
        worst.push(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Pointwise;

    #[test]
    fn squared_modulus_self_consistent() {
        let e = finite_diff_check(|z| z.abs2()?.sum_all(), &CTensor::scalar(1.0, 1.0), 1e-6).unwrap();
        assert!(e <= 1e-8, "{e}");
    }

    #[test]
    fn linear_function_is_exact() {
        for (x, y) in [(0.3, -1.0), (2.0, 5.0), (-7.0, 0.1), (1e3, -2e-3)] {
            let e = finite_diff_check(|z| z.real()?.sum_all(), &CTensor::scalar(x, y), 1e-6).unwrap();
            assert!(e <= 1e-10, "{e}");
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // value x², declared derivative x
        let e = finite_diff_check(
            |z| z.map("bad", |x, _| Pointwise::real(x * x, x))?.sum_all(),
            &CTensor::scalar(2.0, 0.0),
            1e-6,
        )
        .unwrap();
        assert!(e > 0.1);
    }

    #[test]
    fn rejects_complex_output() {
        let r = finite_diff_check(|z| z.sum_all(), &CTensor::scalar(1.0, 1.0), 1e-6);
        assert!(matches!(r, Err(Error::NonRealLoss(_))));
    }
}
