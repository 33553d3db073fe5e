use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error with denominator `max(|a|, |b|, 1e-8)`, maximised over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function of one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, Tape<f64>, Var)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape("grad_check needs a scalar-valued function".into()));
    }
    let v = tape.value(out).data()[0];
    tape.backward(out)?;
    Ok((v, tape, leaf))
}

/// Compares backward gradients of `f` at `x` with central differences on
/// every coordinate and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let (_, tape, leaf) = eval_scalar(&f, x)?;
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let d = central_difference(
            |xi| {
                let mut probe = x.clone();
                probe.data_mut()[i] = xi;
                let mut t = Tape::new();
                let leaf = t.leaf(probe, false);
                let out = f(&mut t, leaf)?;
                Ok(t.value(out).data()[0])
            },
            x.data()[i],
            h,
        )?;
        numeric.push(d);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = t(&[3], &[0.4, -1.2, 2.0]);
        let w = t(&[3], &[1.5, -0.5, 2.0]);
        let err = grad_check(
            |tp, x| {
                let w = tp.constant(w.clone());
                let p = tp.mul(x, w)?;
                Ok(tp.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn quadratic_form() {
        let x = t(&[1, 3], &[0.3, -0.7, 1.1]);
        let a = t(&[3, 3], &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 3.0]);
        let err = grad_check(
            |tp, x| {
                let a = tp.constant(a.clone());
                let ax = tp.matmul(x, a)?;
                let p = tp.mul(ax, x)?;
                Ok(tp.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn max_relative_error_floor() {
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
    }
}
