use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Max over `coords` of `|analytic - central| / max(1, |analytic|)`, where `eval(i, d)`
/// returns the objective with coordinate `i` shifted by `d`.
pub fn central_difference_error<T: Scalar>(
    analytic: &[T],
    coords: impl IntoIterator<Item = usize>,
    h: T,
    mut eval: impl FnMut(usize, T) -> Result<T>,
) -> Result<T> {
    let two_h = h + h;
    let mut worst = T::zero();
    for i in coords {
        let numeric = (eval(i, h)? - eval(i, -h)?) / two_h;
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares the tape gradient of a scalar-valued `f` at `point` against central
/// finite differences on every coordinate.
pub fn finite_diff_check<T, F>(mut f: F, point: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.shape(), point.data().to_vec(), true)?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); point.numel()]);

    let mut shifted = point.data().to_vec();
    central_difference_error(&analytic, 0..point.numel(), h, |i, d| {
        let orig = shifted[i];
        shifted[i] = orig + d;
        let mut tape = Tape::new();
        let x = tape.leaf(point.shape(), shifted.clone(), false)?;
        let y = f(&mut tape, x)?;
        shifted[i] = orig;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(Error::invalid(
                "finite_diff_check: objective must be scalar",
            ));
        }
        Ok(v[0])
    })
}
