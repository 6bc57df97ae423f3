use std::fmt;

use super::FpnVars;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Mean over elements of `|y - y_hat| * exp(-s/2) / 2 + s`, with `s = log(sigma^2)`.
///
/// This is the residual-over-two-sigma plus log-variance penalty with
/// `sigma = exp(s/2)`; the residual enters unsquared. With `squared` the
/// conventional heteroscedastic form `0.5 * exp(-s) * r^2 + 0.5 * s` is used instead.
pub fn aleatoric_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    logvar: Var,
    squared: bool,
) -> Result<Var> {
    let (sp, st, ss) = (tape.shape(pred), tape.shape(target), tape.shape(logvar));
    if sp != st || sp != ss {
        return Err(Error::invalid(format!(
            "aleatoric_loss: prediction {sp:?}, target {st:?} and log-variance {ss:?} must share a shape"
        )));
    }
    let half = T::lit(0.5);
    let diff = tape.sub(target, pred)?;
    let per_elem = if squared {
        let r2 = tape.square(diff);
        let neg_s = tape.neg(logvar);
        let inv_var = tape.exp(neg_s);
        let weighted = tape.mul(r2, inv_var)?;
        let weighted = tape.mul_scalar(weighted, half);
        let half_s = tape.mul_scalar(logvar, half);
        tape.add(weighted, half_s)?
    } else {
        let r = tape.abs(diff);
        let neg_half_s = tape.mul_scalar(logvar, -half);
        let inv_sigma = tape.exp(neg_half_s);
        let weighted = tape.mul(r, inv_sigma)?;
        let weighted = tape.mul_scalar(weighted, half);
        tape.add(weighted, logvar)?
    };
    Ok(tape.mean(per_elem))
}

/// Anisotropic L1 total variation of `[N,1,H,W]`, normalized by `N*H*W`.
pub fn tv_loss<T: Scalar>(tape: &mut Tape<T>, mask: Var) -> Result<Var> {
    let numel = tape.value(mask).len();
    let dv = tape.diff(mask, true)?;
    let dh = tape.diff(mask, false)?;
    let av = tape.abs(dv);
    let ah = tape.abs(dh);
    let sv = tape.sum(av);
    let sh = tape.sum(ah);
    let total = tape.add(sv, sh)?;
    Ok(tape.mul_scalar(total, T::one() / T::lit(numel as f64)))
}

/// Sum over pyramid scales of aleatoric loss plus `tv_weight` times TV of the mask.
///
/// `target` is at the finest output scale (half the input); coarser targets come from
/// repeated 2x2 average pooling.
pub fn fpn_loss<T: Scalar>(
    tape: &mut Tape<T>,
    output: &FpnVars,
    target: Var,
    tv_weight: T,
    squared: bool,
) -> Result<Var> {
    let first = output
        .masks
        .first()
        .ok_or_else(|| Error::invalid("fpn_loss: empty pyramid"))?;
    if tape.shape(*first) != tape.shape(target) {
        return Err(Error::invalid(format!(
            "fpn_loss: target {:?} does not match finest mask {:?}",
            tape.shape(target),
            tape.shape(*first)
        )));
    }
    let mut level_target = target;
    let mut total: Option<Var> = None;
    for (k, (&mask, &logvar)) in output.masks.iter().zip(&output.logvars).enumerate() {
        if k > 0 {
            level_target = tape.avg_pool2(level_target)?;
        }
        let fit = aleatoric_loss(tape, mask, level_target, logvar, squared)?;
        let tv = tv_loss(tape, mask)?;
        let tv = tape.mul_scalar(tv, tv_weight);
        let term = tape.add(fit, tv)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty pyramid"))
}

/// A count with its 95% interval, lower bound clamped at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceInterval {
    pub count: f64,
    pub halfwidth: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        value >= self.lo && value <= self.hi
    }
}

impl fmt::Display for ConfidenceInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.count, self.halfwidth)
    }
}

/// 95% interval `count ± 1.96 * exp(logvar / 2)`.
pub fn ci95(count: f64, logvar: f64) -> ConfidenceInterval {
    let halfwidth = Z_95 * (logvar / 2.0).exp();
    ConfidenceInterval {
        count,
        halfwidth,
        lo: (count - halfwidth).max(0.0),
        hi: count + halfwidth,
    }
}
