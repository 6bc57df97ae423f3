use super::{ParamKind, ParamRegistry};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Square-kernel convolution whose parameters live under `<prefix>.weight/.bias`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        let fan_in = in_c * kernel * kernel;
        reg.add(
            &weight,
            &[out_c, in_c, kernel, kernel],
            ParamKind::Weight { fan_in },
        )?;
        reg.add(&bias, &[out_c], ParamKind::Bias)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let w = reg.bind(tape, &self.weight);
        let b = reg.bind(tape, &self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }
}

/// Batch normalization over the channel axis of `[N,C,...]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        let s = Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
        };
        reg.add(&s.gamma, &[channels], ParamKind::Gamma)?;
        reg.add(&s.beta, &[channels], ParamKind::Beta)?;
        reg.add(&s.running_mean, &[channels], ParamKind::RunningMean)?;
        reg.add(&s.running_var, &[channels], ParamKind::RunningVar)?;
        Ok(s)
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let g = reg.bind(tape, &self.gamma);
        let b = reg.bind(tape, &self.beta);
        let (rm, rv) = reg.running_stats(&self.running_mean, &self.running_var);
        tape.batch_norm(x, g, b, rm, rv, mode, T::lit(BN_MOMENTUM), T::lit(BN_EPS))
    }
}

/// Dense layer `x . W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        reg.add(&weight, &[d_in, d_out], ParamKind::Weight { fan_in: d_in })?;
        reg.add(&bias, &[d_out], ParamKind::Bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let w = reg.bind(tape, &self.weight);
        let b = reg.bind(tape, &self.bias);
        tape.linear(x, w, b)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }
}
