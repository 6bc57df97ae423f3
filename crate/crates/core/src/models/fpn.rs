use super::scaled_filters;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FpnConfig {
    pub pyramid_depth: usize,
    pub lateral_filters: usize,
    pub head_filters: usize,
    /// Output channels of each down-sampling block, finest first.
    pub down_filters: Vec<usize>,
    pub leaky_slope: f64,
    pub tv_weight: f64,
    pub width_multiplier: f64,
    /// Use the squared-residual aleatoric loss instead of the absolute one.
    pub squared_residual: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            pyramid_depth: 4,
            lateral_filters: 128,
            head_filters: 256,
            down_filters: vec![64, 128, 128, 128],
            leaky_slope: 0.01,
            tv_weight: 1e-4,
            width_multiplier: 1.0,
            squared_residual: false,
        }
    }
}

impl FpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_depth == 0 {
            return Err(Error::invalid("fpn: pyramid_depth must be at least 1"));
        }
        if self.down_filters.len() != self.pyramid_depth {
            return Err(Error::invalid(format!(
                "fpn: {} down_filters given for pyramid depth {}",
                self.down_filters.len(),
                self.pyramid_depth
            )));
        }
        if self.lateral_filters == 0 || self.head_filters == 0 || self.down_filters.contains(&0) {
            return Err(Error::invalid("fpn: filter counts must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::invalid("fpn: width_multiplier must lie in (0, 1]"));
        }
        Ok(())
    }

    fn scaled(&self, n: usize) -> usize {
        scaled_filters(n, self.width_multiplier)
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(reg, &format!("{prefix}.conv"), in_c, out_c, 3, stride, 1)?,
            bn: BatchNorm::new(reg, &format!("{prefix}.bn"), out_c)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y = self.conv.forward(reg, tape, x)?;
        self.bn.forward(reg, tape, y, mode)
    }
}

// conv-BN-leaky, conv-BN-leaky, conv to a single channel
#[derive(Clone, Debug)]
struct Head {
    hidden: [ConvBn; 2],
    out: Conv2d,
}

impl Head {
    fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_c: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: [
                ConvBn::new(reg, &format!("{prefix}.0"), in_c, width, 1)?,
                ConvBn::new(reg, &format!("{prefix}.1"), width, width, 1)?,
            ],
            out: Conv2d::new(reg, &format!("{prefix}.out"), width, 1, 3, 1, 1)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        slope: T,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(reg, tape, h, mode)?;
            h = tape.leaky_relu(h, slope);
        }
        self.out.forward(reg, tape, h)
    }
}

/// Feature pyramid segmenter producing a mask and a log-variance map per scale.
#[derive(Clone, Debug)]
pub struct FpnModel<T> {
    pub config: FpnConfig,
    pub params: ParamRegistry<T>,
    down: Vec<ConvBn>,
    lateral: Vec<ConvBn>,
    mask_heads: Vec<Head>,
    logvar_heads: Vec<Head>,
}

/// Tape handles of one forward pass, finest scale first.
#[derive(Clone, Debug)]
pub struct FpnVars {
    pub masks: Vec<Var>,
    pub logvars: Vec<Var>,
}

/// Materialized outputs, finest scale (half the input) first.
#[derive(Clone, Debug)]
pub struct FpnOutput<T> {
    pub masks: Vec<Tensor<T>>,
    pub logvars: Vec<Tensor<T>>,
}

impl<T: Scalar> FpnModel<T> {
    /// Builds the topology and initializes parameters from `seed`.
    pub fn new(config: FpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamRegistry::new();
        let lateral_c = config.scaled(config.lateral_filters);
        let head_c = config.scaled(config.head_filters);
        let mut down = Vec::new();
        let mut lateral = Vec::new();
        let mut mask_heads = Vec::new();
        let mut logvar_heads = Vec::new();
        let mut in_c = 1;
        for k in 0..config.pyramid_depth {
            let out_c = config.scaled(config.down_filters[k]);
            down.push(ConvBn::new(
                &mut params,
                &format!("fpn.down.{k}"),
                in_c,
                out_c,
                2,
            )?);
            in_c = out_c;
        }
        for k in 0..config.pyramid_depth {
            let c = config.scaled(config.down_filters[k]);
            lateral.push(ConvBn::new(
                &mut params,
                &format!("fpn.lateral.{k}"),
                c,
                lateral_c,
                1,
            )?);
        }
        for k in 0..config.pyramid_depth {
            mask_heads.push(Head::new(
                &mut params,
                &format!("fpn.mask.{k}"),
                lateral_c,
                head_c,
            )?);
            logvar_heads.push(Head::new(
                &mut params,
                &format!("fpn.logvar.{k}"),
                lateral_c,
                head_c,
            )?);
        }
        params.init(seed);
        Ok(Self {
            config,
            params,
            down,
            lateral,
            mask_heads,
            logvar_heads,
        })
    }

    /// Required divisor of input height and width.
    pub fn divisor(&self) -> usize {
        1 << self.config.pyramid_depth
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<FpnVars> {
        let shape = tape.shape(images).to_vec();
        let d = self.divisor();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::invalid(format!(
                "fpn: expected images of shape [N,1,H,W], got {shape:?}"
            )));
        }
        if shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::invalid(format!(
                "fpn: input height and width must be divisible by {d}, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let slope = T::lit(self.config.leaky_slope);
        let reg = &mut self.params;

        let mut laterals = Vec::with_capacity(self.down.len());
        let mut h = images;
        for (down, lat) in self.down.iter().zip(&self.lateral) {
            h = down.forward(reg, tape, h, mode)?;
            h = tape.leaky_relu(h, slope);
            laterals.push(lat.forward(reg, tape, h, mode)?);
        }

        let depth = laterals.len();
        let mut merged = vec![laterals[depth - 1]; depth];
        for k in (0..depth - 1).rev() {
            let up = tape.upsample2(merged[k + 1])?;
            merged[k] = tape.add(up, laterals[k])?;
        }

        let mut masks = Vec::with_capacity(depth);
        let mut logvars = Vec::with_capacity(depth);
        for (k, &m) in merged.iter().enumerate() {
            masks.push(self.mask_heads[k].forward(reg, tape, m, mode, slope)?);
            logvars.push(self.logvar_heads[k].forward(reg, tape, m, mode, slope)?);
        }
        Ok(FpnVars { masks, logvars })
    }

    /// Eval-mode forward pass without gradient bookkeeping.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<FpnOutput<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let vars = self.forward(&mut tape, x, Mode::Eval)?;
        self.params.collect_grads(&tape);
        Ok(FpnOutput {
            masks: vars.masks.iter().map(|&v| tape.to_tensor(v)).collect(),
            logvars: vars.logvars.iter().map(|&v| tape.to_tensor(v)).collect(),
        })
    }

    /// Same model in another element type.
    pub fn cast<U: Scalar>(&self) -> FpnModel<U> {
        FpnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            down: self.down.clone(),
            lateral: self.lateral.clone(),
            mask_heads: self.mask_heads.clone(),
            logvar_heads: self.logvar_heads.clone(),
        }
    }
}
