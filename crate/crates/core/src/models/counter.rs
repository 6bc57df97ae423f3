use super::scaled_filters;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CountConfig {
    /// Filters of the eight 3x3 convolutions.
    pub conv_filters: Vec<usize>,
    /// 1-based indices of the convolutions followed by a 2x2 max pool.
    pub pool_after: Vec<usize>,
    /// Widths of the fully connected stack; the last entry is the scalar output.
    pub fc_dims: Vec<usize>,
    pub leaky_slope: f64,
    pub width_multiplier: f64,
    /// Height and width of the masks the counter consumes.
    pub input_hw: (usize, usize),
    pub squared_residual: bool,
    /// Fixed factor `k` on the outputs: `count = k * relu(head)` and
    /// `logvar = head + 2 ln k`. The loss is unchanged up to a constant; a larger `k`
    /// lets a small learning rate reach large counts in fewer steps.
    pub output_scale: f64,
}

impl Default for CountConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![64, 128, 256, 256, 512, 512, 512, 512],
            pool_after: vec![1, 2, 4, 6, 8],
            fc_dims: vec![1024, 512, 1],
            leaky_slope: 0.01,
            width_multiplier: 1.0,
            input_hw: (96, 128),
            squared_residual: false,
            output_scale: 1.0,
        }
    }
}

impl CountConfig {
    pub fn divisor(&self) -> usize {
        1 << self.pool_after.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.divisor();
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(format!(
                "counter: input height and width must be positive multiples of {d}, got {h}x{w}"
            )));
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::invalid(
                "counter: conv filter counts must be positive",
            ));
        }
        if self
            .pool_after
            .iter()
            .any(|&i| i == 0 || i > self.conv_filters.len())
        {
            return Err(Error::invalid("counter: pool index outside the conv stack"));
        }
        if self.fc_dims.last() != Some(&1) || self.fc_dims.contains(&0) {
            return Err(Error::invalid(
                "counter: fc_dims must be positive and end in 1",
            ));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::invalid(
                "counter: width_multiplier must lie in (0, 1]",
            ));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::invalid("counter: output_scale must be positive"));
        }
        Ok(())
    }

    /// Length of the flattened feature vector entering the dense heads.
    pub fn flat_dim(&self) -> usize {
        let d = self.divisor();
        let c = scaled_filters(*self.conv_filters.last().unwrap(), self.width_multiplier);
        c * (self.input_hw.0 / d) * (self.input_hw.1 / d)
    }
}

// FC -> BN -> leaky, ..., FC to one output
#[derive(Clone, Debug)]
struct DenseHead {
    hidden: Vec<(Linear, BatchNorm)>,
    out: Linear,
}

impl DenseHead {
    fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        d_in: usize,
        dims: &[usize],
    ) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut d = d_in;
        for (i, &width) in dims[..dims.len() - 1].iter().enumerate() {
            hidden.push((
                Linear::new(reg, &format!("{prefix}.fc{i}"), d, width)?,
                BatchNorm::new(reg, &format!("{prefix}.bn{i}"), width)?,
            ));
            d = width;
        }
        let out = Linear::new(reg, &format!("{prefix}.fc{}", dims.len() - 1), d, 1)?;
        Ok(Self { hidden, out })
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
        for (fc, bn) in &self.hidden {
            h = fc.forward(reg, tape, h)?;
            h = bn.forward(reg, tape, h, mode)?;
            h = tape.leaky_relu(h, slope);
        }
        self.out.forward(reg, tape, h)
    }
}

/// VGG-11-style regressor: eight conv blocks, then a count head ending in ReLU and a
/// log-variance head with the same dense structure but an unconstrained output.
#[derive(Clone, Debug)]
pub struct CountModel<T> {
    pub config: CountConfig,
    pub params: ParamRegistry<T>,
    convs: Vec<(Conv2d, BatchNorm, bool)>,
    count_head: DenseHead,
    logvar_head: DenseHead,
}

/// Tape handles of one forward pass; both are `[N, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct CountVars {
    pub count: Var,
    pub logvar: Var,
    /// Activation of the final count layer before its ReLU.
    pub count_preact: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountOutput {
    pub count: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl<T: Scalar> CountModel<T> {
    pub fn new(config: CountConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamRegistry::new();
        let w = config.width_multiplier;
        let mut convs = Vec::new();
        let mut in_c = 1;
        for (i, &f) in config.conv_filters.iter().enumerate() {
            let out_c = scaled_filters(f, w);
            let conv = Conv2d::new(
                &mut params,
                &format!("count.conv.{i}"),
                in_c,
                out_c,
                3,
                1,
                1,
            )?;
            let bn = BatchNorm::new(&mut params, &format!("count.bn.{i}"), out_c)?;
            convs.push((conv, bn, config.pool_after.contains(&(i + 1))));
            in_c = out_c;
        }
        let n = config.fc_dims.len();
        let dims: Vec<usize> = config
            .fc_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| if i + 1 == n { d } else { scaled_filters(d, w) })
            .collect();
        let flat = config.flat_dim();
        let count_head = DenseHead::new(&mut params, "count.head", flat, &dims)?;
        let logvar_head = DenseHead::new(&mut params, "count.logvar", flat, &dims)?;
        params.init(seed);
        Ok(Self {
            config,
            params,
            convs,
            count_head,
            logvar_head,
        })
    }

    /// Name of the bias of the final count layer (the one feeding the ReLU).
    pub fn count_output_bias(&self) -> &str {
        self.count_head.out.bias_name()
    }

    pub fn count_output_weight(&self) -> &str {
        self.count_head.out.weight_name()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, masks: Var, mode: Mode) -> Result<CountVars> {
        let shape = tape.shape(masks).to_vec();
        let (h, w) = self.config.input_hw;
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::invalid(format!(
                "counter: expected masks of shape [N,1,H,W], got {shape:?}"
            )));
        }
        let d = self.config.divisor();
        if shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::invalid(format!(
                "counter: mask height and width must be divisible by {d}, got {}x{}",
                shape[2], shape[3]
            )));
        }
        if (shape[2], shape[3]) != (h, w) {
            return Err(Error::invalid(format!(
                "counter: built for {h}x{w} masks, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let slope = T::lit(self.config.leaky_slope);
        let reg = &mut self.params;
        let mut x = masks;
        for (conv, bn, pool) in &self.convs {
            x = conv.forward(reg, tape, x)?;
            x = bn.forward(reg, tape, x, mode)?;
            x = tape.leaky_relu(x, slope);
            if *pool {
                x = tape.max_pool2(x)?;
            }
        }
        let flat = tape.flatten(x)?;
        let count_preact = self.count_head.forward(reg, tape, flat, mode, slope)?;
        let mut count = tape.relu(count_preact);
        let mut logvar = self.logvar_head.forward(reg, tape, flat, mode, slope)?;
        let k = self.config.output_scale;
        if k != 1.0 {
            count = tape.mul_scalar(count, T::lit(k));
            logvar = tape.add_scalar(logvar, T::lit(2.0 * k.ln()));
        }
        Ok(CountVars {
            count,
            logvar,
            count_preact,
        })
    }

    /// Eval-mode counts and log-variances for a batch of masks.
    pub fn predict(&mut self, masks: &Tensor<T>) -> Result<CountOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(masks);
        let vars = self.forward(&mut tape, x, Mode::Eval)?;
        self.params.collect_grads(&tape);
        Ok(CountOutput {
            count: tape.value(vars.count).iter().map(|v| v.as_f64()).collect(),
            logvar: tape.value(vars.logvar).iter().map(|v| v.as_f64()).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> CountModel<U> {
        CountModel {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            count_head: self.count_head.clone(),
            logvar_head: self.logvar_head.clone(),
        }
    }
}
