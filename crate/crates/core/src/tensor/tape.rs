use super::kernels::{self, ConvGeom};
use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{matmul, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// How an operand's elements map onto the (larger) output of a binary op.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    Channel { c: usize, hw: usize },
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Channel { c, hw } => (i / hw) % c,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    AvgPool2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Diff {
        x: Var,
        vertical: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        dims: (usize, usize, usize),
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended only after all their inputs exist, so recording order is a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Lifts a tensor onto the tape, recording the handle on the tensor. Gradient
    /// flows to it iff the tensor requires grad.
    pub fn watch(&mut self, t: &mut Tensor<T>) -> Var {
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        );
        t.set_node(Some(v));
        v
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Leaf built from raw parts.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape values are well-formed")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after one or more [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds this tape's gradient for the tensor's node into `t.grad`.
    pub fn write_grad(&self, t: &mut Tensor<T>) {
        if let Some(g) = t
            .node()
            .and_then(|v| self.leaf_grads.get(v.0))
            .and_then(|g| g.as_deref())
        {
            t.accumulate_grad(g);
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast(&self, a: Var, b: Var, what: &str) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Same, Bcast::Same));
        }
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Ok((sa.to_vec(), Bcast::Same, Bcast::Scalar));
        }
        if na == 1 {
            return Ok((sb.to_vec(), Bcast::Scalar, Bcast::Same));
        }
        let channel = |big: &[usize], small: &[usize]| {
            (small.len() == 1 && big.len() >= 2 && big[1] == small[0]).then(|| Bcast::Channel {
                c: small[0],
                hw: big[2..].iter().product(),
            })
        };
        if let Some(bc) = channel(sa, sb) {
            return Ok((sa.to_vec(), Bcast::Same, bc));
        }
        if let Some(bc) = channel(sb, sa) {
            return Ok((sb.to_vec(), bc, Bcast::Same));
        }
        Err(Error::invalid(format!(
            "{what}: incompatible shapes {sa:?} and {sb:?}"
        )))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var, Bcast, Bcast) -> Op<T>,
    ) -> Result<Var> {
        let (shape, ba, bb) = self.broadcast(a, b, what)?;
        let numel: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..numel)
            .map(|i| f(va[ba.index(i)], vb[bb.index(i)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, op(a, b, ba, bb)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, op)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let m = vals.iter().copied().sum::<T>() / T::lit(vals.len() as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![m], rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(a, &[n, rest])
    }

    // ---- spatial ------------------------------------------------------------

    fn nchw(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::invalid(format!(
                "{what}: expected [N,C,H,W], got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `k: [F,C,kH,kW]` plus `bias: [F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "conv2d input")?;
        let [f, kc, kh, kw] = self.nchw(k, "conv2d kernel")?;
        if kc != c {
            return Err(Error::invalid(format!(
                "conv2d: input {:?} has {c} channels but kernel {:?} expects {kc}",
                self.shape(x),
                self.shape(k)
            )));
        }
        if self.shape(bias) != [f] {
            return Err(Error::invalid(format!(
                "conv2d: bias {:?} does not match {f} filters",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid(format!(
                "conv2d: kernel {:?} larger than padded input {:?} (pad {pad})",
                self.shape(k),
                self.shape(x)
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(k), self.value(bias), &geom);
        let rg = self.rg(x) || self.rg(k) || self.rg(bias);
        Ok(self.push(
            vec![n, f, geom.oh, geom.ow],
            out,
            rg,
            Op::Conv2d {
                x,
                k,
                b: bias,
                geom,
            },
        ))
    }

    fn even_spatial(&self, x: Var, what: &str) -> Result<[usize; 4]> {
        let dims = self.nchw(x, what)?;
        if dims[2] % 2 != 0 || dims[3] % 2 != 0 {
            return Err(Error::invalid(format!(
                "{what}: spatial dims of {:?} must be even",
                self.shape(x)
            )));
        }
        Ok(dims)
    }

    /// 2x2 / stride 2 max pooling.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.even_spatial(x, "max_pool2")?;
        let (out, argmax) = kernels::maxpool2_forward(self.value(x), n * c, h, w);
        let rg = self.rg(x);
        Ok(self.push(
            vec![n, c, h / 2, w / 2],
            out,
            rg,
            Op::MaxPool2 { x, argmax },
        ))
    }

    /// 2x2 / stride 2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.even_spatial(x, "avg_pool2")?;
        let out = kernels::avgpool2_forward(self.value(x), n * c, h, w);
        let rg = self.rg(x);
        let planes = n * c;
        Ok(self.push(
            vec![n, c, h / 2, w / 2],
            out,
            rg,
            Op::AvgPool2 { x, planes, h, w },
        ))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "upsample2")?;
        let out = kernels::upsample2_forward(self.value(x), n * c, h, w);
        let rg = self.rg(x);
        let planes = n * c;
        Ok(self.push(
            vec![n, c, 2 * h, 2 * w],
            out,
            rg,
            Op::Upsample2 { x, planes, h, w },
        ))
    }

    /// Forward difference along H (`vertical`) or W: `x[.., i+1] - x[.., i]`.
    pub fn diff(&mut self, x: Var, vertical: bool) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "diff")?;
        let (oh, ow) = if vertical { (h - 1, w) } else { (h, w - 1) };
        if oh == 0 || ow == 0 {
            return Err(Error::invalid(format!(
                "diff: spatial dims of {:?} must be at least 2",
                self.shape(x)
            )));
        }
        let v = self.value(x);
        let (dy, dx) = if vertical { (1, 0) } else { (0, 1) };
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = p * h * w + y * w + xx;
                    out.push(v[i + dy * w + dx] - v[i]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::Diff { x, vertical }))
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    ///
    /// In [`Mode::Train`] the biased batch statistics normalize the input and the
    /// running buffers move toward the batch mean and the unbiased batch variance by
    /// `momentum` (skipped when a channel has a single element). In [`Mode::Eval`] the running
    /// buffers are used and left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid(format!(
                "batch_norm: expected [N,C,...], got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::invalid(format!(
                    "batch_norm: {name} {:?} does not match {c} channels",
                    self.shape(v)
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(
                "batch_norm: running statistics length mismatch",
            ));
        }
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(x), n, c, hw);
                let m = n * hw;
                if m >= 2 {
                    let keep = T::one() - momentum;
                    let unbias = T::lit(m as f64 / (m - 1) as f64);
                    for ch in 0..c {
                        running_mean[ch] = keep * running_mean[ch] + momentum * mean[ch];
                        running_var[ch] = keep * running_var[ch] + momentum * unbias * var[ch];
                    }
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv, true)
            }
            Mode::Eval => {
                let inv = running_var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (running_mean.to_vec(), inv, false)
            }
        };
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            y,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (n, c, hw),
                batch_stats,
            },
        ))
    }

    /// `x: [N,D] . w: [D,K] + b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::invalid(format!(
                "linear: incompatible shapes input {sx:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let (n, d, k) = (sx[0], sx[1], sw[1]);
        let mut out: Vec<T> = (0..n).flat_map(|_| self.value(b).iter().copied()).collect();
        matmul(
            n,
            d,
            k,
            self.value(x),
            false,
            self.value(w),
            false,
            T::one(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            vec![n, k],
            out,
            rg,
            Op::Linear {
                x,
                w,
                b,
                dims: (n, d, k),
            },
        ))
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every gradient-requiring leaf reachable from
    /// `loss`. Repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gout),
                }
                continue;
            }
            for (input, g) in self.input_grads(id, &gout) {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let mut res = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.rg(v) {
                res.push((v, f()));
            }
        };
        let pointwise = |a: Var, d: &dyn Fn(T, T) -> T| -> Vec<T> {
            // d(input value, output value) -> local derivative
            let (xa, y) = (self.value(a), &node.value);
            gout.iter()
                .zip(xa)
                .zip(y)
                .map(|((&g, &x), &yv)| g * d(x, yv))
                .collect()
        };
        let reduce = |len: usize, bc: Bcast, f: &dyn Fn(usize) -> T| -> Vec<T> {
            let mut out = vec![T::zero(); len];
            for i in 0..gout.len() {
                out[bc.index(i)] += f(i);
            }
            out
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ba, bb) => {
                emit(*a, &|| reduce(self.value(*a).len(), *ba, &|i| gout[i]));
                emit(*b, &|| reduce(self.value(*b).len(), *bb, &|i| gout[i]));
            }
            Op::Sub(a, b, ba, bb) => {
                emit(*a, &|| reduce(self.value(*a).len(), *ba, &|i| gout[i]));
                emit(*b, &|| reduce(self.value(*b).len(), *bb, &|i| -gout[i]));
            }
            Op::Mul(a, b, ba, bb) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                emit(*a, &|| {
                    reduce(va.len(), *ba, &|i| gout[i] * vb[bb.index(i)])
                });
                emit(*b, &|| {
                    reduce(vb.len(), *bb, &|i| gout[i] * va[ba.index(i)])
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => emit(*a, &|| gout.to_vec()),
            Op::MulScalar(a, s) => emit(*a, &|| gout.iter().map(|&g| g * *s).collect()),
            Op::Abs(a) => emit(*a, &|| {
                pointwise(*a, &|x, _| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
            }),
            Op::Exp(a) => emit(*a, &|| pointwise(*a, &|_, y| y)),
            Op::Log(a) => emit(*a, &|| pointwise(*a, &|x, _| T::one() / x)),
            Op::Square(a) => emit(*a, &|| pointwise(*a, &|x, _| x + x)),
            Op::Sqrt(a) => emit(*a, &|| pointwise(*a, &|_, y| T::lit(0.5) / y)),
            Op::Relu(a) => emit(*a, &|| {
                pointwise(*a, &|x, _| if x > T::zero() { T::one() } else { T::zero() })
            }),
            Op::LeakyRelu(a, slope) => emit(*a, &|| {
                pointwise(*a, &|x, _| if x > T::zero() { T::one() } else { *slope })
            }),
            Op::Sum(a) => emit(*a, &|| vec![gout[0]; self.value(*a).len()]),
            Op::Mean(a) => emit(*a, &|| {
                let len = self.value(*a).len();
                vec![gout[0] / T::lit(len as f64); len]
            }),
            Op::Conv2d { x, k, b, geom } => {
                if self.rg(*x) || self.rg(*k) || self.rg(*b) {
                    let (dx, dk, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*k),
                        gout,
                        geom,
                        self.rg(*x),
                    );
                    if self.rg(*x) {
                        res.push((*x, dx));
                    }
                    if self.rg(*k) {
                        res.push((*k, dk));
                    }
                    if self.rg(*b) {
                        res.push((*b, db));
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => emit(*x, &|| {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &g) in argmax.iter().zip(gout) {
                    dx[i] += g;
                }
                dx
            }),
            Op::Upsample2 { x, planes, h, w } => {
                emit(*x, &|| kernels::upsample2_backward(gout, *planes, *h, *w))
            }
            Op::AvgPool2 { x, planes, h, w } => {
                emit(*x, &|| kernels::avgpool2_backward(gout, *planes, *h, *w))
            }
            Op::Diff { x, vertical } => emit(*x, &|| {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let step = if *vertical { w } else { 1 };
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = gout[p * oh * ow + y * ow + xx];
                            let i = p * h * w + y * w + xx;
                            dx[i + step] += g;
                            dx[i] -= g;
                        }
                    }
                }
                dx
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (n, c, hw),
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    gout,
                    xhat,
                    *n,
                    *c,
                    *hw,
                    self.value(*gamma),
                    inv_std,
                    *batch_stats,
                );
                for (v, g) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if self.rg(v) {
                        res.push((v, g));
                    }
                }
            }
            Op::Linear {
                x,
                w,
                b,
                dims: (n, d, k),
            } => {
                let (n, d, k) = (*n, *d, *k);
                emit(*x, &|| {
                    let mut dx = vec![T::zero(); n * d];
                    matmul(
                        n,
                        k,
                        d,
                        gout,
                        false,
                        self.value(*w),
                        true,
                        T::zero(),
                        &mut dx,
                    );
                    dx
                });
                emit(*w, &|| {
                    let mut dw = vec![T::zero(); d * k];
                    matmul(
                        d,
                        n,
                        k,
                        self.value(*x),
                        true,
                        gout,
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    dw
                });
                emit(*b, &|| {
                    let mut db = vec![T::zero(); k];
                    for row in gout.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    db
                });
            }
        }
        res
    }
}
