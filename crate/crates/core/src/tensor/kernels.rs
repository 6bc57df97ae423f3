// Raw slice kernels behind the tape primitives. Layout is NCHW, row-major.

use rayon::prelude::*;

use crate::scalar::{matmul, Scalar};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn in_item(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_item(&self) -> usize {
        self.f * self.oh * self.ow
    }
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

// cols: [c*kh*kw, oh*ow]
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.out_hw();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.out_hw();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_item()];
    out.par_chunks_mut(g.out_item())
        .zip(x.par_chunks(g.in_item()))
        .for_each(|(o, xi)| {
            let ohw = g.out_hw();
            for (fi, plane) in o.chunks_mut(ohw).enumerate() {
                plane.fill(bias[fi]);
            }
            let mut cols = vec![T::zero(); g.patch() * ohw];
            im2col(xi, g, &mut cols);
            matmul(g.f, g.patch(), ohw, k, false, &cols, false, T::one(), o);
        });
    out
}

/// Returns (dx, dkernel, dbias). Per-item partials are reduced in item order so the
/// result does not depend on thread count.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ohw = g.out_hw();
    let mut dx = vec![T::zero(); if need_dx { g.n * g.in_item() } else { 0 }];
    let work = |item: usize, dxi: Option<&mut [T]>| {
        let xi = &x[item * g.in_item()..(item + 1) * g.in_item()];
        let di = &dout[item * g.out_item()..(item + 1) * g.out_item()];
        let mut cols = vec![T::zero(); g.patch() * ohw];
        im2col(xi, g, &mut cols);
        let mut dk = vec![T::zero(); g.f * g.patch()];
        matmul(
            g.f,
            ohw,
            g.patch(),
            di,
            false,
            &cols,
            true,
            T::zero(),
            &mut dk,
        );
        let db: Vec<T> = di.chunks(ohw).map(|p| p.iter().copied().sum()).collect();
        if let Some(dxi) = dxi {
            matmul(
                g.patch(),
                g.f,
                ohw,
                k,
                true,
                di,
                false,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, g, dxi);
        }
        (dk, db)
    };
    let partials: Vec<(Vec<T>, Vec<T>)> = if need_dx {
        dx.par_chunks_mut(g.in_item())
            .enumerate()
            .map(|(item, dxi)| work(item, Some(dxi)))
            .collect()
    } else {
        (0..g.n)
            .into_par_iter()
            .map(|item| work(item, None))
            .collect()
    };
    let mut dk = vec![T::zero(); g.f * g.patch()];
    let mut db = vec![T::zero(); g.f];
    for (pk, pb) in partials {
        dk.iter_mut().zip(&pk).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
    }
    (dx, dk, db)
}

/// 2x2 stride-2 max pool over planes of `h x w`. Returns values and flat argmax
/// indices into `x`; ties resolve to the first element in row-major window order.
pub(crate) fn maxpool2_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                dx[p * h * w + (y / 2) * w + xx / 2] += dout[p * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

pub(crate) fn avgpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[p * oh * ow + oy * ow + ox] * quarter;
                let i = base + 2 * oy * w + 2 * ox;
                dx[i] += g;
                dx[i + 1] += g;
                dx[i + w] += g;
                dx[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Per-channel statistics over (N, spatial) for a `[n, c, hw]` layout.
pub(crate) fn channel_moments<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let m = T::lit((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for item in 0..n {
            let off = (item * c + ch) * hw;
            s += x[off..off + hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for item in 0..n {
            let off = (item * c + ch) * hw;
            v += x[off..off + hw]
                .iter()
                .map(|&e| (e - mu) * (e - mu))
                .sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Normalizes with the given per-channel mean / inverse std; returns (y, xhat).
pub(crate) fn batchnorm_apply<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for item in 0..n {
        for ch in 0..c {
            let off = (item * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Gradients of batch norm. With `batch_stats` the mean/variance depend on the input
/// and the full normalization Jacobian applies; otherwise the map is affine per channel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::lit((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for item in 0..n {
        for ch in 0..c {
            let off = (item * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for item in 0..n {
        for ch in 0..c {
            let off = (item * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    scale * (dy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
