// Brute-force oracles and helpers shared by the integration tests. Nothing here calls
// into the kernels it is used to check.
#![allow(dead_code)]

use cellcount::models::{aleatoric_loss, fpn_loss, CountConfig, CountModel, FpnConfig, FpnModel};
use cellcount::nn::ParamRegistry;
use cellcount::rng::SplitMix64;
use cellcount::tensor::central_difference_error;
use cellcount::{Mode, Tape, Tensor};

pub fn random_vec(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()
}

pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n, 1.0)).unwrap()
}

pub fn random_tensor_f32(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f32> {
    random_tensor(rng, shape).cast()
}

/// Direct 7-deep loop cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [f, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

/// Scans every 2x2 window.
pub fn maxpool_naive(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[p * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

/// Anisotropic L1 total variation of `[n,1,h,w]` divided by `n*h*w`.
pub fn tv_naive(x: &[f64], n: usize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for b in 0..n {
        let at = |i: usize, j: usize| x[(b * h + i) * w + j];
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    s += (at(i + 1, j) - at(i, j)).abs();
                }
                if j + 1 < w {
                    s += (at(i, j + 1) - at(i, j)).abs();
                }
            }
        }
    }
    s / (n * h * w) as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// 4-connected foreground components of a binary image.
pub fn connected_components(pixels: &[u8], w: usize, h: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; pixels.len()];
    let mut comps = Vec::new();
    for start in 0..pixels.len() {
        if pixels[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if pixels[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Small segmenter used by the full-model gradient checks.
pub fn tiny_fpn_config() -> FpnConfig {
    FpnConfig {
        pyramid_depth: 2,
        lateral_filters: 3,
        head_filters: 2,
        down_filters: vec![2, 3],
        tv_weight: 0.05,
        ..FpnConfig::default()
    }
}

/// Small counter for 32x32 inputs used by the full-model gradient checks.
pub fn tiny_counter_config() -> CountConfig {
    CountConfig {
        conv_filters: vec![2, 2, 3, 3, 2, 2, 2, 2],
        fc_dims: vec![4, 3, 1],
        input_hw: (32, 32),
        ..CountConfig::default()
    }
}

// Parameters sampled for the finite-difference checks.
fn sample_coords(
    params: &ParamRegistry<f64>,
    rng: &mut SplitMix64,
    n: usize,
) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = params
        .trainable()
        .map(|(k, t)| (k.to_string(), t.numel()))
        .collect();
    // one coordinate from every tensor, then random extras
    let mut out: Vec<(String, usize)> = all
        .iter()
        .map(|(k, len)| (k.clone(), rng.below(*len)))
        .collect();
    let total: usize = all.iter().map(|x| x.1).sum();
    for _ in 0..n {
        let mut r = rng.below(total);
        for (k, len) in &all {
            if r < *len {
                out.push((k.clone(), r));
                break;
            }
            r -= len;
        }
    }
    out
}

fn fpn_objective(
    m: &mut FpnModel<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    squared: bool,
    backward: bool,
) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
    let loss = fpn_loss(&mut tape, &out, yv, m.config.tv_weight, squared).unwrap();
    let v = tape.value(loss)[0];
    if backward {
        tape.backward(loss).unwrap();
        m.params.zero_grad();
        m.params.collect_grads(&tape);
    } else {
        m.params.unbind();
    }
    v
}

/// Worst relative error of the full FPN loss gradient over sampled parameters.
pub fn fpn_gradient_error(seed: u64, squared: bool) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut m = FpnModel::<f64>::new(tiny_fpn_config(), seed).unwrap();
    let x = random_tensor(&mut rng, &[2, 1, 8, 8]);
    let y = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.uniform());
    fpn_objective(&mut m, &x, &y, squared, true);
    let coords = sample_coords(&m.params, &mut rng, 20);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(k, i)| m.params.get(k).unwrap().grad().map_or(0.0, |g| g[*i]))
        .collect();
    central_difference_error(&analytic, 0..coords.len(), 1e-6, |j, d| {
        let (k, i) = &coords[j];
        m.params.get_mut(k).unwrap().data_mut()[*i] += d;
        let v = fpn_objective(&mut m, &x, &y, squared, false);
        m.params.get_mut(k).unwrap().data_mut()[*i] -= d;
        Ok(v)
    })
    .unwrap()
}

fn count_objective(m: &mut CountModel<f64>, x: &Tensor<f64>, y: &[f64], backward: bool) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.leaf(&[y.len(), 1], y.to_vec(), false).unwrap();
    let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
    let loss = aleatoric_loss(
        &mut tape,
        out.count,
        yv,
        out.logvar,
        m.config.squared_residual,
    )
    .unwrap();
    let v = tape.value(loss)[0];
    if backward {
        tape.backward(loss).unwrap();
        m.params.zero_grad();
        m.params.collect_grads(&tape);
    } else {
        m.params.unbind();
    }
    v
}

/// Worst relative error of the counter loss gradient over sampled parameters.
pub fn counter_gradient_error(seed: u64, squared: bool) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let cfg = CountConfig {
        squared_residual: squared,
        ..tiny_counter_config()
    };
    let mut m = CountModel::<f64>::new(cfg, seed).unwrap();
    // keep the count head active so the ReLU passes gradient
    let b = m.count_output_bias().to_string();
    m.params.get_mut(&b).unwrap().data_mut().fill(3.0);
    let x = Tensor::from_fn(&[3, 1, 32, 32], |_| rng.uniform());
    let y = [2.0, 7.0, 4.5];
    count_objective(&mut m, &x, &y, true);
    let coords = sample_coords(&m.params, &mut rng, 20);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(k, i)| m.params.get(k).unwrap().grad().map_or(0.0, |g| g[*i]))
        .collect();
    central_difference_error(&analytic, 0..coords.len(), 1e-6, |j, d| {
        let (k, i) = &coords[j];
        m.params.get_mut(k).unwrap().data_mut()[*i] += d;
        let v = count_objective(&mut m, &x, &y, false);
        m.params.get_mut(k).unwrap().data_mut()[*i] -= d;
        Ok(v)
    })
    .unwrap()
}
