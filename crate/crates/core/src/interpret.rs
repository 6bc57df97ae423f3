//! Vanilla-gradient saliency over the counting network and PGM export of the
//! per-image panels (input, predicted mask, uncertainty, saliency).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{aleatoric_loss, CountModel};
use crate::simdata::{write_pgm, GrayImage};
use crate::{Mode, Scalar, Tape, Tensor};

/// Scalar whose input gradient is visualized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// The predicted count. Needs no ground truth.
    #[default]
    Prediction,
    /// The aleatoric counting loss against a known count.
    Loss,
}

impl FromStr for SaliencyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" => Ok(Self::Prediction),
            "loss" => Ok(Self::Loss),
            other => Err(Error::Config {
                key: "saliency.target".into(),
                msg: format!("expected `prediction` or `loss`, got `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major scores in [0, 1].
    pub values: Vec<f64>,
    /// Largest absolute gradient before scaling; 0 for an all-zero map.
    pub max_raw: f64,
}

impl SaliencyMap {
    /// Takes absolute values and divides by the maximum, leaving an all-zero input as is.
    pub fn from_gradient(width: usize, height: usize, grad: &[f64]) -> Result<Self> {
        if grad.len() != width * height {
            return Err(Error::invalid(format!(
                "saliency: {} values do not fill {width}x{height}",
                grad.len()
            )));
        }
        let abs: Vec<f64> = grad.iter().map(|g| g.abs()).collect();
        let max_raw = abs.iter().copied().fold(0.0, f64::max);
        let values = if max_raw > 0.0 {
            abs.iter().map(|v| v / max_raw).collect()
        } else {
            abs
        };
        Ok(Self {
            width,
            height,
            values,
            max_raw,
        })
    }

    pub fn normalized(&self) -> Self {
        let mut out =
            Self::from_gradient(self.width, self.height, &self.values).expect("consistent shape");
        out.max_raw = self.max_raw;
        out
    }

    /// Top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "saliency: cannot crop {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let values = (0..height)
            .flat_map(|y| {
                self.values[y * self.width..y * self.width + width]
                    .iter()
                    .copied()
            })
            .collect();
        Ok(Self {
            width,
            height,
            values,
            max_raw: self.max_raw,
        })
    }
}

/// Signed gradient of the chosen target with respect to every pixel of a `[1,1,H,W]`
/// counter input, computed in eval mode.
pub fn input_gradient<T: Scalar>(
    model: &mut CountModel<T>,
    mask: &Tensor<T>,
    target: SaliencyTarget,
    truth: Option<f64>,
) -> Result<Vec<f64>> {
    let shape = mask.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::invalid(format!(
            "saliency: expected one [1,1,H,W] mask, got {shape:?}"
        )));
    }
    if target == SaliencyTarget::Loss && truth.is_none() {
        return Err(Error::invalid(
            "saliency: the loss target needs a ground-truth count",
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(shape, mask.data().to_vec(), true)?;
    let out = model.forward(&mut tape, x, Mode::Eval);
    let result = out.and_then(|vars| {
        let scalar = match (target, truth) {
            (SaliencyTarget::Loss, Some(t)) => {
                let t = tape.constant(&Tensor::full(&[1, 1], T::lit(t)));
                aleatoric_loss(
                    &mut tape,
                    vars.count,
                    t,
                    vars.logvar,
                    model.config.squared_residual,
                )?
            }
            _ => tape.sum(vars.count),
        };
        tape.backward(scalar)
    });
    model.params.unbind();
    result?;
    Ok(tape
        .grad(x)
        .map(|g| g.iter().map(|v| v.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; mask.numel()]))
}

/// Normalized absolute input gradient of the counter.
pub fn saliency<T: Scalar>(
    model: &mut CountModel<T>,
    mask: &Tensor<T>,
    target: SaliencyTarget,
    truth: Option<f64>,
) -> Result<SaliencyMap> {
    let grad = input_gradient(model, mask, target, truth)?;
    let s = mask.shape();
    SaliencyMap::from_gradient(s[3], s[2], &grad)
}

/// A single-channel float plane, typically one item of a network output.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::invalid(format!(
                "plane {width}x{height} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Item `index` of a `[N,1,H,W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || index >= s[0] {
            return Err(Error::invalid(format!(
                "plane: cannot take item {index} of {s:?}"
            )));
        }
        let hw = s[2] * s[3];
        let values = t.data()[index * hw..(index + 1) * hw]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        Self::new(s[3], s[2], values)
    }

    fn resize_nearest(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                out.push(self.values[sy * self.width + x * self.width / width]);
            }
        }
        out
    }
}

fn to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Per-image min-max normalization of `sigma = exp(s/2)`; a constant plane maps to zero.
pub fn uncertainty_display(logvar: &Plane) -> Vec<f64> {
    let sigma: Vec<f64> = logvar.values.iter().map(|s| (s / 2.0).exp()).collect();
    let lo = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        sigma.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; sigma.len()]
    }
}

/// Writes `<prefix>_input.pgm`, `<prefix>_mask.pgm`, `<prefix>_uncert.pgm` and
/// `<prefix>_saliency.pgm`, all at the input image's size.
///
/// The mask and log-variance planes must share a shape. Lower-resolution planes are
/// scaled to the image with nearest-neighbour sampling. A saliency map larger than the
/// mask (a padded counter input) is first cropped to the mask's top-left window.
/// Returns the written paths in that order.
pub fn export_panels(
    image: &GrayImage,
    pred_mask: &Plane,
    logvar_mask: &Plane,
    saliency: &SaliencyMap,
    prefix: impl AsRef<Path>,
) -> Result<[PathBuf; 4]> {
    if (pred_mask.width, pred_mask.height) != (logvar_mask.width, logvar_mask.height) {
        return Err(Error::invalid(format!(
            "export_panels: mask is {}x{} but log-variance is {}x{}",
            pred_mask.width, pred_mask.height, logvar_mask.width, logvar_mask.height
        )));
    }
    let sal = if saliency.width > pred_mask.width || saliency.height > pred_mask.height {
        saliency.crop(
            pred_mask.width.min(saliency.width),
            pred_mask.height.min(saliency.height),
        )?
    } else {
        saliency.clone()
    };
    let (w, h) = (image.width, image.height);
    let uncert = Plane::new(
        pred_mask.width,
        pred_mask.height,
        uncertainty_display(logvar_mask),
    )?;
    let sal = Plane::new(sal.width, sal.height, sal.values)?;

    let prefix = prefix.as_ref().as_os_str().to_string_lossy().into_owned();
    let path = |suffix: &str| PathBuf::from(format!("{prefix}_{suffix}.pgm"));
    let panels = [
        (path("input"), image.clone()),
        (
            path("mask"),
            GrayImage::new(w, h, to_bytes(pred_mask.resize_nearest(w, h).into_iter()))?,
        ),
        (
            path("uncert"),
            GrayImage::new(w, h, to_bytes(uncert.resize_nearest(w, h).into_iter()))?,
        ),
        (
            path("saliency"),
            GrayImage::new(w, h, to_bytes(sal.resize_nearest(w, h).into_iter()))?,
        ),
    ];
    for (p, img) in &panels {
        write_pgm(img, p)?;
    }
    Ok(panels.map(|(p, _)| p))
}
