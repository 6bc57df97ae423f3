use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use super::{write_manifest, write_pgm, GrayImage, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Canvas the cells are drawn on.
    pub render_width: usize,
    pub render_height: usize,
    /// Size after area-averaging downscale.
    pub out_width: usize,
    pub out_height: usize,
    pub count_min: u32,
    pub count_max: u32,
    pub cluster_prob: f64,
    /// Cluster radius as a multiple of the mean cell radius.
    pub cluster_radius_factor: f64,
    /// Mean cell area in render pixels squared.
    pub mean_area: f64,
    /// Relative standard deviation of the cell area.
    pub area_jitter: f64,
    pub ecc_min: f64,
    pub ecc_max: f64,
    /// Candidate focal-blur sigmas in render pixels; one is drawn per image.
    pub blur_sigmas: Vec<f64>,
    /// Additive Gaussian noise std on the [0, 1] intensity scale.
    pub noise_std: f64,
    pub background: f64,
    pub cell_intensity: f64,
    pub intensity_jitter: f64,
    /// Redraw placements until cells neither touch each other nor the border.
    pub reject_overlap: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            render_width: 696,
            render_height: 520,
            out_width: 256,
            out_height: 192,
            count_min: 1,
            count_max: 100,
            cluster_prob: 0.25,
            cluster_radius_factor: 2.0,
            mean_area: 450.0,
            area_jitter: 0.2,
            ecc_min: 0.0,
            ecc_max: 0.8,
            blur_sigmas: vec![1.0, 4.0, 7.0, 10.0],
            noise_std: 0.02,
            background: 0.05,
            cell_intensity: 0.6,
            intensity_jitter: 0.15,
            reject_overlap: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Small configuration for CPU-only experiments: 256x192 canvas, 128x96 output,
    /// 1 to 40 cells, blur scaled to the smaller canvas.
    pub fn desk() -> Self {
        Self {
            render_width: 256,
            render_height: 192,
            out_width: 128,
            out_height: 96,
            count_max: 40,
            mean_area: 120.0,
            blur_sigmas: vec![0.5, 1.5, 2.5, 3.5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.count_min && self.count_min <= self.count_max && self.count_max <= 100) {
            return Err(Error::invalid(format!(
                "gen: count range [{}, {}] must lie within [1, 100]",
                self.count_min, self.count_max
            )));
        }
        for (name, p) in [
            ("cluster_prob", self.cluster_prob),
            ("ecc_min", self.ecc_min),
            ("ecc_max", self.ecc_max),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("gen: {name} must lie in [0, 1]")));
            }
        }
        if self.ecc_min > self.ecc_max || self.ecc_max >= 1.0 {
            return Err(Error::invalid("gen: need ecc_min <= ecc_max < 1"));
        }
        if self.render_width == 0
            || self.render_height == 0
            || self.out_width == 0
            || self.out_height == 0
            || self.out_width > self.render_width
            || self.out_height > self.render_height
        {
            return Err(Error::invalid(
                "gen: output must be non-empty and no larger than the canvas",
            ));
        }
        if self.mean_area <= 0.0
            || self.blur_sigmas.is_empty()
            || self.blur_sigmas.iter().any(|&s| s < 0.0)
        {
            return Err(Error::invalid(
                "gen: need positive mean_area and non-negative blur sigmas",
            ));
        }
        if self.noise_std < 0.0 || self.area_jitter < 0.0 || self.intensity_jitter < 0.0 {
            return Err(Error::invalid("gen: noise and jitter must be non-negative"));
        }
        Ok(())
    }

    pub fn mean_radius(&self) -> f64 {
        (self.mean_area / PI).sqrt()
    }

    fn scale(&self) -> (f64, f64) {
        (
            self.render_width as f64 / self.out_width as f64,
            self.render_height as f64 / self.out_height as f64,
        )
    }
}

/// A drawn cell, in canvas coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPlacement {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl CellPlacement {
    pub fn area(&self) -> f64 {
        PI * self.semi_major * self.semi_minor
    }

    fn contains(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_major;
        let v = (-dx * s + dy * c) / self.semi_minor;
        let r2 = u * u + v * v;
        (r2 <= 1.0).then_some(r2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    pub blur_sigma: f64,
    pub cells: Vec<CellPlacement>,
    /// Canvas pixels per output pixel along x and y.
    pub scale: (f64, f64),
}

impl SampleMeta {
    /// Cell centres in output pixel coordinates.
    pub fn output_centers(&self) -> Vec<(f64, f64)> {
        self.cells
            .iter()
            .map(|c| (c.cx / self.scale.0, c.cy / self.scale.1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: GrayImage,
    /// 0 or 255.
    pub mask: GrayImage,
    /// Number of cells placed, regardless of overlap.
    pub count: u32,
    pub meta: SampleMeta,
}

fn draw_cell(cfg: &GenConfig, rng: &mut SplitMix64, placed: &[CellPlacement]) -> CellPlacement {
    let (w, h) = (cfg.render_width as f64, cfg.render_height as f64);
    let area = (cfg.mean_area * (1.0 + cfg.area_jitter * rng.normal())).max(0.1 * cfg.mean_area);
    let ecc = rng.uniform_range(cfg.ecc_min, cfg.ecc_max);
    let ratio = (1.0 - ecc * ecc).sqrt();
    let semi_major = (area / (PI * ratio)).sqrt();
    let semi_minor = semi_major * ratio;
    let angle = rng.uniform() * PI;
    let (cx, cy) = if !placed.is_empty() && rng.bernoulli(cfg.cluster_prob) {
        let anchor = &placed[rng.below(placed.len())];
        let radius = cfg.cluster_radius_factor * cfg.mean_radius() * rng.uniform().sqrt();
        let theta = 2.0 * PI * rng.uniform();
        (
            (anchor.cx + radius * theta.cos()).clamp(0.0, w - 1e-9),
            (anchor.cy + radius * theta.sin()).clamp(0.0, h - 1e-9),
        )
    } else {
        (rng.uniform() * w, rng.uniform() * h)
    };
    let intensity = cfg.cell_intensity * (1.0 + cfg.intensity_jitter * rng.normal()).max(0.2);
    CellPlacement {
        cx,
        cy,
        semi_major,
        semi_minor,
        angle,
        intensity,
    }
}

fn isolated(cfg: &GenConfig, c: &CellPlacement, placed: &[CellPlacement]) -> bool {
    const MARGIN: f64 = 3.0;
    let (w, h) = (cfg.render_width as f64, cfg.render_height as f64);
    let r = c.semi_major + MARGIN;
    if c.cx < r || c.cy < r || c.cx > w - r || c.cy > h - r {
        return false;
    }
    placed.iter().all(|p| {
        let d = ((p.cx - c.cx).powi(2) + (p.cy - c.cy).powi(2)).sqrt();
        // separation must survive the mask's max-pool downscale
        d > p.semi_major + c.semi_major + MARGIN + 2.0 * cfg.scale().0.max(cfg.scale().1)
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

// Separable blur, kernel truncated at 3 sigma, edges clamped.
fn blur(buf: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return buf.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * buf[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

// For each output cell along one axis: (input index, overlap weight / footprint).
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let s = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * s, (o + 1) as f64 * s);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / s))
                })
                .collect()
        })
        .collect()
}

fn downscale_area(src: &[u8], w: usize, h: usize, ow: usize, oh: usize) -> Vec<u8> {
    let wx = area_weights(w, ow);
    let wy = area_weights(h, oh);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            rows[y * ow + ox] = taps
                .iter()
                .map(|&(x, wgt)| wgt * src[y * w + x] as f64)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(ow * oh);
    for taps in &wy {
        for ox in 0..ow {
            let v: f64 = taps.iter().map(|&(y, wgt)| wgt * rows[y * ow + ox]).sum();
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

// Foreground iff at least half of the output footprint is covered.
fn downscale_coverage(src: &[u8], w: usize, h: usize, ow: usize, oh: usize) -> Vec<u8> {
    downscale_area(src, w, h, ow, oh)
        .into_iter()
        .map(|v| if v >= 128 { 255 } else { 0 })
        .collect()
}

/// Rasterizes `cells` into an (image, mask) pair at output resolution. Noise is drawn
/// from `rng`.
pub fn render_cells(
    cfg: &GenConfig,
    cells: &[CellPlacement],
    blur_sigma: f64,
    rng: &mut SplitMix64,
) -> Result<(GrayImage, GrayImage)> {
    let (w, h) = (cfg.render_width, cfg.render_height);
    let mut canvas = vec![cfg.background; w * h];
    let mut mask = vec![0u8; w * h];
    for cell in cells {
        let r = cell.semi_major.ceil() as isize + 1;
        let (x0, x1) = (
            (cell.cx as isize - r).max(0),
            (cell.cx as isize + r).min(w as isize - 1),
        );
        let (y0, y1) = (
            (cell.cy as isize - r).max(0),
            (cell.cy as isize + r).min(h as isize - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (xu, yu) = (x as usize, y as usize);
                if let Some(r2) = cell.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let v = cfg.background + cell.intensity * (1.0 - 0.4 * r2);
                    let px = &mut canvas[yu * w + xu];
                    *px = px.max(v);
                    mask[yu * w + xu] = 255;
                }
            }
        }
    }

    let blurred = blur(&canvas, w, h, blur_sigma);
    let quantized: Vec<u8> = blurred
        .iter()
        .map(|&v| {
            let noisy = v + cfg.noise_std * rng.normal();
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();

    let (ow, oh) = (cfg.out_width, cfg.out_height);
    let image = GrayImage::new(ow, oh, downscale_area(&quantized, w, h, ow, oh))?;
    let mask = GrayImage::new(ow, oh, downscale_coverage(&mask, w, h, ow, oh))?;
    Ok((image, mask))
}

/// Renders sample `index` of the dataset described by `cfg`. Every sample has its own
/// random stream, so samples can be generated in any order.
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut rng = SplitMix64::stream(cfg.seed, index);
    let count = rng.int_inclusive(cfg.count_min as u64, cfg.count_max as u64) as u32;
    let blur_sigma = cfg.blur_sigmas[rng.below(cfg.blur_sigmas.len())];

    let mut cells: Vec<CellPlacement> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut cell = draw_cell(cfg, &mut rng, &cells);
        if cfg.reject_overlap {
            for _ in 0..10_000 {
                if isolated(cfg, &cell, &cells) {
                    break;
                }
                cell = draw_cell(cfg, &mut rng, &cells);
            }
        }
        cells.push(cell);
    }

    let (image, mask) = render_cells(cfg, &cells, blur_sigma, &mut rng)?;
    Ok(SyntheticSample {
        image,
        mask,
        count,
        meta: SampleMeta {
            seed: cfg.seed,
            index,
            blur_sigma,
            cells,
            scale: cfg.scale(),
        },
    })
}

/// Writes `images/img_<i>.pgm` for every sample, `masks/img_<i>.pgm` for the first
/// `ceil(mask_fraction * n)`, and `manifest.csv`.
pub fn generate_dataset(
    cfg: &GenConfig,
    n: usize,
    out_dir: impl AsRef<Path>,
    mask_fraction: f64,
) -> Result<Manifest> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::invalid("gen: mask_fraction must lie in [0, 1]"));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n_masks = (mask_fraction * n as f64).ceil() as usize;
    let samples: Vec<SyntheticSample> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let filename = format!("images/img_{i}.pgm");
        write_pgm(&s.image, out_dir.join(&filename))?;
        let mask_filename = (i < n_masks).then(|| format!("masks/img_{i}.pgm"));
        if let Some(m) = &mask_filename {
            write_pgm(&s.mask, out_dir.join(m))?;
        }
        entries.push(ManifestEntry {
            filename,
            count: s.count,
            mask_filename,
        });
    }
    write_manifest(&entries, out_dir.join("manifest.csv"))?;
    Ok(Manifest {
        entries,
        root: out_dir.to_path_buf(),
    })
}
