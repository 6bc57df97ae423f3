//! The stages behind each subcommand, callable without going through argument parsing.

use std::path::{Path, PathBuf};

use crate::cli::config::Settings;
use crate::error::{Error, Result};
use crate::interpret::{export_panels, saliency, Plane, SaliencyMap, SaliencyTarget};
use crate::models::{ci95, ConfidenceInterval, CountConfig, CountModel, FpnModel};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::optim::{
    metrics, predict_counts, split_dataset, stack, train_counter, train_fpn, CountSample,
    FpnSample, Metrics, TrainOptions, TrainReport,
};
use crate::simdata::{generate_dataset, read_manifest, read_pgm, GrayImage, Manifest};
use crate::Tensor;

/// Element type used for training and inference from the command line.
pub type F = f32;

const COUNTER_SEED_SALT: u64 = 0xc0_u64 << 56 | 0x4e7;
const VAL_SPLIT_SALT: u64 = 0x7a1;

/// `[1,1,H,W]` tensor with pixel values scaled to [0, 1].
pub fn image_tensor(img: &GrayImage) -> Tensor<F> {
    let data = img.pixels.iter().map(|&p| p as F / 255.0).collect();
    Tensor::new(&[1, 1, img.height, img.width], data).expect("image dims are positive")
}

/// A ground-truth mask averaged over 2x2 blocks, matching the finest FPN output.
pub fn mask_target(mask: &GrayImage) -> Result<Tensor<F>> {
    if mask.width % 2 != 0 || mask.height % 2 != 0 {
        return Err(Error::invalid(format!(
            "mask {}x{} must have even sides",
            mask.width, mask.height
        )));
    }
    let (w, h) = (mask.width / 2, mask.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dy, dx)| mask.get(2 * x + dx, 2 * y + dy) as u32)
                .sum();
            data.push(s as F / (4.0 * 255.0));
        }
    }
    Tensor::new(&[1, 1, h, w], data)
}

/// Counter input size for images of `height x width`: the half-resolution mask
/// rounded up to the counter's divisor.
pub fn counter_hw(height: usize, width: usize, divisor: usize) -> (usize, usize) {
    let up = |v: usize| v.div_ceil(divisor) * divisor;
    (up(height / 2), up(width / 2))
}

/// Clamps a predicted mask to [0, 1] and zero-pads it at the bottom and right.
pub fn counter_input(mask: &Plane, hw: (usize, usize)) -> Result<Tensor<F>> {
    let (h, w) = hw;
    if mask.height > h || mask.width > w {
        return Err(Error::invalid(format!(
            "mask {}x{} does not fit the {h}x{w} counter input",
            mask.height, mask.width
        )));
    }
    let mut data = vec![0.0; h * w];
    for y in 0..mask.height {
        for x in 0..mask.width {
            data[y * w + x] = mask.values[y * mask.width + x].clamp(0.0, 1.0) as F;
        }
    }
    Tensor::new(&[1, 1, h, w], data)
}

pub fn counter_config(s: &Settings, image_hw: (usize, usize)) -> CountConfig {
    let mut c = s.count.clone();
    c.input_hw = counter_hw(image_hw.0, image_hw.1, c.divisor());
    c
}

pub fn load_fpn(s: &Settings) -> Result<FpnModel<F>> {
    let mut model = FpnModel::new(s.fpn.clone(), s.seed)?;
    load_checkpoint::<F>(&s.fpn_stage.checkpoint)?.restore(&mut model.params)?;
    Ok(model)
}

pub fn load_counter(s: &Settings, image_hw: (usize, usize)) -> Result<CountModel<F>> {
    let mut model = CountModel::new(counter_config(s, image_hw), s.seed ^ COUNTER_SEED_SALT)?;
    load_checkpoint::<F>(&s.count_stage.checkpoint)?.restore(&mut model.params)?;
    Ok(model)
}

/// The manifest with its train/test split and a validation subset of the train ids.
#[derive(Clone, Debug)]
pub struct Split {
    pub manifest: Manifest,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn load_split(s: &Settings) -> Result<Split> {
    let manifest = read_manifest(s.data_dir.join("manifest.csv"))?;
    if manifest.entries.is_empty() {
        return Err(Error::invalid("manifest has no rows"));
    }
    let ids: Vec<usize> = (0..manifest.entries.len()).collect();
    let (train_all, test) = split_dataset(&ids, s.train_fraction, s.seed);
    let (train, val) = split_dataset(&train_all, 1.0 - s.val_fraction, s.seed ^ VAL_SPLIT_SALT);
    Ok(Split {
        manifest,
        train,
        val,
        test,
    })
}

fn read_image(manifest: &Manifest, i: usize) -> Result<GrayImage> {
    read_pgm(manifest.image_path(i))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_generate(s: &Settings) -> Result<Manifest> {
    generate_dataset(&s.gen, s.n, &s.data_dir, s.mask_fraction)
}

fn fpn_samples(manifest: &Manifest, ids: &[usize]) -> Result<Vec<FpnSample<F>>> {
    ids.iter()
        .filter(|&&i| manifest.entries[i].mask_filename.is_some())
        .map(|&i| {
            let image = image_tensor(&read_image(manifest, i)?);
            let path = manifest.mask_path(i).expect("filtered on mask presence");
            let target = mask_target(&read_pgm(path)?)?;
            Ok(FpnSample { image, target })
        })
        .collect()
}

/// Trains the segmenter on the masked training images and writes its checkpoint and
/// `fpn_report.csv`.
pub fn cmd_train_fpn(s: &Settings) -> Result<TrainReport> {
    let split = load_split(s)?;
    let train = fpn_samples(&split.manifest, &split.train)?;
    let val = fpn_samples(&split.manifest, &split.val)?;
    if train.is_empty() {
        return Err(Error::invalid("train-fpn: no training image has a mask"));
    }
    let mut model = FpnModel::new(s.fpn.clone(), s.seed)?;
    let mut opts = TrainOptions::new(
        s.fpn_stage.epochs,
        s.fpn_stage.lr,
        s.fpn_stage.batch_size,
        s.seed,
    );
    opts.verbose = true;
    ensure_parent(&s.fpn_stage.checkpoint)?;
    opts.checkpoint = Some(s.fpn_stage.checkpoint.clone());
    let report = train_fpn(&mut model, &train, &val, &opts)?;
    if s.fpn_stage.epochs == 0 {
        save_checkpoint(&model.params, None, &s.fpn_stage.checkpoint)?;
    }
    ensure_dir(&s.out_dir)?;
    report.write_csv(s.out_dir.join("fpn_report.csv"))?;
    Ok(report)
}

/// Finest predicted mask and log-variance for each image.
pub fn segment(
    fpn: &mut FpnModel<F>,
    images: &[Tensor<F>],
    batch: usize,
) -> Result<Vec<(Plane, Plane)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().collect::<Vec<_>>())?;
        let pred = fpn.predict(&x)?;
        for i in 0..chunk.len() {
            out.push((
                Plane::from_tensor(&pred.masks[0], i)?,
                Plane::from_tensor(&pred.logvars[0], i)?,
            ));
        }
    }
    Ok(out)
}

fn count_samples(
    fpn: &mut FpnModel<F>,
    manifest: &Manifest,
    ids: &[usize],
    hw: (usize, usize),
    batch: usize,
) -> Result<Vec<CountSample<F>>> {
    let images = ids
        .iter()
        .map(|&i| Ok(image_tensor(&read_image(manifest, i)?)))
        .collect::<Result<Vec<_>>>()?;
    segment(fpn, &images, batch)?
        .iter()
        .zip(ids)
        .map(|((mask, _), &i)| {
            Ok(CountSample {
                mask: counter_input(mask, hw)?,
                count: manifest.entries[i].count as f64,
            })
        })
        .collect()
}

fn dataset_hw(manifest: &Manifest) -> Result<(usize, usize)> {
    let img = read_image(manifest, 0)?;
    Ok((img.height, img.width))
}

/// Segments every training image with the frozen FPN, then trains the counter on
/// those masks. Writes the counter checkpoint and `count_report.csv`.
pub fn cmd_train_count(s: &Settings) -> Result<TrainReport> {
    let split = load_split(s)?;
    let mut fpn = load_fpn(s)?;
    let config = counter_config(s, dataset_hw(&split.manifest)?);
    let hw = config.input_hw;
    let train = count_samples(
        &mut fpn,
        &split.manifest,
        &split.train,
        hw,
        s.fpn_stage.batch_size,
    )?;
    let val = count_samples(
        &mut fpn,
        &split.manifest,
        &split.val,
        hw,
        s.fpn_stage.batch_size,
    )?;
    let mut model = CountModel::new(config, s.seed ^ COUNTER_SEED_SALT)?;
    let mut opts = TrainOptions::new(
        s.count_stage.epochs,
        s.count_stage.lr,
        s.count_stage.batch_size,
        s.seed,
    );
    opts.verbose = true;
    ensure_parent(&s.count_stage.checkpoint)?;
    opts.checkpoint = Some(s.count_stage.checkpoint.clone());
    opts.flip_augment = s.count_flip_augment;
    let report = train_counter(&mut model, &train, &val, &opts)?;
    if s.count_stage.epochs == 0 {
        save_checkpoint(&model.params, None, &s.count_stage.checkpoint)?;
    }
    ensure_dir(&s.out_dir)?;
    report.write_csv(s.out_dir.join("count_report.csv"))?;
    Ok(report)
}

/// Everything the full pipeline produces for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub interval: ConfidenceInterval,
    pub logvar: f64,
    pub mask: Plane,
    pub mask_logvar: Plane,
    /// The padded `[1,1,h,w]` counter input.
    pub counter_input: Tensor<F>,
}

impl Prediction {
    pub fn result_line(&self) -> String {
        format!(
            "count={:.2} ci95={:.2} lo={:.2} hi={:.2} logvar={:.4}",
            self.interval.count,
            self.interval.halfwidth,
            self.interval.lo,
            self.interval.hi,
            self.logvar
        )
    }
}

pub fn predict_image(
    fpn: &mut FpnModel<F>,
    counter: &mut CountModel<F>,
    image: &GrayImage,
) -> Result<Prediction> {
    let (mask, mask_logvar) = segment(fpn, &[image_tensor(image)], 1)?.remove(0);
    let input = counter_input(&mask, counter.config.input_hw)?;
    let out = counter.predict(&input)?;
    Ok(Prediction {
        interval: ci95(out.count[0], out.logvar[0]),
        logvar: out.logvar[0],
        mask,
        mask_logvar,
        counter_input: input,
    })
}

fn panel_prefix(out_dir: &Path, image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    out_dir.join(stem)
}

/// Runs the whole pipeline on one image. With `predict.panels` the four panels are
/// written under `out.dir`.
pub fn cmd_predict(s: &Settings, image_path: &Path) -> Result<Prediction> {
    let image = read_pgm(image_path)?;
    let mut fpn = load_fpn(s)?;
    let mut counter = load_counter(s, (image.height, image.width))?;
    let pred = predict_image(&mut fpn, &mut counter, &image)?;
    if s.predict_panels {
        let sal = saliency(&mut counter, &pred.counter_input, s.saliency_target, None)?;
        ensure_dir(&s.out_dir)?;
        export_panels(
            &image,
            &pred.mask,
            &pred.mask_logvar,
            &sal,
            panel_prefix(&s.out_dir, image_path),
        )?;
    }
    Ok(pred)
}

/// Panels for one image, with saliency against `target`.
pub fn cmd_saliency(
    s: &Settings,
    image_path: &Path,
    truth: Option<f64>,
) -> Result<(Prediction, SaliencyMap, [PathBuf; 4])> {
    let image = read_pgm(image_path)?;
    let mut fpn = load_fpn(s)?;
    let mut counter = load_counter(s, (image.height, image.width))?;
    let pred = predict_image(&mut fpn, &mut counter, &image)?;
    let sal = saliency(&mut counter, &pred.counter_input, s.saliency_target, truth)?;
    ensure_dir(&s.out_dir)?;
    let paths = export_panels(
        &image,
        &pred.mask,
        &pred.mask_logvar,
        &sal,
        panel_prefix(&s.out_dir, image_path),
    )?;
    Ok((pred, sal, paths))
}

/// A test sample whose true count falls outside its predicted interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub filename: String,
    pub truth: f64,
    pub interval: ConfidenceInterval,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub failures: Vec<Failure>,
}

fn failures_csv(failures: &[Failure]) -> String {
    let mut s = String::from("filename,truth,count,lo,hi\n");
    for f in failures {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            f.filename, f.truth, f.interval.count, f.interval.lo, f.interval.hi
        ));
    }
    s
}

/// Scores the test split. Writes `metrics.csv`, `failures.csv`, and panels with
/// loss saliency for every failure under `out.dir/failures`.
pub fn cmd_evaluate(s: &Settings) -> Result<Evaluation> {
    let split = load_split(s)?;
    if split.test.len() < 2 {
        return Err(Error::invalid(format!(
            "evaluate: the test split has {} samples, need at least 2",
            split.test.len()
        )));
    }
    let image_hw = dataset_hw(&split.manifest)?;
    let mut fpn = load_fpn(s)?;
    let mut counter = load_counter(s, image_hw)?;
    let hw = counter.config.input_hw;
    let samples = count_samples(
        &mut fpn,
        &split.manifest,
        &split.test,
        hw,
        s.fpn_stage.batch_size,
    )?;
    let (preds, logvars) = predict_counts(&mut counter, &samples, s.count_stage.batch_size)?;
    let truths: Vec<f64> = samples.iter().map(|x| x.count).collect();
    let m = metrics(&preds, &logvars, &truths)?;

    let failures: Vec<(usize, Failure)> = split
        .test
        .iter()
        .enumerate()
        .filter_map(|(k, &i)| {
            let interval = ci95(preds[k], logvars[k]);
            (!interval.contains(truths[k])).then(|| {
                (
                    i,
                    Failure {
                        filename: split.manifest.entries[i].filename.clone(),
                        truth: truths[k],
                        interval,
                    },
                )
            })
        })
        .collect();

    ensure_dir(&s.out_dir)?;
    m.write_csv(s.out_dir.join("metrics.csv"))?;
    let fpath = s.out_dir.join("failures.csv");
    std::fs::write(
        &fpath,
        failures_csv(&failures.iter().map(|f| f.1.clone()).collect::<Vec<_>>()),
    )
    .map_err(|e| Error::io(&fpath, e))?;

    let panel_dir = s.out_dir.join("failures");
    ensure_dir(&panel_dir)?;
    for (i, f) in &failures {
        let image = read_image(&split.manifest, *i)?;
        let pred = predict_image(&mut fpn, &mut counter, &image)?;
        let sal = saliency(
            &mut counter,
            &pred.counter_input,
            SaliencyTarget::Loss,
            Some(f.truth),
        )?;
        let prefix = panel_prefix(&panel_dir, Path::new(&f.filename));
        export_panels(&image, &pred.mask, &pred.mask_logvar, &sal, prefix)?;
    }
    Ok(Evaluation {
        metrics: m,
        failures: failures.into_iter().map(|f| f.1).collect(),
    })
}
