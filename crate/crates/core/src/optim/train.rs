use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{metrics, AdamState, Metrics};
use crate::error::{Error, Result};
use crate::models::{aleatoric_loss, fpn_loss, CountModel, FpnModel};
use crate::nn::{save_checkpoint, OptimizerSnapshot, ParamRegistry};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor};

const SHUFFLE_STREAM: u64 = 0x5_4f1e;
const FLIP_STREAM: u64 = 0xf11b;

/// Image with its foreground target at the finest pyramid scale.
#[derive(Clone, Debug)]
pub struct FpnSample<T> {
    /// `[1, 1, H, W]`, intensities in [0, 1].
    pub image: Tensor<T>,
    /// `[1, 1, H/2, W/2]`, foreground fraction in [0, 1].
    pub target: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct CountSample<T> {
    /// `[1, 1, h, w]`.
    pub mask: Tensor<T>,
    pub count: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Print `epoch=.. loss=.. val=.. sec=..` per epoch.
    pub verbose: bool,
    /// Where the best-validation parameters (and optimizer state) are written.
    pub checkpoint: Option<PathBuf>,
    /// Random horizontal and vertical flips of counter inputs; counts are unchanged.
    pub flip_augment: bool,
}

impl TrainOptions {
    pub fn new(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            batch_size,
            seed,
            verbose: false,
            checkpoint: None,
            flip_augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} val={:.6} sec={:.3}",
            self.epoch, self.train_loss, self.val_metric, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    /// Count metrics on the validation set (counter only).
    pub final_metrics: Option<Metrics>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_metric,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.val_metric, e.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Concatenates `[1, ...]` tensors along the batch axis.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("stack: no tensors"))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(first.iter().product::<usize>() * items.len());
    let mut n = 0;
    for t in items {
        if t.shape()[1..] != first[1..] {
            return Err(Error::invalid(format!(
                "stack: shape {:?} does not match {:?}",
                t.shape(),
                first
            )));
        }
        n += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = first;
    shape[0] = n;
    Tensor::new(&shape, data)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::stream(seed ^ SHUFFLE_STREAM, epoch as u64).shuffle(&mut order);
    order
}

/// Mirrors the last two axes of an `[N, C, H, W]` tensor.
pub fn flip<T: Scalar>(t: &Tensor<T>, horizontal: bool, vertical: bool) -> Result<Tensor<T>> {
    let shape = t.shape();
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "flip: expected a 4-d tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in src.chunks(h * w) {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(shape, out)
}

// Keeps the parameters of the best epoch; ties go to the earlier epoch.
struct BestKeeper<T> {
    val: f64,
    epoch: usize,
    params: Option<ParamRegistry<T>>,
    optimizer: Option<OptimizerSnapshot<T>>,
}

impl<T: Scalar> BestKeeper<T> {
    fn new() -> Self {
        Self {
            val: f64::INFINITY,
            epoch: 0,
            params: None,
            optimizer: None,
        }
    }

    fn offer(&mut self, epoch: usize, val: f64, params: &ParamRegistry<T>, adam: &AdamState<T>) {
        if val < self.val || self.params.is_none() {
            self.val = val;
            self.epoch = epoch;
            self.params = Some(params.clone());
            self.optimizer = Some(adam.snapshot(params));
        }
    }

    fn finish(
        self,
        target: &mut ParamRegistry<T>,
        checkpoint: Option<&Path>,
    ) -> Result<(usize, f64)> {
        if let Some(best) = self.params {
            *target = best;
            target.zero_grad();
            if let Some(path) = checkpoint {
                save_checkpoint(target, self.optimizer, path)?;
            }
        }
        Ok((self.epoch, self.val))
    }
}

/// Eval-mode mean squared error of the finest mask against its target.
pub fn fpn_mask_mse<T: Scalar>(
    model: &mut FpnModel<T>,
    samples: &[FpnSample<T>],
    batch: usize,
) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let images = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let targets = stack(&chunk.iter().map(|s| &s.target).collect::<Vec<_>>())?;
        let out = model.predict(&images)?;
        for (p, t) in out.masks[0].data().iter().zip(targets.data()) {
            let d = p.as_f64() - t.as_f64();
            sse += d * d;
        }
        count += targets.numel();
    }
    Ok(sse / count.max(1) as f64)
}

/// Trains the segmenter on `fpn_loss` and keeps the parameters with the lowest
/// validation mask MSE (training-set MSE when `val` is empty).
pub fn train_fpn<T: Scalar>(
    model: &mut FpnModel<T>,
    train: &[FpnSample<T>],
    val: &[FpnSample<T>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::invalid("train_fpn: empty training set"));
    }
    let val = if val.is_empty() { train } else { val };
    let mut adam = AdamState::new(opts.lr);
    let mut best = BestKeeper::new();
    let mut report = TrainReport::default();
    let tv_weight = T::lit(model.config.tv_weight);
    let squared = model.config.squared_residual;
    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        let order = epoch_order(train.len(), opts.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(opts.batch_size.max(1)) {
            let images = stack(&idx.iter().map(|&i| &train[i].image).collect::<Vec<_>>())?;
            let targets = stack(&idx.iter().map(|&i| &train[i].target).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let x = tape.constant(&images);
            let y = tape.constant(&targets);
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let loss = fpn_loss(&mut tape, &out, y, tv_weight, squared)?;
            loss_sum += tape.value(loss)[0].as_f64();
            batches += 1;
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.collect_grads(&tape);
            adam.step(&mut model.params)?;
        }
        let val_mse = fpn_mask_mse(model, val, opts.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_metric: val_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            println!("{}", rec.log_line());
        }
        best.offer(epoch, val_mse, &model.params, &adam);
        report.epochs.push(rec);
    }
    let (best_epoch, best_val) = best.finish(&mut model.params, opts.checkpoint.as_deref())?;
    report.best_epoch = best_epoch;
    report.best_val = best_val;
    Ok(report)
}

/// Eval-mode predictions `(counts, logvars)` for a sample list.
pub fn predict_counts<T: Scalar>(
    model: &mut CountModel<T>,
    samples: &[CountSample<T>],
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut counts = Vec::with_capacity(samples.len());
    let mut logvars = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let masks = stack(&chunk.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
        let out = model.predict(&masks)?;
        counts.extend(out.count);
        logvars.extend(out.logvar);
    }
    Ok((counts, logvars))
}

fn count_metrics<T: Scalar>(
    model: &mut CountModel<T>,
    samples: &[CountSample<T>],
    batch: usize,
) -> Result<Metrics> {
    let (p, s) = predict_counts(model, samples, batch)?;
    let truths: Vec<f64> = samples.iter().map(|s| s.count).collect();
    if truths.len() < 2 {
        return Err(Error::invalid(
            "train_counter: need at least two evaluation samples",
        ));
    }
    metrics(&p, &s, &truths)
}

/// Trains the counter with the aleatoric loss on scalar counts, keeping the epoch with
/// the lowest validation count MSE, and reports held-out metrics for that epoch.
pub fn train_counter<T: Scalar>(
    model: &mut CountModel<T>,
    train: &[CountSample<T>],
    val: &[CountSample<T>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::invalid("train_counter: empty training set"));
    }
    let val = if val.len() < 2 { train } else { val };
    let mut adam = AdamState::new(opts.lr);
    let mut best = BestKeeper::new();
    let mut report = TrainReport::default();
    let squared = model.config.squared_residual;
    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        let order = epoch_order(train.len(), opts.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut flips = SplitMix64::stream(opts.seed ^ FLIP_STREAM, epoch as u64);
        for idx in order.chunks(opts.batch_size.max(1)) {
            let masks = if opts.flip_augment {
                let flipped = idx
                    .iter()
                    .map(|&i| {
                        let bits = flips.next_u64();
                        flip(&train[i].mask, bits & 1 == 1, bits & 2 == 2)
                    })
                    .collect::<Result<Vec<_>>>()?;
                stack(&flipped.iter().collect::<Vec<_>>())?
            } else {
                stack(&idx.iter().map(|&i| &train[i].mask).collect::<Vec<_>>())?
            };
            let counts: Vec<T> = idx.iter().map(|&i| T::lit(train[i].count)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&masks);
            let y = tape.leaf(&[idx.len(), 1], counts, false)?;
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let loss = aleatoric_loss(&mut tape, out.count, y, out.logvar, squared)?;
            loss_sum += tape.value(loss)[0].as_f64();
            batches += 1;
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.collect_grads(&tape);
            adam.step(&mut model.params)?;
        }
        let m = count_metrics(model, val, opts.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_metric: m.mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            println!("{}", rec.log_line());
        }
        best.offer(epoch, m.mse, &model.params, &adam);
        report.epochs.push(rec);
    }
    let (best_epoch, best_val) = best.finish(&mut model.params, opts.checkpoint.as_deref())?;
    report.best_epoch = best_epoch;
    report.best_val = best_val;
    report.final_metrics = Some(count_metrics(model, val, opts.batch_size)?);
    Ok(report)
}
