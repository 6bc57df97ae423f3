use cellcount::interpret::*;
use cellcount::models::{CountConfig, CountModel};
use cellcount::optim::{train_counter, CountSample, TrainOptions};
use cellcount::rng::SplitMix64;
use cellcount::simdata::{read_pgm, GrayImage};
use cellcount::{Mode, Tape, Tensor};

fn tiny_counter() -> CountConfig {
    CountConfig {
        conv_filters: vec![2, 3, 3, 3, 3, 3, 3, 3],
        fc_dims: vec![6, 4, 1],
        input_hw: (32, 32),
        output_scale: 4.0,
        ..CountConfig::default()
    }
}

// Blobs over a faintly noisy background, so no two pooled activations tie exactly.
fn blobs(rng: &mut SplitMix64, count: usize) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..32 * 32).map(|_| 0.05 * rng.uniform()).collect();
    for _ in 0..count {
        let (y, x) = (rng.below(29), rng.below(29));
        for dy in 0..3 {
            for dx in 0..3 {
                data[(y + dy) * 32 + x + dx] = 0.6 + 0.4 * rng.uniform();
            }
        }
    }
    Tensor::new(&[1, 1, 32, 32], data).unwrap()
}

fn trained_counter(seed: u64) -> CountModel<f64> {
    let mut rng = SplitMix64::new(seed);
    let samples: Vec<CountSample<f64>> = (0..10)
        .map(|i| CountSample {
            mask: blobs(&mut rng, 1 + i % 4),
            count: (1 + i % 4) as f64,
        })
        .collect();
    let mut m = CountModel::<f64>::new(tiny_counter(), seed).unwrap();
    train_counter(&mut m, &samples, &[], &TrainOptions::new(5, 1e-3, 5, seed)).unwrap();
    m
}

fn prediction(m: &mut CountModel<f64>, x: &Tensor<f64>) -> f64 {
    m.predict(x).unwrap().count[0]
}

fn loss(m: &mut CountModel<f64>, x: &Tensor<f64>, truth: f64) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = m.forward(&mut tape, xv, Mode::Eval).unwrap();
    m.params.unbind();
    let t = tape.constant(&Tensor::full(&[1, 1], truth));
    let l = cellcount::models::aleatoric_loss(&mut tape, out.count, t, out.logvar, false).unwrap();
    tape.value(l)[0]
}

/// Relative error of the raw input gradient against central differences at `n` pixels
/// with a non-zero gradient.
fn pixel_fd_error(
    m: &mut CountModel<f64>,
    x: &Tensor<f64>,
    grad: &[f64],
    rng: &mut SplitMix64,
    n: usize,
    mut f: impl FnMut(&mut CountModel<f64>, &Tensor<f64>) -> f64,
) -> f64 {
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-7).collect();
    assert!(live.len() >= n, "only {} pixels carry gradient", live.len());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let i = live[rng.below(live.len())];
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(m, &plus) - f(m, &minus)) / (2.0 * h);
        assert_eq!(numeric.signum(), grad[i].signum(), "pixel {i}");
        worst = worst.max((grad[i] - numeric).abs() / numeric.abs());
    }
    worst
}

#[test]
fn prediction_gradient_matches_pixel_perturbation() {
    let mut checked = 0;
    for seed in 0..3 {
        let mut m = trained_counter(seed);
        let mut rng = SplitMix64::new(100 + seed);
        let x = blobs(&mut rng, 3);
        let grad = input_gradient(&mut m, &x, SaliencyTarget::Prediction, None).unwrap();
        if grad.iter().all(|g| *g == 0.0) {
            // dead count head: the prediction is flat here
            assert_eq!(prediction(&mut m, &x), 0.0);
            continue;
        }
        let err = pixel_fd_error(&mut m, &x, &grad, &mut rng, 5, prediction);
        assert!(err < 1e-4, "seed {seed}: {err}");
        checked += 1;
    }
    assert!(checked >= 2);
}

#[test]
fn loss_gradient_matches_pixel_perturbation() {
    let mut m = trained_counter(7);
    let mut rng = SplitMix64::new(70);
    let x = blobs(&mut rng, 2);
    let grad = input_gradient(&mut m, &x, SaliencyTarget::Loss, Some(2.0)).unwrap();
    let err = pixel_fd_error(&mut m, &x, &grad, &mut rng, 5, |m, x| loss(m, x, 2.0));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn zero_model_gives_zero_map() {
    let mut m = CountModel::<f64>::new(tiny_counter(), 1).unwrap();
    for (_, p) in m.params.iter_mut() {
        p.tensor.data_mut().fill(0.0);
    }
    let mut rng = SplitMix64::new(2);
    let x = blobs(&mut rng, 4);
    let map = saliency(&mut m, &x, SaliencyTarget::Prediction, None).unwrap();
    assert_eq!((map.width, map.height), (32, 32));
    assert_eq!(map.max_raw, 0.0);
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn map_matches_input_shape_and_range() {
    let mut m = trained_counter(3);
    let x = blobs(&mut SplitMix64::new(5), 3);
    let map = saliency(&mut m, &x, SaliencyTarget::Loss, Some(3.0)).unwrap();
    assert_eq!(map.values.len(), 32 * 32);
    assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    if map.max_raw > 0.0 {
        assert!(map.values.iter().any(|&v| v == 1.0));
    }
    assert_eq!(map.normalized(), map);
}

#[test]
fn ranking_survives_output_scaling() {
    let base = trained_counter(4);
    let mut scaled = base.clone();
    scaled.config.output_scale *= 3.5;
    let mut base = base;
    let x = blobs(&mut SplitMix64::new(8), 3);
    let a = saliency(&mut base, &x, SaliencyTarget::Prediction, None).unwrap();
    let b = saliency(&mut scaled, &x, SaliencyTarget::Prediction, None).unwrap();
    let rank = |m: &SaliencyMap| {
        let mut idx: Vec<usize> = (0..m.values.len()).collect();
        idx.sort_by(|&i, &j| m.values[j].total_cmp(&m.values[i]).then(i.cmp(&j)));
        idx.truncate(20);
        idx
    };
    assert_eq!(rank(&a), rank(&b));
    for (u, v) in a.values.iter().zip(&b.values) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn loss_target_requires_truth() {
    let mut m = trained_counter(1);
    let x = blobs(&mut SplitMix64::new(1), 1);
    let err = saliency(&mut m, &x, SaliencyTarget::Loss, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn panels_are_written_clamped_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let image = GrayImage::new(4, 4, (0..16).map(|i| i * 10).collect()).unwrap();
    let mask = Plane::new(2, 2, vec![-0.5, 0.25, 1.0, 2.0]).unwrap();
    let logvar = Plane::new(2, 2, vec![0.3; 4]).unwrap();
    let sal =
        SaliencyMap::from_gradient(3, 3, &[1.0, -2.0, 5.0, 4.0, 0.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
    let prefix = dir.path().join("a");
    let paths = export_panels(&image, &mask, &logvar, &sal, &prefix).unwrap();
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "a_input.pgm",
            "a_mask.pgm",
            "a_uncert.pgm",
            "a_saliency.pgm"
        ]
    );

    assert_eq!(read_pgm(&paths[0]).unwrap(), image);
    let m = read_pgm(&paths[1]).unwrap();
    assert_eq!(
        m.pixels,
        vec![0, 0, 64, 64, 0, 0, 64, 64, 255, 255, 255, 255, 255, 255, 255, 255]
    );
    assert!(read_pgm(&paths[2]).unwrap().pixels.iter().all(|&p| p == 0));
    // cropped to the 2x2 mask window: |1|, |-2|, |4|, |0| over max 9
    let s = read_pgm(&paths[3]).unwrap();
    let want = |v: f64| (v / 9.0 * 255.0).round() as u8;
    assert_eq!(s.pixels[0], want(1.0));
    assert_eq!(s.pixels[2], want(2.0));
    assert_eq!(s.pixels[8], want(4.0));
    assert_eq!(s.pixels[10], 0);

    let again = export_panels(&image, &mask, &logvar, &sal, dir.path().join("b")).unwrap();
    for (p, q) in paths.iter().zip(&again) {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
    }
}

#[test]
fn uncertainty_panel_spans_full_range() {
    let p = Plane::new(3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
    let d = uncertainty_display(&p);
    assert_eq!(d[0], 0.0);
    assert_eq!(d[2], 1.0);
    assert!(d[1] > 0.0 && d[1] < 1.0);
}
