mod common;

use cellcount::models::*;
use cellcount::rng::SplitMix64;
use cellcount::{Mode, Tape, Tensor};
use common::*;
use proptest::prelude::*;

#[test]
fn fpn_scales_for_paper_image_size() {
    let cfg = FpnConfig {
        width_multiplier: 0.125,
        ..FpnConfig::default()
    };
    let mut m = FpnModel::<f32>::new(cfg, 0).unwrap();
    let out = m.predict(&Tensor::zeros(&[1, 1, 192, 256])).unwrap();
    let shapes: Vec<_> = out.masks.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![1, 1, 96, 128],
            vec![1, 1, 48, 64],
            vec![1, 1, 24, 32],
            vec![1, 1, 12, 16]
        ]
    );
    let lv: Vec<_> = out.logvars.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(lv, shapes);
}

#[test]
fn fpn_scales_for_small_square() {
    let mut m = FpnModel::<f64>::new(tiny_fpn_depth(4), 0).unwrap();
    let out = m.predict(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
    let sides: Vec<_> = out.masks.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sides, vec![16, 8, 4, 2]);
}

fn tiny_fpn_depth(depth: usize) -> FpnConfig {
    FpnConfig {
        pyramid_depth: depth,
        down_filters: vec![2; depth],
        ..tiny_fpn_config()
    }
}

#[test]
fn fpn_rejects_indivisible_input() {
    let mut m = FpnModel::<f64>::new(tiny_fpn_depth(4), 0).unwrap();
    let err = m.predict(&Tensor::zeros(&[1, 1, 30, 30])).unwrap_err();
    assert!(err.to_string().contains("16"), "{err}");
}

// Recorded from the first build of the default configuration and tallied by hand:
// 4 down blocks, 4 laterals, 8 heads of conv 128->256, conv 256->256, conv 256->1,
// with BN gamma/beta after every conv except the head outputs.
const DEFAULT_FPN_PARAMS: usize = 7_996_808;

#[test]
fn fpn_default_parameter_count_is_frozen() {
    let m = FpnModel::<f32>::new(FpnConfig::default(), 0).unwrap();
    assert_eq!(m.params.num_trainable(), DEFAULT_FPN_PARAMS);
}

#[test]
fn width_multiplier_halves_filters() {
    let full = FpnModel::<f32>::new(FpnConfig::default(), 0).unwrap();
    let half = FpnModel::<f32>::new(
        FpnConfig {
            width_multiplier: 0.5,
            ..FpnConfig::default()
        },
        0,
    )
    .unwrap();
    for (name, t) in full.params.trainable() {
        let h = half.params.get(name).unwrap();
        let (f0, h0) = (t.shape()[0], h.shape()[0]);
        if name.ends_with(".out.weight") || name.ends_with(".out.bias") {
            assert_eq!(f0, h0, "{name}");
        } else {
            assert_eq!(h0, f0.div_ceil(2), "{name}");
        }
    }
    assert_eq!(scaled_filters(3, 0.5), 2);
    assert_eq!(scaled_filters(1, 0.01), 1);
}

#[test]
fn equal_seeds_build_identical_models() {
    let a = FpnModel::<f32>::new(tiny_fpn_config(), 42).unwrap();
    let b = FpnModel::<f32>::new(tiny_fpn_config(), 42).unwrap();
    let c = FpnModel::<f32>::new(tiny_fpn_config(), 43).unwrap();
    let vals = |m: &FpnModel<f32>| {
        m.params
            .iter()
            .flat_map(|(_, p)| p.tensor.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        vals(&a).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        vals(&b).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_ne!(vals(&a), vals(&c));
    let x = CountModel::<f32>::new(tiny_counter_config(), 1).unwrap();
    let y = CountModel::<f32>::new(tiny_counter_config(), 1).unwrap();
    assert_eq!(
        x.params
            .iter()
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect::<Vec<_>>(),
        y.params
            .iter()
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect::<Vec<_>>()
    );
}

#[test]
fn counter_flattens_five_halvings() {
    let cfg = CountConfig {
        width_multiplier: 1.0,
        ..CountConfig::default()
    };
    assert_eq!(cfg.flat_dim(), 3 * 4 * 512);
    let small = CountConfig {
        width_multiplier: 0.125,
        ..CountConfig::default()
    };
    let mut m = CountModel::<f32>::new(small, 0).unwrap();
    let out = m.predict(&Tensor::zeros(&[2, 1, 96, 128])).unwrap();
    assert_eq!(out.count.len(), 2);
    assert_eq!(out.logvar.len(), 2);
}

#[test]
fn counter_rejects_indivisible_input() {
    let mut m = CountModel::<f64>::new(tiny_counter_config(), 0).unwrap();
    let err = m.predict(&Tensor::zeros(&[1, 1, 48, 64])).unwrap_err();
    assert!(err.to_string().contains("32"), "{err}");
    let bad = CountConfig {
        input_hw: (48, 64),
        ..tiny_counter_config()
    };
    assert!(CountModel::<f64>::new(bad, 0).is_err());
}

#[test]
fn zeroed_output_layer_counts_zero() {
    let mut m = CountModel::<f64>::new(tiny_counter_config(), 3).unwrap();
    let (w, b) = (
        m.count_output_weight().to_string(),
        m.count_output_bias().to_string(),
    );
    m.params.get_mut(&w).unwrap().data_mut().fill(0.0);
    m.params.get_mut(&b).unwrap().data_mut().fill(0.0);
    let mut rng = SplitMix64::new(9);
    let out = m
        .predict(&random_tensor(&mut rng, &[3, 1, 32, 32]))
        .unwrap();
    assert_eq!(out.count, vec![0.0; 3]);
}

#[test]
fn negative_preactivation_clamps_to_zero() {
    let mut m = CountModel::<f64>::new(tiny_counter_config(), 3).unwrap();
    let (w, b) = (
        m.count_output_weight().to_string(),
        m.count_output_bias().to_string(),
    );
    m.params.get_mut(&w).unwrap().data_mut().fill(0.0);
    m.params.get_mut(&b).unwrap().data_mut().fill(-5.0);
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::ones(&[1, 1, 32, 32]));
    let out = m.forward(&mut tape, x, Mode::Eval).unwrap();
    assert_eq!(tape.value(out.count_preact), &[-5.0]);
    assert_eq!(tape.value(out.count), &[0.0]);
}

#[test]
fn output_scale_reparameterizes_outputs() {
    let base = CountModel::<f64>::new(tiny_counter_config(), 8).unwrap();
    let mut scaled = base.clone();
    scaled.config.output_scale = 4.0;
    let mut base = base;
    let x = Tensor::full(&[2, 1, 32, 32], 0.3);
    let a = base.predict(&x).unwrap();
    let b = scaled.predict(&x).unwrap();
    for i in 0..2 {
        assert!((b.count[i] - 4.0 * a.count[i]).abs() < 1e-12);
        assert!((b.logvar[i] - a.logvar[i] - 2.0 * 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn fpn_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = fpn_gradient_error(seed, false);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
    assert!(fpn_gradient_error(11, true) < 1e-5);
}

#[test]
fn counter_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = counter_gradient_error(seed, false);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
    assert!(counter_gradient_error(11, true) < 1e-5);
}

#[test]
fn aleatoric_examples() {
    let eval = |p: &[f64], t: &[f64], s: &[f64]| {
        let mut tape = Tape::new();
        let n = p.len();
        let p = tape.leaf(&[n], p.to_vec(), false).unwrap();
        let t = tape.leaf(&[n], t.to_vec(), false).unwrap();
        let s = tape.leaf(&[n], s.to_vec(), false).unwrap();
        let l = aleatoric_loss(&mut tape, p, t, s, false).unwrap();
        tape.value(l)[0]
    };
    assert_eq!(eval(&[1.5], &[1.5], &[0.0]), 0.0);
    assert_eq!(eval(&[3.0], &[1.0], &[0.0]), 1.0);
    assert_eq!(eval(&[1.0], &[1.0], &[2.0]), 2.0);
    // s = 0 reduces to mean |r| / 2
    assert!((eval(&[0.0, 1.0, 5.0], &[1.0, 3.0, 1.0], &[0.0; 3]) - 7.0 / 6.0).abs() < 1e-15);
}

#[test]
fn aleatoric_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(&Tensor::zeros(&[2]));
    let t = tape.constant(&Tensor::zeros(&[3]));
    let s = tape.constant(&Tensor::zeros(&[2]));
    assert!(aleatoric_loss(&mut tape, p, t, s, false).is_err());
}

#[test]
fn tv_examples_and_oracle() {
    let eval = |shape: &[usize], data: Vec<f64>| {
        let mut tape = Tape::new();
        let x = tape.leaf(shape, data, false).unwrap();
        let l = tv_loss(&mut tape, x).unwrap();
        tape.value(l)[0]
    };
    assert_eq!(eval(&[1, 1, 3, 3], vec![0.4; 9]), 0.0);
    assert_eq!(eval(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]), 0.5);
    let mut rng = SplitMix64::new(4);
    let x = random_vec(&mut rng, 16, 1.0);
    assert!((eval(&[1, 1, 4, 4], x.clone()) - tv_naive(&x, 1, 4, 4)).abs() < 1e-12);
}

fn fpn_loss_value(m: &mut FpnModel<f64>, y: &Tensor<f64>, tv: f64, perfect: bool) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 1, 8, 8]));
    let mut out = m.forward(&mut tape, x, Mode::Eval).unwrap();
    m.params.unbind();
    if perfect {
        // substitute perfect predictions and zero log-variance
        let c = y.data()[0];
        for k in 0..out.masks.len() {
            let shape = tape.shape(out.masks[k]).to_vec();
            out.masks[k] = tape.constant(&Tensor::full(&shape, c));
            out.logvars[k] = tape.constant(&Tensor::zeros(&shape));
        }
    }
    let yv = tape.constant(y);
    let l = fpn_loss(&mut tape, &out, yv, tv, false).unwrap();
    tape.value(l)[0]
}

#[test]
fn fpn_loss_examples() {
    let mut m = FpnModel::<f64>::new(tiny_fpn_config(), 0).unwrap();
    let y = Tensor::full(&[1, 1, 4, 4], 0.6);
    assert_eq!(fpn_loss_value(&mut m, &y, 1e-4, true), 0.0);

    // without TV the loss is the sum of per-scale aleatoric terms
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 1, 8, 8]));
    let out = m.forward(&mut tape, x, Mode::Eval).unwrap();
    m.params.unbind();
    let yv = tape.constant(&y);
    let total = fpn_loss(&mut tape, &out, yv, 0.0, false).unwrap();
    let mut manual = 0.0;
    let mut target = y.clone();
    for k in 0..2 {
        let t = tape.constant(&target);
        let a = aleatoric_loss(&mut tape, out.masks[k], t, out.logvars[k], false).unwrap();
        manual += tape.value(a)[0];
        let side = target.shape()[2] / 2;
        target = Tensor::full(&[1, 1, side, side], 0.6);
    }
    assert!((tape.value(total)[0] - manual).abs() < 1e-12);

    let bad = tape.constant(&Tensor::zeros(&[1, 1, 3, 4]));
    assert!(fpn_loss(&mut tape, &out, bad, 0.0, false).is_err());
}

#[test]
fn ci95_examples() {
    let ci = ci95(10.0, 0.0);
    assert!((ci.halfwidth - 1.96).abs() < 1e-12);
    let c = ConfidenceInterval {
        count: 14.0,
        halfwidth: 1.82,
        lo: 12.18,
        hi: 15.82,
    };
    assert_eq!(c.to_string(), "14.00 ± 1.82");
    let low = ci95(1.0, 2.0 * (3.0f64 / 1.96).ln());
    assert!((low.halfwidth - 3.0).abs() < 1e-12);
    assert_eq!(low.lo, 0.0);
    assert!((low.hi - 4.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn counts_are_never_negative(seed in any::<u64>(), scale in 0.1f64..100.0) {
        let mut m = CountModel::<f64>::new(tiny_counter_config(), seed).unwrap();
        let mut rng = SplitMix64::new(seed);
        let x = Tensor::from_fn(&[2, 1, 32, 32], |_| -scale * rng.uniform());
        let out = m.predict(&x).unwrap();
        prop_assert!(out.count.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn fpn_shapes_hold_for_divisible_sizes(hk in 1usize..4, wk in 1usize..4, n in 1usize..3) {
        let mut m = FpnModel::<f64>::new(tiny_fpn_config(), 0).unwrap();
        let out = m.predict(&Tensor::zeros(&[n, 1, 4 * hk, 4 * wk])).unwrap();
        prop_assert_eq!(out.masks.len(), 2);
        for k in 0..2 {
            prop_assert_eq!(out.masks[k].shape(), &[n, 1, 2 * hk >> k, 2 * wk >> k]);
        }
    }
}
