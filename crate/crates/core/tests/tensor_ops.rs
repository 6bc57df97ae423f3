mod common;

use cellcount::rng::SplitMix64;
use cellcount::tensor::finite_diff_check;
use cellcount::{Mode, Tape, Tensor};
use common::*;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn conv2d_overlap_counts() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::ones(&[1, 1, 3, 3]));
    let k = tape.constant(&Tensor::ones(&[1, 1, 3, 3]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    assert_eq!(
        tape.value(y),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
    );
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = SplitMix64::new(1);
    let input = random_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&input);
    let k = tape.constant(&t(&[1, 1, 3, 3], &kernel));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    assert_eq!(tape.value(y), input.data());
}

#[test]
fn conv2d_matches_nested_loops_f32() {
    let mut rng = SplitMix64::new(2);
    let x = random_tensor(&mut rng, &[1, 2, 8, 8]);
    let k = random_tensor(&mut rng, &[4, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[4]);
    let (want, shape) = conv2d_naive(
        x.data(),
        [1, 2, 8, 8],
        k.data(),
        [4, 2, 3, 3],
        b.data(),
        2,
        1,
    );
    let mut tape = Tape::<f32>::new();
    let (xv, kv, bv) = (
        tape.constant(&x.cast()),
        tape.constant(&k.cast()),
        tape.constant(&b.cast()),
    );
    let y = tape.conv2d(xv, kv, bv, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &shape);
    let got: Vec<f64> = tape.value(y).iter().map(|&v| v as f64).collect();
    assert!(max_abs_diff(&got, &want) < 1e-5);
}

#[test]
fn conv2d_channel_mismatch_names_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let msg = tape.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
    assert!(
        msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"),
        "{msg}"
    );
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(y), &[4.0]);
    let c = tape.constant(&Tensor::full(&[1, 1, 4, 4], 7.0));
    let y = tape.max_pool2(c).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert!(tape.value(y).iter().all(|&v| v == 7.0));
    let odd = tape.constant(&Tensor::zeros(&[1, 1, 3, 4]));
    assert!(tape.max_pool2(odd).is_err());
}

#[test]
fn maxpool_tie_routes_to_first() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .leaf(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0], true)
        .unwrap();
    let y = tape.max_pool2(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_matches_window_scan() {
    let mut rng = SplitMix64::new(3);
    let x = random_tensor(&mut rng, &[1, 3, 8, 8]);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(&x);
    let y = tape.max_pool2(v).unwrap();
    assert_eq!(
        tape.value(y),
        maxpool_naive(x.data(), [1, 3, 8, 8]).as_slice()
    );
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.upsample2(x).unwrap();
    assert_eq!(
        tape.value(y),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let one = tape.constant(&t(&[1, 1, 1, 1], &[2.5]));
    let y = tape.upsample2(one).unwrap();
    assert_eq!(tape.value(y), &[2.5; 4]);
    // constant image survives a 2x nearest down/up round trip
    let c = tape.constant(&Tensor::full(&[1, 2, 4, 6], 3.0));
    let down = tape.max_pool2(c).unwrap();
    let up = tape.upsample2(down).unwrap();
    assert_eq!(tape.value(up), tape.value(c));
}

#[test]
fn upsample_backward_sums_blocks() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 1, 1, 2], vec![1.0, 2.0], true).unwrap();
    let y = tape.upsample2(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
}

fn bn_train(x: &Tensor<f64>, c: usize) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let g = tape.constant(&Tensor::ones(&[c]));
    let b = tape.constant(&Tensor::zeros(&[c]));
    let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
    let y = tape
        .batch_norm(xv, g, b, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)
        .unwrap();
    tape.value(y).to_vec()
}

#[test]
fn batchnorm_examples() {
    assert!(bn_train(&Tensor::full(&[2, 1, 2, 2], 3.0), 1)
        .iter()
        .all(|&v| v == 0.0));
    let y = bn_train(&t(&[2, 1, 1, 1], &[-1.0, 1.0]), 1);
    assert!((y[0] + 1.0).abs() < 1e-3 && (y[1] - 1.0).abs() < 1e-3);

    let mut rng = SplitMix64::new(4);
    let x = random_tensor(&mut rng, &[4, 3, 5, 5]);
    let y = bn_train(&x, 3);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|e| (e - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_running_stats_update_and_eval() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[2, 1, 1, 1], &[1.0, 3.0]));
    let g = tape.constant(&Tensor::ones(&[1]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
    tape.batch_norm(x, g, b, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)
        .unwrap();
    assert!((rm[0] - 0.2).abs() < 1e-12);
    assert!((rv[0] - 1.1).abs() < 1e-12); // 0.9 * 1 + 0.1 * 2, unbiased over two values
    let y = tape
        .batch_norm(x, g, b, &mut rm, &mut rv, Mode::Eval, 0.1, 1e-5)
        .unwrap();
    let want = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
    assert!((tape.value(y)[0] - want).abs() < 1e-12);
    assert!((rm[0] - 0.2).abs() < 1e-12);
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[3], &[5.0, -1.0, 0.0]));
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y), &[5.0, -0.01, 0.0]);
    let x = tape.constant(&t(&[3], &[3.5, -2.0, 0.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[3.5, 0.0, 0.0]);
}

#[test]
fn linear_examples() {
    let mut rng = SplitMix64::new(5);
    let mut tape = Tape::<f64>::new();
    let input = random_tensor(&mut rng, &[2, 3]);
    let x = tape.constant(&input);
    let eye = tape.constant(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let zero3 = tape.constant(&Tensor::zeros(&[3]));
    let y = tape.linear(x, eye, zero3).unwrap();
    assert_eq!(tape.value(y), input.data());

    let wz = tape.constant(&Tensor::zeros(&[3, 4]));
    let bias = tape.constant(&t(&[4], &[1., 2., 3., 4.]));
    let y = tape.linear(x, wz, bias).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3., 4., 1., 2., 3., 4.]);

    let w = random_tensor(&mut rng, &[3, 4]);
    let wv = tape.constant(&w);
    let zero4 = tape.constant(&Tensor::zeros(&[4]));
    let y = tape.linear(x, wv, zero4).unwrap();
    let want = matmul_naive(input.data(), w.data(), 2, 3, 4);
    assert!(max_abs_diff(tape.value(y), &want) < 1e-6);

    let bad = tape.constant(&Tensor::zeros(&[4, 4]));
    assert!(tape.linear(x, bad, zero4).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
    let m = tape.mean(x);
    assert_eq!(tape.value(m), &[2.0]);
    let z = tape.constant(&t(&[1], &[0.0]));
    let e = tape.exp(z);
    assert_eq!(tape.value(e), &[1.0]);

    let x = tape.leaf(&[2], vec![1.0, -2.0], true).unwrap();
    let sq = tape.square(x);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);

    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn abs_subgradient_is_zero_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[3], vec![-2.0, 0.0, 2.0], true).unwrap();
    let a = tape.abs(x);
    let s = tape.sum(a);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn per_channel_broadcast() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2, 2, 1, 2], vec![0.0; 8], true).unwrap();
    let c = tape.leaf(&[2], vec![1.0, 10.0], true).unwrap();
    let y = tape.add(x, c).unwrap();
    assert_eq!(tape.value(y), &[1., 1., 10., 10., 1., 1., 10., 10.]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(c).unwrap(), &[4.0, 4.0]);
}

#[test]
fn backward_simple_chains() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1], vec![2.0], true).unwrap();
    let y = tape.mul_scalar(x, 3.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1], vec![4.0], true).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[8.0]);
    // a second sweep accumulates
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[16.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let mut w = Tensor::new(&[1], vec![2.0]).unwrap().with_grad();
    let mut c = Tensor::new(&[1], vec![5.0]).unwrap();
    let wv = tape.watch(&mut w);
    let cv = tape.watch(&mut c);
    let y = tape.mul(wv, cv).unwrap();
    tape.backward(y).unwrap();
    tape.write_grad(&mut w);
    tape.write_grad(&mut c);
    assert_eq!(w.grad().unwrap(), &[5.0]);
    assert!(c.grad().is_none());
}

#[test]
fn finite_diff_trivial() {
    let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
    let err = finite_diff_check(|tape, v| Ok(tape.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
    let ones = Tensor::<f64>::ones(&[4]);
    let err = finite_diff_check(
        |tape, v| {
            let s = tape.square(v);
            Ok(tape.sum(s))
        },
        &ones,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = SplitMix64::new(6);
    let x = random_tensor(&mut rng, &[2, 2, 5, 5]);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[3]);
    let gamma = Tensor::new(&[3], vec![1.2, 0.7, 1.0]).unwrap();
    let beta = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
    // gradient with respect to the kernel, through conv -> bn -> relu -> mean
    let err = finite_diff_check(
        |tape, kv| {
            let xv = tape.constant(&x);
            let bv = tape.constant(&b);
            let g = tape.constant(&gamma);
            let be = tape.constant(&beta);
            let y = tape.conv2d(xv, kv, bv, 1, 1)?;
            let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
            let y = tape.batch_norm(y, g, be, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)?;
            let y = tape.relu(y);
            Ok(tape.mean(y))
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
        let k = random_tensor(&mut rng, &[2, 2, 3, 3]);
        let grad_of = |wa: f64, wb: f64| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(x.shape(), x.data().to_vec(), true).unwrap();
            let kv = tape.constant(&k);
            let zero = tape.constant(&Tensor::zeros(&[2]));
            let y = tape.conv2d(xv, kv, zero, 1, 1).unwrap();
            let l1 = { let s = tape.square(y); tape.mean(s) };
            let l2 = { let p = tape.max_pool2(y).unwrap(); let e = tape.exp(p); tape.sum(e) };
            let l1 = tape.mul_scalar(l1, wa);
            let l2 = tape.mul_scalar(l2, wb);
            let l = tape.add(l1, l2).unwrap();
            tape.backward(l).unwrap();
            tape.grad(xv).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let want = a * g1[i] + b * g2[i];
            prop_assert!((combined[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn conv_output_shape_formula(h in 4usize..9, w in 4usize..9, k in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::zeros(&[1, 1, h, w]));
        let kv = tape.constant(&Tensor::zeros(&[2, 1, k, k]));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.conv2d(x, kv, b, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }
}
