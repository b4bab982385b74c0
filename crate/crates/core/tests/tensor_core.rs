use mmcc::tensor::{
    conv_output_extent, conv_transpose_output_extent, grad_check, pool_output_extent, BatchNormMode, ConvParams,
    GradCheckOptions, RunningStats, Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fd_opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        ..Default::default()
    }
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut tape = Tape::<f64>::new();
    let input = random(&[1, 1, 8, 8], 1);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = tape.leaf(input.clone(), false);
    let w = tape.leaf(Tensor::new(vec![1, 1, 3, 3], k).unwrap(), false);
    let y = tape.conv2d(x, w, None, ConvParams::new(1, 1, 1)).unwrap();
    assert_eq!(tape.value(y), &input);
}

/// Number of window start positions whose dilated taps stay inside the padded input.
fn enumerate_windows(extent: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> usize {
    let padded = extent + 2 * padding;
    (0..padded)
        .step_by(stride)
        .filter(|&start| start + dilation * (kernel - 1) < padded)
        .count()
}

#[test]
fn strided_dilated_output_is_four_by_four() {
    assert_eq!(enumerate_windows(8, 3, 2, 2, 2), 4);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[1, 1, 8, 8], 2), false);
    let w = tape.leaf(random(&[1, 1, 3, 3], 3), false);
    let y = tape.conv2d(x, w, None, ConvParams::new(2, 2, 2)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
}

#[test]
fn ones_window_sums_to_eighteen() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(vec![1, 2, 5, 5]), false);
    let w = tape.leaf(Tensor::ones(vec![1, 2, 3, 3]), false);
    let y = tape.conv2d(x, w, None, ConvParams::new(1, 1, 0)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 18.0));
}

#[test]
fn conv_errors_name_the_dimension() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(vec![1, 2, 5, 5]), false);
    let w = tape.leaf(Tensor::ones(vec![1, 3, 3, 3]), false);
    match tape.conv2d(x, w, None, ConvParams::new(1, 1, 0)) {
        Err(TensorError::Mismatch { dim, .. }) => assert_eq!(dim, "input channels"),
        other => panic!("unexpected {other:?}"),
    }
    let big = tape.leaf(Tensor::ones(vec![1, 2, 7, 7]), false);
    assert!(matches!(
        tape.conv2d(x, big, None, ConvParams::new(1, 1, 0)),
        Err(TensorError::EmptyOutput { .. })
    ));
}

#[test]
fn transposed_conv_upsamples_and_is_linear() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]), false);
    let w = tape.leaf(random(&[1, 1, 2, 2], 5), false);
    let y = tape.conv_transpose2d(x, w, None, ConvParams::new(2, 1, 0)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 8, 8]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn adjoint_gap(cin: usize, cout: usize, h: usize, w: usize, k: usize, p: ConvParams, seed: u64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let xv = random(&[1, cin, h, w], seed);
    let wt = random(&[cout, cin, k, k], seed + 1);
    let x = tape.leaf(xv.clone(), false);
    let wv = tape.leaf(wt, false);
    let cx = tape.conv2d(x, wv, None, p).unwrap();
    let yv = random(tape.shape(cx), seed + 2);
    let lhs = tape.value(cx).dot(&yv);
    let y = tape.leaf(yv, false);
    let ty = tape.conv_transpose2d(y, wv, None, p).unwrap();
    assert_eq!(tape.shape(ty), xv.shape());
    let rhs = xv.dot(tape.value(ty));
    (lhs - rhs).abs()
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    assert!(adjoint_gap(1, 1, 5, 5, 3, ConvParams::new(1, 1, 1), 7) < 1e-10);
    // every (stride, dilation, padding, kernel) where both extents line up
    for s in 1..=4 {
        for d in 1..=3 {
            for p in 0..=2 {
                for k in 1..=4 {
                    for h in 6..=13 {
                        let span = h + 2 * p;
                        if span <= d * (k - 1) || (span - d * (k - 1) - 1) % s != 0 {
                            continue;
                        }
                        let gap = adjoint_gap(
                            2,
                            3,
                            h,
                            h + s,
                            k,
                            ConvParams::new(s, d, p),
                            (s * 100 + d * 10 + p) as u64,
                        );
                        assert!(gap < 1e-10, "s{s} d{d} p{p} k{k} h{h}: {gap}");
                    }
                }
            }
        }
    }
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::<f64>::new();
    let c = tape.leaf(Tensor::full(vec![1, 2, 6, 6], 3.25), false);
    let y = tape.avg_pool2d(c, 3, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 3.25));

    let x = tape.leaf(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let y = tape.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);

    let x = tape.leaf(random(&[1, 2, 4, 6], 9), true);
    let y = tape.avg_pool2d(x, 2, 2).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.25));

    assert!(tape.avg_pool2d(x, 5, 1).is_err());
}

#[test]
fn batch_norm_train_normalizes_per_channel() {
    let mut tape = Tape::<f64>::new();
    let xv = random(&[3, 2, 4, 5], 11).map(|v| 4.0 * v + 1.5);
    let x = tape.leaf(xv, false);
    let g = tape.leaf(Tensor::ones(vec![2]), false);
    let b = tape.leaf(Tensor::zeros(vec![2]), false);
    let mut stats = RunningStats::new(2);
    let y = tape
        .batch_norm2d(x, g, b, &mut stats, BatchNormMode::Train, 0.1, 1e-5)
        .unwrap();
    let out = tape.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| out[(n * 2 + ch) * 20..(n * 2 + ch + 1) * 20].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 60.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5 * 1.0 + 1e-5, "var {var}");
    }
    // running stats moved toward the batch statistics
    assert!(stats.mean.iter().all(|&m| m != 0.0));
}

#[test]
fn batch_norm_infer_identity_and_constant_channel() {
    let eps = 1e-5;
    let mut tape = Tape::<f64>::new();
    let xv = random(&[2, 3, 4, 4], 12);
    let x = tape.leaf(xv.clone(), false);
    let g = tape.leaf(Tensor::ones(vec![3]), false);
    let b = tape.leaf(Tensor::zeros(vec![3]), false);
    let mut stats = RunningStats::new(3);
    let y = tape
        .batch_norm2d(x, g, b, &mut stats, BatchNormMode::Infer, 0.1, eps)
        .unwrap();
    for (o, i) in tape.value(y).data().iter().zip(xv.data()) {
        assert!((o - i).abs() <= eps * i.abs());
    }

    let x = tape.leaf(Tensor::full(vec![2, 1, 3, 3], 7.0), false);
    let g = tape.leaf(Tensor::full(vec![1], 2.0), false);
    let b = tape.leaf(Tensor::full(vec![1], 0.3), false);
    let mut stats = RunningStats::new(1);
    let y = tape
        .batch_norm2d(x, g, b, &mut stats, BatchNormMode::Train, 0.1, eps)
        .unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.3));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(vec![3], &[-1.0, 2.0, 0.0]).unwrap(), false);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
    let nan = tape.leaf(Tensor::from_f64(vec![2], &[f64::NAN, -1.0]).unwrap(), false);
    let r = tape.relu(nan);
    assert!(tape.value(r).data()[0].is_nan(), "relu propagates NaN");
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[2], 0.5);
    let l = tape.leaf(Tensor::scalar(3f64.ln()), false);
    let s = tape.sigmoid(l);
    assert!((tape.value(s).data()[0] - 0.75).abs() < 1e-15);
}

#[test]
fn concat_examples() {
    let mut tape = Tape::<f64>::new();
    let parts: Vec<Var> = [4, 8, 8, 8]
        .iter()
        .enumerate()
        .map(|(i, &c)| tape.leaf(random(&[2, c, 3, 5], i as u64), true))
        .collect();
    let cat = tape.concat_channels(&parts).unwrap();
    assert_eq!(tape.shape(cat), &[2, 28, 3, 5]);

    let single = tape.concat_channels(&parts[..1]).unwrap();
    assert_eq!(tape.value(single), tape.value(parts[0]));

    let ab = tape.concat_channels(&parts[..2]).unwrap();
    let s = tape.sum(ab);
    tape.backward(s).unwrap();
    for &p in &parts[..2] {
        assert!(tape.grad(p).unwrap().data().iter().all(|&g| g == 1.0));
    }

    let odd = tape.leaf(random(&[2, 1, 4, 5], 99), false);
    match tape.concat_channels(&[parts[0], odd]) {
        Err(TensorError::ConcatMismatch { index, .. }) => assert_eq!(index, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[2, 3], 4).map(|v| v.abs() + 0.1), true);
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    // a second sweep accumulates
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));

    let z = tape.leaf(Tensor::scalar(0.0), true);
    let sg = tape.sigmoid(z);
    tape.backward(sg).unwrap();
    assert_eq!(tape.grad(z).unwrap().data(), &[0.25]);

    assert!(matches!(tape.backward(r), Err(TensorError::NonScalarLoss(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(TensorError::Detached)));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let inputs = [random(&[1, 2, 6, 6], 21), random(&[3, 2, 3, 3], 22), random(&[3], 23)];
    let report = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, TensorError> {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 1, 1))?;
            Ok(t.sum(y))
        },
        &inputs,
        &fd_opts(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_sum_of_squares_and_mutation() {
    let x = random(&[4, 5], 31);
    let report = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, TensorError> {
            let sq = t.square(v[0]);
            Ok(t.sum(sq))
        },
        std::slice::from_ref(&x),
        &GradCheckOptions {
            tolerance: 1e-8,
            ..fd_opts()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");

    // x·stopgrad(x): the backward rule loses one of the two product terms
    let report = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, TensorError> {
            let detached = t.constant(t.value(v[0]).clone());
            let prod = t.mul(v[0], detached)?;
            Ok(t.sum(prod))
        },
        std::slice::from_ref(&x),
        &GradCheckOptions {
            refinements: 4,
            ..fd_opts()
        },
    )
    .unwrap();
    assert!(!report.passed());

    let err = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, TensorError> { Ok(t.relu(v[0])) },
        std::slice::from_ref(&x),
        &fd_opts(),
    );
    assert!(matches!(err, Err(TensorError::NonScalarLoss(_))));
}

type GraphFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Every differentiable operator, reduced to a scalar through a random
/// projection so that each output element carries a distinct weight.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, GraphFn)> {
    fn project(t: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
        let shape = t.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }
    vec![
        ("conv2d", vec![vec![2, 2, 7, 7], vec![3, 2, 3, 3], vec![3]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(2, 2, 2))?;
            project(t, y)
        }),
        (
            "conv_transpose2d",
            vec![vec![2, 3, 3, 4], vec![3, 2, 2, 2], vec![2]],
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvParams::new(2, 1, 0))?;
                project(t, y)
            },
        ),
        (
            "conv_transpose2d_k3",
            vec![vec![1, 2, 4, 4], vec![2, 3, 3, 3]],
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], None, ConvParams::new(2, 1, 1))?;
                project(t, y)
            },
        ),
        ("avg_pool2d", vec![vec![2, 2, 6, 6]], |t, v| {
            let y = t.avg_pool2d(v[0], 2, 2)?;
            project(t, y)
        }),
        (
            "batch_norm2d_train",
            vec![vec![2, 3, 4, 4], vec![3], vec![3]],
            |t, v| {
                let mut stats = RunningStats::new(3);
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train, 0.1, 1e-5)?;
                project(t, y)
            },
        ),
        (
            "batch_norm2d_infer",
            vec![vec![2, 3, 4, 4], vec![3], vec![3]],
            |t, v| {
                let mut stats = RunningStats::new(3);
                stats.mean = vec![0.1, -0.2, 0.3];
                stats.var = vec![0.5, 1.5, 2.0];
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Infer, 0.1, 1e-5)?;
                project(t, y)
            },
        ),
        ("relu", vec![vec![3, 7]], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
        ("sigmoid", vec![vec![3, 7]], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
        ("concat_channels", vec![vec![2, 1, 3, 3], vec![2, 2, 3, 3]], |t, v| {
            let y = t.concat_channels(v)?;
            project(t, y)
        }),
        ("crop2d", vec![vec![1, 2, 5, 6]], |t, v| {
            let y = t.crop2d(v[0], 1, 2, 3, 3)?;
            project(t, y)
        }),
        ("channel_gate", vec![vec![2, 3, 3, 4], vec![2, 1, 3, 4]], |t, v| {
            let y = t.channel_gate(v[0], v[1])?;
            project(t, y)
        }),
        ("arith", vec![vec![2, 5], vec![2, 5]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            let sq = t.square(v[1]);
            let den = t.affine(sq, 1.0, 0.5);
            let q = t.div(m, den)?;
            let y = t.affine(q, 3.0, -1.0);
            project(t, y)
        }),
        ("ln_powf", vec![vec![2, 5]], |t, v| {
            let sq = t.square(v[0]);
            let pos = t.affine(sq, 1.0, 0.2);
            let l = t.ln(pos);
            let p = t.powf(pos, 1.9);
            let y = t.add(l, p)?;
            let s = t.sum_per_sample(y);
            let s2 = t.square(s);
            Ok(t.sum(s2))
        }),
    ]
}

#[test]
fn every_operator_matches_finite_differences_over_many_seeds() {
    for (name, shapes, f) in op_cases() {
        for seed in 0..20u64 {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random(s, seed * 31 + i as u64 + 1000))
                .collect();
            let report = grad_check(f, &inputs, &fd_opts()).unwrap();
            assert!(report.passed(), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(random(&[2, 3, 9, 9], 41).cast(), true);
        let w = tape.leaf(random(&[4, 3, 3, 3], 42).cast(), true);
        let y = tape.conv2d(x, w, None, ConvParams::new(2, 2, 2)).unwrap();
        let s = tape.sigmoid(y);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        (
            tape.value(y).clone(),
            tape.grad(x).unwrap().clone(),
            tape.grad(w).unwrap().clone(),
        )
    };
    let a = run();
    let b = run();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn conv_is_linear_without_bias() {
    let (alpha, beta) = (0.7, -1.3);
    let xv = random(&[1, 2, 7, 6], 51);
    let yv = random(&[1, 2, 7, 6], 52);
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(random(&[3, 2, 3, 3], 53), false);
    let p = ConvParams::new(2, 1, 1);
    let x = tape.leaf(xv.clone(), false);
    let y = tape.leaf(yv.clone(), false);
    let mix = tape.leaf(
        Tensor::new(
            xv.shape().to_vec(),
            xv.data()
                .iter()
                .zip(yv.data())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap(),
        false,
    );
    let cx = tape.conv2d(x, w, None, p).unwrap();
    let cy = tape.conv2d(y, w, None, p).unwrap();
    let cm = tape.conv2d(mix, w, None, p).unwrap();
    for ((m, a), b) in tape
        .value(cm)
        .data()
        .iter()
        .zip(tape.value(cx).data())
        .zip(tape.value(cy).data())
    {
        assert!((m - (alpha * a + beta * b)).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn shape_formulas_match_window_enumeration(
        stride in 1usize..=4,
        dilation in 1usize..=4,
        padding in 0usize..=3,
        kernel in 1usize..=5,
        extent in 1usize..=20,
    ) {
        let formula = conv_output_extent(extent, kernel, stride, dilation, padding);
        let brute = enumerate_windows(extent, kernel, stride, dilation, padding);
        prop_assert_eq!(formula.max(0) as usize, brute);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, extent, extent + 1]), false);
        let w = tape.leaf(Tensor::ones(vec![1, 1, kernel, kernel]), false);
        match tape.conv2d(x, w, None, ConvParams::new(stride, dilation, padding)) {
            Ok(y) => prop_assert_eq!(tape.shape(y)[2], brute),
            Err(_) => prop_assert!(brute == 0 || enumerate_windows(extent + 1, kernel, stride, dilation, padding) == 0),
        }

        // transposed: scatter footprint of every (input, tap) pair, cropped by padding
        let footprint = (extent - 1) * stride + dilation * (kernel - 1) + 1;
        let expected = footprint as i64 - 2 * padding as i64;
        prop_assert_eq!(conv_transpose_output_extent(extent, kernel, stride, dilation, padding), expected);

        if kernel <= extent {
            let pools = (0..extent).step_by(stride).filter(|&s| s + kernel <= extent).count();
            prop_assert_eq!(pool_output_extent(extent, kernel, stride) as usize, pools);
        }
    }
}
