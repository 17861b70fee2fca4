use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(1e-2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Direct sliding-window convolution, independent of im2col.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = x.dims4("x").unwrap();
    let [f, _, kk, _] = k.dims4("k").unwrap();
    let p = (kk / 2) as isize;
    let mut out = vec![0.0; n * f * h * w];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b[fi];
                    for ci in 0..c {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let sy = y as isize + ki as isize - p;
                                let sx = xx as isize + kj as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += x.data()[((ni * c + ci) * h + sy as usize) * w + sx as usize]
                                    * k.data()[((fi * c + ci) * kk + ki) * kk + kj];
                            }
                        }
                    }
                    out[((ni * f + fi) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 1, 5, 5], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(xv, k, b).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv_all_ones_counts_window_coverage() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (c, f, k, h, w) in [(3, 4, 3, 7, 6), (2, 5, 1, 4, 4), (1, 2, 5, 6, 9)] {
        let x = random(&[2, c, h, w], &mut rng);
        let kern = random(&[f, c, k, k], &mut rng);
        let bias = random(&[f], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(kern.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        let oracle = conv_oracle(&x, &kern, bias.data());
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_mismatched_channels_and_even_kernels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, k, b), Err(Error::Shape(_))));
    let k2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(tape.conv2d(x, k2, b), Err(Error::Shape(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            random(&[1, 2, 5, 5], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        let report = grad_check(|t, v| t.conv2d(v[0], v[1], v[2]), &inputs, H).unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn batch_norm_normalized_input_is_unchanged() {
    // two values per channel at +-1: mean 0, biased variance 1
    let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut stats = BnStats::new(1);
    let y = tape
        .batch_norm(xv, g, b, &mut stats, BnMode::Train { update_stats: true })
        .unwrap();
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-4);
    }
    assert!(stats.initialized);
    assert!((stats.var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_constant_input_collapses_to_beta() {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::full(&[2, 3, 4, 4], 7.5));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::full(&[3], 0.5));
    let mut stats = BnStats::new(3);
    let y = tape
        .batch_norm(xv, g, b, &mut stats, BnMode::Train { update_stats: false })
        .unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    assert!(!stats.initialized);
}

#[test]
fn batch_norm_eval_requires_initialized_statistics() {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut stats = BnStats::new(1);
    assert!(matches!(
        tape.batch_norm(xv, g, b, &mut stats, BnMode::Eval),
        Err(Error::UninitializedStatistics)
    ));
    tape.batch_norm(xv, g, b, &mut stats, BnMode::Train { update_stats: true })
        .unwrap();
    assert!(tape.batch_norm(xv, g, b, &mut stats, BnMode::Eval).is_ok());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let inputs = vec![
            random(&[2, 3, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[3], &mut rng),
        ];
        let train = grad_check(
            |t, v| {
                let mut stats = BnStats::new(3);
                t.batch_norm(v[0], v[1], v[2], &mut stats, BnMode::Train { update_stats: false })
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(train.max_rel_error < TOL, "train seed {seed}: {}", train.max_rel_error);
        let eval = grad_check(
            |t, v| {
                let mut stats = BnStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                    initialized: true,
                };
                t.batch_norm(v[0], v[1], v[2], &mut stats, BnMode::Eval)
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(eval.max_rel_error < TOL, "eval seed {seed}: {}", eval.max_rel_error);
    }
}

#[test]
fn relu_values_and_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[4], -3.0), true);
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));

    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let inputs = vec![random_away_from_zero(&[2, 3, 4, 4], &mut rng)];
        let r = grad_check(|t, v| t.relu(v[0]), &inputs, H).unwrap();
        assert!(r.max_rel_error < TOL);
    }
}

#[test]
fn max_pool_window_maximum_and_tie_rule() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let y = tape.max_pool_2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 2.5), true);
    let y = tape.max_pool_2x2(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    let expected: Vec<f64> = (0..16)
        .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(g, &expected[..]);
}

#[test]
fn max_pool_matches_exhaustive_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.max_pool_2x2(xv).unwrap();
    let out = tape.value(y).data();
    for plane in 0..6 {
        for i in 0..4 {
            for j in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for a in 0..2 {
                    for b in 0..2 {
                        m = m.max(x.data()[plane * 64 + (2 * i + a) * 8 + 2 * j + b]);
                    }
                }
                assert_eq!(out[plane * 16 + i * 4 + j], m);
            }
        }
    }
}

#[test]
fn max_pool_rejects_odd_extent() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(matches!(tape.max_pool_2x2(x), Err(Error::Shape(_))));
}

#[test]
fn max_pool_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let inputs = vec![random(&[1, 2, 6, 6], &mut rng)];
        let r = grad_check(|t, v| t.max_pool_2x2(v[0]), &inputs, H).unwrap();
        assert!(r.max_rel_error < TOL);
    }
}

#[test]
fn transposed_conv_single_pixel_scales_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    let k = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.transposed_conv_2x2(x, k).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
}

/// Insert zeros between input pixels, then correlate with the 2x2 kernel
/// anchored at its bottom-right tap.
fn zero_interleave_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = x.dims4("x").unwrap();
    let f = k.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    let mut z = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                z[plane * oh * ow + 2 * i * ow + 2 * j] = x.data()[plane * h * w + i * w + j];
            }
        }
    }
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for a in 0..2 {
                            for b in 0..2 {
                                if y < a || xx < b {
                                    continue;
                                }
                                s += z[((ni * c + ci) * oh + y - a) * ow + xx - b]
                                    * k.data()[((ci * f + fi) * 2 + a) * 2 + b];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn transposed_conv_matches_zero_interleave_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let k = random(&[3, 4, 2, 2], &mut rng);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.transposed_conv_2x2(xv, kv).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 8, 10]);
    for (a, b) in tape.value(y).data().iter().zip(zero_interleave_oracle(&x, &k)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let inputs = vec![random(&[2, 3, 3, 3], &mut rng), random(&[3, 2, 2, 2], &mut rng)];
        let r = grad_check(|t, v| t.transposed_conv_2x2(v[0], v[1]), &inputs, H).unwrap();
        assert!(r.max_rel_error < TOL);
    }
}

#[test]
fn concat_shapes_and_gradient_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[1, 2, 4, 4], &mut rng);
    let b = random(&[1, 3, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a, true), tape.leaf(b, true));
    let y = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 5, 4, 4]);
    let w: Vec<f64> = (0..80).map(f64::from).collect();
    let s = tape.dot(y, w.clone()).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(av).unwrap(), &w[..32]);
    assert_eq!(tape.grad(bv).unwrap(), &w[32..]);

    assert!(Tensor::<f64>::new(&[1, 0, 4, 4], vec![]).is_err());
    let c = tape.constant(Tensor::zeros(&[1, 1, 2, 4]));
    assert!(tape.concat_channels(av, c).is_err());
}

#[test]
fn softmax_known_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
    let y = tape.softmax_pixelwise(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let x = tape.constant(Tensor::new(&[1, 3, 1, 1], vec![0.0, 2f64.ln(), 3f64.ln()]).unwrap());
    let y = tape.softmax_pixelwise(x).unwrap();
    for (a, e) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((a - e).abs() < 1e-12);
    }

    let mut tape = Tape::<f32>::strict();
    let x = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1e4, -1e4, -1e4, 1e4]).unwrap());
    let y = tape.softmax_pixelwise(x).unwrap();
    assert!(tape.value(y).all_finite());
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let inputs = vec![random(&[2, 4, 3, 3], &mut rng)];
        let r = grad_check(|t, v| t.softmax_pixelwise(v[0]), &inputs, H).unwrap();
        assert!(r.max_rel_error < TOL);
    }
}

fn one_hot(classes: &[usize], k: usize, n: usize, hw: usize) -> Tensor<f64> {
    let mut d = vec![0.0; n * k * hw];
    for ni in 0..n {
        for p in 0..hw {
            d[(ni * k + classes[ni * hw + p]) * hw + p] = 1.0;
        }
    }
    Tensor::new(&[n, k, 1, hw], d).unwrap()
}

#[test]
fn weighted_cross_entropy_known_values() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap());
    let labels = one_hot(&[0], 2, 1, 1);
    let l = tape.weighted_cross_entropy(p, &labels, &[2.0, 1.0]).unwrap();
    assert!((tape.value(l).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-9);

    let p = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let labels = one_hot(&[0, 1], 2, 1, 2);
    let l = tape.weighted_cross_entropy(p, &labels, &[3.0, 4.0]).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    assert!(matches!(
        tape.weighted_cross_entropy(p, &labels, &[1.0]),
        Err(Error::Config(_))
    ));
    let bad = Tensor::new(&[1, 2, 1, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    assert!(matches!(
        tape.weighted_cross_entropy(p, &bad, &[1.0, 1.0]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn weighted_cross_entropy_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let logits = random(&[1, 5, 3, 3], &mut rng);
        let classes: Vec<usize> = (0..9).map(|_| rng.gen_range(0..5)).collect();
        let labels = one_hot(&classes, 5, 1, 9).reshape(&[1, 5, 3, 3]).unwrap();
        let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..3.0)).collect();
        let r = grad_check(
            |t, v| {
                let p = t.softmax_pixelwise(v[0])?;
                t.weighted_cross_entropy(p, &labels, &weights)
            },
            &[logits],
            H,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn backward_square_and_accumulation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
}

#[test]
fn composite_conv_relu_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        random(&[1, 2, 5, 5], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    let r = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            let y = t.relu(y)?;
            t.sum(y)
        },
        &inputs,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error < TOL);
}

#[test]
fn grad_check_linear_is_exact_and_detects_wrong_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![random(&[4, 4], &mut rng)];
    let r = grad_check(|t, v| t.scale(v[0], 3.0), &inputs, H).unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);

    // negative control: a backward that is off by a factor of two
    let f = |t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], 3.0);
    let analytic = gradcheck::analytic_gradient(&f, &inputs).unwrap();
    let doubled: Vec<f64> = analytic[0].iter().map(|g| 2.0 * g).collect();
    let numeric = gradcheck::numeric_gradient(
        |xs| {
            let mut tape = Tape::new();
            let v = tape.constant(xs[0].clone());
            let out = gradcheck::project(&f, &mut tape, &[v])?;
            Ok(tape.value(out).data()[0])
        },
        &inputs,
        H,
    )
    .unwrap();
    let err = gradcheck::max_relative_error(&doubled, &numeric[0]);
    assert!((err - 1.0).abs() < 1e-6, "{err}");
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 0.5), false);
    let b = tape.leaf(Tensor::zeros(&[1]), true);
    let y = tape.conv2d(x, k, b).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(k).is_none());
    assert_eq!(tape.grad(b).unwrap(), &[9.0]);
}

#[test]
fn strict_tape_rejects_non_finite() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.constant(Tensor::full(&[2], f64::MAX));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
}
