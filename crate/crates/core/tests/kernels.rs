use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use revnet_core::gradcheck::{grad_check, FnTarget, GradCheckConfig};
use revnet_core::kernels::*;
use revnet_core::{Ctx, Shape, Tensor};

fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Six nested loops, taps accumulated in (c_in, kh, kw) order from zero.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..xs.c {
                        for a in 0..k {
                            for b in 0..k {
                                let r = (i * stride + a) as isize - pad as isize;
                                let c = (j * stride + b) as isize - pad as isize;
                                if r >= 0 && c >= 0 && (r as usize) < xs.h && (c as usize) < xs.w {
                                    acc += x.at(n, ci, r as usize, c as usize) * w.at(co, ci, a, b);
                                }
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias.data()[co];
                    }
                    let o = out.offset(n, co, i, j);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

/// Two-pass per-channel batch normalization.
fn naive_batchnorm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
    let s = x.shape();
    let m = (s.n * s.h * s.w) as f64;
    let mut out = x.clone();
    for c in 0..s.c {
        let vals: Vec<f64> = (0..s.n).flat_map(|n| x.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        for n in 0..s.n {
            for v in out.plane_mut(n, c) {
                *v = gamma[c] * (*v - mean) / (var + BN_EPSILON).sqrt() + beta[c];
            }
        }
    }
    out
}

fn conv_case() -> impl Strategy<Value = (Shape, usize, usize, usize, usize, u64)> {
    (
        1usize..3,
        1usize..4,
        3usize..7,
        3usize..7,
        1usize..4,
        prop_oneof![Just(1usize), Just(3)],
        1usize..3,
        any::<u64>(),
    )
        .prop_map(|(n, c, h, w, co, k, stride, seed)| (Shape::new(n, c, h, w), co, k, stride, k / 2, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_six_loop_oracle_bitwise((xs, co, k, stride, pad, seed) in conv_case(), with_bias in any::<bool>()) {
        let x = randn(xs, seed);
        let w = randn(Shape::new(co, xs.c, k, k), seed ^ 1);
        let b = randn(Shape::vector(co), seed ^ 2);
        let bias = with_bias.then_some(b);
        let p = ConvParams::new(w.clone(), bias.clone(), stride, pad).unwrap();
        let got = conv2d(&x, &p).unwrap();
        let want = naive_conv(&x, &w, bias.as_ref(), stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// Linear in x and in w: each vjp is the adjoint of the forward map.
    #[test]
    fn conv_vjp_is_adjoint((xs, co, k, stride, pad, seed) in conv_case()) {
        let x = randn(xs, seed);
        let w = randn(Shape::new(co, xs.c, k, k), seed ^ 1);
        let p = ConvParams::new(w.clone(), None, stride, pad).unwrap();
        let dy = randn(conv2d(&x, &p).unwrap().shape(), seed ^ 3);
        let g = conv2d_vjp(&x, &p, &dy).unwrap();
        let lhs = conv2d(&x, &p).unwrap().dot(&dy).unwrap();
        prop_assert!((lhs - g.dx.dot(&x).unwrap()).abs() <= 1e-10 * lhs.abs().max(1.0));
        prop_assert!((lhs - g.dw.dot(&w).unwrap()).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn batchnorm_matches_two_pass_oracle(n in 1usize..4, c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        prop_assume!(n * h * w > 1);
        let x = randn(Shape::new(n, c, h, w), seed).map(|v| 3.0 * v + 1.0);
        let gamma = randn(Shape::vector(c), seed ^ 1);
        let beta = randn(Shape::vector(c), seed ^ 2);
        let p = BnParams { gamma: gamma.clone(), beta: beta.clone() };
        let (got, stats) = batchnorm(&x, &p, BnMode::Train).unwrap();
        let want = naive_batchnorm(&x, gamma.data(), beta.data());
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        prop_assert!(stats.var.iter().all(|&v| v >= 0.0));
        let (replayed, _) = batchnorm(&x, &p, BnMode::Replay(&stats)).unwrap();
        prop_assert_eq!(replayed, got);
    }

    #[test]
    fn batchnorm_vjp_matches_central_differences(n in 2usize..4, c in 1usize..3, hw in 1usize..3, seed in any::<u64>()) {
        let x = randn(Shape::new(n, c, hw, hw), seed);
        let p = BnParams { gamma: randn(Shape::vector(c), seed ^ 1), beta: randn(Shape::vector(c), seed ^ 2) };
        let dy = randn(x.shape(), seed ^ 3);
        let (_, stats) = batchnorm(&x, &p, BnMode::Train).unwrap();
        let g = batchnorm_vjp(&x, &p, &stats, &dy).unwrap();
        let loss = |t: &[Tensor<f64>], _: &mut Ctx| {
            let q = BnParams { gamma: t[1].clone(), beta: t[2].clone() };
            batchnorm(&t[0], &q, BnMode::Train)?.0.dot(&dy)
        };
        let mut target = FnTarget { params: vec![x, p.gamma.clone(), p.beta.clone()], f: loss };
        let r = grad_check(&mut target, &[g.dx, g.dgamma, g.dbeta], GradCheckConfig { max_coords: 1000, ..Default::default() }).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }

    #[test]
    fn pooling_vjps_are_adjoint(n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, extra in 0usize..3, seed in any::<u64>()) {
        let x = randn(Shape::new(n, c, 2 * h, 2 * w), seed);
        let dy = randn(Shape::new(n, c, h, w), seed ^ 1);
        let lhs = avg_pool2(&x).unwrap().dot(&dy).unwrap();
        prop_assert!((lhs - avg_pool2_vjp(x.shape(), &dy).unwrap().dot(&x).unwrap()).abs() < 1e-12);

        let dg = randn(Shape::new(n, c, 1, 1), seed ^ 2);
        let lhs = global_avg_pool(&x).dot(&dg).unwrap();
        prop_assert!((lhs - global_avg_pool_vjp(x.shape(), &dg).unwrap().dot(&x).unwrap()).abs() < 1e-12);

        let dp = randn(Shape::new(n, c + extra, 2 * h, 2 * w), seed ^ 3);
        let lhs = pad_channels(&x, c + extra).unwrap().dot(&dp).unwrap();
        prop_assert!((lhs - pad_channels_vjp(&dp, c).unwrap().dot(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(n in 1usize..5, k in 2usize..6, seed in any::<u64>()) {
        let logits = randn(Shape::new(n, k, 1, 1), seed).map(|v| 10.0 * v);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
        let (loss, g) = softmax_xent(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for row in g.data().chunks(k) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

#[test]
fn madd_tallies_match_loop_counts() {
    let p = ConvParams::new(randn(Shape::new(4, 3, 3, 3), 1), None, 2, 1).unwrap();
    let x = Shape::new(2, 3, 8, 8);
    let mut taps = 0u64;
    for i in 0..4 {
        for j in 0..4 {
            for a in 0..3 {
                for b in 0..3 {
                    let (r, c) = ((2 * i + a) as isize - 1, (2 * j + b) as isize - 1);
                    taps += u64::from((0..8).contains(&r) && (0..8).contains(&c));
                }
            }
        }
    }
    // padded taps cost nothing
    assert_eq!(conv2d_madds(x, &p).unwrap(), 2 * 4 * 3 * taps);
    assert_eq!(conv2d_vjp_madds(x, &p).unwrap(), 2 * conv2d_madds(x, &p).unwrap());
    assert_eq!(batchnorm_vjp_madds(x), 5 * 384);
    assert!(batchnorm_madds(x, true) > batchnorm_madds(x, false));
}

#[test]
fn relu_vjp_masks_by_input_sign() {
    let x = Tensor::from_f64_slice(Shape::vector(4), &[-1.0, 0.5, 0.0, 2.0]).unwrap();
    let dy = Tensor::full(Shape::vector(4), 3.0);
    assert_eq!(relu_vjp(&x, &dy).unwrap().data(), [0.0, 3.0, 0.0, 3.0]);
}
