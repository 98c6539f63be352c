use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, grad_check_multi, GradCheckOptions, DEFAULT_STEP};
use super::*;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// ---- conv2d --------------------------------------------------------------

#[test]
fn conv2d_constant_field() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, k, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_identity_kernel_same() {
    let xt = random(&[2, 3, 5, 4], 1);
    let mut kd = vec![0.0; 9];
    kd[0] = 1.0;
    kd[4] = 1.0;
    kd[8] = 1.0;
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let k = g.constant(t64(&[3, 3, 1, 1], &kd));
    let y = g.conv2d(x, k, Padding::Same).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv2d_is_cross_correlation() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let k = g.constant(t64(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let y = g.conv2d(x, k, Padding::Valid).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
    // An asymmetric kernel distinguishes correlation from convolution.
    let k2 = g.constant(t64(&[1, 1, 2, 2], &[1., 0., 0., 0.]));
    let y2 = g.conv2d(x, k2, Padding::Valid).unwrap();
    assert_eq!(g.value(y2).data(), &[1.0]);
}

#[test]
fn conv2d_same_pads_with_zeros() {
    // 3x3 all-ones kernel over a 3x3 ramp: hand-enumerated window sums.
    let mut g = Graph::new();
    let x = g.constant(t64(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, Padding::Same).unwrap();
    assert_eq!(g.value(y).data(), &[12., 21., 16., 27., 45., 33., 24., 39., 28.]);
}

#[test]
fn conv2d_rejects_channel_mismatch_and_even_same() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    match g.conv2d(x, k, Padding::Same) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![1, 2, 4, 4]);
            assert_eq!(right, vec![1, 3, 3, 3]);
        }
        other => panic!("expected a shape error, got {other:?}", other = other.map(|_| ())),
    }
    let k2 = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, k2, Padding::Same).is_err());
}

// ---- temporal conv -------------------------------------------------------

#[test]
fn temporal_conv_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[3, 1], &[1., 2., 3.]));
    let id = g.constant(t64(&[1, 1, 1], &[1.]));
    for pad in [Padding::Same, Padding::Valid] {
        let y = g.temporal_conv(x, id, pad).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3.]);
    }
    let box3 = g.constant(t64(&[1, 1, 3], &[1., 1., 1.]));
    let y = g.temporal_conv(x, box3, Padding::Same).unwrap();
    assert_eq!(g.value(y).data(), &[3., 6., 5.]);
}

#[test]
fn temporal_conv_constant_series() {
    let c = 1.5;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 10, 1, 2, 2], c));
    let k = g.constant(t64(&[1, 1, 3], &[0.5, -2.0, 4.0]));
    let y = g.temporal_conv(x, k, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|v| (v - c * 2.5).abs() < 1e-12));
}

#[test]
fn temporal_conv_too_long_kernel_in_valid_mode() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 1]));
    let k = g.constant(Tensor::zeros(&[1, 1, 3]));
    assert!(matches!(g.temporal_conv(x, k, Padding::Valid), Err(Error::Shape { .. })));
}

/// Brute-force reference for the temporal correlation on `[B, T, M, P]`.
fn temporal_conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, pad_left: usize, t_out: usize) -> Vec<f64> {
    let s = x.shape();
    let (b, t, m, p) = (s[0], s[1], s[2], s[3]);
    let (ko, len) = (k.shape()[0], k.shape()[2]);
    let mut out = vec![0.0; b * t_out * ko * p];
    for bi in 0..b {
        for to in 0..t_out {
            for kk in 0..ko {
                for pp in 0..p {
                    let mut acc = 0.0;
                    for mm in 0..m {
                        for l in 0..len {
                            let src = to as isize + l as isize - pad_left as isize;
                            if src >= 0 && (src as usize) < t {
                                acc += k.data()[(kk * m + mm) * len + l]
                                    * x.data()[((bi * t + src as usize) * m + mm) * p + pp];
                            }
                        }
                    }
                    out[((bi * t_out + to) * ko + kk) * p + pp] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn temporal_conv_matches_enumeration() {
    for (p, len) in [(1, 3), (1, 4), (6, 3), (6, 2)] {
        let x = random(&[2, 7, 3, p], 3);
        let k = random(&[4, 3, len], 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let same = g.temporal_conv(xv, kv, Padding::Same).unwrap();
        let valid = g.temporal_conv(xv, kv, Padding::Valid).unwrap();
        assert!(close(g.value(same).data(), &temporal_conv_oracle(&x, &k, (len - 1) / 2, 7), 1e-12));
        assert!(close(g.value(valid).data(), &temporal_conv_oracle(&x, &k, 0, 8 - len), 1e-12));
    }
}

// ---- pooling -------------------------------------------------------------

#[test]
fn max_pool2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.max_pool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let c = g.constant(Tensor::full(&[2, 4, 6], 7.0));
    let yc = g.max_pool2d(c).unwrap();
    assert_eq!(g.shape(yc), &[2, 2, 3]);
    assert!(g.value(yc).data().iter().all(|&v| v == 7.0));
}

#[test]
fn max_pool2d_tie_breaks_to_first_index() {
    let mut g = Graph::new();
    let x = g.param(t64(&[1, 2, 2], &[5., 5., 1., 0.]));
    let y = g.max_pool2d(x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1., 0., 0., 0.]);
}

#[test]
fn max_pool2d_odd_extent_keeps_partial_block() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let y = g.max_pool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[5., 6., 8., 9.]);
}

#[test]
fn max_pool3d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2, 1, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
    let y = g.max_pool3d(x).unwrap();
    assert_eq!(g.value(y).data(), &[8.0]);

    // Time-invariant input pools like a single frame.
    let frame = random(&[2, 4, 4], 11);
    let mut rep = frame.data().to_vec();
    rep.extend_from_slice(frame.data());
    let x3 = g.constant(t64(&[2, 2, 4, 4], &rep));
    let x2 = g.constant(frame);
    let y3 = g.max_pool3d(x3).unwrap();
    let y2 = g.max_pool2d(x2).unwrap();
    assert_eq!(g.value(y3).data(), g.value(y2).data());
}

#[test]
fn max_pool3d_matches_block_scan() {
    let x = random(&[4, 1, 4, 4], 5);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.max_pool3d(xv).unwrap();
    let mut expect = Vec::new();
    for bt in 0..2 {
        for bi in 0..2 {
            for bj in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for t in 2 * bt..2 * bt + 2 {
                    for i in 2 * bi..2 * bi + 2 {
                        for j in 2 * bj..2 * bj + 2 {
                            best = best.max(x.data()[(t * 4 + i) * 4 + j]);
                        }
                    }
                }
                expect.push(best);
            }
        }
    }
    assert_eq!(g.value(y).data(), expect.as_slice());
}

#[test]
fn max_pool_backward_hits_one_position_per_block() {
    let x = random(&[3, 2, 6, 6], 8);
    let mut g = Graph::new();
    let xv = g.param(x);
    let y = g.max_pool3d(xv).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let gx = grads.get(xv).unwrap();
    // 3 frames pool to 2 (ceil), so blocks = 2 * 2 * 3 * 3.
    let ones = gx.data().iter().filter(|&&v| v == 1.0).count();
    assert_eq!(ones, 2 * 2 * 3 * 3);
    assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), ones);
}

// ---- dense, activations, softmax -----------------------------------------

#[test]
fn affine_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2], &[1., 1.]));
    let w = g.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t64(&[2], &[0., 1.]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3., 8.]);

    let xi = g.constant(t64(&[3], &[0.3, -1., 2.]));
    let eye = g.constant(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let z = g.constant(Tensor::zeros(&[3]));
    let yi = g.linear(xi, eye, Some(z)).unwrap();
    assert_eq!(g.value(yi).data(), &[0.3, -1., 2.]);

    let zw = g.constant(Tensor::zeros(&[2, 3]));
    let yb = g.linear(xi, zw, Some(b)).unwrap();
    assert_eq!(g.value(yb).data(), &[0., 1.]);

    assert!(g.linear(x, zw, None).is_err());
}

#[test]
fn leaky_relu_slope() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[3], &[2., 0., -1.]));
    let y = g.leaky_relu(x, 0.3);
    assert_eq!(g.value(y).data(), &[2., 0., -0.3]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2], &[0., 0.]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax(x).unwrap();
    assert!(close(g.value(y).data(), &[1. / 6., 2. / 6., 3. / 6.], 1e-15));

    // Large logits stay finite thanks to max subtraction.
    let x = g.constant(t64(&[2], &[1000., 1000.]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        v in prop::collection::vec(-20.0f64..20.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let n = v.len();
        let mut g = Graph::new();
        let x = g.constant(t64(&[n], &v));
        let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
        let xs = g.constant(t64(&[n], &shifted));
        let y = g.softmax(x).unwrap();
        let ys = g.softmax(xs).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(g.value(y).data().iter().all(|&p| p > 0.0));
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)).unwrap() <= 1e-6);
    }

    #[test]
    fn convolutions_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let x1 = random(&[2, 2, 5, 5], seed);
        let x2 = random(&[2, 2, 5, 5], seed + 7);
        let k = random(&[3, 2, 3, 3], seed + 13);
        let kt = random(&[2, 2, 3], seed + 17);
        let mix: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect();
        let mut g = Graph::new();
        let (v1, v2) = (g.constant(x1.clone()), g.constant(x2.clone()));
        let vm = g.constant(t64(&[2, 2, 5, 5], &mix));
        let kv = g.constant(k);
        let ktv = g.constant(kt);
        for spatial in [true, false] {
            let f = |g: &mut Graph<f64>, v| if spatial {
                g.conv2d(v, kv, Padding::Same).unwrap()
            } else {
                // [B=1, T=2, M=2, P=25] viewed through the temporal op
                let r = g.reshape(v, &[1, 2, 2, 25]).unwrap();
                g.temporal_conv(r, ktv, Padding::Same).unwrap()
            };
            let (y1, y2, ym) = (f(&mut g, v1), f(&mut g, v2), f(&mut g, vm));
            let lin: Vec<f64> = g.value(y1).data().iter().zip(g.value(y2).data())
                .map(|(p, q)| a * p + b * q).collect();
            for (l, m) in lin.iter().zip(g.value(ym).data()) {
                prop_assert!((l - m).abs() <= 1e-6 * 1f64.max(l.abs()));
            }
        }
    }
}

// ---- backward ------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 1));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_square_and_accumulation() {
    let mut g = Graph::new();
    let x = g.param(t64(&[2], &[1., 2.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(t64(&[2], &[1., 2.]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn constants_never_receive_gradient() {
    let mut g = Graph::new();
    let x = g.param(t64(&[2], &[1., 2.]));
    let c = g.constant(t64(&[2], &[3., 4.]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    assert!(!g.requires_grad(c));
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3., 4.]);
}

#[test]
fn unreached_param_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(t64(&[2], &[1., 2.]));
    let unused = g.param(t64(&[3], &[1., 2., 3.]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn cross_entropy_clamps_log() {
    let mut g = Graph::new();
    let p = g.constant(t64(&[1, 2], &[1.0, 0.0]));
    let l = g.cross_entropy(p, &[1]).unwrap();
    assert!((g.value(l).item() - (-(1e-12f64).ln())).abs() < 1e-9);
    assert!(g.cross_entropy(p, &[2]).is_err());
}

// ---- finite differences ----------------------------------------------------

#[test]
fn grad_check_identity_and_leaky_relu() {
    let x = random(&[7], 2);
    let e = grad_check(|_, v| Ok(v), &x, DEFAULT_STEP).unwrap();
    assert!(e <= 1e-10, "identity {e}");

    // Keep every component well away from the kink at 0.
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let e = grad_check(|g, v| Ok(g.leaky_relu(v, 0.3)), &away, DEFAULT_STEP).unwrap();
    assert!(e <= 1e-7, "leaky relu {e}");
}

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> f64 {
    let r = grad_check_multi(f, inputs, &GradCheckOptions::default()).unwrap();
    assert!(r.checked > 0);
    r.max_rel_error
}

#[test]
fn every_op_matches_finite_differences() {
    let tol = 1e-4;
    let cases: Vec<(&str, f64)> = vec![
        ("conv2d same", check(|g, v| g.conv2d(v[0], v[1], Padding::Same), &[random(&[2, 2, 5, 4], 1), random(&[3, 2, 3, 3], 2)])),
        ("conv2d valid", check(|g, v| g.conv2d(v[0], v[1], Padding::Valid), &[random(&[1, 2, 5, 5], 3), random(&[2, 2, 3, 3], 4)])),
        ("temporal conv p>1", check(|g, v| g.temporal_conv(v[0], v[1], Padding::Same), &[random(&[2, 5, 3, 2, 2], 5), random(&[2, 3, 3], 6)])),
        ("temporal conv p=1", check(|g, v| g.temporal_conv(v[0], v[1], Padding::Valid), &[random(&[2, 6, 3], 7), random(&[4, 3, 2], 8)])),
        ("max_pool2d", check(|g, v| g.max_pool2d(v[0]), &[random(&[2, 5, 6], 9)])),
        ("max_pool3d", check(|g, v| g.max_pool3d(v[0]), &[random(&[3, 2, 4, 5], 10)])),
        ("temporal max", check(|g, v| g.temporal_pool(v[0], PoolMode::Max), &[random(&[2, 5, 3], 11)])),
        ("temporal mean", check(|g, v| g.temporal_pool(v[0], PoolMode::Mean), &[random(&[2, 5, 3], 12)])),
        ("affine", check(|g, v| g.linear(v[0], v[1], Some(v[2])), &[random(&[4, 3], 13), random(&[5, 3], 14), random(&[5], 15)])),
        ("leaky relu", check(|g, v| Ok(g.leaky_relu(v[0], 0.3)), &[random(&[20], 16)])),
        ("sigmoid", check(|g, v| Ok(g.sigmoid(v[0])), &[random(&[6], 17)])),
        ("tanh", check(|g, v| Ok(g.tanh(v[0])), &[random(&[6], 18)])),
        ("softmax", check(|g, v| g.softmax(v[0]), &[random(&[3, 4], 19)])),
        ("softmax+xent", check(|g, v| { let p = g.softmax(v[0])?; g.cross_entropy(p, &[0, 3, 1]) }, &[random(&[3, 4], 20)])),
        ("bias/channel mul", check(|g, v| { let a = g.bias_add(v[0], v[1], 1)?; g.channel_mul(a, v[2], 1) }, &[random(&[2, 3, 4], 21), random(&[3], 22), random(&[3], 23)])),
        ("time select/stack/slice", check(|g, v| {
            let a = g.select_time(v[0], 2)?;
            let b = g.select_time(v[0], 0)?;
            let s = g.stack_time(&[a, b, a])?;
            g.slice_last(s, 1, 2)
        }, &[random(&[2, 3, 4], 24)])),
        ("add/sub/mul/scale/mean", check(|g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.scale(c, 0.7);
            Ok(g.mean(d))
        }, &[random(&[5], 25), random(&[5], 26)])),
    ];
    for (name, err) in cases {
        assert!(err <= tol, "{name}: max rel error {err}");
    }
}

#[test]
fn injected_fault_is_detected() {
    let x = t64(&[4], &[-0.5, -0.7, 0.4, -0.2]);
    let opts = GradCheckOptions { inject_fault: true, ..Default::default() };
    let r = grad_check_multi(|g, v| Ok(g.leaky_relu(v[0], 0.3)), &[x], &opts).unwrap();
    assert!(r.max_rel_error > 0.1);
}

#[test]
fn repeated_forward_backward_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[2, 2, 6, 6], 3));
        let k = g.param(random(&[3, 2, 3, 3], 4));
        let y = g.conv2d(x, k, Padding::Same).unwrap();
        let y = g.leaky_relu(y, 0.3);
        let y = g.max_pool2d(y).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        (grads.get(x).unwrap().clone(), grads.get(k).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}
